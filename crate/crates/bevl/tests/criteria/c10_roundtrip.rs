pub fn run() -> Result<String, String> {
    Err("not implemented".to_string())
}
