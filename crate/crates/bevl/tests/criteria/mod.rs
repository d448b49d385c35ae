//! One module per acceptance criterion. Each exposes
//! `run() -> Result<String, String>`: `Ok` carries a short measurement
//! summary, `Err` the reason for failure.

pub mod c01_autodiff;
pub mod c02_hvp;
pub mod c03_hypergrad;
pub mod c04_denoise_oracle;
pub mod c05_simulator;
pub mod c06_filter_gain;
pub mod c07_bilevel_vs_joint;
pub mod c08_losses;
pub mod c09_attention;
pub mod c10_roundtrip;

/// Fails with a uniform message when a measured value misses its bound.
pub fn require(cond: bool, detail: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail)
    }
}
