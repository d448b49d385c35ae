//! The `evtxt` plain-text event format.
//!
//! Header: `# evtxt v1 W H` followed by one `t x y p` line per event.
//! Version 2 appends a fifth column `s` (signal) or `n` (noise) to every
//! line. Writers emit events in canonical stream order, so
//! write -> parse -> write is byte-identical.

use std::path::Path;

use super::{Event, EventError, EventStream, Label, Result};

/// Parses an `evtxt` document. Errors carry 1-based line numbers.
pub fn parse_evtxt(text: &str) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| EventError::Parse {
        line: 1,
        what: "missing header".to_string(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let (version, width, height) = match head.as_slice() {
        ["#", "evtxt", v @ ("v1" | "v2"), w, h] => {
            let width: usize = w.parse().map_err(|_| EventError::Parse {
                line: 1,
                what: format!("bad width {w:?}"),
            })?;
            let height: usize = h.parse().map_err(|_| EventError::Parse {
                line: 1,
                what: format!("bad height {h:?}"),
            })?;
            (*v, width, height)
        }
        _ => {
            return Err(EventError::Parse {
                line: 1,
                what: format!("bad header {header:?}"),
            })
        }
    };
    let labeled = version == "v2";
    let mut events = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let want = if labeled { 5 } else { 4 };
        if fields.len() != want {
            return Err(EventError::Parse {
                line: lineno,
                what: format!("expected {want} fields, got {}", fields.len()),
            });
        }
        let t: u64 = fields[0].parse().map_err(|_| EventError::Parse {
            line: lineno,
            what: format!("bad timestamp {:?}", fields[0]),
        })?;
        let x: u16 = fields[1].parse().map_err(|_| EventError::Parse {
            line: lineno,
            what: format!("bad x {:?}", fields[1]),
        })?;
        let y: u16 = fields[2].parse().map_err(|_| EventError::Parse {
            line: lineno,
            what: format!("bad y {:?}", fields[2]),
        })?;
        let polarity: i8 = match fields[3] {
            "1" => 1,
            "-1" => -1,
            other => {
                return Err(EventError::Parse {
                    line: lineno,
                    what: format!("bad polarity {other:?}"),
                })
            }
        };
        if (x as usize) >= width || (y as usize) >= height {
            return Err(EventError::Parse {
                line: lineno,
                what: format!("coordinates ({x},{y}) outside {width}x{height}"),
            });
        }
        let label = if labeled {
            match fields[4] {
                "s" => Some(Label::Signal),
                "n" => Some(Label::Noise),
                other => {
                    return Err(EventError::Parse {
                        line: lineno,
                        what: format!("bad label {other:?}"),
                    })
                }
            }
        } else {
            None
        };
        events.push(Event {
            t,
            x,
            y,
            polarity,
            label,
        });
    }
    EventStream::new(width, height, events)
}

/// Serialises a stream: v1 when no event is labeled, v2 when all are.
/// Partially labeled streams are rejected rather than silently dropping
/// labels.
pub fn write_evtxt(stream: &EventStream) -> Result<String> {
    let labeled = if stream.fully_labeled() && !stream.is_empty() {
        true
    } else if stream.unlabeled() {
        false
    } else {
        return Err(EventError::MixedLabels);
    };
    let version = if labeled { "v2" } else { "v1" };
    let mut out = format!(
        "# evtxt {version} {} {}\n",
        stream.width(),
        stream.height()
    );
    for e in stream.events() {
        out.push_str(&format!("{} {} {} {}", e.t, e.x, e.y, e.polarity));
        if labeled {
            out.push_str(match e.label {
                Some(Label::Signal) => " s",
                Some(Label::Noise) => " n",
                None => unreachable!("checked above"),
            });
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let text = std::fs::read_to_string(path)?;
    parse_evtxt(&text)
}

pub fn save_events(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_evtxt(stream)?)?;
    Ok(())
}
