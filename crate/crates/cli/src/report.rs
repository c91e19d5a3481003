use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;

use crate::commands::CliError;

/// Writes `records` as JSON lines to a new `{kind}-{UTC time}.jsonl` in
/// `dir`. Existing files are never touched; a clash gets a numeric suffix.
pub fn write_new<R: Serialize>(dir: &Path, kind: &str, records: &[R]) -> Result<PathBuf, CliError> {
    let stamp = humantime::format_rfc3339_millis(SystemTime::now()).to_string().replace(':', "");
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("report serializes"));
        body.push('\n');
    }
    for n in 0.. {
        let name = if n == 0 { format!("{kind}-{stamp}.jsonl") } else { format!("{kind}-{stamp}-{n}.jsonl") };
        let path = dir.join(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                f.write_all(body.as_bytes()).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                return Ok(path);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::usage(format!("{}: {e}", path.display()))),
        }
    }
    unreachable!("unbounded suffix search")
}
