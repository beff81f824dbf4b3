//! Input-file reads, optionally logged for isolation checks.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use compflow::{Error, Result};

static LOG: Mutex<Option<PathBuf>> = Mutex::new(None);

pub fn init(path: Option<PathBuf>) {
    *LOG.lock().expect("audit lock") = path;
}

/// Reads `path`, recording it in the audit log if one is configured.
pub fn read(path: &Path, hint: &str) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        });
    }
    let log = LOG.lock().expect("audit lock");
    if let Some(log_path) = log.as_ref() {
        let shown = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        let mut f = OpenOptions::new().create(true).append(true).open(log_path)?;
        writeln!(f, "{}", shown.display())?;
    }
    drop(log);
    Ok(fs::read(path)?)
}

pub fn read_string(path: &Path, hint: &str) -> Result<String> {
    String::from_utf8(read(path, hint)?).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        message: "file is not valid UTF-8".into(),
    })
}
