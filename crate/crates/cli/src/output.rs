//! Atomic report writing and run metadata.
//!
//! Reports are written to a temporary name in the target directory and
//! renamed into place, so a crash never leaves a partial file under its final
//! name.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {source}", path.display()))
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".privfilter-tmp")
        .tempfile_in(dir)
        .map_err(|e| io_error(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.flush().map_err(|e| io_error(path, e))?;
    tmp.persist(path)
        .map_err(|e| io_error(path, e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// The resolved configuration of one run, echoed to `run_meta.json`.
#[derive(Serialize)]
struct RunMeta<'a, T: Serialize> {
    command: &'a str,
    tool_version: &'a str,
    args: &'a T,
}

pub fn write_run_meta<T: Serialize>(out_dir: &Path, command: &str, args: &T) -> Result<PathBuf, CliError> {
    let path = out_dir.join("run_meta.json");
    write_json_atomic(
        &path,
        &RunMeta {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            args,
        },
    )?;
    Ok(path)
}

/// Build a CSV byte buffer from a header and stringified rows.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header).expect("vec writer");
    for row in rows {
        writer.write_record(row).expect("vec writer");
    }
    writer.into_inner().expect("vec writer")
}
