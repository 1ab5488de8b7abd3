//! Output-directory guards and checksums printed after every command.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sotsep::Error;

use crate::error::{CliError, CliResult};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Create `dir`, refusing a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.is_file() {
        return Err(CliError::Refused(format!("{} (a file)", dir.display())));
    }
    if dir.is_dir() && !force && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some() {
        return Err(CliError::Refused(dir.display().to_string()));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

/// Digest over (relative path, file digest) of the given files, in order.
pub fn combined_sha256(root: &Path, files: &[PathBuf]) -> CliResult<String> {
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(file_sha256(f)?.as_bytes());
        h.update(*b"\n");
    }
    Ok(hex(&h.finalize()))
}

/// Print one `sha256` line per output and a combined checksum.
pub fn report_outputs(files: &[PathBuf]) -> CliResult<()> {
    for f in files {
        println!("sha256 {}  {}", file_sha256(f)?, f.display());
    }
    println!("checksum {}", combined_sha256(Path::new(""), files)?);
    Ok(())
}
