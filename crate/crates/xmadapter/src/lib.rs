//! Bundle and checkpoint formats, parallel sweeps and the `xmadapter`
//! command-line tool, built on `xmadapter-core`.

pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod sweep;
pub mod table;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use error::{Error, Result};
pub use xmadapter_core as core;

/// Writes `bytes` to a temporary file next to `path`, syncs it and renames
/// it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
