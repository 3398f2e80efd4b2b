//! Output files are written under a temporary name and renamed into place
//! only after the write succeeded.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;

fn temp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Let `f` produce the file at a temporary path, then move it to `path`.
/// The temporary file is removed if `f` fails.
pub fn atomic_path<F: FnOnce(&Path) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    let tmp = temp_name(path);
    match f(&tmp) {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Stream into a buffered writer and commit atomically.
pub fn atomic_write<F: FnOnce(&mut dyn Write) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    atomic_path(path, |tmp| {
        let file = fs::File::create(tmp)?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let r = atomic_write(&path, |w| {
            writeln!(w, "partial")?;
            Err(Error::Argument("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        atomic_write(&path, |w| Ok(writeln!(w, "ok")?)).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "ok\n");
    }
}
