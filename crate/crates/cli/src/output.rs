use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use scos_core::HemoSignals;

use crate::error::CliError;

/// Output directory whose files appear only once fully written.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Streams into a temporary file in the same directory, then renames it
    /// over `name`.
    pub fn write_with(
        &self,
        name: &str,
        fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let dest = self.path(name);
        let mut builder = tempfile::Builder::new();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            builder.permissions(fs::Permissions::from_mode(0o644));
        }
        let tmp = builder
            .tempfile_in(&self.root)
            .map_err(|e| CliError::io(&self.root, e))?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            fill(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| CliError::io(&dest, e))?;
        }
        tmp.persist(&dest).map_err(|e| CliError::io(&dest, e.error))?;
        Ok(dest)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        self.write_with(name, |w| w.write_all(bytes))
    }

    pub fn write_json<T: serde::Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// `t,cbf,cbv,cbf_hp,cbv_hp`, one row per sample.
pub fn hemo_csv(times: &[f64], h: &HemoSignals) -> String {
    let mut out = String::from("t,cbf,cbv,cbf_hp,cbv_hp\n");
    for (j, t) in times.iter().enumerate() {
        let _ = writeln!(out, "{t},{},{},{},{}", h.cbf[j], h.cbv[j], h.cbf_hp[j], h.cbv_hp[j]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(&dir.path().join("nested/run")).unwrap();
        out.write("a.txt", b"one").unwrap();
        out.write("a.txt", b"two").unwrap();
        assert_eq!(fs::read(out.path("a.txt")).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(out.path(""))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.txt")]);
    }

    #[test]
    fn failed_fill_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        let err = out
            .write_with("b.txt", |_| Err(std::io::Error::other("boom")))
            .unwrap_err();
        assert_eq!(err.kind, "io");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
