//! Output directories that appear all at once or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    done: bool,
}

impl Staging {
    pub fn new(dest: &Path, force: bool) -> Result<Self, Failure> {
        if dest.exists() && !force {
            return Err(Failure::Usage(format!(
                "output directory {} already exists; pass --force to replace it",
                dest.display()
            )));
        }
        let name = dest
            .file_name()
            .ok_or_else(|| Failure::Usage(format!("invalid output path {}", dest.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = dest.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Failure::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Failure::io(&tmp, e))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            done: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    pub fn write(&self, file: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.path(file);
        fs::write(&p, bytes).map_err(|e| Failure::io(&p, e))
    }

    pub fn commit(mut self) -> Result<(), Failure> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| Failure::io(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| Failure::io(&self.dest, e))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}
