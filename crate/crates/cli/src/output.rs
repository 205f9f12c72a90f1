use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Files and directories created by one command. Everything is removed again
/// on drop unless [`Outputs::commit`] was called; directories created here are
/// removed with their contents.
#[derive(Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` and any missing ancestors, remembering the new ones.
    pub fn dir(&mut self, dir: &Path) -> io::Result<()> {
        let missing: Vec<PathBuf> = dir.ancestors().take_while(|p| !p.as_os_str().is_empty() && !p.exists()).map(Path::to_path_buf).collect();
        fs::create_dir_all(dir)?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    /// Records `path` before anything is written to it.
    pub fn track(&mut self, path: &Path) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        self.files.push(path.to_path_buf());
        Ok(())
    }

    pub fn create(&mut self, path: &Path) -> io::Result<BufWriter<File>> {
        self.track(path)?;
        File::create(path).map(BufWriter::new)
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let mut w = self.create(path)?;
        w.write_all(bytes)?;
        w.flush()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}
