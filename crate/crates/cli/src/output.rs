//! Output directory with atomic per-file writes and rollback on failure.

use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct OutDir {
    root: PathBuf,
    created_root: bool,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        let meta = fs::metadata(root)?;
        if !meta.is_dir() {
            bail!("output path {} is not a directory", root.display());
        }
        Ok(Self {
            root: root.to_path_buf(),
            created_root,
            written: Vec::new(),
        })
    }

    /// Writes `bytes` to `rel` via a temporary sibling and a rename.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
        let rel = rel.as_ref();
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            bail!("refusing to write outside the output directory: {}", rel.display());
        }
        let path = self.root.join(rel);
        let parent = path.parent().expect("joined path has a parent");
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create directory {}", parent.display()))?;
        let name = path.file_name().expect("file name").to_string_lossy();
        let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
        fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
        if let Err(e) = fs::rename(&tmp, &path) {
            let _ = fs::remove_file(&tmp);
            return Err(e).with_context(|| format!("cannot write {}", path.display()));
        }
        self.written.push(path);
        Ok(())
    }

    /// Removes everything written by this run.
    pub fn discard(self) {
        if self.created_root {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for p in self.written.iter().rev() {
            let _ = fs::remove_file(p);
            let mut dir = p.parent();
            while let Some(d) = dir {
                if d == self.root || fs::remove_dir(d).is_err() {
                    break;
                }
                dir = d.parent();
            }
        }
    }
}

/// Path component safe on common filesystems; other characters become `_`.
pub fn path_component(s: &str) -> String {
    let c: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    match c.as_str() {
        "" | "." | ".." => format!("_{c}"),
        _ => c,
    }
}

pub fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> rdsig_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}
