//! Content-addressed payload store laid out as `store/<first2>/<hash>`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::digest::Digest;

/// Overrides the store root directory.
pub const STORE_ENV: &str = "PROVWF_STORE";

#[derive(Clone, Debug)]
pub struct ContentStore {
    root: PathBuf,
}

impl ContentStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ContentStore { root: root.into() }
    }

    /// `$PROVWF_STORE` if set, else `<workspace>/store`.
    pub fn for_workspace(workspace: &Path) -> Self {
        match std::env::var_os(STORE_ENV) {
            Some(p) if !p.is_empty() => ContentStore::new(p),
            _ => ContentStore::new(workspace.join("store")),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registry-facing path of a payload, independent of where the store
    /// actually lives.
    pub fn logical_path(hash: &Digest) -> String {
        let h = hash.as_str();
        format!("store/{}/{}", &h[..2], h)
    }

    pub fn path_of(&self, hash: &Digest) -> PathBuf {
        let h = hash.as_str();
        self.root.join(&h[..2]).join(h)
    }

    /// Resolves a `store/..` logical path.
    pub fn resolve(&self, logical: &str) -> Option<PathBuf> {
        let rest = logical.strip_prefix("store/")?;
        let (_, hash) = rest.split_once('/')?;
        Digest::parse(hash).map(|d| self.path_of(&d))
    }

    pub fn contains(&self, hash: &Digest) -> bool {
        self.path_of(hash).is_file()
    }

    pub fn put_bytes(&self, bytes: &[u8]) -> io::Result<(Digest, String)> {
        let hash = Digest::of(bytes);
        let dest = self.path_of(&hash);
        if !dest.is_file() {
            write_atomic(&dest, bytes)?;
        }
        Ok((hash.clone(), Self::logical_path(&hash)))
    }

    /// Moves `src` into the store (copying when a rename is not possible).
    pub fn put_file(&self, src: &Path) -> io::Result<(Digest, String)> {
        let hash = Digest::of_file(src)?;
        let dest = self.path_of(&hash);
        if !dest.is_file() {
            if let Some(dir) = dest.parent() {
                fs::create_dir_all(dir)?;
            }
            let tmp = dest.with_extension(format!("tmp{}", std::process::id()));
            if fs::rename(src, &tmp).is_err() {
                fs::copy(src, &tmp)?;
            }
            fs::rename(&tmp, &dest)?;
        }
        Ok((hash.clone(), Self::logical_path(&hash)))
    }
}

pub(crate) fn write_atomic(dest: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = dest.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = dest.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dest.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dest)
}
