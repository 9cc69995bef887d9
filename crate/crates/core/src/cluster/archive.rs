//! Tar handling for files copied out of containers.
//!
//! Directories travel as a deterministic tar stream: regular files only,
//! sorted by path, with zeroed timestamps and ownership, paths relative to the
//! requested directory. Equal directory contents always give equal bytes.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};

/// A file or directory read out of a container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    File(Vec<u8>),
    /// Files keyed by path relative to the directory, `/`-separated.
    Dir(BTreeMap<String, Vec<u8>>),
}

impl Tree {
    /// Wire form returned by `read_container_file`.
    pub fn into_bytes(self) -> Vec<u8> {
        match self {
            Tree::File(bytes) => bytes,
            Tree::Dir(files) => pack(&files),
        }
    }
}

pub fn pack(files: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (path, data) in files {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder
            .append_data(&mut header, path, data.as_slice())
            .expect("writing to a Vec cannot fail");
    }
    builder.into_inner().expect("writing to a Vec cannot fail")
}

/// Reads every regular file of an archive into memory.
pub fn unpack_in_memory(archive: &[u8]) -> io::Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut ar = tar::Archive::new(archive);
    for entry in ar.entries()? {
        let mut entry = entry?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            continue;
        }
        let path = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data)?;
        files.insert(path, data);
    }
    Ok(files)
}

/// Writes the files of an archive below `dest`, returning their paths
/// relative to `dest` in archive order. Entries escaping `dest` are refused.
pub fn unpack_to_dir(archive: &[u8], dest: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dest)?;
    let mut written = Vec::new();
    for (name, data) in unpack_in_memory(archive)? {
        let rel = safe_relative(&name).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("unsafe archive path {name:?}"))
        })?;
        let target = dest.join(&rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&target, data)?;
        written.push(rel);
    }
    Ok(written)
}

fn safe_relative(name: &str) -> Option<PathBuf> {
    let path = Path::new(name);
    let mut out = PathBuf::new();
    for component in path.components() {
        match component {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

/// Archive in the shape `tar cf - <path>` prints: the leading `/` removed and
/// a directory entry ahead of the files.
pub fn pack_like_tar_cli(path: &str, tree: &Tree) -> Vec<u8> {
    let prefix = path.trim_start_matches('/').trim_end_matches('/');
    let mut builder = tar::Builder::new(Vec::new());
    let mut append = |name: &str, data: &[u8], kind: tar::EntryType| {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(if kind == tar::EntryType::Directory { 0o755 } else { 0o644 });
        header.set_mtime(1_700_000_000);
        header.set_entry_type(kind);
        builder
            .append_data(&mut header, name, data)
            .expect("writing to a Vec cannot fail");
    };
    match tree {
        Tree::File(data) => append(prefix, data, tar::EntryType::Regular),
        Tree::Dir(files) => {
            append(&format!("{prefix}/"), &[], tar::EntryType::Directory);
            for (rel, data) in files {
                append(&format!("{prefix}/{rel}"), data, tar::EntryType::Regular);
            }
        }
    }
    builder.into_inner().expect("writing to a Vec cannot fail")
}

/// Interprets the output of `tar cf - <path>` run inside a container.
pub fn tree_from_tar_cli(path: &str, raw: &[u8]) -> io::Result<Tree> {
    let prefix = path.trim_start_matches('/').trim_end_matches('/');
    let mut files = BTreeMap::new();
    let mut ar = tar::Archive::new(raw);
    for entry in ar.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let name = name.trim_end_matches('/');
        let kind = entry.header().entry_type();
        if name == prefix && kind == tar::EntryType::Regular {
            let mut data = Vec::new();
            entry.read_to_end(&mut data)?;
            return Ok(Tree::File(data));
        }
        if kind != tar::EntryType::Regular {
            continue;
        }
        let rel = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('/'))
            .ok_or_else(|| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("archive entry {name:?} outside {path:?}"),
                )
            })?;
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        files.insert(rel.to_owned(), data);
    }
    Ok(Tree::Dir(files))
}
