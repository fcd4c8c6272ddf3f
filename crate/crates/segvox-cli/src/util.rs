use std::path::Path;

use crate::errors::AppError;

/// Write a file atomically: contents go to a temp sibling which is
/// renamed into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), AppError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .ok_or_else(|| AppError::usage(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp.{}", stem.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| {
        AppError::Data(format!("writing {}: {e}", tmp.display()))
    })?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        AppError::Data(format!("renaming into {}: {e}", path.display()))
    })?;
    Ok(())
}

/// Audio identifier for a file path: the file stem.
pub fn audio_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        std::fs::write(&p, b"old").unwrap();
        write_atomic(&p, b"new").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"new");
        // no temp leftovers
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn audio_id_is_stem() {
        assert_eq!(audio_id(Path::new("/a/b/talk_01.wav")), "talk_01");
    }
}
