//! All-or-nothing output: every file is staged next to its destination and
//! renamed into place only once all of them were written.

use std::io::Write;
use std::path::{Path, PathBuf};

use edffd_core::image::ImageBuffer;
use tempfile::NamedTempFile;

use crate::CliError;

pub enum Payload {
    Image(ImageBuffer),
    Bytes(Vec<u8>),
}

#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn add(&mut self, dest: impl AsRef<Path>, payload: Payload) -> Result<(), CliError> {
        let dest = dest.as_ref();
        let dir = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dest.display()));
        // keep the extension so the image encoder picks the right format
        let suffix = dest
            .extension()
            .map(|e| format!(".{}", e.to_string_lossy()))
            .unwrap_or_default();
        let mut tmp = tempfile::Builder::new()
            .prefix(".edffd-")
            .suffix(&suffix)
            .tempfile_in(&dir)
            .map_err(io)?;
        match payload {
            Payload::Image(img) => img.save(tmp.path()).map_err(|e| CliError::Io(e.to_string()))?,
            Payload::Bytes(b) => {
                tmp.write_all(&b).map_err(io)?;
                tmp.flush().map_err(io)?;
            }
        }
        self.files.push((tmp, dest.to_path_buf()));
        Ok(())
    }

    pub fn commit(self) -> Result<(), CliError> {
        for (tmp, dest) in self.files {
            tmp.persist(&dest)
                .map_err(|e| CliError::Io(format!("{}: {}", dest.display(), e.error)))?;
        }
        Ok(())
    }
}
