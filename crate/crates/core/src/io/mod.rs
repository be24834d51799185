//! On-disk formats: sparse maps, fixes, trajectories, poses, correspondences,
//! PLY meshes, hyperspectral clouds, ENVI cubes and ortho rasters.
//!
//! Text formats are whitespace separated with `#` comment lines. Binary data
//! is little-endian. Every reader has an in-memory variant taking bytes.

mod bundle;
mod cloud;
mod envi;
mod ply;
mod text;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cube::CubeError;

pub use bundle::{parse_manifest, read_bundle, write_bundle, SurveyBundle, SurveyManifest};
pub use cloud::{cloud_to_ply, decode_cloud, encode_cloud, read_cloud, rgb_proxy_bands, write_cloud, write_cloud_ply};
pub use envi::{
    decode_hypercube, decode_ortho, encode_hypercube, encode_ortho, read_hypercube, read_ortho, write_hypercube, write_ortho, OrthoFiles,
    CubeFiles,
};
pub use ply::{decode_ply, encode_ply, read_mesh, write_mesh, PlyEncoding};
pub use text::{
    format_f64, parse_correspondences, parse_fixes, parse_pose, parse_sparse_map, parse_trajectory, read_correspondences, read_fixes, read_pose,
    read_sparse_map, read_trajectory, render_correspondences, render_fixes, render_pose, render_sparse_map, render_trajectory,
    write_correspondences, write_fixes, write_pose, write_sparse_map, write_trajectory,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("ParseError: line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("ParseError: byte {offset}: {msg}")]
    Binary { offset: usize, msg: String },
    #[error("DanglingReference: line {line}: {msg}")]
    DanglingReference { line: usize, msg: String },
    #[error("EmptyInput: {0}")]
    EmptyInput(&'static str),
    #[error("Unsupported: {0}")]
    Unsupported(String),
    #[error("InvalidData: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cube(#[from] CubeError),
}

impl IoError {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse { line, msg: msg.into() }
    }

    pub(crate) fn binary(offset: usize, msg: impl Into<String>) -> Self {
        IoError::Binary { offset, msg: msg.into() }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a UTF-8 text file.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_file(path, text.as_bytes())
}

/// Little-endian cursor over a byte slice that reports offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if n > self.remaining() {
            return Err(IoError::binary(
                self.pos,
                format!("need {n} bytes, {} remain", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub(crate) fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
