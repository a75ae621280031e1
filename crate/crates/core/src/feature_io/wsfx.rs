//! WSFX: little-endian dense `f32` feature-map files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "WSFX"
//!      4     2  version (u16) = 1
//!      6     1  dtype (u8)    = 0, f32 little-endian
//!      7     1  reserved      = 0
//!      8     4  height   (u32)
//!     12     4  width    (u32)
//!     16     4  channels (u32)
//!     20     .  height*width*channels f32 values, (h, w, c) order
//! ```
//!
//! Multi-layer files are plain concatenations of such records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

pub const WSFX_MAGIC: [u8; 4] = *b"WSFX";
pub const WSFX_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
const DTYPE_F32_LE: u8 = 0;

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_feature_layers(std::slice::from_ref(map), path)
}

pub fn write_feature_layers(layers: &[FeatureMap], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for map in layers {
        encode(map, &mut out).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn encode(map: &FeatureMap, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(&WSFX_MAGIC)?;
    out.write_all(&WSFX_VERSION.to_le_bytes())?;
    out.write_all(&[DTYPE_F32_LE, 0])?;
    for dim in [map.height(), map.width(), map.channels()] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in map.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a file holding exactly one feature map.
pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (map, used) = decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            trailing: (bytes.len() - used) as u64,
        });
    }
    Ok(map)
}

/// Reads every feature map stored back to back in `path`.
pub fn read_feature_layers(path: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut layers = Vec::new();
    let mut offset = 0;
    loop {
        let (map, used) = decode(&bytes[offset..], path)?;
        layers.push(map);
        offset += used;
        if offset == bytes.len() {
            return Ok(layers);
        }
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<(FeatureMap, usize)> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != WSFX_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: WSFX_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WSFX_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    if bytes[6] != DTYPE_F32_LE {
        return Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            dtype: bytes[6],
        });
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (height, width, channels) = (dim(8), dim(12), dim(16));
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Config(format!("{}: header dims overflow", path.display())))?;
    let total = HEADER_LEN + count * 4;
    if bytes.len() < total {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: (count * 4) as u64,
            actual: (bytes.len() - HEADER_LEN) as u64,
        });
    }
    let data = bytes[HEADER_LEN..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let map = FeatureMap::new(height, width, channels, data)?;
    Ok((map, total))
}
