//! PWIM v1: `"PWIM"`, version byte, height (u16 LE), width (u32 LE), four
//! zero bytes, then `height·width` u32 LE cells in row-major order.

use std::path::Path;

use spotlight_core::pathway::PathwayImage;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PWIM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;

/// Size in bytes of an encoded `height × width` image.
pub fn encoded_len(height: usize, width: usize) -> usize {
    HEADER_LEN + height * width * 4
}

pub fn encode(image: &PathwayImage) -> Result<Vec<u8>> {
    let height = u16::try_from(image.height())
        .map_err(|_| Error::Format(format!("height {} does not fit in 16 bits", image.height())))?;
    let width = u32::try_from(image.width())
        .map_err(|_| Error::Format(format!("width {} does not fit in 32 bits", image.width())))?;
    let mut out = Vec::with_capacity(encoded_len(image.height(), image.width()));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for &cell in image.cells() {
        out.extend_from_slice(&cell.to_le_bytes());
    }
    Ok(out)
}

/// Decodes an image; the patient id is not part of the format and is taken
/// from the caller.
pub fn decode(bytes: &[u8], patient_id: &str) -> Result<PathwayImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "PWIM header truncated: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"PWIM\"",
            &bytes[..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported PWIM version {}",
            bytes[4]
        )));
    }
    let height = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let width = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]) as usize;
    if bytes[11..15] != [0; 4] {
        return Err(Error::Format("reserved PWIM bytes are not zero".into()));
    }
    let expected = encoded_len(height, width);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "PWIM payload for {height}×{width} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let cells = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(PathwayImage::new(patient_id, height, width, cells)?)
}

pub fn write(path: &Path, image: &PathwayImage) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

/// Reads an image, using the file stem as patient id.
pub fn read(path: &Path) -> Result<PathwayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&bytes, &id)
}
