//! Single-volume file format. 20-byte header: magic "DGVOL\0", dtype code
//! as little-endian u16 (0 = u8, 1 = f32), then D, H, W as little-endian
//! u32. Payload is row-major with little-endian values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 6] = b"DGVOL\0";
pub const HEADER_LEN: usize = 20;

const DTYPE_U8: u16 = 0;
const DTYPE_F32: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u16 {
        match self {
            VolumeData::U8(_) => DTYPE_U8,
            VolumeData::F32(_) => DTYPE_F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: VolumeData,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        what: "volume file",
        message: format!("{}: {}", path.display(), message.into()),
    }
}

pub fn encode_volume(dims: [usize; 3], data: &VolumeData) -> Result<Vec<u8>> {
    let voxels = dims[0] * dims[1] * dims[2];
    if data.len() != voxels {
        return Err(Error::ShapeMismatch {
            op: "encode_volume",
            lhs: vec![data.len()],
            rhs: dims.to_vec(),
        });
    }
    let elem = match data {
        VolumeData::U8(_) => 1,
        VolumeData::F32(_) => 4,
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + voxels * elem);
    bytes.extend_from_slice(VOLUME_MAGIC);
    bytes.extend_from_slice(&data.dtype_code().to_le_bytes());
    for &d in &dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match data {
        VolumeData::U8(v) => bytes.extend_from_slice(v),
        VolumeData::F32(v) => {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn write_volume(path: &Path, dims: [usize; 3], data: &VolumeData) -> Result<()> {
    let bytes = encode_volume(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..6] != VOLUME_MAGIC {
        return Err(bad(path, "missing DGVOL magic"));
    }
    let dtype = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
    let mut dims = [0usize; 3];
    for (i, chunk) in bytes[8..20].chunks_exact(4).enumerate() {
        dims[i] = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
    }
    let voxels = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| bad(path, format!("dims {dims:?} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    let data = match dtype {
        DTYPE_U8 => {
            if payload.len() != voxels {
                return Err(bad(
                    path,
                    format!("payload {} bytes, dims {dims:?} need {voxels}", payload.len()),
                ));
            }
            VolumeData::U8(payload.to_vec())
        }
        DTYPE_F32 => {
            if payload.len() != voxels * 4 {
                return Err(bad(
                    path,
                    format!(
                        "payload {} bytes, dims {dims:?} need {}",
                        payload.len(),
                        voxels * 4
                    ),
                ));
            }
            VolumeData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(bad(path, format!("unknown dtype code {other}"))),
    };
    Ok(Volume { dims, data })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_volume(path, &bytes)
}

pub fn read_u8_volume(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    match read_volume(path)? {
        Volume {
            dims,
            data: VolumeData::U8(v),
        } => Ok((dims, v)),
        _ => Err(bad(path, "expected a u8 volume")),
    }
}

pub fn read_f32_volume(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    match read_volume(path)? {
        Volume {
            dims,
            data: VolumeData::F32(v),
        } => Ok((dims, v)),
        _ => Err(bad(path, "expected an f32 volume")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_and_f32_volumes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [2, 3, 4];
        let mask: Vec<u8> = (0..24).map(|i| (i % 2) as u8).collect();
        let path = dir.path().join("mask.bin");
        write_volume(&path, dims, &VolumeData::U8(mask.clone())).unwrap();
        assert_eq!(read_u8_volume(&path).unwrap(), (dims, mask));

        let image: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 3.0).collect();
        let path = dir.path().join("image.bin");
        write_volume(&path, dims, &VolumeData::F32(image.clone())).unwrap();
        assert_eq!(read_f32_volume(&path).unwrap(), (dims, image));
    }

    #[test]
    fn header_carries_the_dims() {
        let bytes = encode_volume([5, 6, 7], &VolumeData::U8(vec![1; 210])).unwrap();
        assert_eq!(&bytes[..6], VOLUME_MAGIC);
        assert_eq!(u16::from_le_bytes(bytes[6..8].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 7);
        assert_eq!(bytes.len(), HEADER_LEN + 210);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bin");
        let good = encode_volume([2, 2, 2], &VolumeData::F32(vec![0.5; 8])).unwrap();

        std::fs::write(&path, &good[..HEADER_LEN - 1]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

        let mut bad_dtype = good.clone();
        bad_dtype[6] = 9;
        std::fs::write(&path, &bad_dtype).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

        std::fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

        std::fs::write(&path, &good).unwrap();
        assert!(read_u8_volume(&path).is_err());
        assert!(read_f32_volume(&path).is_ok());
    }

    #[test]
    fn size_mismatch_is_rejected_at_write_time() {
        assert!(encode_volume([2, 2, 2], &VolumeData::U8(vec![0; 7])).is_err());
    }
}
