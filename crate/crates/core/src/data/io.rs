//! Volume file format:
//!
//! ```text
//! 8 bytes   magic "XDSEGVOL"
//! u32 LE    header length N
//! N bytes   UTF-8 JSON {"extents":[X,Y,Z],"spacing":[sx,sy,sz],"kind":"intensity"|"label","dtype":"f32"}
//! payload   X·Y·Z little-endian f32, x fastest
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result, Volume, VolumeKind};

pub const VOLUME_MAGIC: &[u8; 8] = b"XDSEGVOL";

#[derive(Serialize, Deserialize)]
struct Header {
    extents: [usize; 3],
    spacing: [f64; 3],
    kind: VolumeKind,
    dtype: String,
}

pub fn write_volume(volume: &Volume) -> Vec<u8> {
    let header = Header {
        extents: volume.extents(),
        spacing: volume.spacing(),
        kind: volume.kind(),
        dtype: "f32".into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + volume.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in volume.voxels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < VOLUME_MAGIC.len() {
        return Err(DataError::Truncated("file ends inside the magic".into()));
    }
    if &bytes[..8] != VOLUME_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(DataError::Truncated("file ends inside the header length".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < len {
        return Err(DataError::Truncated(format!("header declares {len} bytes, {} present", rest.len())));
    }
    let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| DataError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(DataError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &rest[len..];
    if payload.len() % 4 != 0 {
        return Err(DataError::Truncated(format!(
            "payload of {} bytes ends inside a voxel",
            payload.len()
        )));
    }
    let expected: usize = header.extents.iter().product();
    if payload.len() / 4 != expected {
        return Err(DataError::SizeMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(header.extents, header.spacing, header.kind, voxels)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_volume(volume))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header_bytes(json: &str) -> Vec<u8> {
        let mut out = VOLUME_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            x in 1usize..5, y in 1usize..5, z in 1usize..5,
            sx in 0.1f64..5.0, sz in 0.1f64..5.0,
            seed in any::<u64>(),
            label in any::<bool>(),
        ) {
            let n = x * y * z;
            let voxels: Vec<f32> = (0..n as u64)
                .map(|i| {
                    let h = (i.wrapping_add(seed)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    if label { (h % 4) as f32 } else { f32::from_bits((h >> 33) as u32 | 0x3f00_0000) }
                })
                .collect();
            let kind = if label { VolumeKind::Label } else { VolumeKind::Intensity };
            let v = Volume::new([x, y, z], [sx, 1.0, sz], kind, voxels).unwrap();
            let bytes = write_volume(&v);
            let back = read_volume(&bytes).unwrap();
            prop_assert_eq!(back.spacing(), v.spacing());
            prop_assert_eq!(back.kind(), v.kind());
            let bits = |v: &Volume| v.voxels().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&v));
            prop_assert_eq!(write_volume(&back), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.xdv");
        let v = Volume::new([2, 1, 2], [0.5, 0.5, 2.5], VolumeKind::Intensity, vec![1.0, -2.0, 3.5, 1e-7]).unwrap();
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
        assert!(matches!(load_volume(dir.path().join("missing")), Err(DataError::Io(_))));
    }

    #[test]
    fn distinct_errors() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], VolumeKind::Intensity, 1.0).unwrap();
        let bytes = write_volume(&v);

        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(read_volume(&bad), Err(DataError::BadMagic)));

        assert!(matches!(read_volume(&bytes[..bytes.len() - 1]), Err(DataError::Truncated(_))));
        assert!(matches!(read_volume(&bytes[..20]), Err(DataError::Truncated(_))));
        assert!(matches!(read_volume(&bytes[..5]), Err(DataError::Truncated(_))));

        let mut seven = header_bytes(r#"{"extents":[2,2,2],"spacing":[1,1,1],"kind":"intensity","dtype":"f32"}"#);
        seven.extend(std::iter::repeat_n(0u8, 7 * 4));
        assert!(matches!(
            read_volume(&seven),
            Err(DataError::SizeMismatch { expected: 8, found: 7 })
        ));

        let mut f64s = header_bytes(r#"{"extents":[1,1,1],"spacing":[1,1,1],"kind":"intensity","dtype":"f64"}"#);
        f64s.extend([0u8; 8]);
        assert!(matches!(read_volume(&f64s), Err(DataError::Header(_))));
    }

    #[test]
    fn header_layout() {
        let v = Volume::filled([3, 2, 1], [1.0, 1.0, 2.0], VolumeKind::Label, 0.0).unwrap();
        let bytes = write_volume(&v);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(
            std::str::from_utf8(&bytes[12..12 + len]).unwrap(),
            r#"{"extents":[3,2,1],"spacing":[1.0,1.0,2.0],"kind":"label","dtype":"f32"}"#
        );
        assert_eq!(bytes.len(), 12 + len + 6 * 4);
    }
}
