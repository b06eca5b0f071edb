//! File formats: Middlebury `.flo` flows and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;

/// Magic number leading every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a flow as little-endian `.flo` bytes (displacements narrowed to f32).
pub fn encode_flo<T: Scalar>(flow: &FlowField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.pixel_count() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for &v in flow.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo<T: Scalar>(bytes: &[u8]) -> Result<FlowField<T>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile("missing header".into()));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile("missing dimensions".into()));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 {
        return Err(Error::InvalidFlow(format!("bad dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::InvalidFlow("dimensions overflow".into()))?;
    let payload = &bytes[12..];
    if payload.len() < need {
        return Err(Error::TruncatedFile(format!("expected {need} payload bytes, found {}", payload.len())));
    }
    let data = payload[..need]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    FlowField::new(w, h, data)
}

pub fn write_flo<T: Scalar>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_flo(flow))
}

pub fn read_flo<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    decode_flo(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let f = FlowField::<f32>::zeros(3, 2);
        let mut bytes = encode_flo(&f);
        bytes[0] ^= 0xff;
        assert!(matches!(decode_flo::<f32>(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn rejects_truncated_payload() {
        let f = FlowField::<f32>::zeros(3, 2);
        let bytes = encode_flo(&f);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_flo::<f32>(cut), Err(Error::TruncatedFile(_))));
        assert!(matches!(decode_flo::<f32>(&bytes[..8]), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn header_layout() {
        let f = FlowField::<f64>::zeros(5, 4);
        let b = encode_flo(&f);
        assert_eq!(&b[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(i32::from_le_bytes(b[4..8].try_into().unwrap()), 5);
        assert_eq!(i32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
        assert_eq!(b.len(), 12 + 5 * 4 * 8);
    }

    proptest! {
        #[test]
        fn file_round_trip_is_bit_identical(
            w in 2usize..9, h in 2usize..9, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..w * h * 2).map(|_| rng.gen_range(-50.0f32..50.0)).collect();
            let f = FlowField::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.flo");
            write_flo(&p, &f).unwrap();
            let g: FlowField<f32> = read_flo(&p).unwrap();
            prop_assert_eq!(f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(std::fs::read(&p).unwrap(), encode_flo(&g));
        }
    }
}
