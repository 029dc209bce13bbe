//! Binary volume formats.
//!
//! Every file is framed the same way:
//!
//! ```text
//! offset 0   16 bytes  magic "PROTOSEG-VOL\0\0\0\0"
//! offset 16   8 bytes  header length N, little-endian u64
//! offset 24   N bytes  UTF-8 JSON header {"version":1,"dims":[..],"dtype":..}
//! offset 24+N          payload, little-endian, exactly prod(dims) elements
//! ```
//!
//! VOLRAW holds `f32` intensities with dims `[S, H, W]` (slice-major,
//! row-major). MASKRAW holds `u8` class ids with the same layout. FEATVOL
//! holds `f32` features with dims `[S, H, W, Z]`, channel-fastest. A RESULT
//! is a MASKRAW plus a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FeatureVolume, LabelMask, VolumeImage};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 16] = *b"PROTOSEG-VOL\0\0\0\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16 + 8;
const MAX_HEADER_LEN: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dims: Vec<usize>,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    /// Image-resolution `(H_img, W_img)` a FEATVOL was computed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_shape: Option<[usize; 2]>,
}

impl Header {
    fn new(dims: Vec<usize>, dtype: DType) -> Self {
        Header { version: FORMAT_VERSION, dims, dtype, spacing: None, source_shape: None }
    }

    fn element_count(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

fn encode(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Splits a framed file into its header and payload, enforcing the framing
/// rules, the expected dtype and rank, and the exact payload length.
fn decode<'a>(bytes: &'a [u8], dtype: DType, rank: usize, path: &Path) -> Result<(Header, &'a [u8])> {
    let fail = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if bytes.len() < PREFIX_LEN {
        return Err(fail(format!("file is {} bytes, shorter than the fixed prefix", bytes.len())));
    }
    if bytes[..16] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if header_len > MAX_HEADER_LEN || header_len as usize > bytes.len() - PREFIX_LEN {
        return Err(fail(format!("header length {header_len} exceeds file size")));
    }
    let body = PREFIX_LEN + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..body])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(fail(format!("unsupported version {}", header.version)));
    }
    if header.dtype != dtype {
        return Err(fail(format!("expected dtype {dtype:?}, found {:?}", header.dtype)));
    }
    if header.dims.len() != rank || header.dims.contains(&0) {
        return Err(fail(format!("expected {rank} non-zero dims, found {:?}", header.dims)));
    }
    let expected = header
        .element_count()
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| fail("dims overflow".into()))?;
    let payload = &bytes[body..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload is {} bytes, dims {:?} require {expected}",
            payload.len(),
            header.dims
        )));
    }
    Ok((header, payload))
}

fn f32_payload(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(payload: &[u8], path: &Path) -> Result<Vec<f32>> {
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("non-finite value at index {i}") });
    }
    Ok(values)
}

fn with_path(path: &Path, e: Error) -> Error {
    let reason = match e {
        Error::InvalidShape(reason) => reason,
        Error::NonFinite(i) => format!("non-finite value at index {i}"),
        other => return other,
    };
    Error::Format { path: path.to_path_buf(), reason }
}

pub fn encode_volume(volume: &VolumeImage) -> Vec<u8> {
    let mut header = Header::new(volume.dims().to_vec(), DType::F32);
    header.spacing = volume.spacing();
    encode(&header, &f32_payload(&volume.flat()))
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<VolumeImage> {
    let (header, payload) = decode(bytes, DType::F32, 3, path)?;
    let dims = [header.dims[0], header.dims[1], header.dims[2]];
    VolumeImage::from_flat(dims, f32_values(payload, path)?)
        .map(|v| v.with_spacing(header.spacing))
        .map_err(|e| with_path(path, e))
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    encode(&Header::new(mask.dims().to_vec(), DType::U8), &mask.flat())
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<LabelMask> {
    let (header, payload) = decode(bytes, DType::U8, 3, path)?;
    let dims = [header.dims[0], header.dims[1], header.dims[2]];
    LabelMask::from_flat(dims, payload.to_vec()).map_err(|e| with_path(path, e))
}

pub fn encode_features(features: &FeatureVolume) -> Vec<u8> {
    let mut header = Header::new(features.dims().to_vec(), DType::F32);
    let (h, w) = features.source_shape();
    header.source_shape = Some([h, w]);
    encode(&header, &f32_payload(&features.flat()))
}

/// Decodes a FEATVOL. Without a `source_shape` in the header the feature
/// grid is assumed to be at image resolution.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureVolume> {
    let (header, payload) = decode(bytes, DType::F32, 4, path)?;
    let dims = [header.dims[0], header.dims[1], header.dims[2], header.dims[3]];
    let source = header.source_shape.map_or((dims[1], dims[2]), |[h, w]| (h, w));
    FeatureVolume::from_flat(dims, f32_values(payload, path)?, source).map_err(|e| with_path(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|cause| Error::Io { path: path.to_path_buf(), cause })
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |cause| Error::Io { path: path.to_path_buf(), cause };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeImage> {
    let path = path.as_ref();
    decode_volume(&read(path)?, path)
}

pub fn write_volume(path: impl AsRef<Path>, volume: &VolumeImage) -> Result<()> {
    write_atomic(path.as_ref(), &encode_volume(volume))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    decode_mask(&read(path)?, path)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_atomic(path.as_ref(), &encode_mask(mask))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let path = path.as_ref();
    decode_features(&read(path)?, path)
}

pub fn save_embeddings(path: impl AsRef<Path>, features: &FeatureVolume) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(features))
}

/// Path of the JSON sidecar belonging to a RESULT mask file.
pub fn sidecar_path(result_path: &Path) -> PathBuf {
    let mut p = result_path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes a RESULT: the final mask as MASKRAW plus its JSON sidecar.
pub fn write_result<S: Serialize>(path: impl AsRef<Path>, mask: &LabelMask, sidecar: &S) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(sidecar).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("sidecar: {e}"),
    })?;
    write_atomic(&sidecar_path(path), &json)?;
    write_mask(path, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassId, Grid};

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn layout_is_bit_exact() {
        let v = VolumeImage::from_flat([1, 1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(&bytes[..16], b"PROTOSEG-VOL\0\0\0\0");
        let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[24..24 + hlen]).unwrap();
        assert_eq!(header["version"], 1);
        assert_eq!(header["dims"], serde_json::json!([1, 1, 2]));
        assert_eq!(header["dtype"], "f32");
        assert_eq!(&bytes[24 + hlen..], &[0, 0, 0x80, 0x3f, 0, 0, 0x20, 0xc0]);
    }

    #[test]
    fn rejects_bad_framing() {
        let m = LabelMask::new(vec![Grid::filled(2, 2, ClassId(1))]).unwrap();
        let good = encode_mask(&m);
        assert_eq!(decode_mask(&good, p()).unwrap(), m);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_mask(&bad_magic, p()).is_err());

        assert!(decode_mask(&good[..good.len() - 1], p()).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_mask(&long, p()).is_err());

        // a mask file is not a volume
        assert!(decode_volume(&good, p()).is_err());
        assert!(decode_mask(&good[..10], p()).is_err());
    }

    #[test]
    fn rejects_unknown_version_and_huge_header() {
        let header = Header { version: 2, ..Header::new(vec![1, 1, 1], DType::U8) };
        assert!(decode_mask(&encode(&header, &[0]), p()).is_err());

        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_mask(&bytes, p()).is_err());
    }

    #[test]
    fn rejects_non_finite_features() {
        let header = Header::new(vec![1, 1, 1, 1], DType::F32);
        let bytes = encode(&header, &f32::NAN.to_le_bytes());
        let err = decode_features(&bytes, p()).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn features_without_source_shape_default_to_grid() {
        let header = Header::new(vec![2, 3, 4, 1], DType::F32);
        let bytes = encode(&header, &f32_payload(&[0.5; 24]));
        let f = decode_features(&bytes, p()).unwrap();
        assert_eq!(f.source_shape(), (3, 4));
    }

    #[test]
    fn files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let v = VolumeImage::from_flat([2, 2, 3], (0..12).map(|i| i as f32 * 0.1).collect())
            .unwrap()
            .with_spacing(Some([1.0, 0.8, 0.8]));
        let path = dir.path().join("v.volraw");
        write_volume(&path, &v).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
        assert!(!dir.path().join("v.volraw.partial").exists());

        let missing = read_volume(dir.path().join("nope.volraw")).unwrap_err();
        assert!(missing.to_string().contains("nope.volraw"));
    }
}
