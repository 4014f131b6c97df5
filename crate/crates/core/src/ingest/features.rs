//! `.hvf` patch-feature files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field              |
//! |--------|------|--------------------|
//! | 0      | 4    | magic `HVF1`       |
//! | 4      | 4    | view_count (u32)   |
//! | 8      | 4    | patches_per_view   |
//! | 12     | 4    | dim (u32)          |
//! | 16     | ...  | view-major f32 body |

use std::path::Path;

use ndarray::Array2;

pub const HVF_MAGIC: &[u8; 4] = b"HVF1";
pub const HVF_HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum FeatureFileError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {found:?}, expected \"HVF1\"")]
    BadMagic { found: [u8; 4] },
    #[error("file shorter than the 16-byte header ({0} bytes)")]
    ShortHeader(usize),
    #[error("size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("non-finite value at view {view}, patch {patch}, channel {channel}")]
    NonFinite { view: usize, patch: usize, channel: usize },
    #[error("inconsistent view shapes")]
    Shape,
}

/// Per-view `patches_per_view × dim` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureSet {
    pub views: Vec<Array2<f32>>,
}

impl PatchFeatureSet {
    pub fn new(views: Vec<Array2<f32>>) -> Result<Self, FeatureFileError> {
        if let Some(first) = views.first() {
            if views.iter().any(|v| v.dim() != first.dim()) {
                return Err(FeatureFileError::Shape);
            }
        }
        Ok(Self { views })
    }

    pub fn patches_per_view(&self) -> usize {
        self.views.first().map_or(0, |v| v.nrows())
    }

    pub fn dim(&self) -> usize {
        self.views.first().map_or(0, |v| v.ncols())
    }

    pub fn to_f64(&self) -> Vec<Array2<f64>> {
        self.views.iter().map(|v| v.mapv(f64::from)).collect()
    }
}

pub fn decode_patch_features(bytes: &[u8]) -> Result<PatchFeatureSet, FeatureFileError> {
    if bytes.len() < HVF_HEADER_LEN {
        return Err(FeatureFileError::ShortHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != HVF_MAGIC {
        return Err(FeatureFileError::BadMagic { found: magic });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as u64;
    let (views, patches, dim) = (word(4), word(8), word(12));
    let expected = HVF_HEADER_LEN as u64 + views * patches * dim * 4;
    if expected != bytes.len() as u64 {
        return Err(FeatureFileError::SizeMismatch { expected, actual: bytes.len() as u64 });
    }
    let (views, patches, dim) = (views as usize, patches as usize, dim as usize);
    let mut floats = bytes[HVF_HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut out = Vec::with_capacity(views);
    for view in 0..views {
        let mut m = Array2::<f32>::zeros((patches, dim));
        for patch in 0..patches {
            for channel in 0..dim {
                let v = floats.next().expect("length checked");
                if !v.is_finite() {
                    return Err(FeatureFileError::NonFinite { view, patch, channel });
                }
                m[[patch, channel]] = v;
            }
        }
        out.push(m);
    }
    Ok(PatchFeatureSet { views: out })
}

pub fn encode_patch_features(set: &PatchFeatureSet) -> Vec<u8> {
    let (p, d) = (set.patches_per_view(), set.dim());
    let mut out = Vec::with_capacity(HVF_HEADER_LEN + set.views.len() * p * d * 4);
    out.extend_from_slice(HVF_MAGIC);
    for w in [set.views.len(), p, d] {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for v in &set.views {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn load_patch_features(path: &Path) -> Result<PatchFeatureSet, FeatureFileError> {
    let bytes = std::fs::read(path).map_err(|source| FeatureFileError::Io { path: path.display().to_string(), source })?;
    decode_patch_features(&bytes)
}

pub fn save_patch_features(path: &Path, set: &PatchFeatureSet) -> Result<(), FeatureFileError> {
    std::fs::write(path, encode_patch_features(set)).map_err(|source| FeatureFileError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(v: u32, p: u32, d: u32) -> Vec<u8> {
        let mut b = HVF_MAGIC.to_vec();
        for w in [v, p, d] {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b
    }

    #[test]
    fn five_views_of_four_by_eight() {
        let mut bytes = header(5, 4, 8);
        for i in 0..160 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let set = decode_patch_features(&bytes).unwrap();
        assert_eq!(set.views.len(), 5);
        assert!(set.views.iter().all(|v| v.dim() == (4, 8)));
        assert_eq!(set.views[1][[0, 0]], 32.0);
        assert_eq!(set.views[4][[3, 7]], 159.0);
    }

    #[test]
    fn one_float_short() {
        let mut bytes = header(5, 4, 8);
        bytes.extend(std::iter::repeat_n(0u8, 159 * 4));
        match decode_patch_features(&bytes) {
            Err(FeatureFileError::SizeMismatch { expected, actual }) => {
                assert_eq!(expected, 16 + 640);
                assert_eq!(actual, 16 + 636);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_nan() {
        let mut bytes = header(1, 1, 1);
        bytes[0] = b'X';
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(decode_patch_features(&bytes), Err(FeatureFileError::BadMagic { .. })));
        let mut bytes = header(1, 1, 2);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_patch_features(&bytes),
            Err(FeatureFileError::NonFinite { view: 0, patch: 0, channel: 1 })
        ));
    }

    proptest! {
        #[test]
        fn write_read_bitwise(views in 1usize..6, patches in 1usize..5, dim in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mats = (0..views)
                .map(|_| Array2::from_shape_fn((patches, dim), |_| rng.gen_range(-1e6f32..1e6)))
                .collect();
            let set = PatchFeatureSet::new(mats).unwrap();
            let back = decode_patch_features(&encode_patch_features(&set)).unwrap();
            for (a, b) in set.views.iter().zip(&back.views) {
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
