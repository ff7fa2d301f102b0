//! SPTN tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPTN" | u8 version=1 | u8 dtype | u8 ndim | u8 pad=0 | ndim x u32 dims | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = i32, 2 = u8. The payload is the row-major element
//! buffer with no padding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPTN";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I32),
            2 => Ok(DType::U8),
            other => Err(Error::Unsupported(format!("dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A dense row-major array with a fixed element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    /// Builds a tensor, checking that the shape is nonempty, every dimension
    /// is at least one and the element count matches.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Parameter("tensor shape must be nonempty".into()));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Parameter(format!(
                "rank {} exceeds 255",
                shape.len()
            )));
        }
        if let Some(d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Parameter(format!("invalid dimension {d}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Parameter(format!(
                "shape {shape:?} needs {count} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Serializes to SPTN bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let elem = self.dtype().size();
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 * self.shape.len() + elem * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        out.push(0);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses SPTN bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "header truncated ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])?;
        let ndim = bytes[6] as usize;
        if ndim == 0 {
            return Err(Error::Format("rank 0 tensor".into()));
        }
        let dims_end = HEADER_LEN + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Format("dimension table truncated".into()));
        }
        let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(Error::Format(format!("zero dimension in {shape:?}")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[dims_end..];
        if payload.len() != expected {
            return Err(Error::Length {
                expected,
                actual: payload.len(),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Tensor::new(shape, data)
    }
}

/// Writes `t` to `path` in SPTN format.
pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an SPTN file.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Tensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_2x2_layout() {
        // 8-byte header + 2 x u32 dims + 4 x f32 payload
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 8 + 8 + 16);
        assert_eq!(&bytes[..8], b"SPTN\x01\x00\x02\x00");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(matches!(
            Tensor::from_f32(vec![], vec![]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            Tensor::from_f32(vec![0], vec![]),
            Err(Error::Parameter(_))
        ));
        assert!(Tensor::from_f32(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Tensor::from_u8(vec![1], vec![7]).unwrap().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = Tensor::from_f32(vec![2, 2], vec![0.0; 4])
            .unwrap()
            .to_bytes();
        let err = Tensor::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Length {
                    expected: 16,
                    actual: 13
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn unknown_dtype() {
        let mut bytes = Tensor::from_u8(vec![1], vec![7]).unwrap().to_bytes();
        bytes[5] = 9;
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sptn");
        let t = Tensor::from_i32(vec![2, 3, 1], vec![-1, 0, 1, i32::MAX, i32::MIN, 5]).unwrap();
        save_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
        assert!(matches!(
            load_tensor(dir.path().join("missing")),
            Err(Error::Read { .. })
        ));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n)
                    .prop_map(|v| TensorData::F32(v.into_iter().map(f32::from_bits).collect())),
                prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
        })
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        match t.data() {
            TensorData::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as u32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as u32).collect(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(bits(&back), bits(&t));
        }
    }
}
