//! Dense row-major tensors and their binary container format.

use super::{DiffError, DiffResult};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// A dense tensor of 64-bit floats in row-major layout.
///
/// The empty shape `[]` denotes a scalar with one element. Shapes are
/// explicit; there is no implicit rank promotion anywhere in the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Unvalidated mirror used to re-check the shape/data contract on the way in.
#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = String;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        Tensor::new(raw.shape, raw.data).map_err(|e| e.to_string())
    }
}

/// Magic bytes of the tensor container format.
pub const CONTAINER_MAGIC: &[u8; 4] = b"GLT1";

impl Tensor {
    /// Build a tensor from a shape and matching row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> DiffResult<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(DiffError::InvalidShape {
                op: "tensor_new",
                shape,
                detail: format!("data length {} does not match element count {}", data.len(), expect),
            });
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a flat vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from rows x cols data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> DiffResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar or one-element tensor.
    pub fn item(&self) -> DiffResult<f64> {
        if self.data.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> DiffResult<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(DiffError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("element count {} != {}", expect, self.data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Write in the flat binary container format: magic `GLT1`, rank and
    /// extents as little-endian u32, then the row-major f64 payload.
    pub fn write_container<W: Write>(&self, w: &mut W) -> DiffResult<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a tensor written by [`write_container`](Self::write_container).
    pub fn read_container<R: Read>(r: &mut R) -> DiffResult<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(DiffError::BadContainer(format!(
                "bad magic {:02x?}, expected {:02x?}",
                magic, CONTAINER_MAGIC
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank > 8 {
            return Err(DiffError::BadContainer(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf8 = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        Ok(Self { shape, data })
    }

    /// Save to a file in container format.
    pub fn save(&self, path: &std::path::Path) -> DiffResult<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_container(&mut f)
    }

    /// Load from a container file.
    pub fn load(path: &std::path::Path) -> DiffResult<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_container(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn test_new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn test_scalar_shape_and_item() {
        let t = Tensor::scalar(2.5);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.item().unwrap(), 2.5);
    }

    #[test]
    fn test_container_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.25]).unwrap();
        let mut buf = Vec::new();
        t.write_container(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"GLT1");
        let back = Tensor::read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn test_container_rejects_bad_magic() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        t.write_container(&mut buf).unwrap();
        buf[0] = b'X';
        let err = Tensor::read_container(&mut buf.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("magic"), "unexpected message: {msg}");
    }

    #[test]
    fn test_container_truncated_payload() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        t.write_container(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(Tensor::read_container(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn prop_container_round_trip_preserves_bits(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            use rand::prelude::*;
            let count: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..count).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            t.write_container(&mut buf).unwrap();
            let back = Tensor::read_container(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
