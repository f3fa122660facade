//! Dense f32 / i8 tensors and the handful of kernels the compression code needs.
//!
//! Layout is always row-major and flat. There is no broadcasting: every shape
//! disagreement is reported as [`Error::Dimension`].

use crate::error::{Error, Result};

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
    }
    Ok(())
}

/// Dense row-major tensor of finite 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        if data.len() != element_count(&shape) {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} elements, got {}",
                element_count(&shape),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite value {} at flat offset {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Mutable access for in-place updates. Callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what} must be rank 2, got shape {s:?}"))),
        }
    }
}

/// Dense row-major tensor of 8-bit integers restricted to [-127, 127].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        check_shape(&shape)?;
        if data.len() != element_count(&shape) {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} elements, got {}",
                element_count(&shape),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| *v == i8::MIN) {
            return Err(Error::Value(format!("-128 at flat offset {pos} is outside [-127, 127]")));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Row-major matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul lhs")?;
    let (k2, n) = b.as_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Mean squared elementwise difference, accumulated in f64.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape != y.shape {
        return Err(Error::dim(format!(
            "mse operands differ in shape: {:?} vs {:?}",
            x.shape, y.shape
        )));
    }
    Ok(mse_slices(&x.data, &y.data))
}

pub(crate) fn mse_slices(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    if x.is_empty() {
        return 0.0;
    }
    let sum: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    sum / x.len() as f64
}

/// Little-endian f32 dump of the tensor payload (no header).
pub fn serialize_raw(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize_raw(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n = element_count(shape);
    if bytes.len() != 4 * n {
        return Err(Error::format(
            bytes.len().min(4 * n),
            format!(
                "raw dump for shape {shape:?} must be {} bytes, got {}",
                4 * n,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = element_count(&shape);
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 4.0, 0.25, -6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, vec![5, 7]);
        let b = random(&mut rng, vec![7, 3]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for p in 0..7 {
                    acc += a.data()[i * 7 + p] as f64 * b.data()[p * 3 + j] as f64;
                }
                let got = c.data()[i * 3 + j] as f64;
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0), "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
        let v = Tensor::zeros(vec![3]);
        assert!(matches!(matmul(&v, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_examples() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&x, &y).unwrap(), 2.0);
        assert!(mse(&x, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, vec![4, 9]);
        let y = random(&mut rng, vec![4, 9]);
        let mut acc = 0.0f64;
        for i in 0..36 {
            let d = x.data()[i] as f64 - y.data()[i] as f64;
            acc += d * d;
        }
        assert!((mse(&x, &y).unwrap() - acc / 36.0).abs() < 1e-7);
    }

    #[test]
    fn raw_scalar_and_sizes() {
        let s = Tensor::scalar(1.0).unwrap();
        let bytes = serialize_raw(&s);
        assert_eq!(bytes.len(), 4);
        assert_eq!(deserialize_raw(&bytes, &[]).unwrap(), s);

        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(serialize_raw(&t).len(), 12);
        assert!(matches!(
            deserialize_raw(&[0u8; 11], &[3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(IntTensor::new(vec![1], vec![-128]).is_err());
    }

    proptest! {
        #[test]
        fn raw_round_trip_is_bit_exact(data in prop::collection::vec(
            any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let t = Tensor::new(vec![data.len()], data).unwrap();
            let back = deserialize_raw(&serialize_raw(&t), t.shape()).unwrap();
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn matmul_agrees_with_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, vec![m, k]);
            let b = random(&mut rng, vec![k, n]);
            let c = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|p| a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64).sum();
                    let got = c.data()[i * n + j] as f64;
                    prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
                }
            }
        }
    }
}
