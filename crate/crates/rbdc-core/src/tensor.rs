//! Dense row-major tensors with explicit numeric precision.
//!
//! Values are held as `f64` regardless of the declared precision. A
//! tensor tagged [`Precision::F32`] keeps every element exactly
//! representable in `f32`: constructors round through `f32` once, so
//! 32-bit semantics survive round trips through the checkpoint format
//! bit for bit.
//!
//! Reductions (matmul inner products, norms, pooling) accumulate in a
//! fixed pairwise order: a slice is split at its midpoint and the two
//! halves are summed recursively. The order is deterministic, and
//! because the midpoint of a width-doubled feature axis is exactly the
//! seam between the two coupled halves, swapping the coupling arguments
//! permutes whole summation subtrees instead of reordering individual
//! adds. That makes argument-order symmetry of coupled models exact in
//! floating point, not just approximate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IEEE-754 storage width of a tensor's elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Bytes per element in the serialized blob.
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn from_str_tag(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Dense row-major tensor. Immutable after construction; ops return new
/// tensors. The element count always equals the product of the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

/// Round every element through `f32` when the target precision is 32-bit.
fn quantize(precision: Precision, data: &mut [f64]) {
    if precision == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Reject NaN/Inf anywhere in a freshly produced buffer.
fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

impl Tensor {
    /// Build a tensor, quantizing to the requested precision and
    /// rejecting non-finite elements.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        quantize(precision, &mut data);
        check_finite("tensor::new", &data)?;
        Ok(Tensor { shape, data, precision })
    }

    /// Internal constructor for op outputs: quantizes, then checks
    /// finiteness so overflow introduced by the rounding is also caught.
    pub(crate) fn from_op(op: &str, shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        quantize(precision, &mut data);
        check_finite(op, &data)?;
        Ok(Tensor { shape, data, precision })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], precision }
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; numel], precision }
    }

    pub fn scalar(v: f64, precision: Precision) -> Result<Self> {
        Tensor::new(vec![], vec![v], precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar value; shape must be empty.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar { op: "tensor::item", shape: self.shape.clone() })
        }
    }

    /// Re-tag (and if narrowing, re-round) the tensor at a different
    /// precision. Widening is exact.
    pub fn cast(&self, precision: Precision) -> Tensor {
        let mut data = self.data.clone();
        quantize(precision, &mut data);
        Tensor { shape: self.shape.clone(), data, precision }
    }

    /// Bitwise equality of shape, precision, and every element.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.precision == other.precision
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "tensor::max_abs_diff",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Fixed-order pairwise reduction: split at the midpoint, sum halves
/// recursively. Deterministic for a given length, and aligned with
/// power-of-two block boundaries at every level.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Dot product accumulated with [`pairwise_sum`], using a caller-owned
/// scratch buffer so hot loops do not reallocate.
pub(crate) fn pairwise_dot(a: &[f64], b: &[f64], scratch: &mut Vec<f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    scratch.clear();
    scratch.extend(a.iter().zip(b.iter()).map(|(x, y)| x * y));
    pairwise_sum(scratch)
}

fn common_precision(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Precision> {
    if a.precision != b.precision {
        return Err(Error::PrecisionMismatch { op });
    }
    Ok(a.precision)
}

/// Element-wise addition. `b` may either match `a`'s shape exactly or
/// match a suffix of it, in which case `b` is broadcast over the leading
/// axes (bias-add and positional offsets; no other broadcasting exists).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let precision = common_precision("add", a, b)?;
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        return Tensor::from_op("add", a.shape.clone(), data, precision);
    }
    if a.shape.len() > b.shape.len() && a.shape.ends_with(&b.shape) {
        let chunk = b.data.len().max(1);
        let mut data = Vec::with_capacity(a.data.len());
        for block in a.data.chunks(chunk) {
            data.extend(block.iter().zip(b.data.iter()).map(|(x, y)| x + y));
        }
        return Tensor::from_op("add", a.shape.clone(), data, precision);
    }
    Err(Error::ShapeMismatch {
        op: "add",
        detail: format!("{:?} vs {:?} (broadcast only over a trailing suffix)", a.shape, b.shape),
    })
}

/// Element-wise product; shapes must match exactly.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let precision = common_precision("mul", a, b)?;
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
    Tensor::from_op("mul", a.shape.clone(), data, precision)
}

/// Multiply every element by a scalar.
pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x * c).collect();
    Tensor::from_op("scale", a.shape.clone(), data, a.precision)
}

/// 2-D matrix product `(m,k) x (k,n) -> (m,n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let precision = common_precision("matmul", a, b)?;
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("expected 2-D operands, got {:?} and {:?}", a.shape, b.shape),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims differ: {:?} x {:?}", a.shape, b.shape),
        });
    }
    let mut out = vec![0.0; m * n];
    let mut col = vec![0.0; k];
    let mut scratch = Vec::with_capacity(k);
    for j in 0..n {
        for (t, c) in col.iter_mut().enumerate() {
            *c = b.data[t * n + j];
        }
        for i in 0..m {
            let row = &a.data[i * k..(i + 1) * k];
            out[i * n + j] = pairwise_dot(row, &col, &mut scratch);
        }
    }
    Tensor::from_op("matmul", vec![m, n], out, precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5], Precision::F64).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN], Precision::F64).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn f32_tensors_hold_f32_representable_values() {
        let t = Tensor::new(vec![1], vec![0.1], Precision::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        assert_ne!(t.data()[0], 0.1f64);
    }

    #[test]
    fn add_identity_is_bit_identical() {
        let t = Tensor::new(vec![3], vec![0.25, -1.5, 3.0e-7], Precision::F64).unwrap();
        let z = Tensor::zeros(&[3], Precision::F64);
        let s = add(&t, &z).unwrap();
        assert!(s.bits_eq(&t));
    }

    #[test]
    fn add_broadcasts_over_trailing_suffix() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.], Precision::F64).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.], Precision::F64).unwrap();
        let s = add(&a, &b).unwrap();
        assert_eq!(s.data(), &[11., 22., 33., 14., 25., 36.]);
        let bad = Tensor::new(vec![2], vec![1., 2.], Precision::F64).unwrap();
        assert!(add(&a, &bad).is_err());
    }

    #[test]
    fn mul_requires_equal_shapes() {
        let a = Tensor::ones(&[2, 2], Precision::F64);
        let b = Tensor::ones(&[4], Precision::F64);
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn matmul_diagonal_example() {
        // [[1,0],[0,2]] x [3,4]^T = [3,8]^T
        let a = Tensor::new(vec![2, 2], vec![1., 0., 0., 2.], Precision::F64).unwrap();
        let x = Tensor::new(vec![2, 1], vec![3., 4.], Precision::F64).unwrap();
        let y = matmul(&a, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3., 8.]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent oracle: naive i/j/t loop with sequential adds.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(5, 7, 3), (1, 1, 1), (4, 32, 8), (32, 17, 2)] {
            let a_data: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b_data: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = Tensor::new(vec![m, k], a_data.clone(), Precision::F64).unwrap();
            let b = Tensor::new(vec![k, n], b_data.clone(), Precision::F64).unwrap();
            let c = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += a_data[i * k + t] * b_data[t * n + j];
                    }
                    let got = c.data()[i * n + j];
                    let rel = (got - acc).abs() / acc.abs().max(1.0);
                    assert!(rel <= 1e-12, "({m},{k},{n}) at ({i},{j}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::ones(&[2, 3], Precision::F64);
        let b = Tensor::ones(&[4, 2], Precision::F64);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mixed_precision_is_rejected() {
        let a = Tensor::ones(&[2], Precision::F64);
        let b = Tensor::ones(&[2], Precision::F32);
        assert!(matches!(add(&a, &b), Err(Error::PrecisionMismatch { .. })));
    }

    #[test]
    fn pairwise_sum_matches_naive_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [0usize, 1, 2, 3, 17, 64, 100] {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let naive: f64 = v.iter().sum();
            let got = pairwise_sum(&v);
            assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn pairwise_sum_commutes_over_half_swap() {
        // Swapping the two halves of an even-length slice flips only the
        // outermost addition, which is commutative, so the result is
        // bit-identical. This is the property coupled models rely on.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 4, 8, 64, 128] {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut swapped = v[n / 2..].to_vec();
            swapped.extend_from_slice(&v[..n / 2]);
            assert_eq!(pairwise_sum(&v).to_bits(), pairwise_sum(&swapped).to_bits());
        }
    }

    #[test]
    fn cast_round_trips_through_f32() {
        let t = Tensor::new(vec![3], vec![0.1, -2.5, 1e-3], Precision::F64).unwrap();
        let narrow = t.cast(Precision::F32);
        let wide = narrow.cast(Precision::F64);
        for (a, b) in narrow.data().iter().zip(wide.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (orig, cast) in t.data().iter().zip(narrow.data().iter()) {
            assert!((orig - cast).abs() <= orig.abs() * 1e-7 + 1e-12);
        }
    }
}
