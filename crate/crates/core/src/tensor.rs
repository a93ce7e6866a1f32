//! Dense row-major tensors and the scalar trait the numeric kernels are
//! generic over. Training runs in `f32`; gradient verification runs the
//! same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{MomeError, Result};

/// Floating-point element type usable by the autodiff engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Largest logit magnitude whose sigmoid stays strictly inside (0, 1)
    /// in this precision.
    const LOGIT_CLAMP: f64;

    /// `c = alpha * a·b + beta * c` on strided row-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    /// `e^x` as used by the elementwise kernels.
    #[inline]
    fn exp_kernel(self) -> Self {
        self.exp()
    }

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    // sigmoid(x) rounds to exactly 1.0 in f32 once x exceeds ~17.3.
    const LOGIT_CLAMP: f64 = 15.0;

    /// Branch-free range reduction plus a degree-6 polynomial, so the
    /// elementwise loops vectorise. Within a few ulp of `f32::exp` on
    /// `[-87, 88]`; arguments outside are clamped.
    #[inline]
    fn exp_kernel(self) -> f32 {
        const ROUND: f32 = 12_582_912.0;
        let x = self.clamp(-87.0, 88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4_f32;
        p = p * r + 1.398_2e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 0.166_666_65;
        p = p * r + 0.5;
        let y = p * r * r + r + 1.0;
        // SAFETY: the clamp keeps n within [-126, 127].
        let n = unsafe { n.to_int_unchecked::<i32>() };
        y * f32::from_bits(((n + 127) << 23) as u32)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_extent(m, k, a.len(), rsa, csa);
        check_extent(k, n, b.len(), rsb, csb);
        check_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    const LOGIT_CLAMP: f64 = 30.0;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_extent(m, k, a.len(), rsa, csa);
        check_extent(k, n, b.len(), rsb, csb);
        check_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

fn check_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds");
}

/// Row-major matrix product of plain slices: `out[m×n] = a[m×k] · b[k×n]`,
/// with optional transposition of either operand's storage.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    (m, k, n): (usize, usize, usize),
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1,
    );
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MomeError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Product of all axes after the first; the per-channel spatial size for
    /// channel-first feature maps.
    pub fn inner_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(MomeError::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Channel `c` of a channel-first tensor, keeping the remaining axes.
    pub fn channel(&self, c: usize) -> Self {
        let n = self.inner_len();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Flat index of `(d, w, h)` in a D-major grid.
#[inline]
pub fn voxel_index(dims: [usize; 3], d: usize, w: usize, h: usize) -> usize {
    (d * dims[1] + w) * dims[2] + h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_kernel_exp_is_accurate() {
        let (mut worst, mut at): (f64, f32) = (0.0, 0.0);
        for i in -86_999..=87_999 {
            let x = i as f32 * 1e-3;
            let want = (x as f64).exp();
            let e = ((x.exp_kernel() as f64) - want).abs() / want;
            if e > worst {
                worst = e;
                at = x;
            }
        }
        assert!(worst < 5e-7, "worst relative error {worst} at {at}");
        assert!(1000f32.exp_kernel().is_finite());
        assert!((-1000f32).exp_kernel() >= 0.0);
    }

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3×4
        let mut out = vec![0.0; 8];
        matmul(&a, &b, &mut out, (2, 3, 4), false, false, false);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], expect);
            }
        }
        // aᵀ stored as 3×2
        let at: Vec<f64> = (0..3)
            .flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64))
            .collect();
        let mut out_t = vec![0.0; 8];
        matmul(&at, &b, &mut out_t, (2, 3, 4), true, false, false);
        assert_eq!(out, out_t);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
