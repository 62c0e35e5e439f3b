//! Floating point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

/// A floating point scalar: `f32` for training, `f64` for oracles and gradient checks.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumCast
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoints.
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Strides must describe valid element offsets inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;
    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;

    /// `exp` for the softmax kernels; may trade the last ulp for a loop that vectorizes.
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn cast(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    /// Range reduction to `2^n * e^r` with `|r| <= ln2 / 2` and a degree-6 polynomial,
    /// within a few ulp of `f32::exp`.
    #[inline]
    fn exp_fast(self) -> Self {
        // Adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the low mantissa bits.
        const SHIFTER: f32 = 12_582_912.0;
        let x = self.clamp(-87.0, 88.0);
        let t = x * std::f32::consts::LOG2_E + SHIFTER;
        let n = t - SHIFTER;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let p = ((((1.987_569_2e-4 * r + 1.398_2e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 1.666_666_5e-1)
            * r
            + 0.5;
        let y = p * r * r + r + 1.0;
        let k = t.to_bits().wrapping_sub(SHIFTER.to_bits()) as i32;
        y * f32::from_bits(((k + 127) as u32) << 23)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])).collect()
    }
}

/// [`gemm`] with explicit leading dimensions (row strides of the stored, untransposed
/// operands and of `c`), for operating on sub-blocks of larger row-major buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm_ld<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    trans_a: bool,
    b: &[T],
    ldb: usize,
    trans_b: bool,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Extent of a stored rows x cols block with row stride ld.
    let extent = |rows: usize, cols: usize, ld: usize| if rows == 0 || cols == 0 { 0 } else { (rows - 1) * ld + cols };
    let (ar, ac) = if trans_a { (k, m) } else { (m, k) };
    let (br, bc) = if trans_b { (n, k) } else { (k, n) };
    assert!(ac <= lda && bc <= ldb && n <= ldc, "gemm_ld: leading dimension too small");
    assert!(a.len() >= extent(ar, ac, lda), "gemm_ld: lhs too short");
    assert!(b.len() >= extent(br, bc, ldb), "gemm_ld: rhs too short");
    assert!(c.len() >= extent(m, n, ldc), "gemm_ld: output too short");
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: the extents checked above cover every strided access.
    unsafe {
        gemm_packed(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), ldc as isize)
    }
}

/// Below this many elements a column-major right operand is used in place.
const TRANSPOSE_MIN: usize = 4096;

/// Calls the kernel, first copying a large column-major `b` into row-major order: the kernel
/// packs such operands several times slower than row-major ones.
///
/// # Safety
/// As for [`Scalar::gemm_raw`].
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_packed<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
) {
    if rsb != 1 || csb == 1 || k * n < TRANSPOSE_MIN {
        return unsafe { T::gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1) };
    }
    const BLOCK: usize = 32;
    let mut bt = vec![T::zero(); k * n];
    for j0 in (0..n).step_by(BLOCK) {
        for i0 in (0..k).step_by(BLOCK) {
            for j in j0..(j0 + BLOCK).min(n) {
                // SAFETY: element (i, j) of the k x n operand lives at i + j * csb.
                let col = unsafe { b.offset(j as isize * csb) };
                for i in i0..(i0 + BLOCK).min(k) {
                    bt[i * n + j] = unsafe { *col.add(i) };
                }
            }
        }
    }
    unsafe { T::gemm_raw(m, k, n, alpha, a, rsa, csa, bt.as_ptr(), n as isize, 1, beta, c, rsc, 1) }
}

/// Dense row-major matrix product `c = alpha * op(a) * op(b) + beta * c`.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above guarantee every strided access stays inside the slices.
    unsafe { gemm_packed(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    let av = if ta { a[l * m + i] } else { a[i * k + l] };
                    let bv = if tb { b[j * k + l] } else { b[l * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_ld_on_sub_blocks() {
        // Multiply the top-left 2x3 block of a 4x5 buffer by a 3x2 block taken from a wider buffer.
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sqrt()).collect();
        let mut c = vec![9.0; 2 * 7];
        gemm_ld(2, 3, 2, &a, 5, false, &b, 4, false, 0.0, &mut c, 7);
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|l| a[i * 5 + l] * b[l * 4 + j]).sum();
                assert!((c[i * 7 + j] - want).abs() < 1e-12);
            }
            assert_eq!(c[i * 7 + 2], 9.0);
        }
    }

    #[test]
    fn fast_exp_is_close_to_std() {
        let mut worst = 0.0f64;
        for i in 0..=20000 {
            let x = -87.0 + i as f32 * (87.0 + 10.0) / 20000.0;
            let (a, b) = (x.exp_fast() as f64, x.exp() as f64);
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 1e-6, "relative error {worst}");
        assert_eq!(0.0f32.exp_fast(), 1.0);
        assert_eq!(1.5f64.exp_fast(), 1.5f64.exp());
    }

    #[test]
    fn byte_roundtrip() {
        let v = vec![1.5f32, -2.25, 3.0e-8];
        assert_eq!(f32::from_le_bytes_slice(&f32::to_le_bytes_vec(&v)), v);
        let w = vec![1.5f64, -2.25, 3.0e-300];
        assert_eq!(f64::from_le_bytes_slice(&f64::to_le_bytes_vec(&w)), w);
    }
}
