//! Floating-point element types and the matrix-multiply kernel behind every
//! dense layer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Element precision of a model. Training runs in `F32`; `F64` exists for
/// gradient verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn next_below(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on strided row-major storage.
    ///
    /// # Safety
    /// The strides and dimensions must describe memory inside the given
    /// pointers, exactly as for `matrixmultiply::sgemm`.
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
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn next_below(self) -> Self {
        self.next_down()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
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
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn next_below(self) -> Self {
        self.next_down()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

static GEMM_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets how many worker threads the dense kernels may use. `1` is the
/// single-threaded reference mode.
pub fn set_threads(threads: usize) {
    GEMM_THREADS.store(threads.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    GEMM_THREADS.load(Ordering::Relaxed)
}

/// Row granularity of the multi-threaded split; a multiple of every GEMM
/// micro-tile height.
pub const ROW_ALIGN: usize = 64;

/// Whether a matrix operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// Row-major GEMM: `c (m×n) = alpha * op(a) * op(b) + beta * c`.
///
/// `a` is stored `m×k` (or `k×m` under `Op::T`), `b` is `k×n` (or `n×k`).
/// In multi-threaded mode the rows of `c` are split into disjoint chunks that
/// start on multiples of [`ROW_ALIGN`]. The kernel's micro-tiles then fall on
/// the same rows as in the single-threaded call, so the result matches it bit
/// for bit.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    op_a: Op,
    op_b: Op,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = if beta == T::zero() {
                T::zero()
            } else {
                *v * beta
            };
        }
        return;
    }
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let workers = threads();
    if workers <= 1 || m <= ROW_ALIGN || m * n * k < 1 << 16 {
        let (rsa, csa) = match op_a {
            Op::N => (k as isize, 1),
            Op::T => (1, m as isize),
        };
        // SAFETY: sizes asserted above; strides index within each slice.
        unsafe {
            T::gemm_raw(
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
                n as isize,
                1,
            )
        }
        return;
    }

    use rayon::prelude::*;
    let rows_per = m.div_ceil(workers).next_multiple_of(ROW_ALIGN);
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(chunk, c_rows)| {
            let row0 = chunk * rows_per;
            let rows = c_rows.len() / n;
            let a_ptr = &a_ptr;
            let b_ptr = &b_ptr;
            let (a_start, rsa, csa) = match op_a {
                Op::N => (row0 * k, k as isize, 1),
                Op::T => (row0, 1, m as isize),
            };
            // SAFETY: the chunk covers rows [row0, row0 + rows) of `c`; the
            // matching rows of op(a) start at `a_start` with the same strides.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    alpha,
                    a_ptr.0.add(a_start),
                    rsa,
                    csa,
                    b_ptr.0,
                    rsb,
                    csb,
                    beta,
                    c_rows.as_mut_ptr(),
                    n as isize,
                    1,
                )
            }
        });
}

struct SendPtr<T>(*const T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}
