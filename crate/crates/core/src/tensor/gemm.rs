//! Matrix-product kernel. Delegates the inner loops to `ndarray`'s
//! `general_mat_mul` (BLAS-style blocked multiply) while keeping this
//! crate's flat-buffer representation at the boundary.

use ndarray::{ArrayView2, ArrayViewMut2};

/// `c = a_op · b_op (+ c if accumulate)`, where `a_op` is `a` (ra×ca,
/// row-major) optionally transposed, likewise `b_op`. Dimensions of the
/// logical product are `m×n` with inner size `k`; callers guarantee
/// conformability.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into(
    a: &[f64],
    ra: usize,
    ca: usize,
    ta: bool,
    b: &[f64],
    rb: usize,
    cb: usize,
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = ArrayView2::from_shape((ra, ca), a).expect("lhs buffer/shape");
    let bv = ArrayView2::from_shape((rb, cb), b).expect("rhs buffer/shape");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let (m, _) = av.dim();
    let (_, n) = bv.dim();
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("out buffer/shape");
    let beta = if accumulate { 1.0 } else { 0.0 };
    ndarray::linalg::general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}
