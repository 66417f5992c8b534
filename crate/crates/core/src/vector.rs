//! Dense f64 kernels shared by the matching layer and the loaders.

/// Tolerance for the unit-norm precondition on inputs.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

const LANES: usize = 16;

/// Dot product with a fixed summation order.
///
/// Sixteen interleaved partial sums are kept (lane `i % 16`), reduced
/// pairwise (`s0 + s1`, `s2 + s3`, ..., then the results in the same way)
/// and followed by the tail in index order. The order never depends on the
/// inputs, so results are bit-reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks_a = a.chunks_exact(LANES);
    let chunks_b = b.chunks_exact(LANES);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (x, y) in chunks_a.zip(chunks_b) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            acc[k] = acc[2 * k] + acc[2 * k + 1];
        }
    }
    let mut sum = acc[0];
    for (x, y) in tail_a.iter().zip(tail_b) {
        sum += x * y;
    }
    sum
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn is_unit(a: &[f64]) -> bool {
    (norm(a) - 1.0).abs() <= UNIT_NORM_TOLERANCE
}
