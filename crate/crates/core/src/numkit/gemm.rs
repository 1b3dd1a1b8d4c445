//! Thin wrappers over `matrixmultiply::sgemm` for row-major buffers.
//!
//! Every wrapper computes `c = op(a) · op(b) + beta · c` where `c` is a
//! row-major `m × n` buffer.

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the strides describe in-bounds row-major (or transposed)
    // views of the checked slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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
        );
    }
}

/// `a` is `m × k`, `b` is `k × n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    sgemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, beta);
}

/// `a` is `m × k`, `b` is stored `n × k` and used transposed.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    sgemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), c, beta);
}

/// `a` is stored `k × m` and used transposed, `b` is `k × n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    sgemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), c, beta);
}
