// SPDX-License-Identifier: MIT OR Apache-2.0

/// `c = a · b + beta · c` for strided row/column-major views.
///
/// `a` is `m × k` with row stride `rsa` and column stride `csa`; `b` is
/// `k × n`; `c` is `m × n` and always dense row-major. Transposed operands
/// are expressed by swapping strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs too small");
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs too small");
    // SAFETY: bounds of every operand were checked above against the
    // largest offset the kernel will touch.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
