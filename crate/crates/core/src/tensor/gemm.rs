use super::Elem;

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows × cols` matrix.
    pub fn rows(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols as isize }
    }
}

/// `c (m×n, row-major) = a (m×k) · b (k×n) + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Elem],
    la: Layout,
    b: &[Elem],
    lb: Layout,
    beta: Elem,
    c: &mut [Elem],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked above), and `c` does not alias `a`/`b`.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<Elem> = (0..m * k).map(|i| i as Elem * 0.5 - 2.0).collect();
        let b: Vec<Elem> = (0..k * n).map(|i| (i % 7) as Elem - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::rows(k), &b, Layout::rows(n), 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: Elem = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
        // aᵀ stored as k×m, read back transposed
        let at: Vec<Elem> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, Layout::transposed(m), &b, Layout::rows(n), 0.0, &mut c2);
        assert_eq!(c, c2);
    }
}
