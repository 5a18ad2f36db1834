//! Single-threaded dense kernels over row-major slices.
//!
//! Summation order is fixed, so results are bitwise reproducible for a given
//! input and dtype.

use super::tensor::Element;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_pi * b_pj;
            }
        }
    }
    c
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    // Four independent lanes let the compiler vectorize; lane order is fixed.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place numerically stable softmax over `row`, restricted to the first
/// `valid` entries; the remainder is set to zero.
pub fn softmax_prefix<T: Element>(row: &mut [T], valid: usize) {
    if valid == 0 {
        row.fill(T::zero());
        return;
    }
    let max = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in &mut row[..valid] {
        *v = *v / sum;
    }
    row[valid..].fill(T::zero());
}

/// Log-sum-exp of a row.
pub fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // bt = bᵀ (2x3)
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        // at = aᵀ (3x2)
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_prefix_zeroes_masked_tail() {
        let mut row = [0.0f64, 0.0, 5.0];
        softmax_prefix(&mut row, 2);
        assert_eq!(row, [0.5, 0.5, 0.0]);
    }
}
