// Raw row-major kernels shared by forward and backward passes.

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ap = &a[p * m..(p + 1) * m];
        let bp = &b[p * n..(p + 1) * n];
        for (i, &av) in ap.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row indices ordered by the bit patterns of the concatenated key rows.
///
/// Rows with equal keys are interchangeable, so any reduction performed in
/// this order yields the same bits under a permutation of the input rows.
pub fn canonical_order(keys: &[&[f64]], rows: std::ops::Range<usize>, width: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = rows.collect();
    order.sort_by(|&x, &y| {
        for (key, &w) in keys.iter().zip(width) {
            let (rx, ry) = (&key[x * w..(x + 1) * w], &key[y * w..(y + 1) * w]);
            for (a, b) in rx.iter().zip(ry) {
                match a.total_cmp(b) {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        // a: 2x3, b: 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), ab);
        let at = transpose(&a, 2, 3);
        let ab_tn = matmul_tn(&at, &b, 3, 2, 4);
        for (x, y) in ab.iter().zip(&ab_tn) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
