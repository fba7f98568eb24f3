//! Small dense-vector helpers shared by the embedding, environment and agent
//! code. Matrices are row-major `Vec<f64>` of length `rows * cols`.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y = M x, with M row-major (rows x cols), x of length cols.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        y[r] = dot(row, x);
    }
    y
}

/// y = M^T x, with M row-major (rows x cols), x of length rows.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for c in 0..cols {
            y[c] += row[c] * x[r];
        }
    }
    y
}

/// acc += scale * outer(u, v), acc row-major (u.len() x v.len()).
pub fn add_outer(acc: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    debug_assert_eq!(acc.len(), u.len() * v.len());
    for (r, &ur) in u.iter().enumerate() {
        let row = &mut acc[r * v.len()..(r + 1) * v.len()];
        for (c, &vc) in v.iter().enumerate() {
            row[c] += scale * ur * vc;
        }
    }
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(x: &mut [f64], a: f64) {
    for xi in x.iter_mut() {
        *xi *= a;
    }
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// L2-normalize in place; the zero vector stays zero.
pub fn normalize(x: &mut [f64]) {
    let n = l2_norm(x);
    if n > 0.0 {
        scale(x, 1.0 / n);
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let aa = dot(a, a);
    let bb = dot(b, b);
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    // single sqrt keeps cosine(v, v) exactly 1
    dot(a, b) / (aa * bb).sqrt()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Softmax probabilities with max-subtraction for stability.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_against_loops() {
        let m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let x = vec![1.0, 0.5, -1.0];
        assert_eq!(matvec(&m, 2, 3, &x), vec![1.0 + 1.0 - 3.0, 4.0 + 2.5 - 6.0]);
        let y = vec![2.0, -1.0];
        assert_eq!(matvec_t(&m, 2, 3, &y), vec![2.0 - 4.0, 4.0 - 5.0, 6.0 - 6.0]);
    }

    #[test]
    fn argmax_tie_takes_lowest() {
        assert_eq!(argmax(&[5.0, 5.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1001.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn normalize_zero_stays_zero() {
        let mut v = vec![0.0, 0.0];
        normalize(&mut v);
        assert_eq!(v, vec![0.0, 0.0]);
    }
}
