//! Row-major f64 matrix kernels shared by the tape's forward and backward ops.
//!
//! Loop orders are fixed so repeated runs accumulate in the same order and
//! stay bit-identical. The inner loops write independent output elements,
//! which lets the compiler vectorize them without reassociating sums.

/// c[n×m] (+)= a[n×k] · b[k×m]
pub fn mm(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        if !accumulate {
            crow.fill(0.0);
        }
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[n×m] (+)= a[n×k] · b[m×k]ᵀ
pub fn mm_a_bt(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let v = dot(arow, brow);
            if accumulate {
                c[i * m + j] += v;
            } else {
                c[i * m + j] = v;
            }
        }
    }
}

/// c[k×m] (+)= a[n×k]ᵀ · b[n×m]
pub fn mm_at_b(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(c.len(), k * m);
    if !accumulate {
        c.fill(0.0);
    }
    for p in 0..n {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators. The lane split is part of
/// the fixed summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let k = a.len();
    let chunks = k / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..chunks {
        let o = t * 4;
        s0 += a[o] * b[o];
        s1 += a[o + 1] * b[o + 1];
        s2 += a[o + 2] * b[o + 2];
        s3 += a[o + 3] * b[o + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for t in chunks * 4..k {
        s += a[t] * b[t];
    }
    s
}

/// out[j] += g[j] for slices of equal length.
pub fn axpy1(out: &mut [f64], g: &[f64]) {
    debug_assert_eq!(out.len(), g.len());
    for (o, &v) in out.iter_mut().zip(g) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * m + j];
                }
                c[i * m + j] = s;
            }
        }
        c
    }

    fn fill(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 + 11) % 23) as f64 * scale - 0.4).collect()
    }

    #[test]
    fn mm_matches_naive() {
        let (n, k, m) = (5, 7, 3);
        let a = fill(n * k, 0.03);
        let b = fill(k * m, 0.05);
        let mut c = vec![0.0; n * m];
        mm(&mut c, &a, &b, n, k, m, false);
        let want = naive_mm(&a, &b, n, k, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let (n, k, m) = (4, 6, 5);
        let a = fill(n * k, 0.02);
        let b = fill(m * k, 0.04);
        let mut c = vec![0.0; n * m];
        mm_a_bt(&mut c, &a, &b, n, k, m, false);
        // reference: transpose b then plain mm
        let mut bt = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                bt[j * m + i] = b[i * k + j];
            }
        }
        let want = naive_mm(&a, &bt, n, k, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let b2 = fill(n * m, 0.01);
        let mut c2 = vec![0.0; k * m];
        mm_at_b(&mut c2, &a, &b2, n, k, m, false);
        let mut at = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                at[j * n + i] = a[i * k + j];
            }
        }
        let want2 = naive_mm(&at, &b2, k, n, m);
        for (x, y) in c2.iter().zip(&want2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_adds_on_top() {
        let (n, k, m) = (2, 3, 2);
        let a = fill(n * k, 0.1);
        let b = fill(k * m, 0.1);
        let mut c = vec![1.0; n * m];
        mm(&mut c, &a, &b, n, k, m, true);
        let want = naive_mm(&a, &b, n, k, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }
}
