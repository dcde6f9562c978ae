//! SVD rank diagnostics of weight matrices and a low-rank checkpoint
//! transform.
//!
//! `svd_values` takes the eigenvalues of the smaller Gram matrix (AᵀA or
//! AAᵀ) with cyclic Jacobi rotations — dependency-free and plenty at the
//! widths this crate handles. `svd_factor` is a one-sided Jacobi SVD used
//! where actual factors are needed; the two are algorithmically independent
//! routes to the same values.

use crate::checkpoint::{Checkpoint, NamedTensor};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("selector {0} matched no matrices")]
    EmptySelection(String),
    #[error("invalid selector: {0}")]
    BadSelector(#[from] regex::Error),
}

/// Singular values of a p×q row-major matrix, descending.
///
/// Σσ² equals the squared Frobenius norm to ~1e-8 relative.
pub fn svd_values(data: &[f64], p: usize, q: usize) -> Vec<f64> {
    assert_eq!(data.len(), p * q);
    let k = p.min(q);
    // Gram matrix of the smaller side.
    let mut gram = vec![0.0; k * k];
    if q <= p {
        // AᵀA
        for row in 0..p {
            let r = &data[row * q..(row + 1) * q];
            for i in 0..k {
                for j in i..k {
                    gram[i * k + j] += r[i] * r[j];
                }
            }
        }
    } else {
        // AAᵀ
        for i in 0..k {
            let ri = &data[i * q..(i + 1) * q];
            for j in i..k {
                let rj = &data[j * q..(j + 1) * q];
                gram[i * k + j] += crate::tensor::kernels::dot(ri, rj);
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            gram[i * k + j] = gram[j * k + i];
        }
    }
    let mut eig = jacobi_eigenvalues(&mut gram, k);
    eig.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    // numerical-rank floor: Gram eigenvalues below k·eps·λ_max are rotation
    // noise and would surface as √eps ghosts after the square root
    let floor = eig.first().copied().unwrap_or(0.0).max(0.0) * k as f64 * f64::EPSILON;
    eig.into_iter()
        .map(|l| if l <= floor { 0.0 } else { l.sqrt() })
        .collect()
}

/// Eigenvalues of a symmetric k×k matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(a: &mut [f64], k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![a[0]];
    }
    let fro: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = (fro * 1e-15).max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..k - 1 {
            for q in p + 1..k {
                off += a[p * k + q].abs();
                let apq = a[p * k + q];
                if apq.abs() <= tol {
                    continue;
                }
                let (app, aqq) = (a[p * k + p], a[q * k + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..k {
                    let (aip, aiq) = (a[i * k + p], a[i * k + q]);
                    a[i * k + p] = c * aip - s * aiq;
                    a[i * k + q] = s * aip + c * aiq;
                }
                for i in 0..k {
                    let (api, aqi) = (a[p * k + i], a[q * k + i]);
                    a[p * k + i] = c * api - s * aqi;
                    a[q * k + i] = s * api + c * aqi;
                }
            }
        }
        if off <= tol * k as f64 {
            break;
        }
    }
    (0..k).map(|i| a[i * k + i]).collect()
}

/// Full thin SVD by one-sided Jacobi: A = U·diag(s)·Vᵀ with U p×k, V q×k,
/// k = min(p, q), singular values descending.
pub fn svd_factor(data: &[f64], p: usize, q: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert_eq!(data.len(), p * q);
    // Work on the tall orientation so columns are orthogonalized.
    let transposed = p < q;
    let (rows, cols) = if transposed { (q, p) } else { (p, q) };
    // column-major work matrix
    let mut u = vec![0.0; rows * cols];
    for i in 0..p {
        for j in 0..q {
            let v = data[i * q + j];
            if transposed {
                u[i * rows + j] = v; // column i holds row i of A
            } else {
                u[j * rows + i] = v;
            }
        }
    }
    let mut vmat = vec![0.0; cols * cols];
    for i in 0..cols {
        vmat[i * cols + i] = 1.0;
    }
    let eps = 1e-30;
    for _sweep in 0..60 {
        let mut rotated = false;
        for c1 in 0..cols - 1 {
            for c2 in c1 + 1..cols {
                let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    let (x, y) = (u[c1 * rows + r], u[c2 * rows + r]);
                    a += x * x;
                    b += y * y;
                    d += x * y;
                }
                if d * d <= 1e-30 * a * b || d.abs() <= eps {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * d);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (u[c1 * rows + r], u[c2 * rows + r]);
                    u[c1 * rows + r] = c * x - s * y;
                    u[c2 * rows + r] = s * x + c * y;
                }
                for r in 0..cols {
                    let (x, y) = (vmat[c1 * cols + r], vmat[c2 * cols + r]);
                    vmat[c1 * cols + r] = c * x - s * y;
                    vmat[c2 * cols + r] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    // Normalize columns into singular values.
    let mut order: Vec<usize> = (0..cols).collect();
    let mut sigma = vec![0.0; cols];
    for c in 0..cols {
        sigma[c] = (0..rows).map(|r| u[c * rows + r] * u[c * rows + r]).sum::<f64>().sqrt();
        if sigma[c] > f64::MIN_POSITIVE {
            for r in 0..rows {
                u[c * rows + r] /= sigma[c];
            }
        }
    }
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite"));

    // Emit row-major U (p×k), V (q×k) honoring the original orientation.
    let k = cols;
    let mut uu = vec![0.0; p * k];
    let mut vv = vec![0.0; q * k];
    let mut ss = vec![0.0; k];
    for (out_c, &c) in order.iter().enumerate() {
        ss[out_c] = sigma[c];
        for r in 0..rows {
            // work U is (rows×cols) column-major: left vectors of the tall side
            let val = u[c * rows + r];
            if transposed {
                vv[r * k + out_c] = val;
            } else {
                uu[r * k + out_c] = val;
            }
        }
        for r in 0..cols {
            let val = vmat[c * cols + r];
            if transposed {
                uu[r * k + out_c] = val;
            } else {
                vv[r * k + out_c] = val;
            }
        }
    }
    (uu, ss, vv)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdCount {
    pub threshold: f64,
    pub count: usize,
    pub total: usize,
    /// "k/q = p%" rendering.
    pub display: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub schema: String,
    pub matrix: String,
    pub singular_values: Vec<f64>,
    /// Values divided by the largest.
    pub normalized: Vec<f64>,
    pub counts: Vec<ThresholdCount>,
}

/// Spectrum of one matrix with normalized-threshold counts.
pub fn spectrum_of(name: &str, data: &[f64], p: usize, q: usize, thresholds: &[f64]) -> SpectrumReport {
    let sv = svd_values(data, p, q);
    let top = sv.first().copied().unwrap_or(0.0);
    let normalized: Vec<f64> = if top > 0.0 { sv.iter().map(|v| v / top).collect() } else { sv.clone() };
    let total = sv.len();
    let counts = thresholds
        .iter()
        .map(|&th| {
            let count = normalized.iter().filter(|&&v| v > th).count();
            let pct = (100.0 * count as f64 / total as f64).round() as usize;
            ThresholdCount { threshold: th, count, total, display: format!("{count}/{total} = {pct}%") }
        })
        .collect();
    SpectrumReport { schema: "v1".into(), matrix: name.to_string(), singular_values: sv, normalized, counts }
}

/// One report per checkpoint matrix whose path matches `selector`.
/// 1-D tensors (biases, norms) are skipped.
pub fn spectrum_report(
    ckpt: &Checkpoint,
    selector: &str,
    thresholds: &[f64],
) -> Result<Vec<SpectrumReport>, SpectraError> {
    let re = Regex::new(selector)?;
    let mut out = Vec::new();
    for t in &ckpt.tensors {
        if t.shape.len() == 2 && re.is_match(&t.name) {
            out.push(spectrum_of(&t.name, &t.data, t.shape[0], t.shape[1], thresholds));
        }
    }
    if out.is_empty() {
        return Err(SpectraError::EmptySelection(selector.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncatedMatrix {
    pub matrix: String,
    pub kept_rank: usize,
    pub full_rank: usize,
    pub params_before: usize,
    pub params_after: usize,
    /// ‖W − W_r‖_F / ‖W‖_F
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationReport {
    pub schema: String,
    pub threshold: f64,
    pub matrices: Vec<TruncatedMatrix>,
    pub params_before: usize,
    pub params_after: usize,
}

/// Offline low-rank transform: every selected matrix is cut per-matrix at
/// normalized σ > `threshold` and stored as two factors
/// (`<name>.lowrank.u` = U_r·diag(σ_r), `<name>.lowrank.v` = Vᵀ_r).
/// Unselected tensors pass through. The factored file is a storage artifact,
/// not a loadable encoder.
pub fn truncate_checkpoint(
    ckpt: &Checkpoint,
    selector: &str,
    threshold: f64,
) -> Result<(Checkpoint, TruncationReport), SpectraError> {
    let re = Regex::new(selector)?;
    let mut tensors = Vec::new();
    let mut matrices = Vec::new();
    let (mut before_total, mut after_total) = (0usize, 0usize);
    let mut matched = false;
    for t in &ckpt.tensors {
        before_total += t.data.len();
        if t.shape.len() == 2 && re.is_match(&t.name) {
            matched = true;
            let (p, q) = (t.shape[0], t.shape[1]);
            let (u, s, v) = svd_factor(&t.data, p, q);
            let top = s.first().copied().unwrap_or(0.0);
            let k = s.len();
            let rank = if top > 0.0 { s.iter().filter(|&&x| x / top > threshold).count().max(1) } else { 1 };
            // A = U_r diag(s_r), B = V_rᵀ
            let mut a = vec![0.0; p * rank];
            for i in 0..p {
                for j in 0..rank {
                    a[i * rank + j] = u[i * k + j] * s[j];
                }
            }
            let mut b = vec![0.0; rank * q];
            for i in 0..rank {
                for j in 0..q {
                    b[i * q + j] = v[j * k + i];
                }
            }
            // reconstruction error from the discarded tail
            let total_sq: f64 = s.iter().map(|x| x * x).sum();
            let tail_sq: f64 = s[rank..].iter().map(|x| x * x).sum();
            let err = if total_sq > 0.0 { (tail_sq / total_sq).sqrt() } else { 0.0 };
            let params_after = rank * (p + q);
            after_total += params_after;
            matrices.push(TruncatedMatrix {
                matrix: t.name.clone(),
                kept_rank: rank,
                full_rank: k,
                params_before: p * q,
                params_after,
                reconstruction_error: err,
            });
            tensors.push(NamedTensor { name: format!("{}.lowrank.u", t.name), shape: vec![p, rank], data: a });
            tensors.push(NamedTensor { name: format!("{}.lowrank.v", t.name), shape: vec![rank, q], data: b });
        } else {
            after_total += t.data.len();
            tensors.push(t.clone());
        }
    }
    if !matched {
        return Err(SpectraError::EmptySelection(selector.to_string()));
    }
    let out = Checkpoint { config: ckpt.config.clone(), hash_table: ckpt.hash_table.clone(), tensors };
    let report = TruncationReport {
        schema: "v1".into(),
        threshold,
        matrices,
        params_before: before_total,
        params_after: after_total,
    };
    Ok((out, report))
}
