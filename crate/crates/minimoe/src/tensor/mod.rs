//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Ops push a
//! new node recording their inputs; [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into every node that (transitively)
//! depends on a `requires_grad` leaf. Accumulation order is fixed, so a
//! seeded run is bit-reproducible.
//!
//! Tensors are immutable once created; a tape is single-threaded. Training
//! code builds a fresh tape per step and harvests leaf gradients afterwards.

pub mod kernels;

use thiserror::Error;

/// Clamp floor for log arguments in KL divergence.
pub const KL_EPS: f64 = 1e-12;
/// Layer norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Row-sum slack accepted by `kl_div_rows` before declaring a contract breach.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{side} row {row} of kl_div_rows sums to {sum}, not 1")]
    NotStochastic {
        side: &'static str,
        row: usize,
        sum: f64,
    },
}

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// One tape node: value plus the op that produced it.
#[derive(Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    /// a[n×k] · b[m×k]ᵀ
    MatmulBt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    SoftmaxRows { a: usize, valid: usize },
    Gelu { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    KlDivRows { p: usize, q: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    /// zeros(out_rows×d); out[idx[r]] += src[r] * scale[r] (scale optional)
    ScatterScaledRows { src: usize, idx: Vec<usize>, scale: Option<usize> },
    GatherScalars { a: usize, flat: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    MeanAll { a: usize },
    SumAll { a: usize },
    MeanCols { a: usize },
    /// Σ_j a[j]·w[j] with constant weights.
    WeightedSumConst { a: usize, w: Vec<f64> },
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
    /// Elementwise product with a constant 0-or-1/keep mask.
    MulConstMask { a: usize, mask: Vec<f64> },
}

/// Reverse-mode tape. See the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![1])
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected 1-D or 2-D tensor, got shape {:?}", s),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (n, k) = self.rows_cols(a);
        let (k2, m) = self.rows_cols(b);
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        kernels::mm(&mut out, self.data(a), self.data(b), n, k, m, false);
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, vec![n, m], rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// a[n×k] · b[m×k]ᵀ → [n×m]
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (n, k) = self.rows_cols(a);
        let (m, k2) = self.rows_cols(b);
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul_bt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        kernels::mm_a_bt(&mut out, self.data(a), self.data(b), n, k, m, false);
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, vec![n, m], rg, Op::MatmulBt { a: a.0, b: b.0 }))
    }

    fn zip_op(&mut self, a: TensorId, b: TensorId, name: &'static str) -> (Vec<f64>, Vec<usize>, bool) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{name}: shape {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a.0) || self.needs(b.0);
        (Vec::with_capacity(self.data(a).len()), shape, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (mut out, shape, rg) = self.zip_op(a, b, "add");
        out.extend(self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y));
        self.push(out, shape, rg, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (mut out, shape, rg) = self.zip_op(a, b, "sub");
        out.extend(self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y));
        self.push(out, shape, rg, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (mut out, shape, rg) = self.zip_op(a, b, "mul");
        out.extend(self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y));
        self.push(out, shape, rg, Op::Mul { a: a.0, b: b.0 })
    }

    /// Row-broadcast bias add: [n×d] + [d].
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (n, d) = self.rows_cols(a);
        assert_eq!(self.nodes[bias.0].numel(), d, "add_bias width mismatch");
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = &self.data(a)[r * d..(r + 1) * d];
            out.extend(row.iter().zip(self.data(bias)).map(|(x, y)| x + y));
        }
        let rg = self.needs(a.0) || self.needs(bias.0);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, rg, Op::AddBias { a: a.0, bias: bias.0 })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a.0);
        self.push(out, shape, rg, Op::Scale { a: a.0, c })
    }

    /// Row-wise softmax with max-subtraction. Rows sum to 1 for any finite input.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (_, m) = self.rows_cols(a);
        self.softmax_rows_masked(a, m)
    }

    /// Softmax over the first `valid` columns of each row; remaining columns
    /// come out exactly 0.
    pub fn softmax_rows_masked(&mut self, a: TensorId, valid: usize) -> TensorId {
        let (n, m) = self.rows_cols(a);
        assert!(valid >= 1 && valid <= m, "softmax valid columns {valid} out of 1..={m}");
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &self.data(a)[r * m..r * m + valid];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * m..r * m + valid];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                let e = (x - mx).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a.0);
        self.push(out, shape, rg, Op::SoftmaxRows { a: a.0, valid })
    }

    /// Exact-CDF GELU: x · Φ(x) with Φ the standard normal CDF.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * phi(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a.0);
        self.push(out, shape, rg, Op::Gelu { a: a.0 })
    }

    /// Per-row layer norm (population variance, eps 1e-5) followed by a
    /// `gain`/`bias` affine over the feature axis.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        let (n, d) = self.rows_cols(a);
        assert_eq!(self.nodes[gain.0].numel(), d, "layer_norm gain width");
        assert_eq!(self.nodes[bias.0].numel(), d, "layer_norm bias width");
        let mut out = vec![0.0; n * d];
        let mut means = vec![0.0; n];
        let mut rstds = vec![0.0; n];
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        for r in 0..n {
            let row = &self.data(a)[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            out,
            shape,
            rg,
            Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0, mean: means, rstd: rstds },
        )
    }

    /// Mean over rows of Σ_j p·(log p − log q). `p` is a detached target:
    /// gradient flows to `q` only. Terms with p = 0 contribute 0.
    pub fn kl_div_rows(&mut self, p: TensorId, q: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(p) != self.shape(q) {
            return Err(TensorError::DimMismatch {
                op: "kl_div_rows",
                lhs: self.shape(p).to_vec(),
                rhs: self.shape(q).to_vec(),
            });
        }
        let (n, m) = self.rows_cols(p);
        for (side, id) in [("p", p), ("q", q)] {
            for r in 0..n {
                let sum: f64 = self.data(id)[r * m..(r + 1) * m].iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(TensorError::NotStochastic { side, row: r, sum });
                }
            }
        }
        let mut acc = 0.0;
        for r in 0..n {
            let prow = &self.data(p)[r * m..(r + 1) * m];
            let qrow = &self.data(q)[r * m..(r + 1) * m];
            for (&pv, &qv) in prow.iter().zip(qrow) {
                if pv > 0.0 {
                    acc += pv * (pv.max(KL_EPS).ln() - qv.max(KL_EPS).ln());
                }
            }
        }
        let rg = self.needs(q.0);
        Ok(self.push(vec![acc / n as f64], vec![1], rg, Op::KlDivRows { p: p.0, q: q.0 }))
    }

    /// out[r] = a[idx[r]] for whole rows. Indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let (n, d) = self.rows_cols(a);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            assert!(r < n, "gather_rows index {r} out of {n} rows");
            out.extend_from_slice(&self.data(a)[r * d..(r + 1) * d]);
        }
        let rg = self.needs(a.0);
        self.push(
            out,
            vec![idx.len(), d],
            rg,
            Op::GatherRows { a: a.0, idx: idx.to_vec() },
        )
    }

    /// Builds a zero [out_rows × d] tensor and adds `src[r] * scale[r]` into
    /// row `idx[r]`. `scale` (length = src rows) participates in the gradient.
    pub fn scatter_scaled_rows(
        &mut self,
        src: TensorId,
        idx: &[usize],
        scale: Option<TensorId>,
        out_rows: usize,
    ) -> TensorId {
        let (t, d) = self.rows_cols(src);
        assert_eq!(idx.len(), t, "scatter_scaled_rows index count");
        if let Some(s) = scale {
            assert_eq!(self.nodes[s.0].numel(), t, "scatter_scaled_rows scale length");
        }
        let mut out = vec![0.0; out_rows * d];
        for (r, &dst) in idx.iter().enumerate() {
            assert!(dst < out_rows);
            let s = scale.map_or(1.0, |sid| self.data(sid)[r]);
            let srow = &self.data(src)[r * d..(r + 1) * d];
            let orow = &mut out[dst * d..(dst + 1) * d];
            for (o, &v) in orow.iter_mut().zip(srow) {
                *o += v * s;
            }
        }
        let rg = self.needs(src.0) || scale.map_or(false, |s| self.needs(s.0));
        self.push(
            out,
            vec![out_rows, d],
            rg,
            Op::ScatterScaledRows { src: src.0, idx: idx.to_vec(), scale: scale.map(|s| s.0) },
        )
    }

    /// out[t] = a.data[flat[t]] — picks individual elements by flat index.
    pub fn gather_scalars(&mut self, a: TensorId, flat: &[usize]) -> TensorId {
        let out: Vec<f64> = flat.iter().map(|&i| self.data(a)[i]).collect();
        let rg = self.needs(a.0);
        self.push(out, vec![flat.len()], rg, Op::GatherScalars { a: a.0, flat: flat.to_vec() })
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (n, d) = self.rows_cols(a);
        assert!(start + len <= n, "slice_rows {start}+{len} out of {n}");
        let out = self.data(a)[start * d..(start + len) * d].to_vec();
        let rg = self.needs(a.0);
        self.push(out, vec![len, d], rg, Op::SliceRows { a: a.0, start })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, width: usize) -> TensorId {
        let (n, d) = self.rows_cols(a);
        assert!(start + width <= d, "slice_cols {start}+{width} out of {d}");
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&self.data(a)[r * d + start..r * d + start + width]);
        }
        let rg = self.needs(a.0);
        self.push(out, vec![n, width], rg, Op::SliceCols { a: a.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let n = self.rows_cols(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.rows_cols(p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let (pn, pd) = self.rows_cols(p);
                assert_eq!(pn, n, "concat_cols row mismatch");
                out.extend_from_slice(&self.data(p)[r * pd..(r + 1) * pd]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p.0));
        self.push(out, vec![n, total], rg, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let d = self.rows_cols(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pn, pd) = self.rows_cols(p);
            assert_eq!(pd, d, "concat_rows width mismatch");
            rows += pn;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p.0));
        self.push(out, vec![rows, d], rg, Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].numel();
        let v = self.data(a).iter().sum::<f64>() / n as f64;
        let rg = self.needs(a.0);
        self.push(vec![v], vec![1], rg, Op::MeanAll { a: a.0 })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = self.data(a).iter().sum::<f64>();
        let rg = self.needs(a.0);
        self.push(vec![v], vec![1], rg, Op::SumAll { a: a.0 })
    }

    /// Column means of an [n×m] tensor → [m].
    pub fn mean_cols(&mut self, a: TensorId) -> TensorId {
        let (n, m) = self.rows_cols(a);
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&self.data(a)[r * m..(r + 1) * m]) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        let rg = self.needs(a.0);
        self.push(out, vec![m], rg, Op::MeanCols { a: a.0 })
    }

    /// Σ_j a[j]·w[j] with constant weights w.
    pub fn weighted_sum_const(&mut self, a: TensorId, w: &[f64]) -> TensorId {
        assert_eq!(self.nodes[a.0].numel(), w.len(), "weighted_sum_const length");
        let v: f64 = self.data(a).iter().zip(w).map(|(x, y)| x * y).sum();
        let rg = self.needs(a.0);
        self.push(vec![v], vec![1], rg, Op::WeightedSumConst { a: a.0, w: w.to_vec() })
    }

    /// Mean over rows of −log softmax(logits)[target].
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let (n, m) = self.rows_cols(logits);
        assert_eq!(targets.len(), n, "cross_entropy_rows target count");
        let mut acc = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < m, "target {t} out of {m} classes");
            let row = &self.data(logits)[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            acc += lse - row[t];
        }
        let rg = self.needs(logits.0);
        self.push(
            vec![acc / n as f64],
            vec![1],
            rg,
            Op::CrossEntropyRows { logits: logits.0, targets: targets.to_vec() },
        )
    }

    /// Elementwise product with a constant mask (dropout and similar).
    pub fn mul_const_mask(&mut self, a: TensorId, mask: Vec<f64>) -> TensorId {
        assert_eq!(self.nodes[a.0].numel(), mask.len(), "mul_const_mask length");
        let out: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a.0);
        self.push(out, shape, rg, Op::MulConstMask { a: a.0, mask })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Backpropagates from a scalar node, accumulating into `grad` of every
    /// node on the path to a `requires_grad` leaf.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss.0].numel(), 1, "backward starts from a scalar");
        let n = self.nodes.len();
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..n).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().expect("grad present");
            propagate(node, g, before);
        }
    }
}

// Sized from the shape: backward ops may have temporarily moved `data` out.
fn ensure_grad(node: &mut Tensor) -> &mut [f64] {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.shape.iter().product()]);
    }
    node.grad.as_mut().expect("just set").as_mut_slice()
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn propagate(node: &Tensor, g: &[f64], before: &mut [Tensor]) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (n, k) = shape2(&before[*a]);
            let m = node.shape[1];
            if before[*a].requires_grad {
                // dA = g · Bᵀ
                let bdata = std::mem::take(&mut before[*b].data);
                kernels::mm_a_bt(ensure_grad(&mut before[*a]), g, &bdata, n, m, k, true);
                before[*b].data = bdata;
            }
            if before[*b].requires_grad {
                // dB = Aᵀ · g
                let adata = std::mem::take(&mut before[*a].data);
                kernels::mm_at_b(ensure_grad(&mut before[*b]), &adata, g, n, k, m, true);
                before[*a].data = adata;
            }
        }
        Op::MatmulBt { a, b } => {
            let (n, k) = shape2(&before[*a]);
            let m = node.shape[1];
            if before[*a].requires_grad {
                // C = A·Bᵀ ⇒ dA = g · B
                let bdata = std::mem::take(&mut before[*b].data);
                kernels::mm(ensure_grad(&mut before[*a]), g, &bdata, n, m, k, true);
                before[*b].data = bdata;
            }
            if before[*b].requires_grad {
                // dB = gᵀ · A
                let adata = std::mem::take(&mut before[*a].data);
                kernels::mm_at_b(ensure_grad(&mut before[*b]), g, &adata, n, m, k, true);
                before[*a].data = adata;
            }
        }
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if before[id].requires_grad {
                    kernels::axpy1(ensure_grad(&mut before[id]), g);
                }
            }
        }
        Op::Sub { a, b } => {
            if before[*a].requires_grad {
                kernels::axpy1(ensure_grad(&mut before[*a]), g);
            }
            if before[*b].requires_grad {
                let gb = ensure_grad(&mut before[*b]);
                for (o, &v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            }
        }
        Op::Mul { a, b } => {
            if before[*a].requires_grad {
                let bdata = std::mem::take(&mut before[*b].data);
                let ga = ensure_grad(&mut before[*a]);
                for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(&bdata) {
                    *o += gv * bv;
                }
                before[*b].data = bdata;
            }
            if before[*b].requires_grad {
                let adata = std::mem::take(&mut before[*a].data);
                let gb = ensure_grad(&mut before[*b]);
                for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(&adata) {
                    *o += gv * av;
                }
                before[*a].data = adata;
            }
        }
        Op::AddBias { a, bias } => {
            let d = node.shape[1];
            if before[*a].requires_grad {
                kernels::axpy1(ensure_grad(&mut before[*a]), g);
            }
            if before[*bias].requires_grad {
                let gb = ensure_grad(&mut before[*bias]);
                for row in g.chunks_exact(d) {
                    kernels::axpy1(gb, row);
                }
            }
        }
        Op::Scale { a, c } => {
            if before[*a].requires_grad {
                let ga = ensure_grad(&mut before[*a]);
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv * c;
                }
            }
        }
        Op::SoftmaxRows { a, valid } => {
            if before[*a].requires_grad {
                let m = node.shape[1];
                let s = &node.data;
                let ga = ensure_grad(&mut before[*a]);
                for r in 0..node.shape[0] {
                    let srow = &s[r * m..r * m + valid];
                    let grow = &g[r * m..r * m + valid];
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    let orow = &mut ga[r * m..r * m + valid];
                    for j in 0..*valid {
                        orow[j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if before[*a].requires_grad {
                let adata = std::mem::take(&mut before[*a].data);
                let ga = ensure_grad(&mut before[*a]);
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(&adata) {
                    *o += gv * (phi(x) + x * pdf(x));
                }
                before[*a].data = adata;
            }
        }
        Op::LayerNorm { a, gain, bias, mean, rstd } => {
            let d = node.shape[1];
            let rows = node.shape[0];
            let adata = std::mem::take(&mut before[*a].data);
            let gdata = std::mem::take(&mut before[*gain].data);
            for r in 0..rows {
                let grow = &g[r * d..(r + 1) * d];
                let xrow = &adata[r * d..(r + 1) * d];
                let (mu, rs) = (mean[r], rstd[r]);
                if before[*gain].requires_grad {
                    let gg = ensure_grad(&mut before[*gain]);
                    for j in 0..d {
                        gg[j] += grow[j] * (xrow[j] - mu) * rs;
                    }
                }
                if before[*bias].requires_grad {
                    kernels::axpy1(ensure_grad(&mut before[*bias]), grow);
                }
                if before[*a].requires_grad {
                    // dxhat = g∘gain; dx = rs/d · (d·dxhat − Σdxhat − xhat·Σ(dxhat∘xhat))
                    let mut sum_dx = 0.0;
                    let mut sum_dx_xhat = 0.0;
                    for j in 0..d {
                        let dxh = grow[j] * gdata[j];
                        let xh = (xrow[j] - mu) * rs;
                        sum_dx += dxh;
                        sum_dx_xhat += dxh * xh;
                    }
                    let ga = ensure_grad(&mut before[*a]);
                    let df = d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gdata[j];
                        let xh = (xrow[j] - mu) * rs;
                        ga[r * d + j] += rs / df * (df * dxh - sum_dx - xh * sum_dx_xhat);
                    }
                }
            }
            before[*a].data = adata;
            before[*gain].data = gdata;
        }
        Op::KlDivRows { p, q } => {
            if before[*q].requires_grad {
                let (n, m) = shape2(&before[*p]);
                let pdata = std::mem::take(&mut before[*p].data);
                let qdata = std::mem::take(&mut before[*q].data);
                let gq = ensure_grad(&mut before[*q]);
                let scale = g[0] / n as f64;
                for i in 0..n * m {
                    let (pv, qv) = (pdata[i], qdata[i]);
                    if pv > 0.0 && qv > KL_EPS {
                        gq[i] -= scale * pv / qv;
                    }
                }
                before[*p].data = pdata;
                before[*q].data = qdata;
            }
        }
        Op::GatherRows { a, idx } => {
            if before[*a].requires_grad {
                let d = node.shape[1];
                let ga = ensure_grad(&mut before[*a]);
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy1(&mut ga[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ScatterScaledRows { src, idx, scale } => {
            let d = node.shape[1];
            let sdata = std::mem::take(&mut before[*src].data);
            if before[*src].requires_grad {
                let svals: Vec<f64> = match scale {
                    Some(sid) => idx.iter().enumerate().map(|(r, _)| before[*sid].data[r]).collect(),
                    None => vec![1.0; idx.len()],
                };
                let gs = ensure_grad(&mut before[*src]);
                for (r, &dst) in idx.iter().enumerate() {
                    let grow = &g[dst * d..(dst + 1) * d];
                    let orow = &mut gs[r * d..(r + 1) * d];
                    for (o, &gv) in orow.iter_mut().zip(grow) {
                        *o += gv * svals[r];
                    }
                }
            }
            if let Some(sid) = scale {
                if before[*sid].requires_grad {
                    let gsc = ensure_grad(&mut before[*sid]);
                    for (r, &dst) in idx.iter().enumerate() {
                        let grow = &g[dst * d..(dst + 1) * d];
                        let srow = &sdata[r * d..(r + 1) * d];
                        gsc[r] += kernels::dot(grow, srow);
                    }
                }
            }
            before[*src].data = sdata;
        }
        Op::GatherScalars { a, flat } => {
            if before[*a].requires_grad {
                let ga = ensure_grad(&mut before[*a]);
                for (t, &i) in flat.iter().enumerate() {
                    ga[i] += g[t];
                }
            }
        }
        Op::SliceRows { a, start } => {
            if before[*a].requires_grad {
                let d = node.shape[1];
                let ga = ensure_grad(&mut before[*a]);
                kernels::axpy1(&mut ga[start * d..start * d + g.len()], g);
            }
        }
        Op::SliceCols { a, start } => {
            if before[*a].requires_grad {
                let w = node.shape[1];
                let d = before[*a].shape[1];
                let ga = ensure_grad(&mut before[*a]);
                for r in 0..node.shape[0] {
                    kernels::axpy1(&mut ga[r * d + start..r * d + start + w], &g[r * w..(r + 1) * w]);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let n = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for &p in parts {
                let w = before[p].shape[1];
                if before[p].requires_grad {
                    let gp = ensure_grad(&mut before[p]);
                    for r in 0..n {
                        kernels::axpy1(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = before[p].data.len();
                if before[p].requires_grad {
                    kernels::axpy1(ensure_grad(&mut before[p]), &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::MeanAll { a } => {
            if before[*a].requires_grad {
                let inv = g[0] / before[*a].data.len() as f64;
                let ga = ensure_grad(&mut before[*a]);
                for o in ga.iter_mut() {
                    *o += inv;
                }
            }
        }
        Op::SumAll { a } => {
            if before[*a].requires_grad {
                let ga = ensure_grad(&mut before[*a]);
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::MeanCols { a } => {
            if before[*a].requires_grad {
                let (n, m) = shape2(&before[*a]);
                let inv = 1.0 / n as f64;
                let ga = ensure_grad(&mut before[*a]);
                for r in 0..n {
                    for j in 0..m {
                        ga[r * m + j] += g[j] * inv;
                    }
                }
            }
        }
        Op::WeightedSumConst { a, w } => {
            if before[*a].requires_grad {
                let ga = ensure_grad(&mut before[*a]);
                for (o, &wv) in ga.iter_mut().zip(w) {
                    *o += g[0] * wv;
                }
            }
        }
        Op::CrossEntropyRows { logits, targets } => {
            if before[*logits].requires_grad {
                let (n, m) = shape2(&before[*logits]);
                let ldata = std::mem::take(&mut before[*logits].data);
                let gl = ensure_grad(&mut before[*logits]);
                let scale = g[0] / n as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &ldata[r * m..(r + 1) * m];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    for j in 0..m {
                        let sm = (row[j] - mx).exp() / sum;
                        let tgt = if j == t { 1.0 } else { 0.0 };
                        gl[r * m + j] += scale * (sm - tgt);
                    }
                }
                before[*logits].data = ldata;
            }
        }
        Op::MulConstMask { a, mask } => {
            if before[*a].requires_grad {
                let ga = ensure_grad(&mut before[*a]);
                for ((o, &gv), &mv) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gv * mv;
                }
            }
        }
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    match t.shape.len() {
        1 => (1, t.shape[0]),
        2 => (t.shape[0], t.shape[1]),
        _ => panic!("expected 1-D or 2-D tensor"),
    }
}

#[cfg(test)]
mod tests;
