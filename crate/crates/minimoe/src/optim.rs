//! AdamW with warmup-then-linear-decay scheduling and global-norm clipping.

/// Training-schedule knobs shared by pretraining, distillation and finetuning.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64, warmup_proportion: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            warmup_proportion,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup to `lr` over `warmup_proportion * total`, then linear decay
/// to zero at `total` steps.
pub fn schedule_lr(cfg: &OptimizerConfig, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64) * cfg.warmup_proportion).ceil().max(1.0);
    let s = step as f64;
    if s < warmup {
        cfg.learning_rate * (s + 1.0) / warmup
    } else {
        let rest = (total as f64 - warmup).max(1.0);
        cfg.learning_rate * (1.0 - (s - warmup) / rest).max(0.0)
    }
}

/// One AdamW slot per parameter tensor.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update. `grads[i]` may be `None` when a parameter was off
    /// the loss path this step. `decay_mask[i]` disables weight decay for
    /// biases and norm parameters.
    pub fn step<'a, I>(&mut self, params: I, grads: &[Option<Vec<f64>>], decay_mask: &[bool], lr: f64)
    where
        I: IntoIterator<Item = &'a mut Vec<f64>>,
    {
        self.t += 1;

        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            for v in g {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };

        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay_mask[i] { self.cfg.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * p[j]);
            }
        }
        assert_eq!(count, grads.len(), "one gradient slot per parameter");
    }
}
