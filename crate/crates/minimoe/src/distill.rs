//! Task-agnostic relation-alignment distillation and task finetuning.
//!
//! Relation heads merge a block's packed Q (or K, V) projections and
//! re-split them into R contiguous chunks; each chunk's scaled, softmaxed
//! Gram matrix is an n×n row-stochastic relation. The student is trained to
//! match the teacher's relations under row-wise KL, teacher side detached.
//! Teacher and student may differ in width — relations share only (R, n).

use crate::corpus::{TaskDataset, Vocab, CLS, PAD};
use crate::model::{EncoderModel, Mode, ModelConfig, ModelError, Param, ParamKind, SeqBatch};
use crate::moe::{self, RoutingStats};
use crate::optim::{schedule_lr, AdamW, OptimizerConfig};
use crate::tensor::{Tape, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("relation sets differ: {0}")]
    RelationMismatch(String),
    #[error("hidden width {d} is not divisible by {r} relation heads")]
    RelationSplit { d: usize, r: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("teacher-assistant stage {stage} failed: {source}")]
    StageFailed { stage: usize, source: Box<DistillError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Per-head row-stochastic n×n relation matrices for Q, K and V, one group
/// per sequence in the batch.
pub struct RelationSet {
    pub q: Vec<TensorId>,
    pub k: Vec<TensorId>,
    pub v: Vec<TensorId>,
    pub heads: usize,
    pub seq_len: usize,
    pub batch: usize,
}

/// Builds relation heads from packed (batch·n)×d projections: merge the
/// original attention heads (already packed along the feature axis), split
/// into R chunks of width d/R, and softmax each chunk's scaled Gram matrix.
pub fn relation_heads(
    tape: &mut Tape,
    projections: (TensorId, TensorId, TensorId),
    r: usize,
    batch: usize,
    seq_len: usize,
) -> Result<RelationSet, DistillError> {
    let d = tape.shape(projections.0)[1];
    if r == 0 || d % r != 0 {
        return Err(DistillError::RelationSplit { d, r });
    }
    let d_r = d / r;
    let scale = 1.0 / (d_r as f64).sqrt();
    let rel = |proj: TensorId, tape: &mut Tape| -> Result<Vec<TensorId>, DistillError> {
        let mut heads = Vec::with_capacity(batch * r);
        for b in 0..batch {
            let rows = tape.slice_rows(proj, b * seq_len, seq_len);
            for j in 0..r {
                let chunk = tape.slice_cols(rows, j * d_r, d_r);
                let gram = tape.matmul_bt(chunk, chunk)?;
                let scaled = tape.scale(gram, scale);
                heads.push(tape.softmax_rows(scaled));
            }
        }
        Ok(heads)
    };
    Ok(RelationSet {
        q: rel(projections.0, tape)?,
        k: rel(projections.1, tape)?,
        v: rel(projections.2, tape)?,
        heads: r,
        seq_len,
        batch,
    })
}

/// Relation-alignment loss: KL(teacher ‖ student) summed over {Q, K, V} and
/// over the R heads, row-averaged inside each relation matrix and averaged
/// over the batch. Zero iff every relation matrix matches row-wise; the
/// teacher side is detached.
pub fn distill_loss(
    tape: &mut Tape,
    teacher: &RelationSet,
    student: &RelationSet,
) -> Result<TensorId, DistillError> {
    if teacher.heads != student.heads || teacher.seq_len != student.seq_len || teacher.batch != student.batch {
        return Err(DistillError::RelationMismatch(format!(
            "teacher (R={}, n={}, b={}) vs student (R={}, n={}, b={})",
            teacher.heads, teacher.seq_len, teacher.batch, student.heads, student.seq_len, student.batch
        )));
    }
    let mut total: Option<TensorId> = None;
    for (t_heads, s_heads) in [(&teacher.q, &student.q), (&teacher.k, &student.k), (&teacher.v, &student.v)] {
        for (&t, &s) in t_heads.iter().zip(s_heads.iter()) {
            let kl = tape.kl_div_rows(t, s)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, kl),
                None => kl,
            });
        }
    }
    let total = total.expect("at least one relation head");
    Ok(tape.scale(total, 1.0 / teacher.batch as f64))
}

/// One JSONL row of the distillation metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub schema: String,
    pub step: usize,
    pub loss_rel: f64,
    pub loss_balance: f64,
    pub lr: f64,
    pub f: Vec<f64>,
    pub dropped_frac: f64,
}

/// Schedule and loop sizing for one distillation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSettings {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub log_interval: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            steps: 2000,
            batch: 8,
            seq_len: 24,
            log_interval: 50,
            optimizer: OptimizerConfig::new(3e-4, 0.01),
        }
    }
}

/// Distillation plan: a teacher checkpoint, optional intermediate assistant
/// configs (each distilled from the previous stage's output), and the final
/// student. Mirrored in JSON for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillPlan {
    pub teacher: PathBuf,
    #[serde(default)]
    pub ta_configs: Vec<ModelConfig>,
    pub student: ModelConfig,
    #[serde(default)]
    pub settings: DistillSettings,
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub student: EncoderModel,
    pub metrics: Vec<MetricsRecord>,
    /// Relation-loss value at every step, for epoch-average diagnostics.
    pub step_losses: Vec<f64>,
}

fn validate_pair(teacher: &EncoderModel, student_cfg: &ModelConfig) -> Result<(), DistillError> {
    if teacher.config.relation_heads != student_cfg.relation_heads {
        return Err(DistillError::RelationMismatch(format!(
            "teacher has {} relation heads, student {}",
            teacher.config.relation_heads, student_cfg.relation_heads
        )));
    }
    if teacher.config.vocab_size != student_cfg.vocab_size {
        return Err(DistillError::InvalidPlan(format!(
            "teacher vocab {} != student vocab {}",
            teacher.config.vocab_size, student_cfg.vocab_size
        )));
    }
    if !student_cfg.has_aux_mha {
        return Err(DistillError::InvalidPlan(
            "students are distilled through an auxiliary MHA block; set has_aux_mha".into(),
        ));
    }
    Ok(())
}

fn merged_ffn_stats(records: &[crate::model::MoeRecord], experts: usize) -> RoutingStats {
    let mut merged = RoutingStats::new(experts);
    for rec in records {
        if rec.stats.dispatch_counts.len() == experts {
            merged.merge(&rec.stats);
        }
    }
    merged
}

/// Trains a randomly initialized student to align its relations with the
/// teacher's over raw corpus windows. The balance objective is added for
/// routed students. Returns the trained student and its metrics stream.
pub fn run_distillation(
    teacher: &EncoderModel,
    student_cfg: &ModelConfig,
    corpus: &str,
    vocab: &Vocab,
    settings: &DistillSettings,
    seed: u64,
) -> Result<DistillOutcome, DistillError> {
    validate_pair(teacher, student_cfg)?;
    let mut student = EncoderModel::init(student_cfg.clone(), seed)?;
    let windows = crate::corpus::make_windows(corpus, vocab, settings.seq_len);
    if windows.len() < settings.batch {
        return Err(DistillError::CorpusTooSmall(format!(
            "{} windows for batch {}",
            windows.len(),
            settings.batch
        )));
    }
    let mut stream = crate::corpus::MlmBatchStream::new(
        windows,
        vocab.size(),
        settings.batch,
        settings.seq_len,
        0.15,
        seed,
    );
    let mut dropout_rng = crate::rng::named_stream(seed, "distill/dropout");
    let sizes: Vec<usize> = student.params.params.iter().map(|p| p.data.len()).collect();
    let decay: Vec<bool> = student
        .params
        .params
        .iter()
        .map(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Embedding))
        .collect();
    let mut opt = AdamW::new(settings.optimizer.clone(), &sizes);
    let r = student.config.relation_heads;
    let experts = student.config.experts_ffn.max(student.config.experts_mha);
    let balance_on = student.config.is_moe() && student.config.router.balance_coeff > 0.0;

    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch = stream.next_batch(false);
        let seq = SeqBatch::new(&batch.tokens, None, &batch.lengths, settings.seq_len);

        let mut tape = Tape::new();
        let tb = teacher.bind(&mut tape, false);
        let sb = student.bind(&mut tape, true);
        let tout = teacher.encode(&mut tape, &tb, &seq, &mut Mode::Eval)?;
        let mut mode = Mode::Train { dropout_rng: &mut dropout_rng };
        let sout = student.encode(&mut tape, &sb, &seq, &mut mode)?;

        let tproj = tout.relations.ok_or_else(|| {
            DistillError::InvalidPlan("teacher exposes no relation source".into())
        })?;
        let sproj = sout.relations.expect("student has an aux block");
        let trel = relation_heads(&mut tape, tproj, r, seq.batch, seq.seq_len)?;
        let srel = relation_heads(&mut tape, sproj, r, seq.batch, seq.seq_len)?;
        let rel_loss = distill_loss(&mut tape, &trel, &srel)?;
        let rel_value = tape.value(rel_loss);

        let mut total = rel_loss;
        let mut balance_value = 0.0;
        if balance_on {
            for rec in &sout.routing {
                if let Some(probs) = rec.probs {
                    let b = moe::balance_loss(&mut tape, &rec.stats, probs, &student.config.router);
                    balance_value += tape.value(b);
                    total = tape.add(total, b);
                }
            }
        }
        if !tape.value(total).is_finite() {
            return Err(DistillError::Diverged { step });
        }
        tape.backward(total);
        let grads = sb.grads(&tape);
        drop(tape);

        let lr = schedule_lr(&settings.optimizer, step, settings.steps);
        opt.step(student.params.params.iter_mut().map(|p| &mut p.data), &grads, &decay, lr);

        step_losses.push(rel_value);
        if step % settings.log_interval == 0 || step + 1 == settings.steps {
            let stats = merged_ffn_stats(&sout.routing, experts);
            metrics.push(MetricsRecord {
                schema: "v1".into(),
                step,
                loss_rel: rel_value,
                loss_balance: balance_value,
                lr,
                f: stats.f(),
                dropped_frac: stats.dropped_frac(),
            });
        }
    }
    Ok(DistillOutcome { student, metrics, step_losses })
}

/// Folds `run_distillation` along teacher → TA₁ → … → student. Parameter
/// counts must strictly decrease along the chain. Every stage reuses the
/// same seed, so a one-TA chain reproduces two manual calls exactly.
pub fn run_ta_chain(
    teacher: &EncoderModel,
    plan: &DistillPlan,
    corpus: &str,
    vocab: &Vocab,
    seed: u64,
) -> Result<(EncoderModel, Vec<DistillOutcome>), DistillError> {
    let mut counts = vec![teacher.param_count()];
    for cfg in &plan.ta_configs {
        counts.push(crate::compute::count_params(cfg).total);
    }
    counts.push(crate::compute::count_params(&plan.student).total);
    for w in counts.windows(2) {
        if w[1] >= w[0] {
            return Err(DistillError::InvalidPlan(format!(
                "TA chain must strictly decrease in parameter count, got {} -> {}",
                w[0], w[1]
            )));
        }
    }

    let mut outcomes = Vec::new();
    let mut current = teacher.clone();
    let stages: Vec<&ModelConfig> = plan.ta_configs.iter().chain(std::iter::once(&plan.student)).collect();
    for (i, cfg) in stages.into_iter().enumerate() {
        let outcome = run_distillation(&current, cfg, corpus, vocab, &plan.settings, seed)
            .map_err(|e| DistillError::StageFailed { stage: i, source: Box::new(e) })?;
        current = outcome.student.clone();
        outcomes.push(outcome);
    }
    Ok((current, outcomes))
}

/// Finetuning grid and schedule (scaled-down published recipe: AdamW,
/// warmup 0.1, weight decay 0.01, dev-metric early stopping in epochs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub lr_grid: Vec<f64>,
    pub batch_grid: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seq_len: usize,
    /// False freezes the encoder body (head-only probing).
    pub train_body: bool,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            lr_grid: vec![1e-4, 2e-4, 3e-4],
            batch_grid: vec![16, 32],
            max_epochs: 10,
            patience: 5,
            seq_len: 24,
            train_body: true,
            weight_decay: 0.01,
            warmup_proportion: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub lr: f64,
    pub batch: usize,
    pub dev_accuracy: f64,
    pub epochs_ran: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub schema: String,
    pub best_dev_accuracy: f64,
    pub best_lr: f64,
    pub best_batch: usize,
    pub cells: Vec<CellResult>,
    /// Merged routing stats over the last dev evaluation, when the body
    /// routes tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing: Option<serde_json::Value>,
}

struct EncodedExample {
    tokens: Vec<u32>,
    segments: Vec<u8>,
    length: usize,
    label: usize,
}

fn encode_examples(
    task: &TaskDataset,
    vocab: &Vocab,
    seq_len: usize,
) -> Result<Vec<EncodedExample>, DistillError> {
    let mut out = Vec::with_capacity(task.examples.len());
    for ex in &task.examples {
        if ex.label >= task.num_classes {
            return Err(DistillError::LabelOutOfRange { label: ex.label, classes: task.num_classes });
        }
        let mut tokens = vec![CLS];
        let mut segments = vec![0u8];
        match ex.segment_lens {
            Some((a, _)) => {
                let budget = seq_len - 1;
                let take1 = a.min(budget / 2);
                let take2 = (ex.tokens.len() - a).min(budget - take1);
                for w in &ex.tokens[..take1] {
                    tokens.push(vocab.id(w));
                    segments.push(0);
                }
                for w in &ex.tokens[a..a + take2] {
                    tokens.push(vocab.id(w));
                    segments.push(1);
                }
            }
            None => {
                for w in ex.tokens.iter().take(seq_len - 1) {
                    tokens.push(vocab.id(w));
                    segments.push(0);
                }
            }
        }
        let length = tokens.len();
        tokens.resize(seq_len, PAD);
        segments.resize(seq_len, 0);
        out.push(EncodedExample { tokens, segments, length, label: ex.label });
    }
    Ok(out)
}

fn batch_views(examples: &[&EncodedExample], seq_len: usize) -> (Vec<u32>, Vec<u8>, Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::with_capacity(examples.len() * seq_len);
    let mut segments = Vec::with_capacity(examples.len() * seq_len);
    let mut lengths = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        tokens.extend_from_slice(&ex.tokens);
        segments.extend_from_slice(&ex.segments);
        lengths.push(ex.length);
        labels.push(ex.label);
    }
    (tokens, segments, lengths, labels)
}

/// Dev accuracy of a body+head pair and the routing stats of the pass.
fn evaluate(
    body: &EncoderModel,
    head_w: &Param,
    head_b: &Param,
    examples: &[&EncodedExample],
    seq_len: usize,
) -> Result<(f64, RoutingStats), DistillError> {
    let mut correct = 0usize;
    let experts = body.config.experts_ffn.max(body.config.experts_mha);
    let mut stats = RoutingStats::new(experts);
    for chunk in examples.chunks(64) {
        let (tokens, segments, lengths, labels) = batch_views(chunk, seq_len);
        let seq = SeqBatch::new(&tokens, Some(&segments), &lengths, seq_len);
        let mut tape = Tape::new();
        let bind = body.bind(&mut tape, false);
        let out = body.encode(&mut tape, &bind, &seq, &mut Mode::Eval)?;
        stats = {
            let mut merged = stats;
            for rec in &out.routing {
                if rec.stats.dispatch_counts.len() == experts {
                    merged.merge(&rec.stats);
                }
            }
            merged
        };
        let cls = EncoderModel::cls_rows(&seq);
        let h = tape.gather_rows(out.hidden, &cls);
        let w = tape.constant(head_w.data.clone(), head_w.shape.clone());
        let b = tape.constant(head_b.data.clone(), head_b.shape.clone());
        let logits0 = tape.matmul(h, w)?;
        let logits = tape.add_bias(logits0, b);
        let classes = head_w.shape[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &tape.data(logits)[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("non-empty row");
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / examples.len() as f64, stats))
}

/// Grid finetune with early stopping; reports the best dev accuracy. The
/// auxiliary alignment block is dropped before finetuning. With
/// `train_body: false` this is the frozen-body probe used as a baseline.
pub fn run_finetune(
    body: &EncoderModel,
    task: &TaskDataset,
    vocab: &Vocab,
    settings: &FinetuneSettings,
    seed: u64,
) -> Result<FinetuneReport, DistillError> {
    let base = body.strip_aux();
    let encoded = encode_examples(task, vocab, settings.seq_len)?;
    if encoded.is_empty() {
        return Err(DistillError::CorpusTooSmall("empty task dataset".into()));
    }
    // deterministic 80/20 split
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut split_rng = crate::rng::named_stream(seed, "finetune/split");
        order.shuffle(&mut split_rng);
    }
    let dev_count = (encoded.len() / 5).max(1);
    let (dev_idx, train_idx) = order.split_at(dev_count);
    let dev: Vec<&EncodedExample> = dev_idx.iter().map(|&i| &encoded[i]).collect();
    let train: Vec<&EncodedExample> = train_idx.iter().map(|&i| &encoded[i]).collect();
    let classes = task.num_classes;
    let d = base.config.hidden;
    let balance_on = base.config.is_moe()
        && base.config.router.balance_coeff > 0.0
        && base.config.router.balance_at_finetune();

    let mut cells = Vec::new();
    let mut best: Option<(f64, f64, usize, RoutingStats)> = None;
    for &lr in &settings.lr_grid {
        for &bsz in &settings.batch_grid {
            let mut model = base.clone();
            let mut head_rng = crate::rng::named_stream(seed, "finetune/head");
            let head_w = Param {
                name: "cls.head.w".into(),
                shape: vec![d, classes],
                data: (0..d * classes).map(|_| crate::rng::normal(&mut head_rng) * 0.02).collect(),
                kind: ParamKind::Weight,
            };
            let head_b = Param {
                name: "cls.head.b".into(),
                shape: vec![classes],
                data: vec![0.0; classes],
                kind: ParamKind::Bias,
            };
            let mut heads = vec![head_w, head_b];

            let steps_per_epoch = train.len().div_ceil(bsz);
            let total_steps = steps_per_epoch * settings.max_epochs;
            let mut opt_cfg = OptimizerConfig::new(lr, settings.warmup_proportion);
            opt_cfg.weight_decay = settings.weight_decay;
            let sizes: Vec<usize> = if settings.train_body {
                model
                    .params
                    .params
                    .iter()
                    .map(|p| p.data.len())
                    .chain(heads.iter().map(|p| p.data.len()))
                    .collect()
            } else {
                heads.iter().map(|p| p.data.len()).collect()
            };
            let decay: Vec<bool> = if settings.train_body {
                model
                    .params
                    .params
                    .iter()
                    .chain(heads.iter())
                    .map(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Embedding))
                    .collect()
            } else {
                heads
                    .iter()
                    .map(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Embedding))
                    .collect()
            };
            let mut opt = AdamW::new(opt_cfg.clone(), &sizes);
            let mut dropout_rng = crate::rng::named_stream(seed, &format!("finetune/dropout/{lr}/{bsz}"));
            let mut order_rng = crate::rng::named_stream(seed, &format!("finetune/order/{lr}/{bsz}"));

            let mut best_dev = 0.0f64;
            let mut best_stats = RoutingStats::new(base.config.experts_ffn.max(base.config.experts_mha));
            let mut since_best = 0usize;
            let mut epochs_ran = 0usize;
            let mut step = 0usize;
            'epochs: for _epoch in 0..settings.max_epochs {
                epochs_ran += 1;
                let mut idx: Vec<usize> = (0..train.len()).collect();
                {
                    use rand::seq::SliceRandom;
                    idx.shuffle(&mut order_rng);
                }
                for chunk in idx.chunks(bsz) {
                    let batch_refs: Vec<&EncodedExample> = chunk.iter().map(|&i| train[i]).collect();
                    let (tokens, segments, lengths, labels) = batch_views(&batch_refs, settings.seq_len);
                    let seq = SeqBatch::new(&tokens, Some(&segments), &lengths, settings.seq_len);
                    let mut tape = Tape::new();
                    let bind = model.bind(&mut tape, settings.train_body);
                    let mut mode = Mode::Train { dropout_rng: &mut dropout_rng };
                    let out = model.encode(&mut tape, &bind, &seq, &mut mode)?;
                    let cls = EncoderModel::cls_rows(&seq);
                    let h = tape.gather_rows(out.hidden, &cls);
                    let w = tape.leaf(heads[0].data.clone(), heads[0].shape.clone(), true);
                    let b = tape.leaf(heads[1].data.clone(), heads[1].shape.clone(), true);
                    let logits0 = tape.matmul(h, w)?;
                    let logits = tape.add_bias(logits0, b);
                    let mut loss = tape.cross_entropy_rows(logits, &labels);
                    if balance_on {
                        for rec in &out.routing {
                            if let Some(probs) = rec.probs {
                                let bl = moe::balance_loss(&mut tape, &rec.stats, probs, &model.config.router);
                                loss = tape.add(loss, bl);
                            }
                        }
                    }
                    if !tape.value(loss).is_finite() {
                        return Err(DistillError::Diverged { step });
                    }
                    tape.backward(loss);
                    let mut grads: Vec<Option<Vec<f64>>> = if settings.train_body {
                        bind.grads(&tape)
                    } else {
                        Vec::new()
                    };
                    grads.push(tape.grad(w).map(|g| g.to_vec()));
                    grads.push(tape.grad(b).map(|g| g.to_vec()));
                    drop(tape);

                    let lr_now = schedule_lr(&opt_cfg, step, total_steps);
                    if settings.train_body {
                        opt.step(
                            model.params.params.iter_mut().map(|p| &mut p.data).chain(heads.iter_mut().map(|p| &mut p.data)),
                            &grads,
                            &decay,
                            lr_now,
                        );
                    } else {
                        opt.step(heads.iter_mut().map(|p| &mut p.data), &grads, &decay, lr_now);
                    }
                    step += 1;
                }
                let (acc, stats) = evaluate(&model, &heads[0], &heads[1], &dev, settings.seq_len)?;
                if acc > best_dev {
                    best_dev = acc;
                    best_stats = stats;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= settings.patience {
                        break 'epochs;
                    }
                }
            }
            cells.push(CellResult { lr, batch: bsz, dev_accuracy: best_dev, epochs_ran });
            let better = match &best {
                Some((acc, _, _, _)) => best_dev > *acc,
                None => true,
            };
            if better {
                best = Some((best_dev, lr, bsz, best_stats));
            }
        }
    }
    let (acc, lr, bsz, stats) = best.expect("at least one grid cell");
    let routing = if base.config.is_moe() {
        Some(stats.diagnostics(base.config.router.balance_coeff))
    } else {
        None
    };
    Ok(FinetuneReport {
        schema: "v1".into(),
        best_dev_accuracy: acc,
        best_lr: lr,
        best_batch: bsz,
        cells,
        routing,
    })
}
