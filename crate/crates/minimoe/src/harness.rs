//! Experiment driver: seeded stages with manifests, sweeps over experts and
//! routing choices, and metrics emission.
//!
//! Every stage writes into `<out>/<stage-name>/` with a `manifest.json`
//! recording the config hash, seed, inputs and version. A stage whose
//! manifest already matches is skipped, so an interrupted experiment resumes
//! to identical outputs. All randomness flows from one experiment seed
//! through named streams.

use crate::checkpoint::Checkpoint;
use crate::corpus::{TaskDataset, TaskKind, Vocab};
use crate::distill::{
    run_distillation, run_finetune, run_ta_chain, DistillError, DistillPlan, DistillSettings,
    FinetuneReport, FinetuneSettings,
};
use crate::model::{EncoderModel, Mode, ModelConfig, ModelError, ParamKind, SeqBatch};
use crate::optim::{schedule_lr, AdamW, OptimizerConfig};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pretraining diverged at step {step}; best checkpoint retained")]
    Diverged { step: usize },
    #[error("unresolved stage input {0}")]
    Unresolved(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

pub fn version_string() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Eight hex chars of SHA-256 over (canonical config JSON, seed).
pub fn config_hash<T: Serialize>(config: &T, seed: u64) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("serializable config"));
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema: String,
    pub name: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// True when the stage already ran with this exact config hash and all of
/// its outputs are still present.
pub fn stage_complete(dir: &Path, hash: &str) -> bool {
    let Ok(bytes) = fs::read(manifest_path(dir)) else {
        return false;
    };
    let Ok(m) = serde_json::from_slice::<StageManifest>(&bytes) else {
        return false;
    };
    m.config_hash == hash && m.outputs.iter().all(|o| dir.join(o).exists())
}

fn write_manifest(dir: &Path, m: &StageManifest) -> Result<(), HarnessError> {
    let p = manifest_path(dir);
    fs::write(&p, serde_json::to_vec_pretty(m)?).map_err(io_err(&p))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for r in rows {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

// ── pretraining ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub vocab_max: usize,
    pub mask_prob: f64,
    pub eval_interval: usize,
    pub dev_windows: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            steps: 5000,
            batch: 8,
            seq_len: 24,
            vocab_max: 512,
            mask_prob: 0.15,
            eval_interval: 250,
            dev_windows: 64,
            optimizer: OptimizerConfig::new(3e-4, 0.01),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainRecord {
    pub schema: String,
    pub step: usize,
    pub loss_mlm: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
}

pub struct PretrainOutcome {
    /// Model with the lowest dev loss seen.
    pub best: EncoderModel,
    pub final_model: EncoderModel,
    pub metrics: Vec<PretrainRecord>,
    pub best_dev_loss: f64,
    /// Step at which the loss went non-finite, when it did.
    pub diverged_at: Option<usize>,
}

/// Masked-LM pretraining with a held-out dev split evaluated on a frozen
/// masking. On divergence the loop stops and the best model so far is kept.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &str,
    vocab: &Vocab,
    settings: &PretrainSettings,
    seed: u64,
) -> Result<PretrainOutcome, HarnessError> {
    let mut windows = crate::corpus::make_windows(corpus, vocab, settings.seq_len);
    if windows.len() < settings.batch + 1 {
        return Err(DistillError::CorpusTooSmall(format!("{} windows", windows.len())).into());
    }
    {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::named_stream(seed, "pretrain/devsplit");
        windows.shuffle(&mut rng);
    }
    let dev_count = settings.dev_windows.min(windows.len() / 10).max(1);
    let dev_windows: Vec<_> = windows.split_off(windows.len() - dev_count);

    // frozen dev batches: one pass with a dedicated masking stream
    let mut dev_stream = crate::corpus::MlmBatchStream::new(
        dev_windows.clone(),
        vocab.size(),
        dev_windows.len(),
        settings.seq_len,
        settings.mask_prob,
        seed ^ 0x5EED_DE11,
    );
    let dev_batch = dev_stream.next_batch(true);

    let mut stream = crate::corpus::MlmBatchStream::new(
        windows,
        vocab.size(),
        settings.batch,
        settings.seq_len,
        settings.mask_prob,
        seed,
    );

    let mut model = EncoderModel::init(config.clone(), seed)?;
    let sizes: Vec<usize> = model.params.params.iter().map(|p| p.data.len()).collect();
    let decay: Vec<bool> = model
        .params
        .params
        .iter()
        .map(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Embedding))
        .collect();
    let mut opt = AdamW::new(settings.optimizer.clone(), &sizes);
    let mut dropout_rng = crate::rng::named_stream(seed, "pretrain/dropout");

    let dev_loss = |m: &EncoderModel| -> Result<f64, HarnessError> {
        let seq = SeqBatch::new(&dev_batch.tokens, None, &dev_batch.lengths, dev_batch.seq_len);
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape, false);
        let out = m.encode(&mut tape, &bind, &seq, &mut Mode::Eval)?;
        let loss = m.mlm_loss(&mut tape, &bind, &out, &dev_batch.mask_positions, &dev_batch.targets)?;
        Ok(tape.value(loss))
    };

    let mut metrics = Vec::new();
    let mut best_dev = f64::INFINITY;
    let mut best = model.clone();
    let mut diverged_at = None;
    for step in 0..settings.steps {
        let batch = stream.next_batch(true);
        let seq = SeqBatch::new(&batch.tokens, None, &batch.lengths, batch.seq_len);
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, true);
        let mut mode = Mode::Train { dropout_rng: &mut dropout_rng };
        let out = model.encode(&mut tape, &bind, &seq, &mut mode)?;
        let loss = model.mlm_loss(&mut tape, &bind, &out, &batch.mask_positions, &batch.targets)?;
        let loss_value = tape.value(loss);
        if !loss_value.is_finite() {
            diverged_at = Some(step);
            break;
        }
        tape.backward(loss);
        let grads = bind.grads(&tape);
        drop(tape);
        let lr = schedule_lr(&settings.optimizer, step, settings.steps);
        opt.step(model.params.params.iter_mut().map(|p| &mut p.data), &grads, &decay, lr);

        let last = step + 1 == settings.steps;
        if step % settings.eval_interval == 0 || last {
            let dl = dev_loss(&model)?;
            if dl < best_dev {
                best_dev = dl;
                best = model.clone();
            }
            metrics.push(PretrainRecord {
                schema: "v1".into(),
                step,
                loss_mlm: loss_value,
                lr,
                dev_loss: Some(dl),
            });
        } else if step % 50 == 0 {
            metrics.push(PretrainRecord { schema: "v1".into(), step, loss_mlm: loss_value, lr, dev_loss: None });
        }
    }
    Ok(PretrainOutcome { best, final_model: model, metrics, best_dev_loss: best_dev, diverged_at })
}

// ── stages ───────────────────────────────────────────────────────────

pub struct StagePaths {
    pub dir: PathBuf,
    pub best_ckpt: PathBuf,
    pub vocab: PathBuf,
}

/// Pretraining stage: builds the shared vocabulary, trains a teacher, and
/// writes `best.ckpt`, `final.ckpt`, `vocab.txt` and `metrics.jsonl`.
pub fn cmd_pretrain(
    out_dir: &Path,
    name: &str,
    config: &ModelConfig,
    corpus_path: &Path,
    settings: &PretrainSettings,
    seed: u64,
) -> Result<StagePaths, HarnessError> {
    let dir = out_dir.join(name);
    let hash = config_hash(&(config, settings, "pretrain"), seed);
    let paths = StagePaths {
        best_ckpt: dir.join("best.ckpt"),
        vocab: dir.join("vocab.txt"),
        dir: dir.clone(),
    };
    if stage_complete(&dir, &hash) {
        return Ok(paths);
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let corpus = fs::read_to_string(corpus_path).map_err(io_err(corpus_path))?;
    let vocab = Vocab::build(&corpus, settings.vocab_max)?;
    let mut config = config.clone();
    config.vocab_size = vocab.size();
    vocab.save(&paths.vocab)?;

    let outcome = pretrain(&config, &corpus, &vocab, settings, seed)?;
    outcome.best.to_checkpoint().save(&paths.best_ckpt)?;
    outcome.final_model.to_checkpoint().save(&dir.join("final.ckpt"))?;
    write_jsonl(&dir.join("metrics.jsonl"), &outcome.metrics)?;
    write_manifest(
        &dir,
        &StageManifest {
            schema: "v1".into(),
            name: name.into(),
            kind: "pretrain".into(),
            config_hash: hash,
            seed,
            inputs: vec![corpus_path.display().to_string()],
            outputs: vec!["best.ckpt".into(), "final.ckpt".into(), "vocab.txt".into(), "metrics.jsonl".into()],
            version: version_string(),
        },
    )?;
    if let Some(step) = outcome.diverged_at {
        return Err(HarnessError::Diverged { step });
    }
    Ok(paths)
}

/// Distillation stage (with optional TA chain): writes `student.ckpt`,
/// `metrics.jsonl` and `routing.json`.
pub fn cmd_distill(
    out_dir: &Path,
    name: &str,
    plan: &DistillPlan,
    corpus_path: &Path,
    vocab_path: &Path,
    seed: u64,
) -> Result<PathBuf, HarnessError> {
    let dir = out_dir.join(name);
    let hash = config_hash(&(plan, "distill"), seed);
    let student_path = dir.join("student.ckpt");
    if stage_complete(&dir, &hash) {
        return Ok(student_path);
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let corpus = fs::read_to_string(corpus_path).map_err(io_err(corpus_path))?;
    let vocab = Vocab::load(vocab_path)?;
    let teacher = EncoderModel::from_checkpoint(&Checkpoint::load(&plan.teacher)?)?;

    // student configs are authored before the corpus vocabulary exists;
    // teacher and student always share the tokenizer
    let mut plan = plan.clone();
    plan.student.vocab_size = teacher.config.vocab_size;
    for ta in plan.ta_configs.iter_mut() {
        ta.vocab_size = teacher.config.vocab_size;
    }

    let (student, metrics) = if plan.ta_configs.is_empty() {
        let out = run_distillation(&teacher, &plan.student, &corpus, &vocab, &plan.settings, seed)?;
        (out.student, out.metrics)
    } else {
        let (student, outcomes) = run_ta_chain(&teacher, &plan, &corpus, &vocab, seed)?;
        let metrics = outcomes.into_iter().flat_map(|o| o.metrics).collect();
        (student, metrics)
    };
    student.to_checkpoint().save(&student_path)?;
    write_jsonl(&dir.join("metrics.jsonl"), &metrics)?;
    if let Some(last) = metrics.last() {
        let diag = serde_json::json!({
            "schema": "v1",
            "f": last.f,
            "dropped_frac": last.dropped_frac,
            "balance_loss": last.loss_balance,
        });
        fs::write(dir.join("routing.json"), serde_json::to_vec_pretty(&diag)?)
            .map_err(io_err(&dir.join("routing.json")))?;
    }
    write_manifest(
        &dir,
        &StageManifest {
            schema: "v1".into(),
            name: name.into(),
            kind: "distill".into(),
            config_hash: hash,
            seed,
            inputs: vec![
                plan.teacher.display().to_string(),
                corpus_path.display().to_string(),
                vocab_path.display().to_string(),
            ],
            outputs: vec!["student.ckpt".into(), "metrics.jsonl".into()],
            version: version_string(),
        },
    )?;
    Ok(student_path)
}

/// Finetuning stage: writes `report.json` with the grid results.
pub fn cmd_finetune(
    out_dir: &Path,
    name: &str,
    student_path: &Path,
    task_path: &Path,
    kind: TaskKind,
    vocab_path: &Path,
    settings: &FinetuneSettings,
    seed: u64,
) -> Result<FinetuneReport, HarnessError> {
    let dir = out_dir.join(name);
    let hash = config_hash(&(settings, kind, "finetune"), seed);
    let report_path = dir.join("report.json");
    if stage_complete(&dir, &hash) {
        let bytes = fs::read(&report_path).map_err(io_err(&report_path))?;
        return Ok(serde_json::from_slice(&bytes)?);
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let vocab = Vocab::load(vocab_path)?;
    let task = TaskDataset::load(task_path, kind)?;
    let body = EncoderModel::from_checkpoint(&Checkpoint::load(student_path)?)?;
    let report = run_finetune(&body, &task, &vocab, settings, seed)?;
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?).map_err(io_err(&report_path))?;
    write_manifest(
        &dir,
        &StageManifest {
            schema: "v1".into(),
            name: name.into(),
            kind: "finetune".into(),
            config_hash: hash,
            seed,
            inputs: vec![
                student_path.display().to_string(),
                task_path.display().to_string(),
                vocab_path.display().to_string(),
            ],
            outputs: vec!["report.json".into()],
            version: version_string(),
        },
    )?;
    Ok(report)
}

// ── sweeps ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub schema: String,
    pub cell: String,
    pub loss_rel_final: f64,
    pub dev_accuracy: f64,
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "schema,cell,loss_rel_final,dev_accuracy").map_err(io_err(path))?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.schema, r.cell, r.loss_rel_final, r.dev_accuracy).map_err(io_err(path))?;
    }
    Ok(())
}

/// One distill+finetune run per expert count, shared seed; emits
/// `sweep_experts.csv`. Comparative trends are reported as WARN lines, not
/// failures.
pub fn cmd_sweep_experts(
    out_dir: &Path,
    teacher_path: &Path,
    student_base: &ModelConfig,
    experts: &[usize],
    corpus_path: &Path,
    vocab_path: &Path,
    task_path: &Path,
    kind: TaskKind,
    distill_settings: &DistillSettings,
    finetune_settings: &FinetuneSettings,
    seed: u64,
) -> Result<Vec<SweepRow>, HarnessError> {
    assert!(!experts.is_empty(), "expert list must be non-empty");
    let mut rows = Vec::new();
    let mut dense_loss: Option<f64> = None;
    for &m in experts {
        let student = student_base.clone().with_ffn_experts(m);
        let plan = DistillPlan {
            teacher: teacher_path.to_path_buf(),
            ta_configs: vec![],
            student,
            settings: distill_settings.clone(),
        };
        let name = format!("sweep-experts-m{m}");
        let student_path = cmd_distill(out_dir, &name, &plan, corpus_path, vocab_path, seed)?;
        let metrics_path = out_dir.join(&name).join("metrics.jsonl");
        let loss_rel_final = last_metric(&metrics_path)?;
        let report = cmd_finetune(
            out_dir,
            &format!("{name}-finetune"),
            &student_path,
            task_path,
            kind,
            vocab_path,
            finetune_settings,
            seed,
        )?;
        if m == 1 {
            dense_loss = Some(loss_rel_final);
        } else if let Some(dl) = dense_loss {
            if loss_rel_final > dl {
                eprintln!(
                    "WARN: expected-trend: m={m} distill loss {loss_rel_final:.4} above dense {dl:.4}"
                );
            }
        }
        rows.push(SweepRow {
            schema: "v1".into(),
            cell: format!("m={m}"),
            loss_rel_final,
            dev_accuracy: report.best_dev_accuracy,
        });
    }
    write_sweep_csv(&out_dir.join("sweep_experts.csv"), &rows)?;
    Ok(rows)
}

fn last_metric(path: &Path) -> Result<f64, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let last = text.lines().filter(|l| !l.trim().is_empty()).last().unwrap_or("{}");
    let v: serde_json::Value = serde_json::from_str(last)?;
    Ok(v["loss_rel"].as_f64().unwrap_or(f64::NAN))
}

/// Routing-algorithm × balance-stage grid; emits `sweep_routing.csv`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep_routing(
    out_dir: &Path,
    teacher_path: &Path,
    student_base: &ModelConfig,
    corpus_path: &Path,
    vocab_path: &Path,
    task_path: &Path,
    kind: TaskKind,
    distill_settings: &DistillSettings,
    finetune_settings: &FinetuneSettings,
    seed: u64,
) -> Result<Vec<SweepRow>, HarnessError> {
    use crate::moe::{BalanceStage, RouteAlgorithm};
    let mut rows = Vec::new();
    let mut gating_acc: Option<f64> = None;
    for (alg, alg_name) in [(RouteAlgorithm::Gating, "gating"), (RouteAlgorithm::Hash, "hash")] {
        for (stage, stage_name) in [
            (BalanceStage::DistillAndFinetune, "both"),
            (BalanceStage::DistillOnly, "distill_only"),
        ] {
            let mut student = student_base.clone();
            student.router.algorithm = alg;
            student.router.apply_balance_at = stage;
            let plan = DistillPlan {
                teacher: teacher_path.to_path_buf(),
                ta_configs: vec![],
                student,
                settings: distill_settings.clone(),
            };
            let name = format!("sweep-routing-{alg_name}-{stage_name}");
            let student_path = cmd_distill(out_dir, &name, &plan, corpus_path, vocab_path, seed)?;
            let loss_rel_final = last_metric(&out_dir.join(&name).join("metrics.jsonl"))?;
            let report = cmd_finetune(
                out_dir,
                &format!("{name}-finetune"),
                &student_path,
                task_path,
                kind,
                vocab_path,
                finetune_settings,
                seed,
            )?;
            if alg == RouteAlgorithm::Gating && stage == BalanceStage::DistillAndFinetune {
                gating_acc = Some(report.best_dev_accuracy);
            } else if alg == RouteAlgorithm::Hash {
                if let Some(g) = gating_acc {
                    if report.best_dev_accuracy > g {
                        eprintln!(
                            "WARN: expected-trend: hash {} beat gating {}",
                            report.best_dev_accuracy, g
                        );
                    }
                }
            }
            rows.push(SweepRow {
                schema: "v1".into(),
                cell: format!("{alg_name}/{stage_name}"),
                loss_rel_final,
                dev_accuracy: report.best_dev_accuracy,
            });
        }
    }
    write_sweep_csv(&out_dir.join("sweep_routing.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityGapReport {
    pub schema: String,
    pub small_teacher_accuracy: f64,
    pub large_teacher_accuracy: f64,
    pub delta: f64,
    /// "⇑" when the larger teacher produced the better student.
    pub marker: String,
}

/// Distills the same student from a small and a large teacher with matched
/// seeds and reports the paired dev metrics.
#[allow(clippy::too_many_arguments)]
pub fn cmd_capacity_gap(
    out_dir: &Path,
    teacher_small: &Path,
    teacher_large: &Path,
    student: &ModelConfig,
    corpus_path: &Path,
    vocab_path: &Path,
    task_path: &Path,
    kind: TaskKind,
    distill_settings: &DistillSettings,
    finetune_settings: &FinetuneSettings,
    seed: u64,
) -> Result<CapacityGapReport, HarnessError> {
    let mut accs = Vec::new();
    for (teacher, tag) in [(teacher_small, "small"), (teacher_large, "large")] {
        let plan = DistillPlan {
            teacher: teacher.to_path_buf(),
            ta_configs: vec![],
            student: student.clone(),
            settings: distill_settings.clone(),
        };
        let name = format!("capgap-{tag}");
        let student_path = cmd_distill(out_dir, &name, &plan, corpus_path, vocab_path, seed)?;
        let report = cmd_finetune(
            out_dir,
            &format!("{name}-finetune"),
            &student_path,
            task_path,
            kind,
            vocab_path,
            finetune_settings,
            seed,
        )?;
        accs.push(report.best_dev_accuracy);
    }
    let delta = accs[1] - accs[0];
    let report = CapacityGapReport {
        schema: "v1".into(),
        small_teacher_accuracy: accs[0],
        large_teacher_accuracy: accs[1],
        delta,
        marker: if delta > 0.0 { "⇑".into() } else { "⇓".into() },
    };
    let p = out_dir.join("capacity_gap.json");
    fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(io_err(&p))?;
    Ok(report)
}

// ── whole-experiment runner ──────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageSpec {
    Pretrain {
        name: String,
        model: ModelConfig,
        corpus: String,
        #[serde(default)]
        settings: Option<PretrainSettings>,
    },
    Distill {
        name: String,
        /// Checkpoint path or the name of an earlier pretrain/distill stage.
        teacher: String,
        student: ModelConfig,
        #[serde(default)]
        ta_configs: Vec<ModelConfig>,
        corpus: String,
        /// Vocab file path or the name of the pretrain stage that built it.
        vocab: String,
        #[serde(default)]
        settings: Option<DistillSettings>,
    },
    Finetune {
        name: String,
        student: String,
        task: String,
        kind: TaskKind,
        vocab: String,
        #[serde(default)]
        settings: Option<FinetuneSettings>,
    },
    Analyze {
        name: String,
        ckpt: String,
        select: String,
        #[serde(default = "default_thresholds")]
        thresholds: Vec<f64>,
    },
}

fn default_thresholds() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}

/// Resolves a stage input: an existing file path, or `<out>/<stage>/<leaf>`
/// for a named earlier stage.
fn resolve(out_dir: &Path, reference: &str, leaves: &[&str]) -> Result<PathBuf, HarnessError> {
    let direct = PathBuf::from(reference);
    if direct.exists() {
        return Ok(direct);
    }
    for leaf in leaves {
        let p = out_dir.join(reference).join(leaf);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(HarnessError::Unresolved(reference.to_string()))
}

/// Runs every stage in order. `MINIMOE_SEED` overrides the spec seed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(), HarnessError> {
    let seed = std::env::var("MINIMOE_SEED")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or(spec.seed);
    let out = &spec.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for stage in &spec.stages {
        match stage {
            StageSpec::Pretrain { name, model, corpus, settings } => {
                let settings = settings.clone().unwrap_or_default();
                cmd_pretrain(out, name, model, Path::new(corpus), &settings, seed)?;
            }
            StageSpec::Distill { name, teacher, student, ta_configs, corpus, vocab, settings } => {
                let teacher_path = resolve(out, teacher, &["best.ckpt", "student.ckpt"])?;
                let vocab_path = resolve(out, vocab, &["vocab.txt"])?;
                let plan = DistillPlan {
                    teacher: teacher_path,
                    ta_configs: ta_configs.clone(),
                    student: student.clone(),
                    settings: settings.clone().unwrap_or_default(),
                };
                cmd_distill(out, name, &plan, Path::new(corpus), &vocab_path, seed)?;
            }
            StageSpec::Finetune { name, student, task, kind, vocab, settings } => {
                let student_path = resolve(out, student, &["student.ckpt", "best.ckpt"])?;
                let vocab_path = resolve(out, vocab, &["vocab.txt"])?;
                cmd_finetune(
                    out,
                    name,
                    &student_path,
                    Path::new(task),
                    *kind,
                    &vocab_path,
                    &settings.clone().unwrap_or_default(),
                    seed,
                )?;
            }
            StageSpec::Analyze { name, ckpt, select, thresholds } => {
                let ckpt_path = resolve(out, ckpt, &["student.ckpt", "best.ckpt"])?;
                let loaded = Checkpoint::load(&ckpt_path)?;
                let reports = crate::spectra::spectrum_report(&loaded, select, thresholds)
                    .map_err(|e| HarnessError::Unresolved(e.to_string()))?;
                let dir = out.join(name);
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let p = dir.join("spectra.json");
                fs::write(&p, serde_json::to_vec_pretty(&reports)?).map_err(io_err(&p))?;
            }
        }
    }
    Ok(())
}
