//! Command-line experiment driver.

use clap::{Parser, Subcommand};
use minimoe::checkpoint::Checkpoint;
use minimoe::compute::{self, ComputeReport};
use minimoe::corpus::{self, TaskKind};
use minimoe::distill::{DistillPlan, DistillSettings, FinetuneSettings};
use minimoe::harness::{self, PretrainSettings};
use minimoe::model::{EncoderModel, ModelConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "minimoe", version, about = "Distill small routed-expert encoders and account for their compute")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-LM pretrain a (teacher) encoder on a text corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "teacher")]
        name: String,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seqlen: Option<usize>,
    },
    /// Relation-distill a student (optionally through a TA chain) from a teacher checkpoint.
    Distill {
        /// DistillPlan JSON (teacher path, student config, settings).
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "distill")]
        name: String,
    },
    /// Finetune a student checkpoint on a task dataset.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        kind: TaskKind,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "finetune")]
        name: String,
    },
    /// Analytic forward-pass FLOPs for a config.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 128)]
        seqlen: usize,
    },
    /// Analytic parameter count for a config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Measured single-threaded inference throughput of a checkpoint.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 128)]
        seqlen: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Normalized singular-value spectra of checkpoint matrices.
    SvdAnalyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = r"ffn\..*\.w_out")]
        select: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1, 0.05])]
        thresholds: Vec<f64>,
        /// Also write a low-rank factored checkpoint here.
        #[arg(long)]
        truncate_to: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        truncate_threshold: f64,
    },
    /// Distill+finetune once per expert count; writes sweep_experts.csv.
    SweepExperts {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student_config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        experts: Vec<usize>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        kind: TaskKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Gating-vs-hash × balance-stage grid; writes sweep_routing.csv.
    SweepRouting {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student_config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        kind: TaskKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Distill one student from two teachers of different scale and report the gap.
    CapacityGap {
        #[arg(long)]
        teacher_small: PathBuf,
        #[arg(long)]
        teacher_large: PathBuf,
        #[arg(long)]
        student_config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        kind: TaskKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Run a full ExperimentSpec JSON (MINIMOE_SEED overrides its seed).
    Run {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Generate a deterministic cluster-structured text corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        megabytes: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a synthetic labeled task dataset (JSONL).
    GenTask {
        #[arg(long)]
        kind: TaskKind,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ModelConfig, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    let cfg: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| format!("parse {}: {e}", path.display()))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn emit<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable report"));
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Pretrain { config, corpus, steps, seed, out, name, batch, seqlen } => {
            let cfg = load_config(&config)?;
            let mut settings = PretrainSettings { steps, ..Default::default() };
            if let Some(b) = batch {
                settings.batch = b;
            }
            if let Some(n) = seqlen {
                settings.seq_len = n;
            }
            let paths = harness::cmd_pretrain(&out, &name, &cfg, &corpus, &settings, seed)
                .map_err(|e| e.to_string())?;
            eprintln!("wrote {}", paths.best_ckpt.display());
            Ok(())
        }
        Cmd::Distill { plan, corpus, vocab, seed, out, name } => {
            let bytes = std::fs::read(&plan).map_err(|e| format!("read {}: {e}", plan.display()))?;
            let plan: DistillPlan = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
            let p = harness::cmd_distill(&out, &name, &plan, &corpus, &vocab, seed)
                .map_err(|e| e.to_string())?;
            eprintln!("wrote {}", p.display());
            Ok(())
        }
        Cmd::Finetune { ckpt, task, kind, vocab, seed, out, name } => {
            let report = harness::cmd_finetune(
                &out,
                &name,
                &ckpt,
                &task,
                kind,
                &vocab,
                &FinetuneSettings::default(),
                seed,
            )
            .map_err(|e| e.to_string())?;
            emit(&report);
            Ok(())
        }
        Cmd::Flops { config, seqlen } => {
            let cfg = load_config(&config)?;
            let mut report = ComputeReport::v1();
            report.flops = Some(compute::flops_forward(&cfg, seqlen));
            emit(&report);
            Ok(())
        }
        Cmd::Params { config } => {
            let cfg = load_config(&config)?;
            let mut report = ComputeReport::v1();
            report.params = Some(compute::count_params(&cfg));
            emit(&report);
            Ok(())
        }
        Cmd::Bench { ckpt, seqlen, batch, repeats } => {
            let model = EncoderModel::from_checkpoint(&Checkpoint::load(&ckpt).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let mut report = ComputeReport::v1();
            report.params = Some(compute::count_params(&model.config));
            report.flops = Some(compute::flops_forward(&model.config, seqlen));
            report.throughput = Some(compute::measure_throughput(&model, seqlen, batch, repeats, 2));
            emit(&report);
            Ok(())
        }
        Cmd::SvdAnalyze { ckpt, select, thresholds, truncate_to, truncate_threshold } => {
            let loaded = Checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
            let reports =
                minimoe::spectra::spectrum_report(&loaded, &select, &thresholds).map_err(|e| e.to_string())?;
            emit(&reports);
            if let Some(out) = truncate_to {
                let (factored, report) =
                    minimoe::spectra::truncate_checkpoint(&loaded, &select, truncate_threshold)
                        .map_err(|e| e.to_string())?;
                factored.save(&out).map_err(|e| e.to_string())?;
                emit(&report);
            }
            Ok(())
        }
        Cmd::SweepExperts {
            teacher,
            student_config,
            experts,
            corpus,
            vocab,
            task,
            kind,
            seed,
            out,
            steps,
        } => {
            let student = load_config(&student_config)?;
            let settings = DistillSettings { steps, ..Default::default() };
            let rows = harness::cmd_sweep_experts(
                &out,
                &teacher,
                &student,
                &experts,
                &corpus,
                &vocab,
                &task,
                kind,
                &settings,
                &FinetuneSettings::default(),
                seed,
            )
            .map_err(|e| e.to_string())?;
            emit(&rows);
            Ok(())
        }
        Cmd::SweepRouting {
            teacher,
            student_config,
            corpus,
            vocab,
            task,
            kind,
            seed,
            out,
            steps,
        } => {
            let student = load_config(&student_config)?;
            let settings = DistillSettings { steps, ..Default::default() };
            let rows = harness::cmd_sweep_routing(
                &out,
                &teacher,
                &student,
                &corpus,
                &vocab,
                &task,
                kind,
                &settings,
                &FinetuneSettings::default(),
                seed,
            )
            .map_err(|e| e.to_string())?;
            emit(&rows);
            Ok(())
        }
        Cmd::CapacityGap {
            teacher_small,
            teacher_large,
            student_config,
            corpus,
            vocab,
            task,
            kind,
            seed,
            out,
            steps,
        } => {
            let student = load_config(&student_config)?;
            let settings = DistillSettings { steps, ..Default::default() };
            let report = harness::cmd_capacity_gap(
                &out,
                &teacher_small,
                &teacher_large,
                &student,
                &corpus,
                &vocab,
                &task,
                kind,
                &settings,
                &FinetuneSettings::default(),
                seed,
            )
            .map_err(|e| e.to_string())?;
            emit(&report);
            Ok(())
        }
        Cmd::Run { spec } => {
            let bytes = std::fs::read(&spec).map_err(|e| format!("read {}: {e}", spec.display()))?;
            let spec: harness::ExperimentSpec = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
            harness::run_experiment(&spec).map_err(|e| e.to_string())
        }
        Cmd::GenCorpus { out, megabytes, seed } => {
            let text = corpus::generate_corpus((megabytes * 1e6) as usize, seed);
            std::fs::write(&out, text).map_err(|e| e.to_string())?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Cmd::GenTask { kind, size, seed, out } => {
            let ds = corpus::make_synthetic_task(kind, size, seed);
            ds.save(&out).map_err(|e| e.to_string())?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
