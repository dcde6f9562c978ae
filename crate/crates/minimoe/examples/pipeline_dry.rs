// scratch: dry-run of the desk-scale pipeline quality gates
use minimoe::corpus::{generate_corpus, make_synthetic_task, TaskKind, Vocab};
use minimoe::distill::{run_distillation, run_finetune, DistillSettings, FinetuneSettings};
use minimoe::harness::{pretrain, PretrainSettings};
use minimoe::model::{EncoderModel, Mode, ModelConfig, SeqBatch};
use minimoe::moe::RoutingStats;
use minimoe::optim::OptimizerConfig;
use minimoe::tensor::Tape;
use std::time::Instant;

fn main() {
    let seed = 41;
    let t_all = Instant::now();
    let corpus = generate_corpus(1_050_000, 77);
    let vocab = Vocab::build(&corpus, 512).unwrap();
    println!("[{:.0?}] corpus {} bytes, vocab {}", t_all.elapsed(), corpus.len(), vocab.size());

    let mut teacher_cfg = ModelConfig::dense(4, 128, 4, 256, vocab.size(), 24, 32);
    teacher_cfg.dropout = 0.1;
    let pre = PretrainSettings {
        steps: 5000,
        batch: 4,
        seq_len: 24,
        vocab_max: 512,
        mask_prob: 0.15,
        eval_interval: 250,
        dev_windows: 64,
        optimizer: OptimizerConfig::new(3e-4, 0.01),
    };
    let t = Instant::now();
    let teacher_out = pretrain(&teacher_cfg, &corpus, &vocab, &pre, seed).unwrap();
    println!(
        "[{:.0?}] teacher: {:.1}s, best dev {:.4} vs lnV {:.4}",
        t_all.elapsed(),
        t.elapsed().as_secs_f64(),
        teacher_out.best_dev_loss,
        (vocab.size() as f64).ln()
    );
    let teacher = teacher_out.best;

    let ds = DistillSettings {
        steps: 2000,
        batch: 4,
        seq_len: 24,
        log_interval: 50,
        optimizer: OptimizerConfig::new(3e-4, 0.01),
    };
    let dense_cfg = ModelConfig::dense(2, 64, 2, 256, vocab.size(), 24, 32).with_aux_mha();
    let moe_cfg = dense_cfg.clone().with_ffn_experts(4);

    let epoch_avgs = |losses: &[f64]| -> Vec<f64> {
        losses.chunks(200).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    };

    let t = Instant::now();
    let dense_out = run_distillation(&teacher, &dense_cfg, &corpus, &vocab, &ds, seed).unwrap();
    println!("[{:.0?}] dense distill {:.1}s epochs {:?}", t_all.elapsed(), t.elapsed().as_secs_f64(), epoch_avgs(&dense_out.step_losses));
    let t = Instant::now();
    let moe_out = run_distillation(&teacher, &moe_cfg, &corpus, &vocab, &ds, seed).unwrap();
    println!("[{:.0?}] moe distill {:.1}s epochs {:?}", t_all.elapsed(), t.elapsed().as_secs_f64(), epoch_avgs(&moe_out.step_losses));

    // final f over an eval pass
    let mut stream = minimoe::corpus::make_mlm_batches(&corpus, &vocab, 24, 8, 999).unwrap();
    let mut stats = RoutingStats::new(4);
    for _ in 0..20 {
        let b = stream.next_batch(false);
        let seq = SeqBatch::new(&b.tokens, None, &b.lengths, b.seq_len);
        let mut tape = Tape::new();
        let bind = moe_out.student.bind(&mut tape, false);
        let out = moe_out.student.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
        for rec in &out.routing {
            if rec.stats.dispatch_counts.len() == 4 {
                stats.merge(&rec.stats);
            }
        }
    }
    println!("final f {:?} (max {:.3}), dropped {:.4}", stats.f(), stats.f().iter().cloned().fold(0.0, f64::max), stats.dropped_frac());

    let task = make_synthetic_task(TaskKind::PairMatch, 640, 5);
    let ft = FinetuneSettings {
        lr_grid: vec![1e-4, 3e-4],
        batch_grid: vec![16, 32],
        max_epochs: 6,
        patience: 2,
        seq_len: 24,
        train_body: true,
        weight_decay: 0.01,
        warmup_proportion: 0.1,
    };
    let t = Instant::now();
    let dense_rep = run_finetune(&dense_out.student, &task, &vocab, &ft, seed).unwrap();
    println!("[{:.0?}] dense finetune {:.0}s acc {:.4} cells {:?}", t_all.elapsed(), t.elapsed().as_secs_f64(), dense_rep.best_dev_accuracy, dense_rep.cells);
    let t = Instant::now();
    let moe_rep = run_finetune(&moe_out.student, &task, &vocab, &ft, seed).unwrap();
    println!("[{:.0?}] moe finetune {:.0}s acc {:.4}", t_all.elapsed(), t.elapsed().as_secs_f64(), moe_rep.best_dev_accuracy);

    let baseline_body = EncoderModel::init(dense_cfg.clone(), seed.wrapping_add(1000)).unwrap();
    let mut ft_frozen = ft.clone();
    ft_frozen.train_body = false;
    let t = Instant::now();
    let base_rep = run_finetune(&baseline_body, &task, &vocab, &ft_frozen, seed).unwrap();
    println!("[{:.0?}] baseline finetune {:.0}s acc {:.4}", t_all.elapsed(), t.elapsed().as_secs_f64(), base_rep.best_dev_accuracy);

    println!(
        "margins: dense +{:.3}, moe +{:.3}; total {:.1} min",
        dense_rep.best_dev_accuracy - base_rep.best_dev_accuracy,
        moe_rep.best_dev_accuracy - base_rep.best_dev_accuracy,
        t_all.elapsed().as_secs_f64() / 60.0
    );
}
