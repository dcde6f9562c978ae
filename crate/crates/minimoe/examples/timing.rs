// scratch: time pipeline steps at candidate desk scales
use minimoe::corpus::{generate_corpus, Vocab};
use minimoe::distill::{run_distillation, DistillSettings};
use minimoe::harness::{pretrain, PretrainSettings};
use minimoe::model::{EncoderModel, ModelConfig};
use minimoe::optim::OptimizerConfig;
use std::time::Instant;

fn main() {
    let corpus = generate_corpus(1_100_000, 7);
    println!("corpus bytes: {}", corpus.len());
    let t0 = Instant::now();
    let vocab = Vocab::build(&corpus, 512).unwrap();
    println!("vocab {} in {:?}", vocab.size(), t0.elapsed());

    for (batch, seq) in [(4usize, 24usize)] {
        let mut cfg = ModelConfig::dense(4, 128, 4, 256, vocab.size(), seq, 32);
        cfg.dropout = 0.1;
        let settings = PretrainSettings {
            steps: 100,
            batch,
            seq_len: seq,
            vocab_max: 512,
            eval_interval: 100_000,
            dev_windows: 32,
            mask_prob: 0.15,
            optimizer: OptimizerConfig::new(3e-4, 0.01),
        };
        let t = Instant::now();
        let out = pretrain(&cfg, &corpus, &vocab, &settings, 1).unwrap();
        let dt = t.elapsed().as_secs_f64();
        println!(
            "teacher b{batch} n{seq}: {:.1} ms/step (100 steps {:.2}s), loss {:.3}",
            dt / 100.0 * 1e3, dt, out.metrics.last().map(|m| m.loss_mlm).unwrap_or(f64::NAN)
        );

        // distill timing: teacher -> 2L;64H m=4 student
        let teacher = out.final_model;
        let student = ModelConfig::dense(2, 64, 2, 256, vocab.size(), seq, 32)
            .with_aux_mha()
            .with_ffn_experts(4);
        let ds = DistillSettings {
            steps: 20,
            batch,
            seq_len: seq,
            log_interval: 10,
            optimizer: OptimizerConfig::new(3e-4, 0.01),
        };
        let t = Instant::now();
        let _ = run_distillation(&teacher, &student, &corpus, &vocab, &ds, 2).unwrap();
        println!("distill b{batch} n{seq}: {:.1} ms/step", t.elapsed().as_secs_f64() / 20.0 * 1e3);
    }
}
