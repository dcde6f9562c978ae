// scratch: optimizer + batchgen timing
use minimoe::corpus::{generate_corpus, make_mlm_batches, Vocab};
use minimoe::model::{EncoderModel, ModelConfig, ParamKind};
use minimoe::optim::{AdamW, OptimizerConfig};
use std::time::Instant;

fn main() {
    let corpus = generate_corpus(200_000, 7);
    let vocab = Vocab::build(&corpus, 512).unwrap();
    let cfg = ModelConfig::dense(4, 128, 4, 256, vocab.size(), 24, 32);
    let mut model = EncoderModel::init(cfg, 1).unwrap();
    let sizes: Vec<usize> = model.params.params.iter().map(|p| p.data.len()).collect();
    println!("total params: {}", sizes.iter().sum::<usize>());
    let decay: Vec<bool> = model.params.params.iter().map(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Embedding)).collect();
    let mut opt = AdamW::new(OptimizerConfig::new(3e-4, 0.01), &sizes);
    let grads: Vec<Option<Vec<f64>>> = model.params.params.iter().map(|p| Some(vec![1e-4; p.data.len()])).collect();
    let t = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        opt.step(model.params.params.iter_mut().map(|p| &mut p.data), &grads, &decay, 1e-4);
    }
    println!("adamw: {:.1} ms/step", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let mut stream = make_mlm_batches(&corpus, &vocab, 24, 4, 3).unwrap();
    let t = Instant::now();
    for _ in 0..200 {
        std::hint::black_box(stream.next_batch(true));
    }
    println!("batchgen: {:.2} ms/step", t.elapsed().as_secs_f64() / 200.0 * 1e3);
}
