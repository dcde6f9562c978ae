// scratch: break one pretrain step into phases
use minimoe::corpus::{generate_corpus, make_mlm_batches, Vocab};
use minimoe::model::{EncoderModel, Mode, ModelConfig, SeqBatch};
use minimoe::tensor::Tape;
use std::time::Instant;

fn main() {
    let corpus = generate_corpus(200_000, 7);
    let vocab = Vocab::build(&corpus, 512).unwrap();
    let mut cfg = ModelConfig::dense(4, 128, 4, 256, vocab.size(), 24, 32);
    cfg.dropout = 0.1;
    let model = EncoderModel::init(cfg, 1).unwrap();
    let mut stream = make_mlm_batches(&corpus, &vocab, 24, 4, 3).unwrap();
    let mut rng = minimoe::rng::named_stream(1, "t");
    let reps = 40;

    let mut t_bind = 0.0;
    let mut t_fwd = 0.0;
    let mut t_loss = 0.0;
    let mut t_bwd = 0.0;
    let mut t_harvest = 0.0;
    for _ in 0..reps {
        let b = stream.next_batch(true);
        let seq = SeqBatch::new(&b.tokens, None, &b.lengths, b.seq_len);
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, true);
        let t1 = Instant::now();
        let mut mode = Mode::Train { dropout_rng: &mut rng };
        let out = model.encode(&mut tape, &bind, &seq, &mut mode).unwrap();
        let t2 = Instant::now();
        let loss = model.mlm_loss(&mut tape, &bind, &out, &b.mask_positions, &b.targets).unwrap();
        let t3 = Instant::now();
        tape.backward(loss);
        let t4 = Instant::now();
        let g = bind.grads(&tape);
        std::hint::black_box(&g);
        let t5 = Instant::now();
        t_bind += (t1 - t0).as_secs_f64();
        t_fwd += (t2 - t1).as_secs_f64();
        t_loss += (t3 - t2).as_secs_f64();
        t_bwd += (t4 - t3).as_secs_f64();
        t_harvest += (t5 - t4).as_secs_f64();
    }
    let ms = 1e3 / reps as f64;
    println!(
        "bind {:.1} fwd {:.1} loss {:.1} bwd {:.1} harvest {:.1} ms/step",
        t_bind * ms, t_fwd * ms, t_loss * ms, t_bwd * ms, t_harvest * ms
    );
}
