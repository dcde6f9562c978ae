use super::*;
use crate::tensor::Tape;

fn tiny_config() -> ModelConfig {
    ModelConfig::dense(2, 8, 2, 16, 23, 12, 4)
}

fn eval_encode(model: &EncoderModel, tokens: &[u32], n: usize) -> (Vec<f64>, Vec<f64>) {
    let lengths = vec![n; tokens.len() / n];
    let seq = SeqBatch::new(tokens, None, &lengths, n);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let out = model.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
    let rel = out.relations.expect("dense model exposes relations");
    (tape.data(out.hidden).to_vec(), tape.data(rel.0).to_vec())
}

#[test]
fn config_invariants_are_enforced() {
    let mut bad = tiny_config();
    bad.head_dim = 3;
    assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));

    let mut bad = tiny_config();
    bad.relation_heads = 3; // 8 % 3 != 0
    assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));

    let mut bad = tiny_config();
    bad.experts_ffn = 0;
    assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));

    assert!(tiny_config().validate().is_ok());
    assert_eq!(tiny_config().relation_dim(), 2);
}

#[test]
fn encode_rejects_bad_inputs() {
    let model = EncoderModel::init(tiny_config(), 3).unwrap();
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);

    // out-of-vocab id
    let tokens = vec![2u32, 99, 5, 6];
    let seq = SeqBatch::new(&tokens, None, &[4], 4);
    assert!(matches!(
        model.encode(&mut tape, &bind, &seq, &mut Mode::Eval),
        Err(ModelError::OutOfVocab { id: 99, .. })
    ));

    // sequence longer than max_seq_len
    let tokens = vec![2u32; 16];
    let seq = SeqBatch::new(&tokens, None, &[16], 16);
    assert!(matches!(
        model.encode(&mut tape, &bind, &seq, &mut Mode::Eval),
        Err(ModelError::SequenceTooLong { n: 16, max: 12 })
    ));
}

#[test]
fn encode_is_deterministic_in_eval() {
    let model = EncoderModel::init(tiny_config(), 5).unwrap();
    let tokens = vec![2u32, 5, 6, 7, 2, 8, 9, 10];
    let (h1, r1) = eval_encode(&model, &tokens, 4);
    let (h2, r2) = eval_encode(&model, &tokens, 4);
    let b1: Vec<u64> = h1.iter().map(|v| v.to_bits()).collect();
    let b2: Vec<u64> = h2.iter().map(|v| v.to_bits()).collect();
    assert_eq!(b1, b2);
    assert_eq!(r1, r2);
}

#[test]
fn seeded_init_is_reproducible() {
    let a = EncoderModel::init(tiny_config(), 11).unwrap();
    let b = EncoderModel::init(tiny_config(), 11).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let c = EncoderModel::init(tiny_config(), 12).unwrap();
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn zero_value_path_reduces_mha_to_layer_norm() {
    let mut model = EncoderModel::init(tiny_config(), 7).unwrap();
    for p in model.params.params.iter_mut() {
        if p.name.contains("mha.expert.0.wv")
            || p.name.contains("mha.expert.0.bv")
            || p.name.contains("mha.expert.0.bo")
        {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tokens = vec![2u32, 5, 6, 7];
    let seq = SeqBatch::new(&tokens, None, &[4], 4);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let d = model.config.hidden;
    let x = tape.constant(
        (0..4 * d).map(|i| (i as f64 * 0.17).sin()).collect(),
        vec![4, d],
    );
    let (out, _, _) = model
        .mha_forward(&mut tape, &bind, x, LayerRef::Layer(0), &seq, &mut Mode::Eval)
        .unwrap();
    let gain = bind.id("layer.0.mha.ln.gain");
    let bias = bind.id("layer.0.mha.ln.bias");
    let want = tape.layer_norm(x, gain, bias);
    for (a, b) in tape.data(out).iter().zip(tape.data(want)) {
        assert_eq!(a, b, "zero value path must be the pure residual");
    }
}

#[test]
fn single_token_attention_is_identity_mix() {
    // with one token the attention matrix is [[1]], so the head output is
    // exactly the value projection
    let mut cfg = tiny_config();
    cfg.num_heads = 1;
    cfg.head_dim = 8;
    let model = EncoderModel::init(cfg, 9).unwrap();
    let d = model.config.hidden;
    let tokens = vec![2u32];
    let seq = SeqBatch::new(&tokens, None, &[1], 1);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let x = tape.constant((0..d).map(|i| 0.1 * i as f64 - 0.3).collect(), vec![1, d]);
    let (out, _, _) = model
        .mha_forward(&mut tape, &bind, x, LayerRef::Layer(0), &seq, &mut Mode::Eval)
        .unwrap();

    // direct: LN(x + (x·Wv + bv)·Wo + bo)
    let p = |n: &str| bind.id(&format!("layer.0.mha.expert.0.{n}"));
    let v0 = tape.matmul(x, p("wv")).unwrap();
    let v = tape.add_bias(v0, p("bv"));
    let o0 = tape.matmul(v, p("wo")).unwrap();
    let o = tape.add_bias(o0, p("bo"));
    let res = tape.add(x, o);
    let gain = bind.id("layer.0.mha.ln.gain");
    let bias = bind.id("layer.0.mha.ln.bias");
    let want = tape.layer_norm(res, gain, bias);
    for (a, b) in tape.data(out).iter().zip(tape.data(want)) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Independent oracle: materialize each attention head separately with plain
/// loops and sum per-head value-output contributions.
fn mha_block_oracle(model: &EncoderModel, x: &[f64], n: usize) -> Vec<f64> {
    let d = model.config.hidden;
    let da = model.config.head_dim;
    let a_heads = model.config.num_heads;
    let get = |name: &str| model.params.get(name).unwrap();
    let lp = |w: &str| get(&format!("layer.0.mha.expert.0.{w}"));
    let mm = |x: &[f64], w: &[f64], n: usize, k: usize, m: usize| {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += x[i * k + p] * w[p * m + j];
                }
                out[i * m + j] = s;
            }
        }
        out
    };
    let addb = |x: &mut [f64], b: &[f64], m: usize| {
        for (i, v) in x.iter_mut().enumerate() {
            *v += b[i % m];
        }
    };
    let mut q = mm(x, &lp("wq").data, n, d, d);
    addb(&mut q, &lp("bq").data, d);
    let mut k = mm(x, &lp("wk").data, n, d, d);
    addb(&mut k, &lp("bk").data, d);
    let mut v = mm(x, &lp("wv").data, n, d, d);
    addb(&mut v, &lp("bv").data, d);

    let mut summed = vec![0.0; n * d];
    for h in 0..a_heads {
        // per-head slices
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..da {
                    s += q[i * d + h * da + c] * k[j * d + h * da + c];
                }
                scores[i * n + j] = s / (da as f64).sqrt();
            }
        }
        for i in 0..n {
            let row = &mut scores[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
        }
        // head output times its W^O block, accumulated
        let wo = &lp("wo").data;
        for i in 0..n {
            for j in 0..n {
                let p = scores[i * n + j];
                for c in 0..da {
                    let hv = p * v[j * d + h * da + c];
                    for m in 0..d {
                        summed[i * d + m] += hv * wo[(h * da + c) * d + m];
                    }
                }
            }
        }
    }
    let bo = &lp("bo").data;
    addb(&mut summed, bo, d);
    // residual + layer norm
    let gain = &get("layer.0.mha.ln.gain").data;
    let bias = &get("layer.0.mha.ln.bias").data;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|j| x[i * d + j] + summed[i * d + j]).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + crate::tensor::LN_EPS).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
    out
}

#[test]
fn mha_matches_independent_head_by_head_oracle() {
    let model = EncoderModel::init(tiny_config(), 13).unwrap();
    let n = 4;
    let d = model.config.hidden;
    let xdata: Vec<f64> = (0..n * d).map(|i| ((i * 31 % 17) as f64) * 0.05 - 0.4).collect();
    let tokens = vec![2u32; n];
    let lens = [n];
    let seq = SeqBatch::new(&tokens, None, &lens, n);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let x = tape.constant(xdata.clone(), vec![n, d]);
    let (out, _, _) = model
        .mha_forward(&mut tape, &bind, x, LayerRef::Layer(0), &seq, &mut Mode::Eval)
        .unwrap();
    let want = mha_block_oracle(&model, &xdata, n);
    let mut max_diff = 0.0f64;
    for (a, b) in tape.data(out).iter().zip(&want) {
        max_diff = max_diff.max((a - b).abs());
    }
    assert!(max_diff < 1e-10, "max diff {max_diff}");
}

#[test]
fn single_head_config_equals_direct_formula() {
    // A = 1, head_dim = d reduces to plain single-head attention
    let mut cfg = tiny_config();
    cfg.num_heads = 1;
    cfg.head_dim = cfg.hidden;
    let model = EncoderModel::init(cfg, 21).unwrap();
    let n = 3;
    let d = model.config.hidden;
    let xdata: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.13).cos() * 0.5).collect();
    let tokens = vec![2u32; n];
    let lens = [n];
    let seq = SeqBatch::new(&tokens, None, &lens, n);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let x = tape.constant(xdata.clone(), vec![n, d]);
    let (out, _, _) = model
        .mha_forward(&mut tape, &bind, x, LayerRef::Layer(0), &seq, &mut Mode::Eval)
        .unwrap();
    let want = mha_block_oracle(&model, &xdata, n);
    for (a, b) in tape.data(out).iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn ffn_zero_output_weights_reduce_to_layer_norm() {
    let mut model = EncoderModel::init(tiny_config(), 17).unwrap();
    for p in model.params.params.iter_mut() {
        if p.name.contains("ffn.expert.0.w_out") || p.name.contains("ffn.expert.0.b_out") {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tokens = vec![2u32, 5, 6, 7];
    let seq = SeqBatch::new(&tokens, None, &[4], 4);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let d = model.config.hidden;
    let x = tape.constant((0..4 * d).map(|i| (i as f64 * 0.7).sin()).collect(), vec![4, d]);
    let (out, _) = model.ffn_forward(&mut tape, &bind, x, 0, &seq, &mut Mode::Eval).unwrap();
    let gain = bind.id("layer.0.ffn.ln.gain");
    let bias = bind.id("layer.0.ffn.ln.bias");
    let want = tape.layer_norm(x, gain, bias);
    for (a, b) in tape.data(out).iter().zip(tape.data(want)) {
        assert_eq!(a, b);
    }
}

#[test]
fn ffn_single_token_matches_hand_computation() {
    let mut cfg = ModelConfig::dense(1, 2, 1, 2, 8, 4, 2);
    cfg.dropout = 0.0;
    let mut model = EncoderModel::init(cfg, 1).unwrap();
    let set = |model: &mut EncoderModel, name: &str, data: Vec<f64>| {
        let i = model.params.index_of(name).unwrap();
        model.params.params[i].data = data;
    };
    set(&mut model, "layer.0.ffn.expert.0.w_in", vec![1.0, 0.5, -0.5, 2.0]);
    set(&mut model, "layer.0.ffn.expert.0.b_in", vec![0.1, -0.2]);
    set(&mut model, "layer.0.ffn.expert.0.w_out", vec![0.3, -1.0, 0.8, 0.25]);
    set(&mut model, "layer.0.ffn.expert.0.b_out", vec![0.05, 0.15]);

    let x = [0.4f64, -0.6];
    let tokens = vec![2u32];
    let seq = SeqBatch::new(&tokens, None, &[1], 1);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let xt = tape.constant(x.to_vec(), vec![1, 2]);
    let (out, _) = model.ffn_forward(&mut tape, &bind, xt, 0, &seq, &mut Mode::Eval).unwrap();

    // hand arithmetic with the exact-CDF GELU
    let phi = |v: f64| 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
    let h = [
        x[0] * 1.0 + x[1] * -0.5 + 0.1,
        x[0] * 0.5 + x[1] * 2.0 - 0.2,
    ];
    let g = [h[0] * phi(h[0]), h[1] * phi(h[1])];
    let f = [
        g[0] * 0.3 + g[1] * 0.8 + 0.05,
        g[0] * -1.0 + g[1] * 0.25 + 0.15,
    ];
    let r = [x[0] + f[0], x[1] + f[1]];
    let mean = (r[0] + r[1]) / 2.0;
    let var = ((r[0] - mean).powi(2) + (r[1] - mean).powi(2)) / 2.0;
    let rstd = 1.0 / (var + crate::tensor::LN_EPS).sqrt();
    for j in 0..2 {
        let want = (r[j] - mean) * rstd; // unit gain, zero bias at init
        let got = tape.data(out)[j];
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn ffn_parameter_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::dense(1, 8, 2, 8, 9, 6, 2);
    cfg.dropout = 0.0;
    let mut model = EncoderModel::init(cfg, 3).unwrap();
    // strengthen weights so gradients are O(1) and the finite-difference
    // quotient is far above rounding noise
    for p in model.params.params.iter_mut() {
        if matches!(p.kind, ParamKind::Weight) {
            p.data.iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let model = model;
    let tokens = vec![2u32, 4, 5];
    let lengths = [3usize];
    let loss_of = |m: &EncoderModel| -> f64 {
        let seq = SeqBatch::new(&tokens, None, &lengths, 3);
        let mut tape = Tape::new();
        let bind = m.bind(&mut tape, true);
        let out = m.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
        let sq = tape.mul(out.hidden, out.hidden);
        let loss = tape.mean_all(sq);
        tape.value(loss)
    };
    // analytic grads
    let seq = SeqBatch::new(&tokens, None, &lengths, 3);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, true);
    let out = model.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
    let sq = tape.mul(out.hidden, out.hidden);
    let loss = tape.mean_all(sq);
    tape.backward(loss);
    let grads = bind.grads(&tape);

    let h = 1e-5;
    for (pi, p) in model.params.params.iter().enumerate() {
        if !p.name.contains("ffn.expert.0") {
            continue;
        }
        let g = grads[pi].as_ref().expect("ffn params on loss path");
        let mut fd = vec![0.0; g.len()];
        for j in 0..g.len() {
            let mut plus = model.clone();
            plus.params.params[pi].data[j] += h;
            let mut minus = model.clone();
            minus.params.params[pi].data[j] -= h;
            fd[j] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        }
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den.max(1e-12) < 1e-4, "{}: rel err {}", p.name, num / den.max(1e-12));
    }
}

#[test]
fn zero_layer_encoder_returns_normalized_embeddings() {
    let mut cfg = tiny_config();
    cfg.num_layers = 0;
    cfg.has_aux_mha = false;
    let model = EncoderModel::init(cfg, 2).unwrap();
    let tokens = vec![2u32, 5];
    let seq = SeqBatch::new(&tokens, None, &[2], 2);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let out = model.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
    assert!(out.relations.is_none());

    let ids = [2usize, 5];
    let tok = tape.gather_rows(bind.id("embed.token"), &ids);
    let pos = tape.gather_rows(bind.id("embed.position"), &[0, 1]);
    let seg = tape.gather_rows(bind.id("embed.segment"), &[0, 0]);
    let s0 = tape.add(tok, pos);
    let s1 = tape.add(s0, seg);
    let g = bind.id("embed.ln.gain");
    let b = bind.id("embed.ln.bias");
    let want = tape.layer_norm(s1, g, b);
    assert_eq!(tape.data(out.hidden), tape.data(want));
}

#[test]
fn permutation_equivariance_with_zeroed_positions() {
    let mut model = EncoderModel::init(tiny_config(), 19).unwrap();
    let i = model.params.index_of("embed.position").unwrap();
    model.params.params[i].data.iter_mut().for_each(|v| *v = 0.0);

    let tokens = vec![2u32, 5, 6, 7];
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<u32> = perm.iter().map(|&i| tokens[i]).collect();
    let (h, _) = eval_encode(&model, &tokens, 4);
    let (hp, _) = eval_encode(&model, &permuted, 4);
    let d = model.config.hidden;
    for (new_row, &old_row) in perm.iter().enumerate() {
        for c in 0..d {
            let a = hp[new_row * d + c];
            let b = h[old_row * d + c];
            assert!((a - b).abs() < 1e-12, "row {new_row} col {c}");
        }
    }
}

#[test]
fn hidden_and_relation_shapes_follow_the_config() {
    // 3L;384H with R=32 relation heads: hidden 128×384, d^R = 12
    let cfg = ModelConfig::dense(3, 384, 12, 1536, 64, 128, 32);
    assert_eq!(cfg.relation_dim(), 12);
    let model = EncoderModel::init(cfg, 23).unwrap();
    let n = 128;
    let tokens: Vec<u32> = (0..n).map(|i| 4 + (i as u32 % 60)).collect();
    let lens = [n];
    let seq = SeqBatch::new(&tokens, None, &lens, n);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let out = model.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
    assert_eq!(tape.shape(out.hidden), &[128, 384]);
    let rel = crate::distill::relation_heads(&mut tape, out.relations.unwrap(), 32, 1, n).unwrap();
    assert_eq!(rel.q.len(), 32);
    for &m in &rel.q {
        assert_eq!(tape.shape(m), &[128, 128]);
        // relation rows are stochastic
        for r in 0..3 {
            let sum: f64 = tape.data(m)[r * 128..(r + 1) * 128].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn mlm_loss_uniform_logits_hit_ln_vocab_and_reject_empty_masks() {
    let mut model = EncoderModel::init(tiny_config(), 29).unwrap();
    // zero token embeddings force logits = decoder bias = 0: uniform rows
    let i = model.params.index_of("embed.token").unwrap();
    model.params.params[i].data.iter_mut().for_each(|v| *v = 0.0);

    let tokens = vec![2u32, 5, 6, 7];
    let seq = SeqBatch::new(&tokens, None, &[4], 4);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let out = model.encode(&mut tape, &bind, &seq, &mut Mode::Eval).unwrap();
    let loss = model.mlm_loss(&mut tape, &bind, &out, &[1, 2], &[5, 6]).unwrap();
    let want = (model.config.vocab_size as f64).ln();
    assert!((tape.value(loss) - want).abs() < 1e-12);

    assert!(matches!(
        model.mlm_loss(&mut tape, &bind, &out, &[], &[]),
        Err(ModelError::EmptyMaskSet)
    ));
}

#[test]
fn checkpoint_roundtrip_preserves_forward_bits() {
    let model = EncoderModel::init(tiny_config().with_ffn_experts(2).with_aux_mha(), 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint().save(&path).unwrap();
    let back = EncoderModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model.checksum(), back.checksum());

    let tokens = vec![2u32, 5, 6, 7, 8, 9, 10, 11];
    let (h1, _) = eval_encode(&model, &tokens, 4);
    let (h2, _) = eval_encode(&back, &tokens, 4);
    let b1: Vec<u64> = h1.iter().map(|v| v.to_bits()).collect();
    let b2: Vec<u64> = h2.iter().map(|v| v.to_bits()).collect();
    assert_eq!(b1, b2);
}

#[test]
fn strip_aux_drops_only_aux_parameters() {
    let model = EncoderModel::init(tiny_config().with_aux_mha(), 37).unwrap();
    let stripped = model.strip_aux();
    assert!(!stripped.config.has_aux_mha);
    let diff = model.param_count() - stripped.param_count();
    let d = model.config.hidden;
    assert_eq!(diff, 4 * (d * d + d) + 2 * d);
    assert!(stripped.params.get("aux.wq").is_none());
    assert_eq!(
        crate::compute::count_params(&stripped.config).total,
        stripped.param_count()
    );
}
