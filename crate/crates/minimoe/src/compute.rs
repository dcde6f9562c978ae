//! Analytic parameter counts, forward-pass MAC/FLOP counts, and a wall-clock
//! throughput harness.
//!
//! The counters are closed-form functions of the config, independent of the
//! model code; tests cross-check them against an exhaustive walk of an
//! instantiated model's parameter containers. GFLOPs follow the common
//! accounting that reports matrix-multiply MACs only (no bias adds, no
//! softmax/GELU transcendentals), which is what published per-model figures
//! use; the raw MAC count is carried alongside.

use crate::model::{EncoderModel, Mode, ModelConfig, SeqBatch};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Wrapper emitted by the CLI; sections are present when computed.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ComputeReport {
    pub schema: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops: Option<FlopsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputReport>,
}

impl ComputeReport {
    pub fn v1() -> Self {
        ComputeReport { schema: "v1".into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsReport {
    pub total: usize,
    pub embedding: usize,
    pub transformer: usize,
    pub head: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    /// Matrix-multiply multiply-accumulates on the active path.
    pub macs_forward: u64,
    /// macs_forward / 1e9 — comparable to published per-model GFLOPs.
    pub gflops: f64,
    /// Router contribution: n·d·m per MoE sublayer.
    pub routing_macs: u64,
    pub routing_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub tokens_per_ms: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub repeats: usize,
    pub median_ms: f64,
    /// Coefficient of variation across repeats.
    pub cov: f64,
}

/// Closed-form parameter count for a config.
///
/// Embeddings: token + position + segment tables and the embedding norm.
/// Transformer: per layer, `m_mha` attention experts (4 d×d weights with
/// biases), `m_ffn` feed-forward experts (d×d^I in, d^I×d out, biases), a
/// d×m gate per routed sublayer (only when m > 1), and two layer norms; the
/// auxiliary MHA block counts when configured. Head: the MLM transform, its
/// norm and the decoder bias (decoder weight is tied to the token table).
pub fn count_params(config: &ModelConfig) -> ParamsReport {
    let d = config.hidden;
    let v = config.vocab_size;
    let embedding = v * d + config.max_seq_len * d + 2 * d + 2 * d;

    let mha_expert = 4 * (d * d + d);
    let ffn_expert = 2 * d * config.ffn_dim + config.ffn_dim + d;
    let mha_gate = if config.experts_mha > 1 { d * config.experts_mha } else { 0 };
    let ffn_gate = if config.experts_ffn > 1 { d * config.experts_ffn } else { 0 };
    let per_layer = config.experts_mha * mha_expert
        + mha_gate
        + 2 * d
        + config.experts_ffn * ffn_expert
        + ffn_gate
        + 2 * d;
    let aux = if config.has_aux_mha { mha_expert + 2 * d } else { 0 };
    let transformer = config.num_layers * per_layer + aux;

    let head = d * d + d + 2 * d + v;

    ParamsReport { total: embedding + transformer + head, embedding, transformer, head }
}

/// Classifier width assumed by the head term of the FLOP count. The head is
/// one d×C projection of the first token; at any realistic width it is
/// negligible next to the encoder.
const HEAD_CLASSES: u64 = 2;

/// Active-path multiply-accumulate count for one forward pass at sequence
/// length `n`. Per layer: 4nd² + 2n²d for attention, 2·n·d·d^I for the one
/// active FFN expert, plus the n·d·m routing term per MoE sublayer.
/// Embedding lookups contribute no MACs.
pub fn flops_forward(config: &ModelConfig, n: usize) -> FlopsReport {
    let d = config.hidden as u64;
    let di = config.ffn_dim as u64;
    let n64 = n as u64;
    let mha_active = 4 * n64 * d * d + 2 * n64 * n64 * d;
    let ffn_active = 2 * n64 * d * di;
    let mut routing = 0u64;
    if config.experts_mha > 1 {
        routing += n64 * d * config.experts_mha as u64;
    }
    if config.experts_ffn > 1 {
        routing += n64 * d * config.experts_ffn as u64;
    }
    let per_layer = mha_active + ffn_active + routing;
    let aux = if config.has_aux_mha { mha_active } else { 0 };
    let head = d * HEAD_CLASSES;
    let macs = config.num_layers as u64 * per_layer + aux + head;
    let routing_total = config.num_layers as u64 * routing;
    FlopsReport {
        seq_len: n,
        macs_forward: macs,
        gflops: macs as f64 / 1e9,
        routing_macs: routing_total,
        routing_fraction: routing_total as f64 / macs as f64,
    }
}

/// Median single-threaded inference throughput in tokens per millisecond.
/// The first `warmup` repeats are discarded.
pub fn measure_throughput(
    model: &EncoderModel,
    n: usize,
    batch: usize,
    repeats: usize,
    warmup: usize,
) -> ThroughputReport {
    assert!(warmup >= 1, "throughput needs at least one warmup repeat");
    let mut stream = crate::rng::named_stream(0xBE9C4, "bench/tokens");
    use rand::Rng;
    let tokens: Vec<u32> = (0..batch * n)
        .map(|_| stream.gen_range(0..model.config.vocab_size as u32))
        .collect();
    let lengths = vec![n; batch];
    let seq = SeqBatch::new(&tokens, None, &lengths, n);

    let mut times_ms = Vec::with_capacity(repeats);
    for rep in 0..repeats + warmup {
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, false);
        let t0 = Instant::now();
        let out = model
            .encode(&mut tape, &bind, &seq, &mut Mode::Eval)
            .expect("bench forward");
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(tape.data(out.hidden));
        if rep >= warmup {
            times_ms.push(dt);
        }
    }
    let mut sorted = times_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median_ms = sorted[sorted.len() / 2];
    let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times_ms.len() as f64;
    let cov = var.sqrt() / mean;
    ThroughputReport {
        tokens_per_ms: (batch * n) as f64 / median_ms,
        batch,
        seq_len: n,
        repeats,
        median_ms,
        cov,
    }
}
