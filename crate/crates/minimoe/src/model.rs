//! Dense transformer encoder with optional per-layer minimal experts.
//!
//! Post-layer-norm blocks in the BERT style: x → sublayer → dropout →
//! residual add → layer norm. MoE layers swap the sublayer for a routed
//! mixture; the residual path is untouched, so dropped tokens pass through.
//! An optional auxiliary MHA block at the top supplies the Q/K/V projections
//! that relation distillation aligns.

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::moe::{self, FfnExpert, MoeOutput, RouteAlgorithm, RouterConfig};
use crate::rng;
use crate::tensor::{Tape, TensorError, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {n} exceeds max_seq_len {max}")]
    SequenceTooLong { n: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: u32, vocab: usize },
    #[error("masked-LM loss requires a non-empty mask set")]
    EmptyMaskSet,
    #[error("relation source needs an auxiliary MHA or a dense final MHA block")]
    RelationSourceAmbiguous,
    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture descriptor. `(experts_mha, experts_ffn) = (1, 1)` is the
/// dense model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub relation_heads: usize,
    pub experts_mha: usize,
    pub experts_ffn: usize,
    pub has_aux_mha: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub router: RouterConfig,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Dense encoder; `head_dim` is derived from `hidden / num_heads`.
    pub fn dense(
        num_layers: usize,
        hidden: usize,
        num_heads: usize,
        ffn_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
        relation_heads: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            hidden,
            num_heads,
            head_dim: hidden / num_heads.max(1),
            ffn_dim,
            vocab_size,
            max_seq_len,
            relation_heads,
            experts_mha: 1,
            experts_ffn: 1,
            has_aux_mha: false,
            dropout: default_dropout(),
            router: RouterConfig::default(),
        }
    }

    pub fn with_ffn_experts(mut self, m: usize) -> Self {
        self.experts_ffn = m;
        self
    }

    pub fn with_mha_experts(mut self, m: usize) -> Self {
        self.experts_mha = m;
        self
    }

    pub fn with_aux_mha(mut self) -> Self {
        self.has_aux_mha = true;
        self
    }

    pub fn with_router(mut self, router: RouterConfig) -> Self {
        self.router = router;
        self
    }

    /// Relation-head width d^R.
    pub fn relation_dim(&self) -> usize {
        self.hidden / self.relation_heads
    }

    pub fn is_moe(&self) -> bool {
        self.experts_mha > 1 || self.experts_ffn > 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_heads * self.head_dim != self.hidden {
            return fail(format!(
                "heads must partition the hidden dimension: {} x {} != {}",
                self.num_heads, self.head_dim, self.hidden
            ));
        }
        if self.relation_heads == 0 || self.hidden % self.relation_heads != 0 {
            return fail(format!(
                "hidden {} not divisible by relation heads {}",
                self.hidden, self.relation_heads
            ));
        }
        if self.experts_mha < 1 || self.experts_ffn < 1 {
            return fail("expert counts must be >= 1".to_string());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} too small for the special tokens", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.router.validate().map_err(ModelError::InvalidConfig)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, p: Param) {
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Mask-LM-capable encoder plus everything needed to route and reload it.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Frozen vocabulary permutation for hash routing.
    pub hash_table: Option<Vec<u32>>,
}

/// Enumerates every parameter the config implies, in init/serialization order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    use ParamKind::*;
    let d = config.hidden;
    let mut out = Vec::new();
    let mut spec = |name: String, shape: Vec<usize>, kind: ParamKind| {
        out.push(ParamSpec { name, shape, kind });
    };
    spec("embed.token".into(), vec![config.vocab_size, d], Embedding);
    spec("embed.position".into(), vec![config.max_seq_len, d], Embedding);
    spec("embed.segment".into(), vec![2, d], Embedding);
    spec("embed.ln.gain".into(), vec![d], Gain);
    spec("embed.ln.bias".into(), vec![d], Bias);
    for l in 0..config.num_layers {
        for e in 0..config.experts_mha {
            let p = format!("layer.{l}.mha.expert.{e}");
            for w in ["wq", "wk", "wv", "wo"] {
                spec(format!("{p}.{w}"), vec![d, d], Weight);
                spec(format!("{p}.b{}", &w[1..]), vec![d], Bias);
            }
        }
        if config.experts_mha > 1 {
            spec(format!("layer.{l}.mha.gate"), vec![d, config.experts_mha], Weight);
        }
        spec(format!("layer.{l}.mha.ln.gain"), vec![d], Gain);
        spec(format!("layer.{l}.mha.ln.bias"), vec![d], Bias);
        for e in 0..config.experts_ffn {
            let p = format!("layer.{l}.ffn.expert.{e}");
            spec(format!("{p}.w_in"), vec![d, config.ffn_dim], Weight);
            spec(format!("{p}.b_in"), vec![config.ffn_dim], Bias);
            spec(format!("{p}.w_out"), vec![config.ffn_dim, d], Weight);
            spec(format!("{p}.b_out"), vec![d], Bias);
        }
        if config.experts_ffn > 1 {
            spec(format!("layer.{l}.ffn.gate"), vec![d, config.experts_ffn], Weight);
        }
        spec(format!("layer.{l}.ffn.ln.gain"), vec![d], Gain);
        spec(format!("layer.{l}.ffn.ln.bias"), vec![d], Bias);
    }
    if config.has_aux_mha {
        for w in ["wq", "wk", "wv", "wo"] {
            spec(format!("aux.{w}"), vec![d, d], Weight);
            spec(format!("aux.b{}", &w[1..]), vec![d], Bias);
        }
        spec("aux.ln.gain".into(), vec![d], Gain);
        spec("aux.ln.bias".into(), vec![d], Bias);
    }
    spec("mlm.transform.w".into(), vec![d, d], Weight);
    spec("mlm.transform.b".into(), vec![d], Bias);
    spec("mlm.ln.gain".into(), vec![d], Gain);
    spec("mlm.ln.bias".into(), vec![d], Bias);
    // decoder weight is tied to embed.token; only its bias is a parameter
    spec("mlm.decoder.bias".into(), vec![config.vocab_size], Bias);
    out
}

const INIT_STD: f64 = 0.02;

impl EncoderModel {
    /// Randomly initialized model. Weights and embeddings are N(0, 0.02²),
    /// biases zero, norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stream = rng::named_stream(seed, "model/init");
        let mut params = ParamSet::default();
        for s in param_specs(&config) {
            let len: usize = s.shape.iter().product();
            let data = match s.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    (0..len).map(|_| rng::normal(&mut stream) * INIT_STD).collect()
                }
                ParamKind::Bias => vec![0.0; len],
                ParamKind::Gain => vec![1.0; len],
            };
            params.push(Param { name: s.name, shape: s.shape, data, kind: s.kind });
        }
        let hash_table = if config.is_moe() && config.router.algorithm == RouteAlgorithm::Hash {
            Some(moe::build_hash_table(config.vocab_size, seed))
        } else {
            None
        };
        Ok(EncoderModel { config, params, hash_table })
    }

    /// Exhaustive tally over the parameter containers.
    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    /// Order-sensitive digest of every parameter bit; used to prove a
    /// teacher was not touched.
    pub fn checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params.params {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            hash_table: self.hash_table.clone(),
            tensors: self
                .params
                .params
                .iter()
                .map(|p| NamedTensor { name: p.name.clone(), shape: p.shape.clone(), data: p.data.clone() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.config.validate()?;
        let specs = param_specs(&ckpt.config);
        if specs.len() != ckpt.tensors.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                specs.len(),
                ckpt.tensors.len()
            )));
        }
        let mut params = ParamSet::default();
        for (s, t) in specs.into_iter().zip(&ckpt.tensors) {
            if s.name != t.name || s.shape != t.shape {
                return Err(ModelError::CheckpointMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    s.name, s.shape, t.name, t.shape
                )));
            }
            params.push(Param { name: s.name, shape: s.shape, data: t.data.clone(), kind: s.kind });
        }
        Ok(EncoderModel { config: ckpt.config.clone(), params, hash_table: ckpt.hash_table.clone() })
    }

    /// Copies every parameter onto a tape. Teachers bind frozen.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> Binding<'m> {
        let ids = self
            .params
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), p.shape.clone(), trainable))
            .collect();
        Binding { model: self, ids }
    }
}

/// Tape handles for one model's parameters.
pub struct Binding<'m> {
    model: &'m EncoderModel,
    ids: Vec<TensorId>,
}

impl Binding<'_> {
    pub fn id(&self, name: &str) -> TensorId {
        let i = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Gradients per parameter after a backward pass, in parameter order.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
    }
}

/// Forward mode: training applies dropout from the given stream.
pub enum Mode<'r> {
    Eval,
    Train { dropout_rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// One flat batch of `batch` sequences, each `seq_len` ids with a valid
/// prefix length (the rest is padding).
pub struct SeqBatch<'a> {
    pub tokens: &'a [u32],
    pub segments: Option<&'a [u8]>,
    pub lengths: &'a [usize],
    pub batch: usize,
    pub seq_len: usize,
}

impl<'a> SeqBatch<'a> {
    pub fn new(
        tokens: &'a [u32],
        segments: Option<&'a [u8]>,
        lengths: &'a [usize],
        seq_len: usize,
    ) -> Self {
        assert!(seq_len > 0 && tokens.len() % seq_len == 0, "tokens must tile seq_len");
        let batch = tokens.len() / seq_len;
        assert_eq!(lengths.len(), batch);
        if let Some(s) = segments {
            assert_eq!(s.len(), tokens.len());
        }
        SeqBatch { tokens, segments, lengths, batch, seq_len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Everything downstream consumers need from one forward pass.
pub struct EncodeOutput {
    /// (batch·seq_len) × hidden, after the final block.
    pub hidden: TensorId,
    /// Packed Q/K/V projections of the relation-source MHA block: the
    /// auxiliary block when present, otherwise the final dense MHA. `None`
    /// when the final MHA is a mixture and no auxiliary block exists.
    pub relations: Option<(TensorId, TensorId, TensorId)>,
    /// One record per MoE sublayer, in execution order.
    pub routing: Vec<MoeRecord>,
    pub rows: usize,
    pub seq_len: usize,
}

/// Routing outcome of one MoE sublayer.
pub struct MoeRecord {
    pub name: String,
    pub stats: moe::RoutingStats,
    /// Gate probabilities (gating algorithm only); feeds the balance loss.
    pub probs: Option<TensorId>,
}

struct MhaParams {
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
}

impl EncoderModel {
    fn mha_params(&self, bind: &Binding, prefix: &str) -> MhaParams {
        MhaParams {
            wq: bind.id(&format!("{prefix}.wq")),
            bq: bind.id(&format!("{prefix}.bq")),
            wk: bind.id(&format!("{prefix}.wk")),
            bk: bind.id(&format!("{prefix}.bk")),
            wv: bind.id(&format!("{prefix}.wv")),
            bv: bind.id(&format!("{prefix}.bv")),
            wo: bind.id(&format!("{prefix}.wo")),
            bo: bind.id(&format!("{prefix}.bo")),
        }
    }

    fn dropout(&self, tape: &mut Tape, x: TensorId, mode: &mut Mode) -> TensorId {
        let p = self.config.dropout;
        match mode {
            Mode::Train { dropout_rng } if p > 0.0 => {
                use rand::Rng;
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..tape.data(x).len())
                    .map(|_| if dropout_rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_const_mask(x, mask)
            }
            _ => x,
        }
    }

    /// Attention sublayer for one expert's parameters: packed projections,
    /// per-sequence scaled dot-product attention over the valid prefix, then
    /// the output projection. Returns the sublayer output (no residual) and
    /// the packed Q/K/V projections.
    fn attention(
        &self,
        tape: &mut Tape,
        p: &MhaParams,
        x: TensorId,
        batch: &SeqBatch,
        mode: &mut Mode,
    ) -> Result<(TensorId, (TensorId, TensorId, TensorId)), ModelError> {
        let d_a = self.config.head_dim;
        let n = batch.seq_len;
        let scale = 1.0 / (d_a as f64).sqrt();

        let q0 = tape.matmul(x, p.wq)?;
        let q = tape.add_bias(q0, p.bq);
        let k0 = tape.matmul(x, p.wk)?;
        let k = tape.add_bias(k0, p.bk);
        let v0 = tape.matmul(x, p.wv)?;
        let v = tape.add_bias(v0, p.bv);

        let mut seq_outs = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let valid = batch.lengths[b];
            let qb = tape.slice_rows(q, b * n, n);
            let kb = tape.slice_rows(k, b * n, n);
            let vb = tape.slice_rows(v, b * n, n);
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for h in 0..self.config.num_heads {
                let qh = tape.slice_cols(qb, h * d_a, d_a);
                let kh = tape.slice_cols(kb, h * d_a, d_a);
                let vh = tape.slice_cols(vb, h * d_a, d_a);
                let scores_raw = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores_raw, scale);
                let probs = tape.softmax_rows_masked(scores, valid);
                let probs = self.dropout(tape, probs, mode);
                heads.push(tape.matmul(probs, vh)?);
            }
            seq_outs.push(tape.concat_cols(&heads));
        }
        let cat = if seq_outs.len() == 1 { seq_outs[0] } else { tape.concat_rows(&seq_outs) };
        let o0 = tape.matmul(cat, p.wo)?;
        let out = tape.add_bias(o0, p.bo);
        Ok((out, (q, k, v)))
    }

    /// Full MHA block: (MoE-)attention, dropout, residual, layer norm.
    /// Returns the block output, the raw projections when the block is
    /// dense, and the routing record when it is a mixture.
    pub fn mha_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
        layer: LayerRef,
        batch: &SeqBatch,
        mode: &mut Mode,
    ) -> Result<(TensorId, Option<(TensorId, TensorId, TensorId)>, Option<MoeRecord>), ModelError> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { n: batch.seq_len, max: self.config.max_seq_len });
        }
        let (prefix, ln_prefix, m) = match layer {
            LayerRef::Layer(l) => (format!("layer.{l}.mha"), format!("layer.{l}.mha.ln"), self.config.experts_mha),
            LayerRef::Aux => ("aux".to_string(), "aux.ln".to_string(), 1),
        };

        let (sub, qkv, record) = if m == 1 {
            let name = match layer {
                LayerRef::Layer(_) => format!("{prefix}.expert.0"),
                LayerRef::Aux => prefix.clone(),
            };
            let params = self.mha_params(bind, &name);
            let (out, qkv) = self.attention(tape, &params, x, batch, mode)?;
            (out, Some(qkv), None)
        } else {
            let gate = bind.id(&format!("{prefix}.gate"));
            let mut expert_outs = Vec::with_capacity(m);
            for e in 0..m {
                let params = self.mha_params(bind, &format!("{prefix}.expert.{e}"));
                let (out, _) = self.attention(tape, &params, x, batch, mode)?;
                expert_outs.push(out);
            }
            let routed = moe::moe_block_combine(
                tape,
                x,
                &expert_outs,
                Some(gate),
                &self.config.router,
                self.hash_route_input(batch),
            )?;
            let MoeOutput { out, stats, probs } = routed;
            (out, None, Some(MoeRecord { name: prefix.clone(), stats, probs }))
        };

        let dropped = self.dropout(tape, sub, mode);
        let res = tape.add(x, dropped);
        let gain = bind.id(&format!("{ln_prefix}.gain"));
        let bias = bind.id(&format!("{ln_prefix}.bias"));
        Ok((tape.layer_norm(res, gain, bias), qkv, record))
    }

    fn hash_route_input<'b>(&self, batch: &SeqBatch<'b>) -> Option<(&'b [u32], &[u32])> {
        match (&self.config.router.algorithm, &self.hash_table) {
            (RouteAlgorithm::Hash, Some(table)) => Some((batch.tokens, table.as_slice())),
            _ => None,
        }
    }

    /// Full FFN block: (MoE-)feed-forward, dropout, residual, layer norm.
    pub fn ffn_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
        layer: usize,
        batch: &SeqBatch,
        mode: &mut Mode,
    ) -> Result<(TensorId, Option<MoeRecord>), ModelError> {
        let m = self.config.experts_ffn;
        let experts: Vec<FfnExpert> = (0..m)
            .map(|e| {
                let p = format!("layer.{layer}.ffn.expert.{e}");
                FfnExpert {
                    w_in: bind.id(&format!("{p}.w_in")),
                    b_in: bind.id(&format!("{p}.b_in")),
                    w_out: bind.id(&format!("{p}.w_out")),
                    b_out: bind.id(&format!("{p}.b_out")),
                }
            })
            .collect();
        let (sub, record) = if m == 1 {
            (moe::ffn_apply(tape, x, &experts[0])?, None)
        } else {
            let gate = bind.id(&format!("layer.{layer}.ffn.gate"));
            let routed = moe::moe_ffn_forward(
                tape,
                x,
                &experts,
                Some(gate),
                &self.config.router,
                self.hash_route_input(batch),
            )?;
            let MoeOutput { out, stats, probs } = routed;
            (out, Some(MoeRecord { name: format!("layer.{layer}.ffn"), stats, probs }))
        };
        let dropped = self.dropout(tape, sub, mode);
        let res = tape.add(x, dropped);
        let gain = bind.id(&format!("layer.{layer}.ffn.ln.gain"));
        let bias = bind.id(&format!("layer.{layer}.ffn.ln.bias"));
        Ok((tape.layer_norm(res, gain, bias), record))
    }

    /// Embeddings → L×(MHA, FFN) → optional auxiliary MHA. Pure function of
    /// (batch, parameters, dropout stream).
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &SeqBatch,
        mode: &mut Mode,
    ) -> Result<EncodeOutput, ModelError> {
        let n = batch.seq_len;
        if n > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { n, max: self.config.max_seq_len });
        }
        for &id in batch.tokens {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::OutOfVocab { id, vocab: self.config.vocab_size });
            }
        }

        let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(bind.id("embed.token"), &ids);
        let pos_idx: Vec<usize> = (0..batch.rows()).map(|i| i % n).collect();
        let pos = tape.gather_rows(bind.id("embed.position"), &pos_idx);
        let seg_idx: Vec<usize> = match batch.segments {
            Some(s) => s.iter().map(|&v| v as usize).collect(),
            None => vec![0; batch.rows()],
        };
        let seg = tape.gather_rows(bind.id("embed.segment"), &seg_idx);
        let sum0 = tape.add(tok, pos);
        let summed = tape.add(sum0, seg);
        let gain = bind.id("embed.ln.gain");
        let bias = bind.id("embed.ln.bias");
        let normed = tape.layer_norm(summed, gain, bias);
        let mut x = self.dropout(tape, normed, mode);

        let mut routing = Vec::new();
        let mut last_qkv = None;
        for l in 0..self.config.num_layers {
            let (mha_out, qkv, rec) = self.mha_forward(tape, bind, x, LayerRef::Layer(l), batch, mode)?;
            if let Some(r) = rec {
                routing.push(r);
            }
            if qkv.is_some() {
                last_qkv = qkv;
            }
            let (ffn_out, rec) = self.ffn_forward(tape, bind, mha_out, l, batch, mode)?;
            if let Some(r) = rec {
                routing.push(r);
            }
            x = ffn_out;
        }

        let (hidden, relations) = if self.config.has_aux_mha {
            let (aux_out, qkv, _) = self.mha_forward(tape, bind, x, LayerRef::Aux, batch, mode)?;
            (aux_out, Some(qkv.expect("aux block is dense")))
        } else {
            (x, last_qkv)
        };

        Ok(EncodeOutput { hidden, relations, routing, rows: batch.rows(), seq_len: n })
    }

    /// Removes the auxiliary alignment block, as done between distillation
    /// and finetuning. No-op for models without one.
    pub fn strip_aux(&self) -> EncoderModel {
        if !self.config.has_aux_mha {
            return self.clone();
        }
        let mut config = self.config.clone();
        config.has_aux_mha = false;
        let mut params = ParamSet::default();
        for p in &self.params.params {
            if !p.name.starts_with("aux.") {
                params.push(p.clone());
            }
        }
        EncoderModel { config, params, hash_table: self.hash_table.clone() }
    }

    /// Mean cross-entropy at the masked positions, through the tied MLM head.
    pub fn mlm_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        enc: &EncodeOutput,
        mask_positions: &[usize],
        targets: &[u32],
    ) -> Result<TensorId, ModelError> {
        if mask_positions.is_empty() {
            return Err(ModelError::EmptyMaskSet);
        }
        assert_eq!(mask_positions.len(), targets.len());
        for &t in targets {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::OutOfVocab { id: t, vocab: self.config.vocab_size });
            }
        }
        let h = tape.gather_rows(enc.hidden, mask_positions);
        let t0 = tape.matmul(h, bind.id("mlm.transform.w"))?;
        let t1 = tape.add_bias(t0, bind.id("mlm.transform.b"));
        let t2 = tape.gelu(t1);
        let gain = bind.id("mlm.ln.gain");
        let bias = bind.id("mlm.ln.bias");
        let t3 = tape.layer_norm(t2, gain, bias);
        let logits0 = tape.matmul_bt(t3, bind.id("embed.token"))?;
        let logits = tape.add_bias(logits0, bind.id("mlm.decoder.bias"));
        let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(tape.cross_entropy_rows(logits, &tgt))
    }

    /// Flat row index of each sequence's first (CLS) position.
    pub fn cls_rows(batch: &SeqBatch) -> Vec<usize> {
        (0..batch.batch).map(|b| b * batch.seq_len).collect()
    }
}

/// Which MHA block to run.
#[derive(Debug, Clone, Copy)]
pub enum LayerRef {
    Layer(usize),
    Aux,
}

#[cfg(test)]
mod tests;
