//! Tokenization, masked-LM batching, and synthetic classification tasks.
//!
//! The corpus format is UTF-8 plain text, one document per line. Tokens are
//! lowercased words split on non-alphanumeric characters; the vocabulary is
//! frequency-ranked with ties broken lexicographically so rebuilds are
//! deterministic.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const MASK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab max_size {0} cannot fit the special tokens")]
    VocabTooSmall(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset line {line}: {msg}")]
    BadDataset { line: usize, msg: String },
}

/// Word-level vocabulary with dense ids; specials occupy the low ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

/// Lowercased alphanumeric word split.
pub fn tokenize_line(line: &str) -> Vec<String> {
    line.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocab {
    /// Frequency-ranked vocabulary truncated to `max_size` (specials
    /// included in the budget). Deterministic given the corpus.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocab, CorpusError> {
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(CorpusError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for line in corpus.lines() {
            for tok in tokenize_line(line) {
                any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for (tok, _) in ranked.into_iter().take(max_size - SPECIAL_TOKENS.len()) {
            id_to_token.push(tok);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Id for a token; unknown words map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn encode_words(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.id_to_token {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, CorpusError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut id_to_token = Vec::new();
        for line in f.lines() {
            id_to_token.push(line?);
        }
        if id_to_token.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { token_to_id, id_to_token })
    }
}

/// Fixed-length windows: CLS prefix, then line tokens, PAD fill. Lines
/// longer than a window continue into the next window.
pub fn make_windows(corpus: &str, vocab: &Vocab, n: usize) -> Vec<(Vec<u32>, usize)> {
    assert!(n >= 2, "windows need room for CLS plus one token");
    let mut windows = Vec::new();
    for line in corpus.lines() {
        let ids = vocab.encode_words(&tokenize_line(line));
        if ids.is_empty() {
            continue;
        }
        for chunk in ids.chunks(n - 1) {
            let mut w = Vec::with_capacity(n);
            w.push(CLS);
            w.extend_from_slice(chunk);
            let len = w.len();
            w.resize(n, PAD);
            windows.push((w, len));
        }
    }
    windows
}

/// One masked-LM batch, flattened to `batch × seq_len` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub tokens: Vec<u32>,
    pub lengths: Vec<usize>,
    /// Flat row indices (into batch·seq_len) of masked positions.
    pub mask_positions: Vec<usize>,
    /// Original ids at the masked positions.
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Deterministic masked-LM batch stream: windows are reshuffled every epoch
/// from a seeded stream, 15% of non-special positions are masked with the
/// 80/10/10 replace/random/keep split.
pub struct MlmBatchStream {
    windows: Vec<(Vec<u32>, usize)>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    batch: usize,
    seq_len: usize,
    mask_prob: f64,
    vocab_size: u32,
    seed: u64,
    rng: ChaCha8Rng,
}

impl MlmBatchStream {
    pub fn new(
        windows: Vec<(Vec<u32>, usize)>,
        vocab_size: usize,
        batch: usize,
        seq_len: usize,
        mask_prob: f64,
        seed: u64,
    ) -> Self {
        assert!(!windows.is_empty(), "no windows to batch");
        let mut s = MlmBatchStream {
            windows,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            batch,
            seq_len,
            mask_prob,
            vocab_size: vocab_size as u32,
            seed,
            rng: crate::rng::named_stream(seed, "mlm/mask/0"),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut order_rng = crate::rng::named_stream(self.seed, &format!("mlm/order/{}", self.epoch));
        self.order = (0..self.windows.len()).collect();
        self.order.shuffle(&mut order_rng);
        self.rng = crate::rng::named_stream(self.seed, &format!("mlm/mask/{}", self.epoch));
        self.cursor = 0;
    }

    /// Next batch, cycling over epochs forever. When `masked` is false the
    /// windows are emitted verbatim (distillation reads raw text).
    pub fn next_batch(&mut self, masked: bool) -> MlmBatch {
        let n = self.seq_len;
        let mut tokens = Vec::with_capacity(self.batch * n);
        let mut lengths = Vec::with_capacity(self.batch);
        let mut mask_positions = Vec::new();
        let mut targets = Vec::new();
        for b in 0..self.batch {
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let (w, len) = &self.windows[self.order[self.cursor]];
            self.cursor += 1;
            let row_base = b * n;
            let mut row = w.clone();
            debug_assert_eq!(row.len(), n);
            if masked {
                // candidates exclude CLS (position 0) and PAD (>= len)
                let mut cand: Vec<usize> = (1..*len).collect();
                let k = ((cand.len() as f64) * self.mask_prob).round().max(1.0) as usize;
                cand.shuffle(&mut self.rng);
                let mut chosen: Vec<usize> = cand.into_iter().take(k).collect();
                chosen.sort_unstable();
                for pos in chosen {
                    targets.push(row[pos]);
                    mask_positions.push(row_base + pos);
                    let u: f64 = self.rng.gen();
                    if u < 0.8 {
                        row[pos] = MASK;
                    } else if u < 0.9 {
                        row[pos] = self.rng.gen_range(NUM_SPECIALS..self.vocab_size);
                    } // else keep
                }
            }
            tokens.extend_from_slice(&row);
            lengths.push(*len);
        }
        MlmBatch { tokens, lengths, mask_positions, targets, batch: self.batch, seq_len: n }
    }
}

/// Spec-level convenience: a seeded masked stream over a corpus.
pub fn make_mlm_batches(
    corpus: &str,
    vocab: &Vocab,
    n: usize,
    batch: usize,
    seed: u64,
) -> Result<MlmBatchStream, CorpusError> {
    let windows = make_windows(corpus, vocab, n);
    if windows.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(MlmBatchStream::new(windows, vocab.size(), batch, n, 0.15, seed))
}

// ── synthetic corpus and tasks ──────────────────────────────────────

pub const NUM_CLUSTERS: usize = 4;
const CONTENT_PER_CLUSTER: usize = 48;
const NOISE_WORDS: usize = 64;
const FUNCTION_WORDS: [&str; 12] =
    ["the", "and", "of", "to", "in", "is", "it", "on", "as", "at", "by", "or"];
/// Marker token counted by the parity task.
pub const PARITY_MARKER: &str = "zzmark";

fn content_word(cluster: usize, i: usize) -> String {
    format!("c{cluster}w{i:02}")
}

fn noise_word(i: usize) -> String {
    format!("nz{i:02}")
}

/// One sentence from a cluster: a guaranteed plurality of its content words
/// plus noise and function words.
fn cluster_sentence(cluster: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(8..=14);
    let forced = len * 2 / 5; // leading run pins the dominant cluster
    let mut words = Vec::with_capacity(len);
    for _ in 0..forced {
        words.push(content_word(cluster, rng.gen_range(0..CONTENT_PER_CLUSTER)));
    }
    for _ in forced..len {
        let u: f64 = rng.gen();
        if u < 0.45 {
            words.push(content_word(cluster, rng.gen_range(0..CONTENT_PER_CLUSTER)));
        } else if u < 0.75 {
            words.push(noise_word(rng.gen_range(0..NOISE_WORDS)));
        } else {
            words.push(FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())].to_string());
        }
    }
    words.shuffle(rng);
    words
}

/// Deterministic cluster-structured plain text of at least `min_bytes`, one
/// document per line.
pub fn generate_corpus(min_bytes: usize, seed: u64) -> String {
    let mut rng = crate::rng::named_stream(seed, "corpus/generate");
    let mut out = String::new();
    while out.len() < min_bytes {
        let cluster = rng.gen_range(0..NUM_CLUSTERS);
        let sentence = cluster_sentence(cluster, &mut rng);
        out.push_str(&sentence.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Parity,
    Topic,
    PairMatch,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parity" => Ok(TaskKind::Parity),
            "topic" => Ok(TaskKind::Topic),
            "pair-match" => Ok(TaskKind::PairMatch),
            other => Err(format!("unknown task kind {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub tokens: Vec<String>,
    pub label: usize,
    /// Word counts of the two segments for pair tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_lens: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub examples: Vec<TaskExample>,
}

impl TaskDataset {
    /// JSONL rows {"schema":"v1","tokens":[...],"label":k,...}.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ex in &self.examples {
            let mut row = serde_json::json!({
                "schema": "v1",
                "tokens": ex.tokens,
                "label": ex.label,
            });
            if let Some((a, b)) = ex.segment_lens {
                row["segment_lens"] = serde_json::json!([a, b]);
            }
            writeln!(f, "{row}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path, kind: TaskKind) -> Result<TaskDataset, CorpusError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut examples = Vec::new();
        let mut max_label = 0;
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| CorpusError::BadDataset { line: i + 1, msg: e.to_string() })?;
            let tokens: Vec<String> = v["tokens"]
                .as_array()
                .ok_or_else(|| CorpusError::BadDataset { line: i + 1, msg: "missing tokens".into() })?
                .iter()
                .map(|t| t.as_str().unwrap_or_default().to_string())
                .collect();
            let label = v["label"]
                .as_u64()
                .ok_or_else(|| CorpusError::BadDataset { line: i + 1, msg: "missing label".into() })?
                as usize;
            let segment_lens = v.get("segment_lens").and_then(|s| s.as_array()).map(|a| {
                (a[0].as_u64().unwrap_or(0) as usize, a[1].as_u64().unwrap_or(0) as usize)
            });
            max_label = max_label.max(label);
            examples.push(TaskExample { tokens, label, segment_lens });
        }
        if examples.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let num_classes = match kind {
            TaskKind::Parity | TaskKind::PairMatch => 2,
            TaskKind::Topic => (max_label + 1).max(NUM_CLUSTERS),
        };
        Ok(TaskDataset { kind, num_classes, examples })
    }
}

/// Deterministic labeled dataset. Labels are exactly balanced by
/// construction (round-robin), well within the 5% uniformity bound.
pub fn make_synthetic_task(kind: TaskKind, size: usize, seed: u64) -> TaskDataset {
    assert!(size >= 1);
    let mut rng = crate::rng::named_stream(seed, "task/generate");
    let mut examples = Vec::with_capacity(size);
    match kind {
        TaskKind::Parity => {
            for i in 0..size {
                let label = i % 2;
                let markers = 2 * rng.gen_range(0usize..2) + label; // parity = label
                let cluster = rng.gen_range(0..NUM_CLUSTERS);
                let mut tokens = cluster_sentence(cluster, &mut rng);
                for _ in 0..markers {
                    let pos = rng.gen_range(0..=tokens.len());
                    tokens.insert(pos, PARITY_MARKER.to_string());
                }
                examples.push(TaskExample { tokens, label, segment_lens: None });
            }
        }
        TaskKind::Topic => {
            for i in 0..size {
                let cluster = i % NUM_CLUSTERS;
                let tokens = cluster_sentence(cluster, &mut rng);
                examples.push(TaskExample { tokens, label: cluster, segment_lens: None });
            }
        }
        TaskKind::PairMatch => {
            for i in 0..size {
                let label = i % 2;
                let c1 = rng.gen_range(0..NUM_CLUSTERS);
                let c2 = if label == 1 {
                    c1
                } else {
                    (c1 + rng.gen_range(1..NUM_CLUSTERS)) % NUM_CLUSTERS
                };
                let s1 = cluster_sentence(c1, &mut rng);
                let s2 = cluster_sentence(c2, &mut rng);
                let segment_lens = Some((s1.len(), s2.len()));
                let mut tokens = s1;
                tokens.extend(s2);
                examples.push(TaskExample { tokens, label, segment_lens });
            }
        }
    }
    TaskDataset {
        kind,
        num_classes: if kind == TaskKind::Topic { NUM_CLUSTERS } else { 2 },
        examples,
    }
}

/// Independent label recount used as a test oracle: parity counts markers,
/// topic and pair-match tally cluster-content prefixes.
pub fn recount_label(kind: TaskKind, ex: &TaskExample) -> usize {
    fn dominant_cluster(tokens: &[String]) -> usize {
        let mut counts = [0usize; NUM_CLUSTERS];
        for t in tokens {
            for (c, cnt) in counts.iter_mut().enumerate() {
                if t.starts_with(&format!("c{c}w")) {
                    *cnt += 1;
                }
            }
        }
        counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
    match kind {
        TaskKind::Parity => ex.tokens.iter().filter(|t| t.as_str() == PARITY_MARKER).count() % 2,
        TaskKind::Topic => dominant_cluster(&ex.tokens),
        TaskKind::PairMatch => {
            let (a, _) = ex.segment_lens.expect("pair task has segments");
            let c1 = dominant_cluster(&ex.tokens[..a]);
            let c2 = dominant_cluster(&ex.tokens[a..]);
            usize::from(c1 == c2)
        }
    }
}
