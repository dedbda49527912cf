//! Toy decoder-only transformer: token + learned positional embeddings,
//! pre-norm residual blocks (causal multi-head attention, ReLU feed-forward),
//! final layer norm and an output head tied to the token-embedding table.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{checkpoint, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub ff_width: usize,
    pub tie_embeddings: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_context: 256,
            ff_width: 256,
            tie_embeddings: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_context == 0 || self.ff_width == 0 {
            return invalid("model dimensions must all be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return invalid(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        Ok(())
    }
}

/// Training stages a set of weights has been through, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Init,
    Phase1,
    Phase2,
}

/// Anything that can propose a next-token distribution for a context.
pub trait NextTokenModel: Sync {
    fn vocab_size(&self) -> usize;

    fn max_context(&self) -> usize;

    /// Unnormalized scores for the token following `context`.
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>>;

    /// Row `i` holds the logits predicting `tokens[i + 1]`.
    fn position_logits(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        (1..=tokens.len()).map(|n| self.next_token_logits(&tokens[..n])).collect()
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    up: (ParamId, ParamId),
    down: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct LmModel {
    config: LmConfig,
    params: ParamStore,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head_w: Option<ParamId>,
    head_b: ParamId,
    lineage: Vec<Stage>,
}

/// Sidecar metadata stored next to a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSidecar {
    pub config: LmConfig,
    pub vocab: String,
    pub lineage: Vec<Stage>,
}

const INIT_STD: f64 = 0.02;

impl LmModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let tok = p.add_normal("tok_emb", vec![config.vocab_size, d], INIT_STD, &mut rng);
        let pos = p.add_normal("pos_emb", vec![config.max_context, d], INIT_STD, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let norm = |p: &mut ParamStore, s: &str| {
                (
                    p.add_constant(name(&format!("{s}.gain")), ParamKind::Gain, vec![d], 1.0),
                    p.add_constant(name(&format!("{s}.bias")), ParamKind::Bias, vec![d], 0.0),
                )
            };
            let ln1 = norm(&mut p, "ln1");
            let ln2 = norm(&mut p, "ln2");
            let mut dense = |p: &mut ParamStore, s: &str, shape: [usize; 2], std: f64| {
                (
                    p.add_normal(name(&format!("{s}.weight")), shape.to_vec(), std, &mut rng),
                    p.add_constant(name(&format!("{s}.bias")), ParamKind::Bias, vec![shape[1]], 0.0),
                )
            };
            let qkv = dense(&mut p, "attn.qkv", [d, 3 * d], INIT_STD);
            let proj = dense(&mut p, "attn.proj", [d, d], resid_std);
            let up = dense(&mut p, "ff.up", [d, config.ff_width], INIT_STD);
            let down = dense(&mut p, "ff.down", [config.ff_width, d], resid_std);
            blocks.push(Block { ln1, qkv, proj, ln2, up, down });
        }
        let ln_f = (
            p.add_constant("ln_f.gain", ParamKind::Gain, vec![d], 1.0),
            p.add_constant("ln_f.bias", ParamKind::Bias, vec![d], 0.0),
        );
        let head_w = (!config.tie_embeddings)
            .then(|| p.add_normal("head.weight", vec![config.vocab_size, d], INIT_STD, &mut rng));
        let head_b = p.add_constant("head.bias", ParamKind::Bias, vec![config.vocab_size], 0.0);
        Ok(Self { config, params: p, tok, pos, blocks, ln_f, head_w, head_b, lineage: vec![Stage::Init] })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn lineage(&self) -> &[Stage] {
        &self.lineage
    }

    pub fn record_stage(&mut self, stage: Stage) {
        self.lineage.push(stage);
    }

    /// Has been through both fine-tuning phases, in order.
    pub fn is_aligned(&self) -> bool {
        let p1 = self.lineage.iter().position(|s| *s == Stage::Phase1);
        let p2 = self.lineage.iter().rposition(|s| *s == Stage::Phase2);
        matches!((p1, p2), (Some(a), Some(b)) if a < b)
    }

    /// Weight matrix of the output head (the embedding table when tied).
    pub fn head_weight(&self) -> ParamId {
        self.head_w.unwrap_or(self.tok)
    }

    pub fn token_embedding_table(&self) -> &Tensor {
        self.params.value(self.tok)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Final hidden states `[batch * seq, d_model]` for a batch of equal-length sequences.
    pub fn hidden(&self, tape: &mut Tape<'_>, batch: &[&[TokenId]]) -> Result<Var> {
        let seq = batch.first().map_or(0, |s| s.len());
        if seq == 0 || batch.iter().any(|s| s.len() != seq) {
            return invalid("batch must hold non-empty sequences of equal length");
        }
        if seq > self.config.max_context {
            return invalid(format!("sequence length {seq} exceeds max context {}", self.config.max_context));
        }
        let mut ids = Vec::with_capacity(batch.len() * seq);
        for s in batch {
            self.check_ids(s)?;
            ids.extend(s.iter().map(|&t| t as usize));
        }
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = tape.param(self.tok);
        let pos = tape.param(self.pos);
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        for b in &self.blocks {
            let (g, bi) = (tape.param(b.ln1.0), tape.param(b.ln1.1));
            let h = tape.layer_norm(x, g, bi)?;
            let (w, bb) = (tape.param(b.qkv.0), tape.param(b.qkv.1));
            let qkv = tape.linear(h, w, Some(bb), false)?;
            let att = tape.causal_attention(qkv, batch.len(), seq, self.config.n_heads)?;
            let (w, bb) = (tape.param(b.proj.0), tape.param(b.proj.1));
            let att = tape.linear(att, w, Some(bb), false)?;
            x = tape.add(x, att)?;
            let (g, bi) = (tape.param(b.ln2.0), tape.param(b.ln2.1));
            let h = tape.layer_norm(x, g, bi)?;
            let (w, bb) = (tape.param(b.up.0), tape.param(b.up.1));
            let h = tape.linear(h, w, Some(bb), false)?;
            let h = tape.relu(h);
            let (w, bb) = (tape.param(b.down.0), tape.param(b.down.1));
            let h = tape.linear(h, w, Some(bb), false)?;
            x = tape.add(x, h)?;
        }
        let (g, bi) = (tape.param(self.ln_f.0), tape.param(self.ln_f.1));
        tape.layer_norm(x, g, bi)
    }

    /// Output logits `[rows, vocab]` for hidden states `[rows, d_model]`.
    pub fn head(&self, tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        let w = tape.param(self.head_weight());
        let b = tape.param(self.head_b);
        tape.linear(hidden, w, Some(b), true)
    }

    /// Logits for every position of every sequence in the batch.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &[&[TokenId]]) -> Result<Var> {
        let h = self.hidden(tape, batch)?;
        self.head(tape, h)
    }

    /// Undivided logits at the last position of `context`.
    pub fn logits_last(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return invalid("context must not be empty");
        }
        let mut tape = Tape::new(&self.params);
        let h = self.hidden(&mut tape, &[context])?;
        let last = tape.select_rows(h, &[context.len() - 1])?;
        let logits = self.head(&mut tape, last)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Elementwise sum of token-embedding rows; the empty sequence maps to zeros.
    pub fn sentence_embedding(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        let table = self.params.value(self.tok);
        let mut out = vec![0.0; self.config.d_model];
        for &id in ids {
            for (o, v) in out.iter_mut().zip(table.row(id as usize)) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    /// Writes the parameter container at `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path, vocab_ref: &str) -> Result<()> {
        checkpoint::save(path, self.params.named_tensors())?;
        let sidecar = LmSidecar { config: self.config.clone(), vocab: vocab_ref.to_string(), lineage: self.lineage.clone() };
        crate::io::write_atomic(&Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, LmSidecar)> {
        let sidecar: LmSidecar = serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        let mut model = Self::new(sidecar.config.clone(), 0)?;
        model.params.load_named(checkpoint::load(path)?)?;
        model.lineage = sidecar.lineage.clone();
        Ok((model, sidecar))
    }
}

impl NextTokenModel for LmModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.logits_last(context)
    }

    fn position_logits(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, &[tokens])?;
        let v = tape.value(logits);
        Ok((0..tokens.len()).map(|r| v.row(r).to_vec()).collect())
    }
}
