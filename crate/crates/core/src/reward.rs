//! Feed-forward reward network over concatenated (question, answer) sentence
//! embeddings, its soft-target training loop and precision metric.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::CandidateScorer;
use crate::error::{invalid, Error, Result};
use crate::lm::LmModel;
use crate::nn::{checkpoint, AdamConfig, OptimizerState, ParamId, ParamKind, ParamStore, Tape, Targets, Tensor};
use crate::pipeline::PreferenceExample;
use crate::tokenizer::{TokenId, Vocabulary};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub d_model: usize,
    pub hidden: [usize; 2],
}

impl RewardConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, hidden: [128, 64] }
    }
}

#[derive(Debug, Clone)]
pub struct RewardNet {
    config: RewardConfig,
    params: ParamStore,
    layers: [(ParamId, ParamId); 3],
}

impl RewardNet {
    /// He-initialized weights, zero biases.
    pub fn new(config: RewardConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(seed))
    }

    /// Every weight and bias zero: scores 0.5 everywhere.
    pub fn zeroed(config: RewardConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: RewardConfig, seed: Option<u64>) -> Result<Self> {
        if config.d_model == 0 || config.hidden.contains(&0) {
            return invalid("reward network widths must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let widths = [2 * config.d_model, config.hidden[0], config.hidden[1], 2];
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let shape = vec![widths[l], widths[l + 1]];
            let w = match seed {
                Some(_) => {
                    let std = (2.0 / widths[l] as f64).sqrt();
                    params.add_normal(format!("layer{l}.weight"), shape, std, &mut rng)
                }
                None => params.add_constant(format!("layer{l}.weight"), ParamKind::Weight, shape, 0.0),
            };
            let b = params.add_constant(format!("layer{l}.bias"), ParamKind::Bias, vec![widths[l + 1]], 0.0);
            layers.push((w, b));
        }
        let layers = [layers[0], layers[1], layers[2]];
        Ok(Self { config, params, layers })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn logits(&self, tape: &mut Tape<'_>, inputs: Tensor) -> Result<crate::nn::Var> {
        let mut x = tape.input(inputs);
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(w), tape.param(b));
            x = tape.linear(x, w, Some(b), false)?;
            if l < 2 {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != 2 * self.config.d_model {
            return Err(Error::Shape(format!(
                "reward input of length {} for d_model {}",
                input.len(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// Probability of the "good" class for each concatenated input row.
    pub fn score_inputs(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut flat = Vec::with_capacity(inputs.len() * 2 * self.config.d_model);
        for row in inputs {
            self.check_input(row)?;
            flat.extend_from_slice(row);
        }
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, Tensor::new(vec![inputs.len(), 2 * self.config.d_model], flat)?)?;
        Ok(tape.value(logits).data().chunks_exact(2).map(|l| good_probability(l[0], l[1])).collect())
    }

    pub fn score(&self, question: &[f64], answer: &[f64]) -> Result<f64> {
        let d = self.config.d_model;
        if question.len() != d || answer.len() != d {
            return Err(Error::Shape(format!(
                "embeddings of length {} and {} for d_model {d}",
                question.len(),
                answer.len()
            )));
        }
        Ok(self.score_inputs(&[concat(question, answer)])?[0])
    }

    pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.params.named_tensors())?;
        crate::io::write_atomic(&Self::sidecar_path(path), serde_json::to_string_pretty(&self.config)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: RewardConfig = serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        let mut net = Self::zeroed(config)?;
        net.params.load_named(checkpoint::load(path)?)?;
        Ok(net)
    }
}

/// `softmax([good, bad])[0]`, kept strictly inside (0, 1).
fn good_probability(good: f64, bad: f64) -> f64 {
    let p = 1.0 / (1.0 + (bad - good).exp());
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Sum of the non-special tokens' embeddings.
pub fn embed_tokens(lm: &LmModel, vocab: &Vocabulary, ids: &[TokenId]) -> Result<Vec<f64>> {
    let plain: Vec<TokenId> = ids.iter().copied().filter(|&t| !vocab.is_special(t)).collect();
    lm.sentence_embedding(&plain)
}

pub fn embed_question(lm: &LmModel, vocab: &Vocabulary, question: &str) -> Result<Vec<f64>> {
    embed_tokens(lm, vocab, &vocab.encode_prompt(question))
}

pub fn embed_answer(lm: &LmModel, vocab: &Vocabulary, answer: &str) -> Result<Vec<f64>> {
    lm.sentence_embedding(&vocab.encode(answer.trim()))
}

/// A preference example reduced to network input and soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedExample {
    pub input: Vec<f64>,
    pub score: f64,
}

pub fn embed_examples(lm: &LmModel, vocab: &Vocabulary, examples: &[PreferenceExample]) -> Result<Vec<EmbeddedExample>> {
    examples
        .iter()
        .map(|e| {
            e.validate()?;
            let q = embed_question(lm, vocab, &e.question)?;
            let a = embed_answer(lm, vocab, &e.answer)?;
            Ok(EmbeddedExample { input: concat(&q, &a), score: e.score })
        })
        .collect()
}

/// Fraction of examples whose predicted side of the threshold matches the
/// label's side. Values equal to the threshold count as positive.
pub fn precision(net: &RewardNet, examples: &[EmbeddedExample]) -> Result<f64> {
    if examples.is_empty() {
        return invalid("precision of an empty set");
    }
    let inputs: Vec<Vec<f64>> = examples.iter().map(|e| e.input.clone()).collect();
    let scores = net.score_inputs(&inputs)?;
    let hits = scores.iter().zip(examples).filter(|(s, e)| (**s >= THRESHOLD) == (e.score >= THRESHOLD)).count();
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self { epochs: 1000, learning_rate: 0.001, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub epoch: usize,
    pub train_precision: f64,
    /// Absent when no validation set was given.
    pub val_precision: Option<f64>,
}

pub fn precision_curve_csv(curve: &[PrecisionPoint]) -> String {
    let mut out = String::from("epoch,train_precision,val_precision\n");
    for p in curve {
        let val = p.val_precision.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{val}\n", p.epoch, p.train_precision));
    }
    out
}

/// Minibatch Adam on the soft-target cross-entropy against `(score, 1 − score)`.
/// Records train and validation precision after every epoch.
pub fn train_reward(
    net: &mut RewardNet,
    train: &[EmbeddedExample],
    validation: &[EmbeddedExample],
    config: &RewardTrainConfig,
) -> Result<Vec<PrecisionPoint>> {
    train_reward_with_progress(net, train, validation, config, &mut |_| {})
}

pub fn train_reward_with_progress(
    net: &mut RewardNet,
    train: &[EmbeddedExample],
    validation: &[EmbeddedExample],
    config: &RewardTrainConfig,
    progress: &mut dyn FnMut(f64),
) -> Result<Vec<PrecisionPoint>> {
    if train.is_empty() {
        return invalid("cannot train the reward network on an empty dataset");
    }
    if config.batch_size == 0 {
        return invalid("batch_size must be at least 1");
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return invalid("learning_rate must be finite and >= 0");
    }
    for e in train.iter().chain(validation) {
        net.check_input(&e.input)?;
        if !(0.0..=1.0).contains(&e.score) {
            return invalid(format!("preference score {} outside [0, 1]", e.score));
        }
    }
    let width = 2 * net.config.d_model;
    let mut opt = OptimizerState::new(AdamConfig::constant(config.learning_rate), &net.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut flat = Vec::with_capacity(chunk.len() * width);
            let mut soft = Vec::with_capacity(chunk.len() * 2);
            for &i in chunk {
                flat.extend_from_slice(&train[i].input);
                soft.extend_from_slice(&[train[i].score, 1.0 - train[i].score]);
            }
            let mut grads = {
                let mut tape = Tape::new(&net.params);
                let logits = net.logits(&mut tape, Tensor::new(vec![chunk.len(), width], flat)?)?;
                let loss = tape.cross_entropy(logits, Targets::Soft(soft))?;
                tape.backward(loss)?
            };
            opt.step(&mut net.params, &mut grads)?;
        }
        let val_precision = if validation.is_empty() { None } else { Some(precision(net, validation)?) };
        curve.push(PrecisionPoint { epoch, train_precision: precision(net, train)?, val_precision });
        progress(epoch as f64 / config.epochs as f64);
    }
    Ok(curve)
}

/// Scores generated continuations the way the network was trained: the prompt's
/// non-special tokens against the re-encoded answer text.
pub struct RewardScorer<'a> {
    lm: &'a LmModel,
    net: &'a RewardNet,
    vocab: &'a Vocabulary,
}

impl<'a> RewardScorer<'a> {
    pub fn new(lm: &'a LmModel, net: &'a RewardNet, vocab: &'a Vocabulary) -> Result<Self> {
        if net.config.d_model != lm.config().d_model {
            return invalid(format!(
                "reward network expects d_model {} but the model has {}",
                net.config.d_model,
                lm.config().d_model
            ));
        }
        Ok(Self { lm, net, vocab })
    }
}

impl CandidateScorer for RewardScorer<'_> {
    fn score(&self, prompt: &[TokenId], candidate: &[TokenId]) -> Result<f64> {
        let q = embed_tokens(self.lm, self.vocab, prompt)?;
        let a = embed_answer(self.lm, self.vocab, &self.vocab.decode(candidate)?)?;
        self.net.score(&q, &a)
    }
}
