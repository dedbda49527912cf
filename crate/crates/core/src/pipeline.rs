//! Dataset handling, the two fine-tuning phases, and preference-dataset
//! construction.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{DecodeParams, Decoder};
use crate::error::{invalid, Error, Result};
use crate::lm::{LmModel, Stage};
use crate::nn::{AdamConfig, OptimizerState, Schedule, Tape, Targets};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogPair {
    /// One turn per line.
    pub context: String,
    pub response: String,
}

impl DialogPair {
    pub fn new(context: impl Into<String>, response: impl Into<String>) -> Self {
        Self { context: context.into(), response: response.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context.trim().is_empty() || self.response.trim().is_empty() {
            return invalid("dialog pair needs a non-empty context and response");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub question: String,
    pub answer: String,
    pub score: f64,
}

impl PreferenceExample {
    pub fn new(question: impl Into<String>, answer: impl Into<String>, score: f64) -> Result<Self> {
        let e = Self { question: question.into(), answer: answer.into(), score };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return invalid(format!("preference score {} outside [0, 1]", self.score));
        }
        Ok(())
    }
}

/// A generated answer awaiting a rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub question: String,
    pub answer: String,
}

pub fn load_dialog_pairs(path: &Path) -> Result<Vec<DialogPair>> {
    let pairs: Vec<DialogPair> = crate::io::read_jsonl(path)?;
    for (i, p) in pairs.iter().enumerate() {
        p.validate().map_err(|e| Error::InvalidInput(format!("{}: record {}: {e}", path.display(), i + 1)))?;
    }
    Ok(pairs)
}

pub fn load_preferences(path: &Path) -> Result<Vec<PreferenceExample>> {
    let examples: Vec<PreferenceExample> = crate::io::read_jsonl(path)?;
    for (i, e) in examples.iter().enumerate() {
        e.validate().map_err(|err| Error::InvalidInput(format!("{}: record {}: {err}", path.display(), i + 1)))?;
    }
    Ok(examples)
}

/// Seeded shuffle into `(train, validation)` with `|train| = round(fraction · n)`.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return invalid("splitting needs at least 2 items");
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return invalid(format!("train fraction {train_fraction} outside [0, 1]"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * items.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Ignored under the Noam schedule, which sets the rate itself.
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    /// Fractional values run `floor(epochs · steps_per_epoch)` steps.
    pub epochs: f64,
    pub l1_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

impl TrainConfig {
    /// Base-corpus adaptation.
    pub fn phase1() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-5,
            schedule: Schedule::Noam,
            warmup_steps: 200,
            epochs: 2.5,
            l1_factor: 0.01,
            seed: 0,
        }
    }

    /// Closed-domain adaptation.
    pub fn phase2() -> Self {
        Self {
            batch_size: 1,
            learning_rate: 1e-5,
            schedule: Schedule::None,
            warmup_steps: 0,
            epochs: 2.0,
            l1_factor: 0.001,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return invalid(format!("epochs must be positive, got {}", self.epochs));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be finite and >= 0");
        }
        if !(self.l1_factor >= 0.0 && self.l1_factor.is_finite()) {
            return invalid("l1_factor must be finite and >= 0");
        }
        if self.schedule == Schedule::Noam && self.warmup_steps == 0 {
            return invalid("noam schedule needs warmup_steps >= 1");
        }
        Ok(())
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        let per_epoch = n_examples.div_ceil(self.batch_size);
        (self.epochs * per_epoch as f64).floor() as usize
    }

    fn adam(&self, d_model: usize) -> AdamConfig {
        let base = match self.schedule {
            Schedule::None => AdamConfig::constant(self.learning_rate),
            Schedule::Noam => AdamConfig::noam(d_model, self.warmup_steps),
        };
        base.with_l1(self.l1_factor)
    }
}

/// `prompt ++ response ++ [EOS]` ready for teacher forcing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub tokens: Vec<TokenId>,
    pub response_start: usize,
}

impl TrainingSequence {
    /// Target for input position `i`: the next token when it belongs to the response.
    pub fn target(&self, i: usize) -> Option<usize> {
        let next = i + 1;
        (next >= self.response_start && next < self.tokens.len()).then(|| self.tokens[next] as usize)
    }

    pub fn input(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

/// Encodes a pair, dropping context tokens from the left until the model input
/// fits `max_context`. The response is never cut, and at least one context
/// token is kept so the first response token has something to condition on.
pub fn encode_training_pair(vocab: &Vocabulary, pair: &DialogPair, max_context: usize) -> Result<TrainingSequence> {
    pair.validate()?;
    let (tokens, start) = vocab.encode_pair(&pair.context, &pair.response);
    let overflow = (tokens.len() - 1).saturating_sub(max_context);
    if overflow >= start {
        return invalid(format!(
            "response of {} tokens does not fit a context window of {max_context}",
            tokens.len() - start
        ));
    }
    Ok(TrainingSequence { tokens: tokens[overflow..].to_vec(), response_start: start - overflow })
}

/// Right-pads a batch with `pad` and builds masked targets: context and pad
/// positions carry no target.
pub fn batch_tensors(seqs: &[&TrainingSequence], pad: TokenId) -> (Vec<Vec<TokenId>>, Vec<Option<usize>>) {
    let width = seqs.iter().map(|s| s.tokens.len() - 1).max().unwrap_or(0);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        let mut row = s.input().to_vec();
        row.resize(width, pad);
        inputs.push(row);
        targets.extend((0..width).map(|i| s.target(i)));
    }
    (inputs, targets)
}

/// Mean response-token cross-entropy of a batch (no penalty term).
pub fn batch_loss(model: &LmModel, seqs: &[&TrainingSequence], pad: TokenId) -> Result<f64> {
    let (inputs, targets) = batch_tensors(seqs, pad);
    let rows: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new(model.params());
    let logits = model.forward(&mut tape, &rows)?;
    let loss = tape.cross_entropy(logits, Targets::Hard(targets))?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean response-token cross-entropy of the batch before the update.
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    out
}

/// Fine-tunes `model` in place and appends `stage` to its lineage.
pub fn finetune_lm(
    model: &mut LmModel,
    vocab: &Vocabulary,
    pairs: &[DialogPair],
    config: &TrainConfig,
    stage: Stage,
) -> Result<Vec<LossPoint>> {
    finetune_lm_with_progress(model, vocab, pairs, config, stage, &mut |_| {})
}

/// As [`finetune_lm`], reporting the completed fraction after every step.
pub fn finetune_lm_with_progress(
    model: &mut LmModel,
    vocab: &Vocabulary,
    pairs: &[DialogPair],
    config: &TrainConfig,
    stage: Stage,
    progress: &mut dyn FnMut(f64),
) -> Result<Vec<LossPoint>> {
    config.validate()?;
    match stage {
        Stage::Init => return invalid("cannot fine-tune into the init stage"),
        Stage::Phase2 if !model.lineage().contains(&Stage::Phase1) => {
            return Err(Error::Usage(
                "phase-2 fine-tuning must start from a phase-1 checkpoint".into(),
            ))
        }
        _ => {}
    }
    if pairs.is_empty() {
        return invalid("cannot fine-tune on an empty dataset");
    }
    if vocab.size() != model.config().vocab_size {
        return invalid(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.size(),
            model.config().vocab_size
        ));
    }
    let max_context = model.config().max_context;
    let seqs = pairs
        .iter()
        .map(|p| encode_training_pair(vocab, p, max_context))
        .collect::<Result<Vec<_>>>()?;
    let total = config.total_steps(seqs.len());
    let mut opt = OptimizerState::new(config.adam(model.config().d_model), model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(total);
    for step in 1..=total {
        if cursor >= order.len() {
            order = (0..seqs.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&TrainingSequence> = order[cursor..end].iter().map(|&i| &seqs[i]).collect();
        cursor = end;
        let (inputs, targets) = batch_tensors(&batch, vocab.pad());
        let rows: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let (loss, mut grads) = {
            let mut tape = Tape::new(model.params());
            let logits = model.forward(&mut tape, &rows)?;
            let loss = tape.cross_entropy(logits, Targets::Hard(targets))?;
            (tape.value(loss).data()[0], tape.backward(loss)?)
        };
        let lr = opt.step(model.params_mut(), &mut grads)?;
        curve.push(LossPoint { step, loss, lr });
        progress(step as f64 / total as f64);
    }
    model.record_stage(stage);
    Ok(curve)
}

/// Model input for a question: the prompt encoding, keeping the most recent
/// `max_context` tokens.
pub fn prompt_ids(vocab: &Vocabulary, context: &str, max_context: usize) -> Vec<TokenId> {
    let ids = vocab.encode_prompt(context);
    ids[ids.len().saturating_sub(max_context)..].to_vec()
}

/// Exactly `k` sampled answers per question, in question order. Answer `j` of
/// question `q` uses seed `params.seed + q·k + j`.
pub fn generate_preference_candidates(
    model: &LmModel,
    vocab: &Vocabulary,
    questions: &[String],
    k: usize,
    params: &DecodeParams,
) -> Result<Vec<CandidatePair>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    params.validate()?;
    let decoder = Decoder::new(model, vocab.eos());
    let per_question = questions
        .par_iter()
        .enumerate()
        .map(|(q, question)| {
            let prompt = prompt_ids(vocab, question, model.config().max_context);
            (0..k)
                .map(|j| {
                    let seed = params.seed.wrapping_add((q * k + j) as u64);
                    let c = decoder.sample_candidate(&prompt, &DecodeParams { seed, ..params.clone() })?;
                    Ok(CandidatePair { question: question.clone(), answer: vocab.decode(&c.tokens)?.trim().to_string() })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_question.into_iter().flatten().collect())
}

/// Like [`generate_preference_candidates`], but keeps drawing until each
/// question has `k` answers that are pairwise distinct and not rejected by
/// `reject(question, answer)`. Draw `d` of question `q` uses seed
/// `params.seed + q·max_draws + d`; fails when `max_draws` runs out.
pub fn generate_distinct_candidates(
    model: &LmModel,
    vocab: &Vocabulary,
    questions: &[String],
    k: usize,
    params: &DecodeParams,
    max_draws: usize,
    reject: &(dyn Fn(&str, &str) -> bool + Sync),
) -> Result<Vec<CandidatePair>> {
    if k == 0 || max_draws < k {
        return invalid("need k >= 1 and max_draws >= k");
    }
    params.validate()?;
    let decoder = Decoder::new(model, vocab.eos());
    let per_question = questions
        .par_iter()
        .enumerate()
        .map(|(q, question)| {
            let prompt = prompt_ids(vocab, question, model.config().max_context);
            let mut answers: Vec<String> = Vec::with_capacity(k);
            for d in 0..max_draws {
                if answers.len() == k {
                    break;
                }
                let seed = params.seed.wrapping_add((q * max_draws + d) as u64);
                let c = decoder.sample_candidate(&prompt, &DecodeParams { seed, ..params.clone() })?;
                let answer = vocab.decode(&c.tokens)?.trim().to_string();
                if !answers.contains(&answer) && !reject(question, &answer) {
                    answers.push(answer);
                }
            }
            if answers.len() < k {
                return invalid(format!("only {} distinct answers for {question:?} in {max_draws} draws", answers.len()));
            }
            Ok(answers.into_iter().map(|answer| CandidatePair { question: question.clone(), answer }).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_question.into_iter().flatten().collect())
}

/// Appends every gold pair with score 1.0. Entries sharing question and answer
/// text collapse into one, at the position of the first occurrence, keeping
/// the maximum score.
pub fn merge_gold(rated: &[PreferenceExample], gold: &[DialogPair]) -> Vec<PreferenceExample> {
    let mut out: Vec<PreferenceExample> = Vec::with_capacity(rated.len() + gold.len());
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let gold_examples = gold
        .iter()
        .map(|g| PreferenceExample { question: g.context.clone(), answer: g.response.clone(), score: 1.0 });
    for e in rated.iter().cloned().chain(gold_examples) {
        match index.get(&(e.question.clone(), e.answer.clone())) {
            Some(&i) => out[i].score = out[i].score.max(e.score),
            None => {
                index.insert((e.question.clone(), e.answer.clone()), out.len());
                out.push(e);
            }
        }
    }
    out
}
