//! BLEU, perplexity and the side-by-side comparison of decoding strategies.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{DecodeParams, Decoder};
use crate::error::{invalid, Error, Result};
use crate::lm::{LmModel, NextTokenModel};
use crate::pipeline::{encode_training_pair, prompt_ids, DialogPair, TrainingSequence};
use crate::reward::{RewardNet, RewardScorer};
use crate::tokenizer::{TokenId, Vocabulary};

pub const MAX_ORDER: usize = 4;

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '¿' | '¡' | '«' | '»' | '…' | '“' | '”' | '‘' | '’' | '—' | '–')
}

/// Lowercases, puts spaces around punctuation marks, and splits on whitespace.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() * 2);
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_punctuation(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Default, Clone, Copy)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self, max_n: usize) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        100.0 * bp * (log_sum / max_n as f64).exp()
    }
}

fn sentence_stats(candidate: &str, references: &[String], max_n: usize) -> BleuStats {
    let cand = bleu_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| bleu_tokens(r)).collect();
    let mut stats = BleuStats { cand_len: cand.len(), ..Default::default() };
    // Closest reference length; ties go to the shorter one.
    stats.ref_len = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand.len()), r))
        .unwrap_or(0);
    for n in 1..=max_n {
        let counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = cand.len().saturating_sub(n - 1);
        stats.matches[n - 1] = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    stats
}

fn check_corpus(candidates: &[String], references: &[Vec<String>], max_n: usize) -> Result<()> {
    if candidates.is_empty() {
        return invalid("BLEU of an empty corpus");
    }
    if candidates.len() != references.len() {
        return invalid(format!("{} candidates but {} reference lists", candidates.len(), references.len()));
    }
    if references.iter().any(Vec::is_empty) {
        return invalid("every candidate needs at least one reference");
    }
    if max_n == 0 || max_n > MAX_ORDER {
        return invalid(format!("max n-gram order must lie in 1..={MAX_ORDER}"));
    }
    Ok(())
}

/// Corpus BLEU on a 0–100 scale with clipped n-gram counts, uniform weights and
/// no smoothing: any order without a single match scores 0.
pub fn bleu(candidates: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    check_corpus(candidates, references, max_n)?;
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&sentence_stats(c, r, max_n));
    }
    Ok(total.score(max_n))
}

/// Mean of per-sentence BLEU scores.
pub fn sentence_bleu_mean(candidates: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    check_corpus(candidates, references, max_n)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| sentence_stats(c, r, max_n).score(max_n)).sum();
    Ok(sum / candidates.len() as f64)
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// `exp` of the mean negative log-likelihood over every response target
/// (including EOS) of the given sequences.
pub fn sequence_perplexity<M: NextTokenModel + ?Sized>(model: &M, seqs: &[TrainingSequence]) -> Result<f64> {
    let parts = seqs
        .par_iter()
        .map(|s| -> Result<(f64, usize)> {
            if s.tokens.len() < 2 || s.response_start == 0 {
                return invalid("sequence needs a prompt token and at least one target");
            }
            let rows = model.position_logits(s.input())?;
            let mut nll = 0.0;
            let mut count = 0;
            for (i, row) in rows.iter().enumerate() {
                if let Some(t) = s.target(i) {
                    nll -= log_softmax_at(row, t);
                    count += 1;
                }
            }
            Ok((nll, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nll, count) = parts.into_iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if count == 0 {
        return invalid("perplexity needs at least one target token");
    }
    Ok((nll / count as f64).exp())
}

/// Perplexity of `model` on the responses of `pairs`, context masked.
pub fn perplexity<M: NextTokenModel + ?Sized>(model: &M, vocab: &Vocabulary, pairs: &[DialogPair]) -> Result<f64> {
    if pairs.is_empty() {
        return invalid("perplexity of an empty set");
    }
    let seqs = pairs
        .iter()
        .map(|p| encode_training_pair(vocab, p, model.max_context()))
        .collect::<Result<Vec<_>>>()?;
    sequence_perplexity(model, &seqs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sampling,
    Reward,
    Beam,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sampling, Strategy::Reward, Strategy::Beam];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sampling => "sampling",
            Strategy::Reward => "reward",
            Strategy::Beam => "beam",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sampling" => Ok(Strategy::Sampling),
            "reward" => Ok(Strategy::Reward),
            "beam" => Ok(Strategy::Beam),
            other => invalid(format!("unknown strategy {other:?} (expected sampling, reward or beam)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityMode {
    /// The model scored on each strategy's own outputs.
    #[default]
    SelfGenerated,
    /// The model scored on the reference answers; identical for every strategy.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuMode {
    #[default]
    Corpus,
    SentenceMean,
}

/// Output of one strategy for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Reward of the chosen candidate (reward strategy only).
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub bleu: f64,
    pub perplexity: f64,
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub params: DecodeParams,
    pub perplexity_mode: PerplexityMode,
    pub bleu_mode: BleuMode,
    pub lm_checkpoint: Option<String>,
    pub reward_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub reference_perplexity: f64,
    pub strategies: Vec<StrategyReport>,
    pub metadata: EvalMetadata,
}

#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    pub perplexity_mode: PerplexityMode,
    pub bleu_mode: BleuMode,
    pub lm_checkpoint: Option<String>,
    pub reward_checkpoint: Option<String>,
}

/// Models and tokenizer a decoding strategy runs against.
pub struct Chatbot<'a> {
    pub lm: &'a LmModel,
    pub reward: Option<&'a RewardNet>,
    pub vocab: &'a Vocabulary,
}

impl Chatbot<'_> {
    /// Answers one question. `seed` drives sampling; beam search ignores it.
    pub fn answer(&self, question: &str, strategy: Strategy, params: &DecodeParams) -> Result<Answer> {
        params.validate()?;
        let prompt = prompt_ids(self.vocab, question, self.lm.config().max_context);
        let decoder = Decoder::new(self.lm, self.vocab.eos());
        let (tokens, score) = match strategy {
            Strategy::Sampling => (decoder.sample_candidate(&prompt, params)?.tokens, None),
            Strategy::Reward => {
                let net = self.reward.ok_or_else(|| Error::Usage("reward decoding needs a reward network".into()))?;
                let scorer = RewardScorer::new(self.lm, net, self.vocab)?;
                let out = decoder.decode_with_rewards(&prompt, &scorer, params)?;
                let best = out.best();
                (best.tokens.clone(), best.score)
            }
            Strategy::Beam => (decoder.beam_search(&prompt, params.beam_width, params.max_len)?, None),
        };
        Ok(Answer { text: self.vocab.decode(&tokens)?.trim().to_string(), tokens, score })
    }
}

/// Runs each strategy over the same questions. Question `i` is decoded with
/// seed `params.seed + i` under every sampling strategy.
pub fn compare_decoders(
    bot: &Chatbot<'_>,
    questions: &[String],
    references: &[Vec<String>],
    strategies: &[Strategy],
    params: &DecodeParams,
    options: &CompareOptions,
) -> Result<EvalReport> {
    if questions.is_empty() {
        return invalid("no questions to evaluate");
    }
    if questions.len() != references.len() {
        return invalid(format!("{} questions but {} reference lists", questions.len(), references.len()));
    }
    if strategies.is_empty() {
        return invalid("no strategies selected");
    }
    params.validate()?;
    let ref_pairs: Vec<DialogPair> = questions
        .iter()
        .zip(references)
        .flat_map(|(q, refs)| refs.iter().map(move |r| DialogPair::new(q.clone(), r.clone())))
        .collect();
    let reference_perplexity = perplexity(bot.lm, bot.vocab, &ref_pairs)?;
    let max_context = bot.lm.config().max_context;
    let mut reports = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let answers = questions
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let p = DecodeParams { seed: params.seed.wrapping_add(i as u64), ..params.clone() };
                bot.answer(q, strategy, &p)
            })
            .collect::<Result<Vec<_>>>()?;
        let texts: Vec<String> = answers.iter().map(|a| a.text.clone()).collect();
        let bleu_score = match options.bleu_mode {
            BleuMode::Corpus => bleu(&texts, references, MAX_ORDER)?,
            BleuMode::SentenceMean => sentence_bleu_mean(&texts, references, MAX_ORDER)?,
        };
        let ppl = match options.perplexity_mode {
            PerplexityMode::Reference => reference_perplexity,
            PerplexityMode::SelfGenerated => {
                let seqs: Vec<TrainingSequence> = questions
                    .iter()
                    .zip(&answers)
                    .map(|(q, a)| {
                        let prompt = prompt_ids(bot.vocab, q, max_context);
                        let mut tokens = prompt.clone();
                        tokens.extend(&a.tokens);
                        let keep = tokens.len().saturating_sub(max_context + 1).min(prompt.len() - 1);
                        TrainingSequence { tokens: tokens[keep..].to_vec(), response_start: prompt.len() - keep }
                    })
                    .collect();
                sequence_perplexity(bot.lm, &seqs)?
            }
        };
        reports.push(StrategyReport { strategy, bleu: bleu_score, perplexity: ppl, answers });
    }
    Ok(EvalReport {
        questions: questions.to_vec(),
        references: references.to_vec(),
        reference_perplexity,
        strategies: reports,
        metadata: EvalMetadata {
            params: params.clone(),
            perplexity_mode: options.perplexity_mode,
            bleu_mode: options.bleu_mode,
            lm_checkpoint: options.lm_checkpoint.clone(),
            reward_checkpoint: options.reward_checkpoint.clone(),
        },
    })
}

impl EvalReport {
    /// Strategy × {BLEU, perplexity} grid.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>12}", "Decoder", "BLEU", "Perplexity");
        for s in &self.strategies {
            let _ = writeln!(out, "{:<12} {:>10.2} {:>12.2}", s.strategy.name(), s.bleu, s.perplexity);
        }
        out
    }

    /// One row per question and strategy.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format { what: "csv", detail: e.to_string() };
        w.write_record(["question_index", "strategy", "question", "answer", "score"]).map_err(csv_err)?;
        for s in &self.strategies {
            for (i, a) in s.answers.iter().enumerate() {
                let score = a.score.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([&i.to_string(), s.strategy.name(), &self.questions[i], &a.text, &score])
                    .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenization_detaches_punctuation() {
        assert_eq!(bleu_tokens("Hola, ¿Qué tal?"), s(&["hola", ",", "¿", "qué", "tal", "?"]));
        assert!(bleu_tokens("   ").is_empty());
    }

    #[test]
    fn identity_and_disjoint() {
        let c = s(&["the cat sat on the mat", "a quick brown fox jumps"]);
        let refs: Vec<Vec<String>> = c.iter().map(|x| vec![x.clone()]).collect();
        assert_eq!(bleu(&c, &refs, 4).unwrap(), 100.0);
        let other = vec![s(&["one two three four five six"]), s(&["seven eight nine ten eleven"])];
        assert_eq!(bleu(&c, &other, 4).unwrap(), 0.0);
        assert!(bleu(&[], &[], 4).is_err());
        assert!(bleu(&c, &refs[..1], 4).is_err());
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let c = s(&["a b c d"]);
        let refs = vec![s(&["a b c d e f", "a b c d x y z w"])];
        let expected = 100.0 * (1.0 - 6.0 / 4.0f64).exp();
        assert!((bleu(&c, &refs, 4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_perplexity() {
        struct Uniform;
        impl NextTokenModel for Uniform {
            fn vocab_size(&self) -> usize {
                50
            }
            fn max_context(&self) -> usize {
                64
            }
            fn next_token_logits(&self, _: &[TokenId]) -> Result<Vec<f64>> {
                Ok(vec![0.0; 50])
            }
        }
        let seq = TrainingSequence { tokens: vec![1, 2, 3, 4, 49], response_start: 2 };
        assert!((sequence_perplexity(&Uniform, &[seq]).unwrap() - 50.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn bleu_ignores_pair_order(
            words in prop::collection::vec(prop::collection::vec(0u8..6, 1..9), 2..6),
            refs in prop::collection::vec(prop::collection::vec(0u8..6, 1..9), 2..6),
            rot in 0usize..5,
        ) {
            let n = words.len().min(refs.len());
            let text = |v: &Vec<u8>| v.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            let cands: Vec<String> = words[..n].iter().map(text).collect();
            let rs: Vec<Vec<String>> = refs[..n].iter().map(|r| vec![text(r)]).collect();
            let mut c2 = cands.clone();
            let mut r2 = rs.clone();
            c2.rotate_left(rot % n);
            r2.rotate_left(rot % n);
            prop_assert_eq!(bleu(&cands, &rs, 4).unwrap(), bleu(&c2, &r2, 4).unwrap());
        }

        #[test]
        fn own_reference_scores_full_marks(
            words in prop::collection::vec(0u8..6, 4..12),
            other in prop::collection::vec(0u8..6, 1..12),
        ) {
            let text = |v: &Vec<u8>| v.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            let c = text(&words);
            let refs = vec![vec![text(&other), c.clone()]];
            prop_assert_eq!(bleu(&[c], &refs, 4).unwrap(), 100.0);
        }
    }
}
