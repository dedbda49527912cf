//! Decoding strategies: filtered temperature sampling, best-of-N selection by
//! a reward scorer, and length-unnormalized beam search.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lm::NextTokenModel;
use crate::nn::softmax_masked;
use crate::tokenizer::TokenId;

/// Knobs shared by every decoding strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    /// Divides the logits before sampling. `0` selects the argmax token.
    pub temperature: f64,
    pub max_len: usize,
    pub num_candidates: usize,
    /// `0` disables top-k filtering.
    pub top_k: usize,
    /// `1` disables nucleus filtering.
    pub top_p: f64,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 1.0, max_len: 200, num_candidates: 10, top_k: 20, top_p: 0.9, beam_width: 6, seed: 0 }
    }
}

impl DecodeParams {
    /// Unfiltered sampling at the given temperature.
    pub fn plain(temperature: f64, max_len: usize, seed: u64) -> Self {
        Self { temperature, max_len, top_k: 0, top_p: 1.0, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if self.max_len == 0 {
            return invalid("max_len must be at least 1");
        }
        if self.num_candidates == 0 {
            return invalid("num_candidates must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return invalid(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.beam_width == 0 {
            return invalid("beam_width must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    pub tokens: Vec<TokenId>,
    pub score: Option<f64>,
    /// The last token is EOS.
    pub terminated: bool,
}

/// Scores a generated continuation of a prompt. Higher is better.
pub trait CandidateScorer: Sync {
    fn score(&self, prompt: &[TokenId], candidate: &[TokenId]) -> Result<f64>;
}

impl<F> CandidateScorer for F
where
    F: Fn(&[TokenId], &[TokenId]) -> Result<f64> + Sync,
{
    fn score(&self, prompt: &[TokenId], candidate: &[TokenId]) -> Result<f64> {
        self(prompt, candidate)
    }
}

/// Output of best-of-N decoding: every candidate with its score, and the winner.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardDecoded {
    pub candidates: Vec<GenerationCandidate>,
    pub chosen: usize,
}

impl RewardDecoded {
    pub fn best(&self) -> &GenerationCandidate {
        &self.candidates[self.chosen]
    }
}

/// Masks disallowed entries with `-inf`: top-k first, then the smallest
/// descending-probability prefix whose mass reaches `top_p` among the
/// survivors. The largest logit always survives; ties rank by lower index.
pub fn filter_logits(logits: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut keep = logits.len();
    if top_k > 0 {
        keep = keep.min(top_k);
    }
    if top_p < 1.0 && keep > 0 {
        let kept: Vec<f64> = order[..keep].iter().map(|&i| logits[i]).collect();
        let probs = softmax_masked(&kept);
        let mut mass = 0.0;
        let mut cut = keep;
        for (n, p) in probs.iter().enumerate() {
            mass += p;
            if mass >= top_p {
                cut = n + 1;
                break;
            }
        }
        keep = cut;
    }
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for &i in &order[..keep.max(1).min(logits.len())] {
        out[i] = logits[i];
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from raw logits: temperature scaling, filtering, softmax,
/// then inverse-CDF sampling with one uniform draw.
pub fn sample_token(logits: &[f64], params: &DecodeParams, rng: &mut impl Rng) -> Result<TokenId> {
    if logits.is_empty() || logits.iter().any(|x| x.is_nan()) {
        return invalid("cannot sample from empty or NaN logits");
    }
    if params.temperature == 0.0 {
        return Ok(argmax(logits) as TokenId);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / params.temperature).collect();
    let probs = softmax_masked(&filter_logits(&scaled, params.top_k, params.top_p));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_nonzero = i;
            acc += p;
            if u < acc {
                return Ok(i as TokenId);
            }
        }
    }
    Ok(last_nonzero as TokenId)
}

fn cmp_scored(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Runs decoding strategies against one model and its EOS token.
pub struct Decoder<'a, M: NextTokenModel + ?Sized> {
    model: &'a M,
    eos: TokenId,
}

impl<'a, M: NextTokenModel + ?Sized> Decoder<'a, M> {
    pub fn new(model: &'a M, eos: TokenId) -> Self {
        Self { model, eos }
    }

    fn window<'c>(&self, ctx: &'c [TokenId]) -> &'c [TokenId] {
        let max = self.model.max_context();
        &ctx[ctx.len().saturating_sub(max)..]
    }

    fn check_prompt(&self, prompt: &[TokenId]) -> Result<()> {
        if prompt.is_empty() {
            return invalid("prompt must not be empty");
        }
        if prompt.len() > self.model.max_context() {
            return invalid(format!(
                "prompt of {} tokens exceeds the context window of {}",
                prompt.len(),
                self.model.max_context()
            ));
        }
        Ok(())
    }

    /// One sampled continuation using `params.seed`.
    pub fn sample_candidate(&self, prompt: &[TokenId], params: &DecodeParams) -> Result<GenerationCandidate> {
        params.validate()?;
        self.check_prompt(prompt)?;
        self.sample_seeded(prompt, params, params.seed)
    }

    fn sample_seeded(&self, prompt: &[TokenId], params: &DecodeParams, seed: u64) -> Result<GenerationCandidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut terminated = false;
        for _ in 0..params.max_len {
            let logits = self.model.next_token_logits(self.window(&ctx))?;
            let token = sample_token(&logits, params, &mut rng)?;
            tokens.push(token);
            if token == self.eos {
                terminated = true;
                break;
            }
            ctx.push(token);
        }
        Ok(GenerationCandidate { tokens, score: None, terminated })
    }

    /// Draws `params.num_candidates` continuations of the original prompt
    /// (candidate `i` uses seed `params.seed + i`), scores each, and picks the
    /// highest score; ties go to the lowest index.
    pub fn decode_with_rewards(
        &self,
        prompt: &[TokenId],
        scorer: &dyn CandidateScorer,
        params: &DecodeParams,
    ) -> Result<RewardDecoded> {
        params.validate()?;
        self.check_prompt(prompt)?;
        let mut candidates = (0..params.num_candidates as u64)
            .into_par_iter()
            .map(|i| {
                let mut c = self.sample_seeded(prompt, params, params.seed.wrapping_add(i))?;
                c.score = Some(scorer.score(prompt, &c.tokens)?);
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        if candidates.iter().all(|c| c.tokens.is_empty()) {
            return invalid("every candidate is empty");
        }
        let mut chosen = 0;
        for (i, c) in candidates.iter().enumerate() {
            let s = c.score.expect("scored above");
            if s.is_nan() {
                return Err(Error::InvalidInput(format!("candidate {i} scored NaN")));
            }
            if s > candidates[chosen].score.expect("scored above") {
                chosen = i;
            }
        }
        candidates.shrink_to_fit();
        Ok(RewardDecoded { candidates, chosen })
    }

    /// Beam search over summed log-probabilities. Beams that emit EOS are frozen
    /// but keep competing for slots. Returns the best finished beam, or the best
    /// unfinished one when none finished within `max_len`. Ties go to the
    /// lexicographically smaller token sequence.
    pub fn beam_search(&self, prompt: &[TokenId], beam_width: usize, max_len: usize) -> Result<Vec<TokenId>> {
        self.check_prompt(prompt)?;
        if beam_width == 0 || max_len == 0 {
            return invalid("beam width and max length must be at least 1");
        }
        struct Beam {
            tokens: Vec<TokenId>,
            logp: f64,
            finished: bool,
        }
        let mut beams = vec![Beam { tokens: Vec::new(), logp: 0.0, finished: false }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let expansions = beams
                .par_iter()
                .map(|b| -> Result<Vec<Beam>> {
                    if b.finished {
                        return Ok(vec![Beam { tokens: b.tokens.clone(), logp: b.logp, finished: true }]);
                    }
                    let mut ctx = prompt.to_vec();
                    ctx.extend_from_slice(&b.tokens);
                    let logits = self.model.next_token_logits(self.window(&ctx))?;
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                    Ok(logits
                        .iter()
                        .enumerate()
                        .map(|(t, l)| {
                            let mut tokens = b.tokens.clone();
                            tokens.push(t as TokenId);
                            Beam { tokens, logp: b.logp + (l - lse), finished: t as TokenId == self.eos }
                        })
                        .collect())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut next: Vec<Beam> = expansions.into_iter().flatten().collect();
            next.sort_by(|a, b| cmp_scored((a.logp, &a.tokens), (b.logp, &b.tokens)));
            next.truncate(beam_width);
            beams = next;
        }
        let pool: Vec<&Beam> = if beams.iter().any(|b| b.finished) {
            beams.iter().filter(|b| b.finished).collect()
        } else {
            beams.iter().collect()
        };
        let best = pool
            .into_iter()
            .min_by(|a, b| cmp_scored((a.logp, &a.tokens), (b.logp, &b.tokens)))
            .expect("at least one beam");
        Ok(best.tokens.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;
    use proptest::prelude::*;

    /// Fixed next-token distribution regardless of context.
    struct Constant {
        logits: Vec<f64>,
        ctx: usize,
    }

    impl NextTokenModel for Constant {
        fn vocab_size(&self) -> usize {
            self.logits.len()
        }
        fn max_context(&self) -> usize {
            self.ctx
        }
        fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
            assert!(context.len() <= self.ctx);
            Ok(self.logits.clone())
        }
    }

    #[test]
    fn filter_examples() {
        let f = filter_logits(&[3.0, 2.0, 1.0, 0.0], 2, 1.0);
        assert_eq!(f[..2], [3.0, 2.0]);
        assert!(f[2].is_infinite() && f[3].is_infinite());

        let probs = [0.5f64, 0.3, 0.2];
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let f = filter_logits(&logits, 0, 0.7);
        assert!(f[0].is_finite() && f[1].is_finite() && f[2] == f64::NEG_INFINITY);

        let raw = [0.1, -2.0, 5.0];
        assert_eq!(filter_logits(&raw, 0, 1.0), raw.to_vec());
        // A tiny nucleus still keeps the top entry.
        let f = filter_logits(&raw, 0, 1e-9);
        assert_eq!(f.iter().filter(|x| x.is_finite()).count(), 1);
        assert!(f[2].is_finite());
    }

    #[test]
    fn degenerate_eos_model_stops_immediately() {
        let m = Constant { logits: vec![-50.0, -50.0, 50.0], ctx: 8 };
        let d = Decoder::new(&m, 2);
        let c = d.sample_candidate(&[0], &DecodeParams::default()).unwrap();
        assert_eq!(c.tokens, vec![2]);
        assert!(c.terminated);
    }

    #[test]
    fn length_cap_and_context_overflow() {
        let m = Constant { logits: vec![0.0, 0.0, 0.0], ctx: 3 };
        let d = Decoder::new(&m, 2);
        let p = DecodeParams { max_len: 1, ..DecodeParams::plain(1.0, 1, 5) };
        assert_eq!(d.sample_candidate(&[0, 1], &p).unwrap().tokens.len(), 1);
        // Generation longer than the window keeps working on the last 3 tokens.
        let long = Constant { logits: vec![5.0, -5.0, -50.0], ctx: 3 };
        let d = Decoder::new(&long, 2);
        let c = d.sample_candidate(&[1, 1], &DecodeParams::plain(1.0, 20, 3)).unwrap();
        assert_eq!(c.tokens.len(), 20);
        assert!(!c.terminated);
        assert!(d.sample_candidate(&[1, 1, 1, 1], &DecodeParams::default()).is_err());
        assert!(d.sample_candidate(&[], &DecodeParams::default()).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = Constant { logits: vec![0.3, 0.1, 0.2, -0.4], ctx: 64 };
        let d = Decoder::new(&m, 3);
        let p = DecodeParams { seed: 17, top_k: 0, top_p: 1.0, max_len: 30, ..DecodeParams::default() };
        assert_eq!(d.sample_candidate(&[0], &p).unwrap(), d.sample_candidate(&[0], &p).unwrap());
    }

    #[test]
    fn zero_temperature_is_argmax() {
        let m = Constant { logits: vec![0.3, 1.1, 0.2, -0.4], ctx: 64 };
        let d = Decoder::new(&m, 0);
        let c = d.sample_candidate(&[0], &DecodeParams::plain(0.0, 4, 1)).unwrap();
        assert_eq!(c.tokens, vec![1, 1, 1, 1]);
    }

    #[test]
    fn single_candidate_matches_plain_sampling() {
        let m = Constant { logits: vec![0.3, 0.1, 0.2, -0.4], ctx: 64 };
        let d = Decoder::new(&m, 3);
        let p = DecodeParams { num_candidates: 1, seed: 9, max_len: 12, ..DecodeParams::default() };
        let scorer = |_: &[TokenId], c: &[TokenId]| Ok(c.len() as f64);
        let r = d.decode_with_rewards(&[0], &scorer, &p).unwrap();
        let mut plain = d.sample_candidate(&[0], &p).unwrap();
        plain.score = Some(plain.tokens.len() as f64);
        assert_eq!(r.candidates, vec![plain]);
        assert_eq!(r.chosen, 0);
    }

    #[test]
    fn length_scorer_picks_longest_lowest_index() {
        let m = Constant { logits: vec![0.0, 0.0, 0.0, 0.0], ctx: 64 };
        let d = Decoder::new(&m, 3);
        let p = DecodeParams { num_candidates: 10, seed: 4, max_len: 8, top_k: 0, top_p: 1.0, ..DecodeParams::default() };
        let scorer = |_: &[TokenId], c: &[TokenId]| Ok(c.len() as f64);
        let r = d.decode_with_rewards(&[0], &scorer, &p).unwrap();
        let longest = r.candidates.iter().map(|c| c.tokens.len()).max().unwrap();
        let first = r.candidates.iter().position(|c| c.tokens.len() == longest).unwrap();
        assert_eq!(r.chosen, first);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let m = Constant { logits: vec![0.1, 0.9, 0.3], ctx: 64 };
        let d = Decoder::new(&m, 2);
        assert_eq!(d.beam_search(&[0], 1, 3).unwrap(), vec![1, 1, 1]);
    }

    proptest! {
        #[test]
        fn filter_keeps_original_argmax(
            logits in prop::collection::vec(-20.0f64..20.0, 1..40),
            k in 0usize..10,
            p in 0.01f64..=1.0,
        ) {
            let f = filter_logits(&logits, k, p);
            prop_assert!(f[argmax(&logits)].is_finite());
        }

        #[test]
        fn colder_temperature_sharpens_argmax(
            logits in prop::collection::vec(-10.0f64..10.0, 2..20),
            t_hot in 0.05f64..5.0,
            frac in 0.01f64..1.0,
        ) {
            let t_cold = t_hot * frac;
            let i = argmax(&logits);
            let hot = softmax(&logits.iter().map(|l| l / t_hot).collect::<Vec<_>>()).unwrap();
            let cold = softmax(&logits.iter().map(|l| l / t_cold).collect::<Vec<_>>()).unwrap();
            prop_assert!(cold[i] >= hot[i] - 1e-15);
        }
    }
}
