//! Exhaustive reference implementations for the decoders.

use palign::lm::NextTokenModel;
use palign::tokenizer::TokenId;
use palign::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Context-dependent logits drawn from a seeded hash of the context. With
/// `quantized`, logits come from a 3-value set so equal scores are common.
pub struct TableModel {
    pub vocab: usize,
    pub seed: u64,
    pub quantized: bool,
}

impl NextTokenModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_context(&self) -> usize {
        64
    }
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let key = context.iter().fold(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15), |h, &t| {
            (h ^ (t as u64 + 1)).wrapping_mul(0x1000_0000_01b3)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        Ok((0..self.vocab)
            .map(|_| if self.quantized { rng.random_range(0..3) as f64 * 0.5 } else { rng.random_range(-2.0..2.0) })
            .collect())
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Best EOS-terminated continuation of at most `max_len` tokens by summed
/// log-probability, ties to the lexicographically smaller sequence; falls back
/// to the best length-`max_len` sequence when nothing can terminate.
pub fn exhaustive_best(model: &dyn NextTokenModel, prompt: &[TokenId], eos: TokenId, max_len: usize) -> Vec<TokenId> {
    let mut finished: Vec<(f64, Vec<TokenId>)> = Vec::new();
    let mut open: Vec<(f64, Vec<TokenId>)> = vec![(0.0, Vec::new())];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (lp, seq) in &open {
            let mut ctx = prompt.to_vec();
            ctx.extend_from_slice(seq);
            let logp = log_softmax(&model.next_token_logits(&ctx).unwrap());
            for (t, l) in logp.iter().enumerate() {
                let mut s = seq.clone();
                s.push(t as TokenId);
                if t as TokenId == eos {
                    finished.push((lp + l, s));
                } else {
                    next.push((lp + l, s));
                }
            }
        }
        open = next;
    }
    let pool = if finished.is_empty() { open } else { finished };
    pool.into_iter()
        .min_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)))
        .unwrap()
        .1
}
