use palign::eval::{bleu, perplexity, sequence_perplexity};
use palign::lm::{LmConfig, LmModel, NextTokenModel, Stage};
use palign::nn::Schedule;
use palign::pipeline::{finetune_lm, DialogPair, TrainConfig, TrainingSequence};
use palign::tokenizer::{TokenId, Vocabulary};
use palign::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct BleuFixture {
    candidates: Vec<String>,
    references: Vec<Vec<String>>,
    expected: f64,
}

#[test]
fn bleu_matches_reference_implementation() {
    let fixture: BleuFixture =
        serde_json::from_str(include_str!("data/bleu_fixture.json")).expect("fixture parses");
    let got = bleu(&fixture.candidates, &fixture.references, 4).unwrap();
    assert!((got - fixture.expected).abs() < 1e-6, "got {got}, expected {}", fixture.expected);
}

/// Next-token distribution chosen by context length.
struct ByLength(Vec<Vec<f64>>);

impl NextTokenModel for ByLength {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }
    fn max_context(&self) -> usize {
        self.0.len()
    }
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.0[context.len() - 1].iter().map(|p| p.ln()).collect())
    }
}

#[test]
fn two_token_hand_arithmetic() {
    let model = ByLength(vec![vec![0.25, 0.5, 0.125, 0.125], vec![0.25, 0.25, 0.25, 0.25]]);
    let seq = TrainingSequence { tokens: vec![0, 1, 2], response_start: 1 };
    let ppl = sequence_perplexity(&model, &[seq]).unwrap();
    assert!((ppl - 8f64.sqrt()).abs() < 1e-9, "{ppl}");
}

fn tiny(vocab: usize, seed: u64) -> LmModel {
    let config = LmConfig { vocab_size: vocab, d_model: 8, n_layers: 1, n_heads: 2, max_context: 64, ff_width: 16, tie_embeddings: seed % 2 == 0 };
    let mut model = LmModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, p) in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

#[test]
fn perplexity_equals_direct_summation() {
    let vocab = Vocabulary::bytes_only();
    let pairs = vec![DialogPair::new("hi there", "ok"), DialogPair::new("what?", "yes, no")];
    for seed in 0..10 {
        let model = tiny(vocab.size(), seed);
        let mut nll = 0.0;
        let mut count = 0.0;
        for p in &pairs {
            let (ids, start) = vocab.encode_pair(&p.context, &p.response);
            for t in start..ids.len() {
                let logits = model.next_token_logits(&ids[..t]).unwrap();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                nll -= (logits[ids[t] as usize].exp() / z).ln();
                count += 1.0;
            }
        }
        let direct = (nll / count).exp();
        let got = perplexity(&model, &vocab, &pairs).unwrap();
        assert!((got - direct).abs() / direct < 1e-10, "seed {seed}: {got} vs {direct}");
    }
    assert!(perplexity(&tiny(vocab.size(), 0), &vocab, &[]).is_err());
}

#[test]
fn memorization_lowers_perplexity() {
    let vocab = Vocabulary::bytes_only();
    let pairs: Vec<DialogPair> = ["ab", "cd", "ef", "gh"].iter().map(|q| DialogPair::new(*q, format!("{q}!"))).collect();
    let config = LmConfig { vocab_size: vocab.size(), d_model: 16, n_layers: 1, n_heads: 2, max_context: 16, ff_width: 32, tie_embeddings: true };
    let mut model = LmModel::new(config, 3).unwrap();
    let before = perplexity(&model, &vocab, &pairs).unwrap();
    let train = TrainConfig { batch_size: 4, learning_rate: 0.01, schedule: Schedule::None, warmup_steps: 0, epochs: 150.0, l1_factor: 0.0, seed: 1 };
    finetune_lm(&mut model, &vocab, &pairs, &train, Stage::Phase1).unwrap();
    let after = perplexity(&model, &vocab, &pairs).unwrap();
    assert!(after < before, "{after} >= {before}");
    assert!(after < 1.01, "overfit perplexity {after}");
}
