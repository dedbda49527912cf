//! Corpus BLEU and perplexity on their own, then the three decoders compared
//! side by side on a small model.

use palign::decoding::DecodeParams;
use palign::eval::{bleu, compare_decoders, perplexity, Chatbot, CompareOptions, Strategy};
use palign::fixture::qa_pairs;
use palign::lm::{LmConfig, LmModel, Stage};
use palign::nn::Schedule;
use palign::pipeline::{finetune_lm, TrainConfig};
use palign::reward::{RewardConfig, RewardNet};
use palign::tokenizer::train_bpe;

fn main() -> palign::Result<()> {
    let refs = vec![vec!["the cat sat on the mat.".to_string()], vec!["reset it from the settings page.".to_string()]];
    let exact: Vec<String> = refs.iter().map(|r| r[0].clone()).collect();
    let close = vec!["the cat sat on a mat.".to_string(), "reset it from the settings menu.".to_string()];
    println!("BLEU exact {:.1}, close {:.1}", bleu(&exact, &refs, 4)?, bleu(&close, &refs, 4)?);

    let gold: Vec<_> = qa_pairs().into_iter().take(6).collect();
    let vocab = train_bpe(gold.iter().flat_map(|p| [p.context.as_str(), p.response.as_str()]), 290)?;
    let config = LmConfig { vocab_size: vocab.size(), d_model: 16, n_layers: 1, max_context: 64, ff_width: 32, ..LmConfig::default() };
    let mut lm = LmModel::new(config, 4)?;
    println!("untrained perplexity {:.1} over {} tokens", perplexity(&lm, &vocab, &gold)?, vocab.size());
    let quick = TrainConfig { batch_size: 2, learning_rate: 5e-3, schedule: Schedule::None, l1_factor: 0.0, ..TrainConfig::phase2() };
    finetune_lm(&mut lm, &vocab, &gold, &TrainConfig { epochs: 1.0, ..quick.clone() }, Stage::Phase1)?;
    finetune_lm(&mut lm, &vocab, &gold, &TrainConfig { epochs: 40.0, ..quick }, Stage::Phase2)?;
    println!("trained perplexity {:.2}", perplexity(&lm, &vocab, &gold)?);

    // An untrained reward net still exercises the best-of-N path.
    let net = RewardNet::new(RewardConfig::new(16), 0)?;
    let bot = Chatbot { lm: &lm, reward: Some(&net), vocab: &vocab };
    let questions: Vec<String> = gold.iter().map(|p| p.context.clone()).collect();
    let references: Vec<Vec<String>> = gold.iter().map(|p| vec![p.response.clone()]).collect();
    let params = DecodeParams { max_len: 40, num_candidates: 4, ..DecodeParams::default() };
    let report = compare_decoders(&bot, &questions, &references, &Strategy::ALL, &params, &CompareOptions::default())?;
    print!("{}", report.render_table());
    Ok(())
}
