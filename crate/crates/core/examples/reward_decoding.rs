//! Trains a reward network on rated samples from a small model, then answers
//! with best-of-N decoding and compares against a single sample.

use palign::decoding::DecodeParams;
use palign::eval::{Chatbot, Strategy};
use palign::fixture::{qa_pairs, rate_candidates};
use palign::lm::{LmConfig, LmModel, Stage};
use palign::nn::Schedule;
use palign::pipeline::{finetune_lm, generate_preference_candidates, merge_gold, TrainConfig};
use palign::reward::{embed_examples, train_reward, RewardConfig, RewardNet, RewardTrainConfig};
use palign::tokenizer::train_bpe;

fn main() -> palign::Result<()> {
    let gold: Vec<_> = qa_pairs().into_iter().take(8).collect();
    let vocab = train_bpe(gold.iter().flat_map(|p| [p.context.as_str(), p.response.as_str()]), 300)?;
    let config = LmConfig { vocab_size: vocab.size(), d_model: 32, n_layers: 1, max_context: 64, ff_width: 64, ..LmConfig::default() };
    let mut lm = LmModel::new(config, 1)?;
    let quick = TrainConfig { batch_size: 4, learning_rate: 3e-3, schedule: Schedule::None, l1_factor: 0.0, ..TrainConfig::phase2() };
    finetune_lm(&mut lm, &vocab, &gold, &TrainConfig { epochs: 2.0, ..quick.clone() }, Stage::Phase1)?;
    finetune_lm(&mut lm, &vocab, &gold, &TrainConfig { epochs: 60.0, ..quick }, Stage::Phase2)?;

    let questions: Vec<String> = gold.iter().map(|p| p.context.clone()).collect();
    let candidates = generate_preference_candidates(&lm, &vocab, &questions, 12, &DecodeParams::plain(1.0, 40, 5))?;
    let preferences = merge_gold(&rate_candidates(&candidates, &gold), &gold);
    println!("{} candidates rated, {} preference examples", candidates.len(), preferences.len());

    let mut net = RewardNet::new(RewardConfig::new(lm.config().d_model), 2)?;
    let train = embed_examples(&lm, &vocab, &preferences)?;
    let curve = train_reward(&mut net, &train, &[], &RewardTrainConfig { epochs: 200, ..RewardTrainConfig::default() })?;
    println!("reward precision after {} epochs: {:.2}", curve.len(), curve[curve.len() - 1].train_precision);

    let bot = Chatbot { lm: &lm, reward: Some(&net), vocab: &vocab };
    let params = DecodeParams { max_len: 40, num_candidates: 8, ..DecodeParams::default() };
    for pair in gold.iter().take(4) {
        let sampled = bot.answer(&pair.context, Strategy::Sampling, &params)?;
        let best = bot.answer(&pair.context, Strategy::Reward, &params)?;
        println!("Q: {}\n  gold:     {}\n  sampled:  {}\n  reward:   {} (score {:.3})", pair.context, pair.response, sampled.text, best.text, best.score.unwrap_or(f64::NAN));
    }
    Ok(())
}
