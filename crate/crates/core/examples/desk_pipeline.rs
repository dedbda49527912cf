//! The full alignment run on the synthetic help-desk corpus: tokenizer, both
//! fine-tuning phases, rated candidates, reward training and a decoder
//! comparison. Pass `--quick` for a scaled-down run that finishes in seconds.

use palign::decoding::DecodeParams;
use palign::eval::{compare_decoders, Chatbot, CompareOptions, Strategy};
use palign::fixture::{run_desk_pipeline, DeskConfig};
use palign::lm::LmConfig;
use palign::pipeline::TrainConfig;
use palign::reward::RewardTrainConfig;

fn main() -> palign::Result<()> {
    let quick = std::env::args().any(|a| a == "--quick");
    let config = if quick {
        DeskConfig {
            base_pairs: 120,
            vocab_size: 300,
            lm: LmConfig { d_model: 16, n_layers: 1, max_context: 64, ff_width: 32, ..LmConfig::default() },
            phase1: TrainConfig { batch_size: 16, epochs: 1.0, ..DeskConfig::default().phase1 },
            phase2: TrainConfig { epochs: 6.0, learning_rate: 3e-3, ..DeskConfig::default().phase2 },
            candidates_per_question: 2,
            candidate_params: DecodeParams::plain(1.0, 16, 1),
            reward: RewardTrainConfig { epochs: 20, ..RewardTrainConfig::default() },
            ..DeskConfig::default()
        }
    } else {
        DeskConfig::default()
    };
    let run = run_desk_pipeline(&config, &mut |line| eprintln!("{line}"))?;

    let last = |c: &[palign::pipeline::LossPoint]| c.last().map_or(f64::NAN, |p| p.loss);
    println!("vocabulary {} tokens, lineage {:?}", run.vocab.size(), run.lm.lineage());
    println!("phase 1 loss {:.3} -> {:.3}", run.phase1_curve[0].loss, last(&run.phase1_curve));
    println!("phase 2 loss {:.3} -> {:.3}", run.phase2_curve[0].loss, last(&run.phase2_curve));
    println!("{} candidates, {} preference examples", run.candidates.len(), run.preferences.len());
    if let Some(p) = run.reward_curve.last() {
        println!("reward precision train {:.3} gold {:.3}", p.train_precision, p.val_precision.unwrap_or(f64::NAN));
    }

    let bot = Chatbot { lm: &run.lm, reward: Some(&run.reward), vocab: &run.vocab };
    let questions: Vec<String> = run.gold.iter().map(|p| p.context.clone()).collect();
    let references: Vec<Vec<String>> = run.gold.iter().map(|p| vec![p.response.clone()]).collect();
    let params = DecodeParams { max_len: 60, ..DecodeParams::default() };
    let report = compare_decoders(&bot, &questions, &references, &Strategy::ALL, &params, &CompareOptions::default())?;
    print!("{}", report.render_table());
    Ok(())
}
