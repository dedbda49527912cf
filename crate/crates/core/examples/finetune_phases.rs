//! Takes a small transformer through both fine-tuning phases, then saves and
//! reloads the checkpoint with its lineage.

use palign::fixture::{base_corpus, qa_pairs};
use palign::lm::{LmConfig, LmModel, Stage};
use palign::nn::Schedule;
use palign::pipeline::{finetune_lm, loss_curve_csv, TrainConfig};
use palign::tokenizer::train_bpe;

fn main() -> palign::Result<()> {
    let base = base_corpus(200, 3);
    let gold: Vec<_> = qa_pairs().into_iter().take(10).collect();
    let vocab = train_bpe(base.iter().chain(&gold).flat_map(|p| [p.context.as_str(), p.response.as_str()]), 320)?;

    let config = LmConfig { vocab_size: vocab.size(), d_model: 32, n_layers: 1, max_context: 64, ff_width: 64, ..LmConfig::default() };
    let mut lm = LmModel::new(config, 0)?;

    let phase1 = TrainConfig { batch_size: 16, epochs: 1.0, ..TrainConfig::phase1() };
    let curve = finetune_lm(&mut lm, &vocab, &base, &phase1, Stage::Phase1)?;
    println!("phase 1: {} steps, loss {:.3} -> {:.3}", curve.len(), curve[0].loss, curve[curve.len() - 1].loss);

    let phase2 = TrainConfig { batch_size: 1, learning_rate: 3e-3, schedule: Schedule::None, epochs: 15.0, ..TrainConfig::phase2() };
    let curve = finetune_lm(&mut lm, &vocab, &gold, &phase2, Stage::Phase2)?;
    println!("phase 2: {} steps, loss {:.3} -> {:.3}", curve.len(), curve[0].loss, curve[curve.len() - 1].loss);
    println!("last rows of the phase 2 curve:\n{}", loss_curve_csv(&curve[curve.len() - 3..]));

    let dir = std::env::temp_dir().join("palign-finetune-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("lm.paln");
    lm.save(&path, "vocab.txt")?;
    let (reloaded, sidecar) = LmModel::load(&path)?;
    println!("reloaded lineage {:?}, aligned: {}", reloaded.lineage(), reloaded.is_aligned());
    println!("sidecar: {}", serde_json::to_string(&sidecar).unwrap_or_default());
    Ok(())
}
