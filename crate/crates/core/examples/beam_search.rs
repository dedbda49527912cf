//! Greedy decoding commits to the locally best token; a wider beam finds the
//! sequence with the higher total probability.

use palign::decoding::{Decoder, DecodeParams};
use palign::lm::NextTokenModel;
use palign::nn::softmax;

const EOS: u32 = 0;

/// Token 1 looks best first but leads to a flat distribution; token 2 leads to
/// a confident EOS.
struct Trap;

impl NextTokenModel for Trap {
    fn vocab_size(&self) -> usize {
        4
    }

    fn max_context(&self) -> usize {
        16
    }

    fn next_token_logits(&self, context: &[u32]) -> palign::Result<Vec<f64>> {
        let probs: [f64; 4] = match context[1..] {
            [] => [0.0, 0.55, 0.45, 0.0],
            [1] => [0.34, 0.33, 0.0, 0.33],
            [2] => [0.9, 0.0, 0.0, 0.1],
            _ => [1.0, 0.0, 0.0, 0.0],
        };
        Ok(probs.iter().map(|p| p.max(1e-12).ln()).collect())
    }
}

fn logprob(model: &Trap, prompt: &[u32], seq: &[u32]) -> palign::Result<f64> {
    let mut ctx = prompt.to_vec();
    let mut total = 0.0;
    for &t in seq {
        total += softmax(&model.next_token_logits(&ctx)?)?[t as usize].ln();
        ctx.push(t);
    }
    Ok(total)
}

fn main() -> palign::Result<()> {
    let prompt = [3];
    let decoder = Decoder::new(&Trap, EOS);
    let greedy = decoder.sample_candidate(&prompt, &DecodeParams::plain(0.0, 4, 0))?.tokens;
    println!("greedy: {greedy:?} log p = {:.3}", logprob(&Trap, &prompt, &greedy)?);
    for width in [1, 2, 4] {
        let beam = decoder.beam_search(&prompt, width, 4)?;
        println!("beam width {width}: {beam:?} log p = {:.3}", logprob(&Trap, &prompt, &beam)?);
    }
    Ok(())
}
