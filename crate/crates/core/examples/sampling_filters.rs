//! Top-k and nucleus filtering on a fixed distribution, and how temperature
//! reshapes the sampled token frequencies.

use palign::decoding::{filter_logits, sample_token, DecodeParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> palign::Result<()> {
    let logits = [2.0, 1.5, 1.0, 0.2, -1.0, -3.0];
    for (k, p) in [(0, 1.0), (3, 1.0), (0, 0.8), (3, 0.8), (1, 1.0)] {
        let kept: Vec<usize> = filter_logits(&logits, k, p).iter().enumerate().filter(|(_, l)| l.is_finite()).map(|(i, _)| i).collect();
        println!("top_k={k} top_p={p}: keeps {kept:?}");
    }

    for temperature in [0.0, 0.5, 1.0, 2.0] {
        let params = DecodeParams { temperature, ..DecodeParams::plain(temperature, 1, 0) };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 6];
        for _ in 0..2000 {
            counts[sample_token(&logits, &params, &mut rng)? as usize] += 1;
        }
        println!("T={temperature}: {counts:?}");
    }
    Ok(())
}
