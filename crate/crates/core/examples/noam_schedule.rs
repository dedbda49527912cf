//! Prints the warmup-then-decay learning rate and shows the optimizer
//! following it step by step.

use palign::nn::{noam_lr, AdamConfig, OptimizerState, ParamKind, ParamStore, Tape, Targets, Tensor};

fn main() -> palign::Result<()> {
    let (d_model, warmup) = (64, 200);
    for step in [1, 50, 100, 200, 400, 1000, 4000] {
        println!("step {step:>5}: lr {:.3e}", noam_lr(step, d_model, warmup)?);
    }

    // A one-weight regression driven by the same schedule.
    let mut store = ParamStore::new();
    let w = store.add("w", ParamKind::Weight, Tensor::new(vec![1, 2], vec![0.0, 0.0])?);
    let mut opt = OptimizerState::new(AdamConfig::noam(d_model, warmup), &store)?;
    for _ in 0..300 {
        let mut grads = {
            let mut tape = Tape::new(&store);
            let logits = tape.param(w);
            let loss = tape.cross_entropy(logits, Targets::Hard(vec![Some(0)]))?;
            tape.backward(loss)?
        };
        let lr = opt.step(&mut store, &mut grads)?;
        if opt.step_count() % 100 == 0 {
            println!("after {} steps: lr {lr:.3e}, w = {:?}", opt.step_count(), store.value(w).data());
        }
    }
    Ok(())
}
