use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    let a = softmax(&[0.3, -1.2, 4.0]).unwrap();
    let b = softmax(&[1000.3, 998.8, 1004.0]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(softmax(&[]).is_err());
    assert!(softmax(&[1.0, f64::NAN]).is_err());
    assert!(softmax(&[f64::INFINITY]).is_err());
}

#[test]
fn softmax_long_vector_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..65536).map(|_| rng.random_range(-50.0..50.0)).collect();
    let s: f64 = softmax(&v).unwrap().iter().sum();
    assert!((s - 1.0).abs() < 1e-12, "sum {s}");
}

#[test]
fn noam_examples() {
    assert!(noam_lr(0, 64, 200).is_err());
    let peak = noam_lr(200, 64, 200).unwrap();
    assert!((peak - 64f64.powf(-0.5) * 200f64.powf(-0.5)).abs() < 1e-18);
    let quarter = noam_lr(800, 64, 200).unwrap();
    assert!((quarter - peak / 2.0).abs() < 1e-15);
    let argmax = (1..=2000u64)
        .max_by(|&a, &b| noam_lr(a, 64, 200).unwrap().total_cmp(&noam_lr(b, 64, 200).unwrap()))
        .unwrap();
    assert_eq!(argmax, 200);
    for s in 1..200 {
        assert!(noam_lr(s + 1, 64, 200).unwrap() > noam_lr(s, 64, 200).unwrap());
    }
    for s in 200..1000 {
        assert!(noam_lr(s + 1, 64, 200).unwrap() < noam_lr(s, 64, 200).unwrap());
    }
}

fn store_with(values: &[(&str, ParamKind, Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, k, v) in values {
        s.add(*n, *k, Tensor::new(vec![v.len()], v.clone()).unwrap());
    }
    s
}

#[test]
fn l1_examples() {
    let zero = store_with(&[("w", ParamKind::Weight, vec![0.0, 0.0])]);
    assert_eq!(l1_penalty(&zero, 0.7), 0.0);
    let s = store_with(&[
        ("w", ParamKind::Weight, vec![1.0, -2.0]),
        ("b", ParamKind::Bias, vec![5.0]),
        ("g", ParamKind::Gain, vec![-3.0]),
    ]);
    assert_eq!(l1_penalty(&s, 0.0), 0.0);
    assert!((l1_penalty(&s, 0.01) - 0.03).abs() < 1e-15);
    let mut g = Gradients::empty(&s);
    add_l1_grad(&s, 0.01, &mut g);
    assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.01, -0.01]);
    assert!(g.get(ParamId(1)).is_none());
}

#[test]
fn adam_zero_gradients_leave_params_unchanged() {
    let mut s = store_with(&[("w", ParamKind::Weight, vec![0.3, -0.2])]);
    let before = s.clone();
    let mut opt = OptimizerState::new(AdamConfig::constant(0.1), &s).unwrap();
    for _ in 0..5 {
        let mut g = Gradients::empty(&s);
        g.entry(&s, ParamId(0));
        opt.step(&mut s, &mut g).unwrap();
    }
    assert_eq!(s, before);
    assert_eq!(opt.step_count(), 5);
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    let mut s = store_with(&[("w", ParamKind::Weight, vec![0.0])]);
    let mut opt = OptimizerState::new(AdamConfig::constant(0.05), &s).unwrap();
    let mut g = Gradients::empty(&s);
    g.entry(&s, ParamId(0)).data_mut()[0] = 1.0;
    opt.step(&mut s, &mut g).unwrap();
    assert!((s.value(ParamId(0)).data()[0] + 0.05).abs() < 1e-9);
}

#[test]
fn adam_uses_noam_rate() {
    let mut s = store_with(&[("w", ParamKind::Weight, vec![0.0])]);
    let mut opt = OptimizerState::new(AdamConfig::noam(64, 200), &s).unwrap();
    assert_eq!(opt.next_lr(), noam_lr(1, 64, 200).unwrap());
    let mut g = Gradients::empty(&s);
    g.entry(&s, ParamId(0)).data_mut()[0] = 2.0;
    let lr = opt.step(&mut s, &mut g).unwrap();
    assert_eq!(lr, noam_lr(1, 64, 200).unwrap());
    assert!((s.value(ParamId(0)).data()[0] + lr).abs() < 1e-12);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut s = store_with(&[("w", ParamKind::Weight, vec![0.0, 1.0])]);
    let other = store_with(&[("w", ParamKind::Weight, vec![0.0])]);
    let mut opt = OptimizerState::new(AdamConfig::constant(0.1), &s).unwrap();
    let mut g = Gradients::empty(&other);
    g.entry(&other, ParamId(0));
    // Same count, wrong shape.
    assert!(matches!(opt.step(&mut s, &mut g), Err(crate::Error::Shape(_))));
    let mut g2 = Gradients::empty(&ParamStore::new());
    assert!(opt.step(&mut s, &mut g2).is_err());
}

#[test]
fn l1_only_step_shrinks_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lr = 0.01;
    for _ in 0..50 {
        let vals: Vec<f64> = (0..8)
            .map(|_| {
                let m = rng.random_range(lr..1.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        let mut s = store_with(&[("w", ParamKind::Weight, vals)]);
        let before = l1_penalty(&s, 1.0);
        let mut opt = OptimizerState::new(AdamConfig::constant(lr).with_l1(0.05), &s).unwrap();
        let mut g = Gradients::empty(&s);
        opt.step(&mut s, &mut g).unwrap();
        assert!(l1_penalty(&s, 1.0) < before);
    }
    // Weights at or above half the step size may cross zero but never grow the sum.
    let mut s = store_with(&[("w", ParamKind::Weight, vec![0.6 * lr, -0.5 * lr, 0.9])]);
    let before = l1_penalty(&s, 1.0);
    let mut opt = OptimizerState::new(AdamConfig::constant(lr).with_l1(0.05), &s).unwrap();
    let mut g = Gradients::empty(&s);
    opt.step(&mut s, &mut g).unwrap();
    assert!(l1_penalty(&s, 1.0) <= before);
}

#[test]
fn backward_without_forward_is_usage_error() {
    let s = ParamStore::new();
    let tape = Tape::new(&s);
    // A handle from another tape does not exist on this one.
    let mut other_store = ParamStore::new();
    let id = other_store.add("w", ParamKind::Weight, Tensor::scalar(1.0));
    let mut other = Tape::new(&other_store);
    let v = other.param(id);
    assert!(matches!(tape.backward(v), Err(crate::Error::Usage(_))));
}

#[test]
fn linear_sum_weight_gradient_is_input_broadcast() {
    let mut s = ParamStore::new();
    let w = s.add("w", ParamKind::Weight, Tensor::zeros(vec![3, 2]));
    let mut tape = Tape::new(&s);
    let x = tape.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let wv = tape.param(w);
    let y = tape.linear(x, wv, None, false).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
}

#[test]
fn relu_blocks_gradient_for_negative_preactivation() {
    let mut s = ParamStore::new();
    let x = s.add("x", ParamKind::Weight, Tensor::new(vec![1, 3], vec![-0.5, 0.2, -3.0]).unwrap());
    let mut tape = Tape::new(&s);
    let xv = tape.param(x);
    let r = tape.relu(xv);
    let loss = tape.sum(r);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn tied_parameter_accumulates_from_both_uses() {
    let mut s = ParamStore::new();
    let e = s.add("e", ParamKind::Weight, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut tape = Tape::new(&s);
    let ev = tape.param(e);
    let h = tape.embedding(ev, &[1]).unwrap();
    let ev2 = tape.param(e);
    assert_eq!(ev, ev2);
    let logits = tape.linear(h, ev2, None, true).unwrap();
    let loss = tape.sum(logits);
    let g = tape.backward(loss).unwrap();
    // d/dE of Σ_j (E[1]·E[j]) = row 1 gets Σ_j E[j] + E[1]; row 0 gets E[1].
    assert_eq!(g.get(e).unwrap().data(), &[3.0, 4.0, 4.0 + 3.0, 6.0 + 4.0]);
}
