//! Central finite-difference oracle for the tape's analytic gradients.

use palign::nn::{ParamStore, Tape, Targets, Tensor, Var};
use palign::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Builds the graph under test on a fresh tape and returns its output.
pub type Builder = dyn Fn(&mut Tape<'_>, &ParamStore) -> Result<Var>;

fn projected(store: &ParamStore, build: &Builder, proj: &[f64]) -> f64 {
    let mut tape = Tape::new(store);
    let out = build(&mut tape, store).expect("forward");
    tape.value(out).data().iter().zip(proj).map(|(y, r)| y * r).sum()
}

/// Maximum relative error between analytic and central-difference gradients of
/// `Σ out ⊙ proj` for a random projection `proj`, over every parameter entry.
pub fn max_relative_error(store: &ParamStore, build: &Builder, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (analytic, proj) = {
        let mut tape = Tape::new(store);
        let out = build(&mut tape, store).expect("forward");
        let n = tape.value(out).len();
        let proj: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (tape.backward_with(out, &proj).expect("backward"), proj)
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + STEP;
            let up = projected(&probe, build, &proj);
            probe.value_mut(id).data_mut()[i] = orig - STEP;
            let down = projected(&probe, build, &proj);
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero so ReLU's kink stays outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

pub struct Case {
    pub name: &'static str,
    pub store: ParamStore,
    pub build: Box<Builder>,
}

/// One randomized small-shape instance of every layer kind.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    use palign::nn::ParamKind::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    {
        let mut s = ParamStore::new();
        let v = rng.random_range(3..7);
        let d = rng.random_range(2..5);
        let table = s.add("table", Weight, random_tensor(&mut rng, vec![v, d], 1.0));
        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..v)).collect();
        cases.push(Case {
            name: "embedding",
            store: s,
            build: Box::new(move |t, _| {
                let tv = t.param(table);
                t.embedding(tv, &ids)
            }),
        });
    }
    for transposed in [false, true] {
        let mut s = ParamStore::new();
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..4));
        let x = s.add("x", Weight, random_tensor(&mut rng, vec![m, k], 1.0));
        let wshape = if transposed { vec![n, k] } else { vec![k, n] };
        let w = s.add("w", Weight, random_tensor(&mut rng, wshape, 1.0));
        let b = s.add("b", Bias, random_tensor(&mut rng, vec![n], 1.0));
        cases.push(Case {
            name: if transposed { "linear_transposed" } else { "linear" },
            store: s,
            build: Box::new(move |t, _| {
                let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
                t.linear(xv, wv, Some(bv), transposed)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let a = s.add("a", Weight, random_tensor(&mut rng, vec![2, 3], 1.0));
        let b = s.add("b", Weight, random_tensor(&mut rng, vec![2, 3], 1.0));
        cases.push(Case {
            name: "add",
            store: s,
            build: Box::new(move |t, _| {
                let (av, bv) = (t.param(a), t.param(b));
                t.add(av, bv)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", Weight, away_from_zero(&mut rng, vec![3, 4]));
        cases.push(Case {
            name: "relu",
            store: s,
            build: Box::new(move |t, _| {
                let xv = t.param(x);
                Ok(t.relu(xv))
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let d = rng.random_range(3..7);
        let x = s.add("x", Weight, random_tensor(&mut rng, vec![3, d], 2.0));
        let g = s.add("gain", Gain, random_tensor(&mut rng, vec![d], 1.5));
        let b = s.add("bias", Bias, random_tensor(&mut rng, vec![d], 1.0));
        cases.push(Case {
            name: "layer_norm",
            store: s,
            build: Box::new(move |t, _| {
                let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
                t.layer_norm(xv, gv, bv)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let (batch, seq, heads) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..3));
        let d = heads * rng.random_range(1..4);
        let qkv = s.add("qkv", Weight, random_tensor(&mut rng, vec![batch * seq, 3 * d], 1.0));
        cases.push(Case {
            name: "causal_attention",
            store: s,
            build: Box::new(move |t, _| {
                let q = t.param(qkv);
                t.causal_attention(q, batch, seq, heads)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", Weight, random_tensor(&mut rng, vec![4, 3], 1.0));
        let rows = vec![3, 0, 3];
        cases.push(Case {
            name: "select_rows",
            store: s,
            build: Box::new(move |t, _| {
                let xv = t.param(x);
                t.select_rows(xv, &rows)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let (m, c) = (rng.random_range(2..6), rng.random_range(2..6));
        let logits = s.add("logits", Weight, random_tensor(&mut rng, vec![m, c], 3.0));
        let mut targets: Vec<Option<usize>> = (0..m).map(|_| Some(rng.random_range(0..c))).collect();
        targets[0] = None;
        cases.push(Case {
            name: "cross_entropy_hard",
            store: s,
            build: Box::new(move |t, _| {
                let l = t.param(logits);
                t.cross_entropy(l, Targets::Hard(targets.clone()))
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let m = rng.random_range(1..5);
        let logits = s.add("logits", Weight, random_tensor(&mut rng, vec![m, 2], 3.0));
        let soft: Vec<f64> = (0..m)
            .flat_map(|_| {
                let p = rng.random_range(0.0..1.0);
                [p, 1.0 - p]
            })
            .collect();
        cases.push(Case {
            name: "cross_entropy_soft",
            store: s,
            build: Box::new(move |t, _| {
                let l = t.param(logits);
                t.cross_entropy(l, Targets::Soft(soft.clone()))
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = s.add("x", Weight, random_tensor(&mut rng, vec![2, 5], 1.0));
        cases.push(Case {
            name: "sum",
            store: s,
            build: Box::new(move |t, _| {
                let xv = t.param(x);
                Ok(t.sum(xv))
            }),
        });
    }
    cases
}
