#![allow(dead_code)]

use transpose::gradcheck::relative_error;
use transpose::params::{BoundParams, ParamSet};
use transpose::{SplitMix64, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Per-tensor gradient norms below `FLOOR` times the norm of the whole
/// gradient count as zero. Central differences carry rounding noise of order
/// `ε·|loss|/STEP` per entry, and some gradients vanish exactly (the key bias,
/// which softmax cancels), so a purely relative measure would compare noise
/// with noise.
pub const FLOOR: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.normal(0.0, 1.0))
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.next_f64())
}

/// Which parameter entries a finite-difference check probes.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    /// Every entry of every tensor.
    All,
    /// `per_tensor` random entries of every tensor plus `directions` random
    /// directions through the whole parameter vector.
    Sampled {
        per_tensor: usize,
        directions: usize,
        seed: u64,
    },
}

/// Scalar `Σ out ⊙ R` with a fixed random `R`.
fn weighted(tape: &mut Tape, out: Var) -> Var {
    let r = random(tape.value(out).shape(), 99);
    let r = tape.constant(r);
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

fn loss_value(params: &ParamSet<f64>, build: &dyn Fn(&mut Tape, &BoundParams) -> Var) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = build(&mut tape, &bound);
    let loss = weighted(&mut tape, out);
    tape.value(loss).item()
}

/// Worst relative error between tape gradients and central differences over
/// the probed parameter entries. Tensors (or directions) above 1e-4 are
/// named on stderr.
pub fn check_params(
    params: &ParamSet<f64>,
    probe: Probe,
    build: impl Fn(&mut Tape, &BoundParams) -> Var,
) -> f64 {
    check_params_with_step(params, probe, STEP, build)
}

/// [`check_params`] with an explicit step; deep ReLU stacks need a small one
/// so that few activations change sign inside the stencil.
pub fn check_params_with_step(
    params: &ParamSet<f64>,
    probe: Probe,
    step: f64,
    build: impl Fn(&mut Tape, &BoundParams) -> Var,
) -> f64 {
    let build: &dyn Fn(&mut Tape, &BoundParams) -> Var = &build;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = build(&mut tape, &bound);
    let loss = weighted(&mut tape, out);
    tape.backward(loss).unwrap();
    let grads = bound.grads(&tape);
    let floor = FLOOR
        * grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
            .max(1.0);
    let mut probe_params = params.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    let mut rng = match probe {
        Probe::All => SplitMix64::new(0),
        Probe::Sampled { seed, .. } => SplitMix64::new(seed),
    };
    for (slot, &id) in ids.iter().enumerate() {
        let len = params.get(id).len();
        let entries: Vec<usize> = match probe {
            Probe::All => (0..len).collect(),
            Probe::Sampled { per_tensor, .. } if per_tensor >= len => (0..len).collect(),
            Probe::Sampled { per_tensor, .. } => (0..per_tensor).map(|_| rng.below(len)).collect(),
        };
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for &e in &entries {
            let orig = params.get(id).data()[e];
            probe_params.get_mut(id).data_mut()[e] = orig + step;
            let up = loss_value(&probe_params, build);
            probe_params.get_mut(id).data_mut()[e] = orig - step;
            let down = loss_value(&probe_params, build);
            probe_params.get_mut(id).data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * step));
            analytic.push(grads[slot][e]);
        }
        let err = relative_error(&analytic, &numeric, floor);
        if err > 1e-7 {
            eprintln!("{}: relative error {err:.3e}", params.name(id));
        }
        worst = worst.max(err);
    }
    if let Probe::Sampled { directions, .. } = probe {
        for _ in 0..directions {
            let mut dir: Vec<Vec<f64>> = ids
                .iter()
                .map(|&id| {
                    (0..params.get(id).len())
                        .map(|_| rng.normal(0.0, 1.0))
                        .collect()
                })
                .collect();
            let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().flatten().for_each(|v| *v /= norm);
            let analytic: f64 = grads
                .iter()
                .zip(&dir)
                .map(|(g, u)| g.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let shifted = |sign: f64| {
                let mut p = params.clone();
                for (&id, u) in ids.iter().zip(&dir) {
                    p.get_mut(id)
                        .data_mut()
                        .iter_mut()
                        .zip(u)
                        .for_each(|(v, d)| *v += sign * step * d);
                }
                loss_value(&p, build)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
            let err = relative_error(&[analytic], &[numeric], floor);
            if err > 1e-4 {
                eprintln!("direction: relative error {err:.3e}");
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient error w.r.t. an input tensor (all entries).
pub fn check_input(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = build(&mut tape, xv);
    let loss = weighted(&mut tape, out);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();
    let floor = FLOOR * analytic.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
    let numeric = transpose::gradcheck::numeric_grad(x, STEP, |probe| {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let out = build(&mut t, v);
        let loss = weighted(&mut t, out);
        t.value(loss).item()
    });
    relative_error(&analytic, &numeric, floor)
}
