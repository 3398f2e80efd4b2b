#![allow(dead_code)]

use acmnet::autodiff::{ParamStore, Tape, Tensor, Var};
use acmnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Scalar objective `Σ r ⊙ f(inputs)` with fixed random weights `r`, so that
/// every output entry contributes a distinct amount.
fn objective<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    grad: bool,
    f: &F,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let r = tape.constant(r);
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    let value = tape.value(loss)[0];
    if !grad {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.wrt(*v).map_or_else(|| vec![0.0; t.numel()], |s| s.to_vec()))
        .collect();
    Ok((value, grads))
}

/// Largest relative error between tape gradients and central differences
/// over every entry of every input.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::<f64>::new();
    let (_, analytic) = objective(&store, inputs, true, &f, 99).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + step;
            let up = objective(&store, &probe, false, &f, 99).unwrap().0;
            probe[t].data_mut()[i] = orig - step;
            let down = objective(&store, &probe, false, &f, 99).unwrap().0;
            probe[t].data_mut()[i] = orig;
            let n = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(a, n, 1e-6));
        }
    }
    worst
}
