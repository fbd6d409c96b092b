#![allow(dead_code)]

use licw_core::diffcore::gradcheck::{check_gradient, FdConfig};
use licw_core::diffcore::{Graph, Tensor, Var};
use licw_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn uniform32<R: Rng>(rng: &mut R, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Builds `sum(w * op(inputs))` with fixed random weights `w`, so every
/// output element contributes with a distinct sensitivity.
fn scalarize(g: &mut Graph<f64>, out: Var, weights: &mut Option<Tensor<f64>>, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let w = weights.get_or_insert_with(|| uniform(&mut rng(seed), &shape, 0.5, 1.5)).clone();
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

/// Max relative error between backward gradients and central differences
/// for every input of `build`, in f64.
pub fn op_gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut weights = None;
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let root = scalarize(&mut g, out, &mut weights, 99).expect("scalarize");
    let grads = g.backward(root).expect("backward");

    let mut errors = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf grad").clone();
        let mut f = |probe: &Tensor<f64>| -> Result<f64> {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars)?;
            let mut w = weights.clone();
            let root = scalarize(&mut g, out, &mut w, 99)?;
            Ok(g.value(root).item())
        };
        let report = check_gradient(&mut f, input, &analytic, None, FdConfig::default()).expect("fd");
        errors.push(report.max_rel_error);
    }
    errors
}
