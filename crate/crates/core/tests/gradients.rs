mod common;

use common::{op_gradcheck, rng, uniform};
use licw_core::diffcore::gradcheck::{check_gradient, FdConfig};
use licw_core::diffcore::{Graph, Quantizer, Tensor};
use licw_core::entropy::{gaussian_bits, logistic_bits};
use licw_core::models::{CompressionModel, Family};
use licw_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gaussian_bits_gradient_matches_finite_differences() {
    let mut r = rng(1);
    // fractional y keeps the probe away from symbol boundaries
    let y = uniform(&mut r, &[1, 2, 3, 3], -3.0, 3.0);
    let mean = uniform(&mut r, &[1, 2, 3, 3], -1.0, 1.0);
    let scale = uniform(&mut r, &[1, 2, 3, 3], 0.3, 3.0);
    let errs = op_gradcheck(&[y, mean, scale], |g, v| gaussian_bits(g, v[0], v[1], v[2]));
    for e in errs {
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn logistic_bits_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let y = uniform(&mut r, &[1, 3, 2, 2], -4.0, 4.0);
    let loc = uniform(&mut r, &[3], -0.5, 0.5);
    let scale = uniform(&mut r, &[3], 0.4, 2.0);
    let errs = op_gradcheck(&[y, loc, scale], |g, v| logistic_bits(g, v[0], v[1], v[2]));
    for e in errs {
        assert!(e < 1e-4, "{e}");
    }
}

/// `L_s` in f64 with a fixed uniform-noise draw standing in for rounding,
/// which keeps the objective smooth enough for central differences.
fn attack_objective(model: &CompressionModel, x: &Tensor<f64>, delta: &Tensor<f64>, gr: f64, gd: f64, grad: bool) -> Result<(f64, Option<Tensor<f64>>)> {
    let mut g = Graph::<f64>::new();
    let p = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let dv = if grad { g.variable(delta.clone()) } else { g.constant(delta.clone()) };
    let xa = g.add(xv, dv)?;
    let mut noise = ChaCha8Rng::seed_from_u64(77);
    let out = model.forward(&mut g, &p, xa, &mut Quantizer::Noise(&mut noise))?;
    let r = g.scale(out.rate, -gr)?;
    let d = g.scale(out.distortion, -gd)?;
    let loss = g.add(r, d)?;
    let value = g.value(loss).item();
    if !grad {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    Ok((value, grads.get(dv).cloned()))
}

#[test]
fn attack_objective_gradient_matches_finite_differences() {
    let mut r = rng(3);
    for (k, family) in Family::ALL.into_iter().enumerate() {
        let model = CompressionModel::new(family, 0.01, 11 + k as u64).unwrap();
        let x = uniform(&mut r, &[1, 3, 16, 16], 0.1, 0.9);
        let delta = uniform(&mut r, &[1, 3, 16, 16], -1e-3, 1e-3);
        for (gr, gd) in [(1.0, 0.0), (1.0, 0.02), (0.0, 1.0)] {
            let (_, analytic) = attack_objective(&model, &x, &delta, gr, gd, true).unwrap();
            let analytic = analytic.unwrap();
            let coords: Vec<usize> = (0..24).map(|_| r.gen_range(0..delta.numel())).collect();
            let mut f = |probe: &Tensor<f64>| attack_objective(&model, &x, probe, gr, gd, false).map(|v| v.0);
            let cfg = FdConfig { step: 1e-4, floor_frac: 1e-2 };
            let report = check_gradient(&mut f, &delta, &analytic, Some(&coords), cfg).unwrap();
            assert!(report.max_rel_error < 1e-3, "{family} ({gr},{gd}): {} at {}", report.max_rel_error, report.worst_index);
        }
    }
}
