//! Specific-ratio (SRDA) and agnostic-ratio (ARDA) rate-distortion attacks.
//!
//! Both optimize an additive perturbation `delta` with Adam under an RMS
//! bound `epsilon`. Iterations are counted from the first time the
//! perturbation has to be projected back onto the epsilon-sphere; the run
//! ends after `surface_steps` such updates and the learning rate drops once,
//! halfway through them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Graph, Quantizer, Tensor};
use crate::models::CompressionModel;
use crate::optim::AdamState;
use crate::{Error, Result};

/// The six `(gamma_r, gamma_d)` directions studied by default.
pub const DIRECTIONS: [(f64, f64); 6] = [(1.0, 0.0), (1.0, 0.0002), (1.0, 0.002), (1.0, 0.02), (1.0, 0.2), (0.0, 1.0)];

/// Bounds applied to `L_init / L_cur` before the softmax.
pub const RATIO_MIN: f64 = 1e-3;
pub const RATIO_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub gamma_r: f64,
    pub gamma_d: f64,
    /// RMS bound on the perturbation.
    pub epsilon: f64,
    /// Updates made after the first contact with the epsilon-sphere.
    pub surface_steps: usize,
    pub lr: f64,
    /// Learning rate from surface step `surface_steps / 2` on.
    pub lr_decayed: f64,
    /// ARDA softmax temperature.
    pub tau: f64,
    /// Total iterations allowed per surface step before giving up.
    pub iteration_cap_factor: usize,
}

impl AttackConfig {
    pub fn new(gamma_r: f64, gamma_d: f64) -> Self {
        Self {
            gamma_r,
            gamma_d,
            epsilon: 1e-3,
            surface_steps: 64,
            lr: 1e-2,
            lr_decayed: 1e-3,
            tau: 1.0,
            iteration_cap_factor: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_r >= 0.0 && self.gamma_d >= 0.0) || (self.gamma_r == 0.0 && self.gamma_d == 0.0) {
            return Err(Error::invalid(format!(
                "attack coefficients must be nonnegative and not both zero, got ({}, {})",
                self.gamma_r, self.gamma_d
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        if self.surface_steps == 0 {
            return Err(Error::invalid("surface step count must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }

    pub fn max_iterations(&self) -> usize {
        self.iteration_cap_factor.max(1) * self.surface_steps
    }

    /// Learning rate after `surface_done` surface steps.
    pub fn lr_at(&self, surface_done: usize) -> f64 {
        if surface_done < self.surface_steps / 2 {
            self.lr
        } else {
            self.lr_decayed
        }
    }
}

/// Bookkeeping for one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    /// Index of this update among the surface steps, if contact was made.
    pub surface_step: Option<usize>,
    pub lr: f64,
    /// Weighted attack loss before the update.
    pub loss: f64,
    /// Whether the projection preceding this update was active.
    pub projected: bool,
    /// RMS of the perturbation the loss was computed at.
    pub delta_rms: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Adversarial image, clamped to `[0, 1]`.
    pub x_a: Tensor,
    pub steps: Vec<StepRecord>,
    pub surface_steps: usize,
    pub iterations: usize,
    pub first_surface_iteration: Option<usize>,
    /// First computed per-submodel losses.
    pub loss_init: Vec<f64>,
    /// Per-submodel weights at every update.
    pub weights_trace: Vec<Vec<f64>>,
    /// Per-submodel losses at every update.
    pub losses_trace: Vec<Vec<f64>>,
    /// A non-finite loss stopped the run; `x_a` is the last finite iterate.
    pub unstable: bool,
    /// A loss ratio needed clamping in the weight computation.
    pub ratio_clamped: bool,
    /// The iteration cap was hit before finishing the surface steps.
    pub capped: bool,
}

impl AttackResult {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// RMS of a tensor.
pub fn rms(t: &Tensor) -> f64 {
    t.rms()
}

/// Rescales `delta` onto the epsilon-sphere when its RMS exceeds `epsilon`.
/// Returns the projected tensor and whether the projection was active.
pub fn project_to_ball(delta: &Tensor, epsilon: f64) -> (Tensor, bool) {
    let r = delta.rms();
    if r > epsilon {
        let s = (epsilon / r) as f32;
        (delta.map(|v| v * s), true)
    } else {
        (delta.clone(), false)
    }
}

/// Projects every image of a batch separately.
fn project_items(delta: &Tensor, epsilon: f64) -> Result<(Tensor, bool)> {
    let (n, _, _, _) = delta.dims4()?;
    if n == 1 {
        return Ok(project_to_ball(delta, epsilon));
    }
    let per = delta.numel() / n;
    let mut data = Vec::with_capacity(delta.numel());
    let mut any = false;
    for chunk in delta.data().chunks(per) {
        let item = Tensor::new(vec![per], chunk.to_vec())?;
        let (p, active) = project_to_ball(&item, epsilon);
        any |= active;
        data.extend_from_slice(p.data());
    }
    Ok((Tensor::new(delta.shape().to_vec(), data)?, any))
}

/// Per-submodel weights: softmax of `(L_init / L_cur) / tau`. The returned
/// flag reports that a ratio was zero, negative or outside
/// `[RATIO_MIN, RATIO_MAX]` and had to be clamped.
pub fn arda_weights(l_init: &[f64], l_cur: &[f64], tau: f64) -> Result<(Vec<f64>, bool)> {
    if l_init.is_empty() || l_init.len() != l_cur.len() {
        return Err(Error::invalid(format!("loss lists of lengths {} and {}", l_init.len(), l_cur.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut clamped = false;
    let ratios: Vec<f64> = l_init
        .iter()
        .zip(l_cur)
        .map(|(&a, &b)| {
            let r = a / b;
            if r.is_nan() || r <= 0.0 {
                clamped = true;
                RATIO_MIN
            } else if !(RATIO_MIN..=RATIO_MAX).contains(&r) {
                clamped = true;
                r.clamp(RATIO_MIN, RATIO_MAX)
            } else {
                r
            }
        })
        .collect();
    let scaled: Vec<f64> = ratios.iter().map(|r| r / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok((exps.into_iter().map(|e| e / sum).collect(), clamped))
}

/// `L_s = -gamma_r * R(x + delta) - gamma_d * D(x + delta)` and its gradient
/// with respect to `delta` (hard rounding, straight-through gradient).
pub fn attack_loss_and_grad(model: &CompressionModel, x: &Tensor, delta: &Tensor, cfg: &AttackConfig) -> Result<(f64, Tensor)> {
    let mut g = Graph::<f32>::new();
    let p = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let dv = g.variable(delta.clone());
    let xa = g.add(xv, dv)?;
    let out = model.forward(&mut g, &p, xa, &mut Quantizer::RoundSte)?;
    let r = g.scale(out.rate, -cfg.gamma_r)?;
    let d = g.scale(out.distortion, -cfg.gamma_d)?;
    let loss = g.add(r, d)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "attack loss".into() });
    }
    let grads = g.backward(loss)?;
    Ok((value, grads.get(dv).cloned().expect("delta leaf")))
}

/// SRDA against a single submodel.
pub fn srda(model: &CompressionModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    run(&[model], x, cfg)
}

/// ARDA against every submodel in `models` at once.
pub fn arda(models: &[CompressionModel], x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    let refs: Vec<&CompressionModel> = models.iter().collect();
    run(&refs, x, cfg)
}

fn run(models: &[&CompressionModel], x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::invalid("attack needs at least one submodel"));
    }
    crate::models::check_image(x)?;
    let mut delta = Tensor::zeros(x.shape().to_vec());
    let mut last_finite = delta.clone();
    let mut adam = AdamState::new();
    let mut res = AttackResult {
        x_a: x.clone(),
        steps: Vec::new(),
        surface_steps: 0,
        iterations: 0,
        first_surface_iteration: None,
        loss_init: Vec::new(),
        weights_trace: Vec::new(),
        losses_trace: Vec::new(),
        unstable: false,
        ratio_clamped: false,
        capped: false,
    };
    let mut iteration = 0;
    loop {
        let (projected, active) = project_items(&delta, cfg.epsilon)?;
        delta = projected;
        if active && res.first_surface_iteration.is_none() {
            res.first_surface_iteration = Some(iteration);
        }
        let on_surface = res.first_surface_iteration.is_some();
        if on_surface && res.surface_steps >= cfg.surface_steps {
            break;
        }
        if iteration >= cfg.max_iterations() {
            res.capped = true;
            break;
        }

        let mut losses = Vec::with_capacity(models.len());
        let mut grads = Vec::with_capacity(models.len());
        let mut failed = false;
        for m in models {
            match attack_loss_and_grad(m, x, &delta, cfg) {
                Ok((l, g)) if g.is_finite() => {
                    losses.push(l);
                    grads.push(g);
                }
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed {
            res.unstable = true;
            delta = last_finite;
            break;
        }
        if res.loss_init.is_empty() {
            res.loss_init = losses.clone();
        }
        let (weights, clamped) = arda_weights(&res.loss_init, &losses, cfg.tau)?;
        res.ratio_clamped |= clamped;
        let loss: f64 = weights.iter().zip(&losses).map(|(w, l)| w * l).sum();
        let grad = if grads.len() == 1 {
            grads.pop().expect("one gradient")
        } else {
            let mut acc = vec![0f32; delta.numel()];
            for (w, g) in weights.iter().zip(&grads) {
                let w = *w as f32;
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += w * v;
                }
            }
            Tensor::new(delta.shape().to_vec(), acc)?
        };
        let lr = if on_surface { cfg.lr_at(res.surface_steps) } else { cfg.lr };
        res.steps.push(StepRecord {
            iteration,
            surface_step: on_surface.then_some(res.surface_steps),
            lr,
            loss,
            projected: active,
            delta_rms: delta.rms(),
        });
        res.weights_trace.push(weights);
        res.losses_trace.push(losses);

        last_finite = delta.clone();
        delta = adam.update(std::slice::from_ref(&delta), std::slice::from_ref(&grad), lr)?.remove(0);
        if on_surface {
            res.surface_steps += 1;
        }
        iteration += 1;
    }
    res.iterations = iteration;
    res.x_a = compose(x, &delta, cfg.epsilon)?;
    Ok(res)
}

/// `clamp(x + delta)` with every item's realized RMS change within `epsilon`.
/// Rounding `x + delta` to f32 can push the realized change a few ulps past
/// the projected one, so offending items are shrunk until they fit.
fn compose(x: &Tensor, delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (n, _, _, _) = x.dims4()?;
    let per = x.numel() / n;
    let mut out = Vec::with_capacity(x.numel());
    for (xi, di) in x.data().chunks(per).zip(delta.data().chunks(per)) {
        let mut shrink = 1.0f64;
        let mut margin = 1e-7;
        loop {
            let item: Vec<f32> = xi.iter().zip(di).map(|(a, d)| (a + (*d as f64 * shrink) as f32).clamp(0.0, 1.0)).collect();
            let ss: f64 = item.iter().zip(xi).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let realized = (ss / per as f64).sqrt();
            if realized <= epsilon || shrink == 0.0 {
                out.extend(item);
                break;
            }
            shrink *= epsilon / realized * (1.0 - margin);
            margin *= 10.0;
            if margin > 1.0 {
                shrink = 0.0;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gaussian noise rescaled to an exact RMS of `target_rms`, added to `x`
/// and clamped: the same-budget control for attack comparisons.
pub fn gaussian_control(x: &Tensor, target_rms: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..x.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len().max(1) as f64).sqrt();
    let s = if r > 0.0 { target_rms / r } else { 0.0 };
    Tensor::from_fn(x.shape().to_vec(), |i| (x.data()[i] as f64 + s * noise[i]).clamp(0.0, 1.0) as f32)
}
