//! Adam, learning-rate schedules, rate-distortion training and the two
//! defenses (adversarial finetuning, online updating of the input).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{self, AttackConfig};
use crate::diffcore::{Graph, Quantizer, Tensor, Var};
use crate::models::{CompressionModel, DOWNSAMPLE};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for a fixed list of tensors.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; buffers are created on first use and
    /// must keep their shapes afterwards.
    pub fn update(&mut self, params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if self.shapes.is_empty() {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.shapes.len() != params.len() || self.shapes.iter().zip(params).any(|(s, p)| s != p.shape()) {
            return Err(Error::shape("parameter list changed between Adam steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data: Vec<f32> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    let gi = gi as f64;
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                    let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    (w as f64 - step) as f32
                })
                .collect();
            out.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

pub fn adam_step(state: &mut AdamState, params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    state.update(params, grads, lr)
}

/// Piecewise-constant learning rate: `initial` before `decay_at`, then
/// `decayed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_at: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decayed: lr, decay_at: usize::MAX }
    }

    pub fn step(initial: f64, decayed: f64, decay_at: usize) -> Self {
        Self { initial, decayed, decay_at }
    }

    /// `initial` for all but the last tenth of `total` steps.
    pub fn last_tenth(initial: f64, decayed: f64, total: usize) -> Self {
        Self::step(initial, decayed, total - total / 10)
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.decay_at {
            self.initial
        } else {
            self.decayed
        }
    }
}

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub rate: f64,
    pub distortion: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<LossRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,rate,distortion,total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.step, r.rate, r.distortion, r.total);
        }
        s
    }

    /// Mean total loss over rows `[from, from + len)`.
    pub fn window_mean(&self, from: usize, len: usize) -> Option<f64> {
        let rows = self.rows.get(from..(from + len).min(self.rows.len()))?;
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub crop: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, steps: 2000, crop: 64, batch: 8, lr: LrSchedule::last_tenth(1e-3, 1e-4, 2000), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!("crop {} must be a positive multiple of {DOWNSAMPLE}", self.crop)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        Ok(())
    }
}

/// Batch of random `crop x crop` patches (random horizontal flips) from
/// `1 x 3 x H x W` images.
pub fn random_crops(dataset: &[Tensor], batch: usize, crop: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut data = Vec::with_capacity(batch * 3 * crop * crop);
    for _ in 0..batch {
        let img = &dataset[rng.gen_range(0..dataset.len())];
        let (_, c, h, w) = img.dims4()?;
        if c != 3 || h < crop || w < crop {
            return Err(Error::shape(format!("image {h}x{w} smaller than crop {crop}")));
        }
        let (oy, ox) = (rng.gen_range(0..=h - crop), rng.gen_range(0..=w - crop));
        let flip = rng.gen_bool(0.5);
        for ch in 0..3 {
            for y in 0..crop {
                let row = (ch * h + oy + y) * w + ox;
                let src = &img.data()[row..row + crop];
                if flip {
                    data.extend(src.iter().rev());
                } else {
                    data.extend_from_slice(src);
                }
            }
        }
    }
    Tensor::new(vec![batch, 3, crop, crop], data)
}

fn nonfinite_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// One Adam step of `R + lambda * D` (noise quantization) on `x`.
fn rd_step(
    model: &mut CompressionModel,
    adam: &mut AdamState,
    x: &Tensor,
    lambda: f64,
    lr: f64,
    noise: &mut ChaCha8Rng,
    step: usize,
) -> Result<LossRow> {
    let mut g = Graph::<f32>::new();
    let p = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &p, xv, &mut Quantizer::Noise(noise)).map_err(nonfinite_at(step))?;
    let scaled = g.scale(out.distortion, lambda)?;
    let loss = g.add(out.rate, scaled).map_err(nonfinite_at(step))?;
    let row = LossRow {
        step,
        rate: g.value(out.rate).item() as f64,
        distortion: g.value(out.distortion).item() as f64,
        total: g.value(loss).item() as f64,
    };
    if !row.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let vars: Vec<(String, Var)> = p.iter().map(|(n, v)| (n.to_string(), v)).collect();
    let grads = g.backward(loss)?;
    let params: Vec<Tensor> = vars.iter().map(|(n, _)| model.params()[n.as_str()].clone()).collect();
    let grads: Vec<Tensor> = vars.iter().map(|(_, v)| grads.get(*v).cloned().expect("trainable leaf")).collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteLoss { step });
    }
    let updated = adam.update(&params, &grads, lr)?;
    model.set_params(vars.into_iter().map(|(n, _)| n).zip(updated))?;
    Ok(row)
}

/// Minimizes `R + lambda * D` with noise quantization on random crops.
pub fn train_rd(model: &mut CompressionModel, dataset: &[Tensor], cfg: &TrainConfig) -> Result<LossTrace> {
    train_rd_with(model, dataset, cfg, |_| {})
}

/// [`train_rd`] with a per-step callback (progress reporting).
pub fn train_rd_with(
    model: &mut CompressionModel,
    dataset: &[Tensor],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow),
) -> Result<LossTrace> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    model.set_lambda(cfg.lambda)?;
    let mut crops = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise.set_stream(1);
    let mut adam = AdamState::new();
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let x = random_crops(dataset, cfg.batch, cfg.crop, &mut crops)?;
        let row = rd_step(model, &mut adam, &x, cfg.lambda, cfg.lr.at(step), &mut noise, step)?;
        on_step(&row);
        trace.rows.push(row);
    }
    Ok(trace)
}

/// Draws attack directions `(gamma_r, gamma_d)` for adversarial training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DirectionSampler {
    /// Pure rate with `p_rate`, pure distortion with `p_distortion`,
    /// otherwise `gamma_r = 1` and log-uniform `gamma_d`.
    Joint { p_rate: f64, p_distortion: f64, gamma_d_min: f64, gamma_d_max: f64 },
    Fixed { gamma_r: f64, gamma_d: f64 },
}

impl Default for DirectionSampler {
    fn default() -> Self {
        DirectionSampler::Joint { p_rate: 0.2, p_distortion: 0.2, gamma_d_min: 2e-4, gamma_d_max: 0.2 }
    }
}

impl DirectionSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        match *self {
            DirectionSampler::Fixed { gamma_r, gamma_d } => (gamma_r, gamma_d),
            DirectionSampler::Joint { p_rate, p_distortion, gamma_d_min, gamma_d_max } => {
                let u: f64 = rng.gen();
                if u < p_rate {
                    (1.0, 0.0)
                } else if u < p_rate + p_distortion {
                    (0.0, 1.0)
                } else {
                    let t: f64 = rng.gen();
                    (1.0, (gamma_d_min.ln() + t * (gamma_d_max.ln() - gamma_d_min.ln())).exp())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialConfig {
    pub iters: usize,
    pub lr: LrSchedule,
    pub batch: usize,
    pub crop: usize,
    pub sampler: DirectionSampler,
    /// Inner attack; its direction is overwritten by the sampler.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        let mut attack = AttackConfig::new(1.0, 0.0);
        attack.surface_steps = 16;
        Self {
            iters: 1000,
            lr: LrSchedule::last_tenth(1e-4, 1e-5, 1000),
            batch: 8,
            crop: 64,
            sampler: DirectionSampler::default(),
            attack,
            seed: 0,
        }
    }
}

/// Finetunes a trained model on benign crops together with SRDA examples
/// crafted against the current weights at every iteration.
pub fn adversarial_finetune(
    model: &CompressionModel,
    dataset: &[Tensor],
    cfg: &AdversarialConfig,
) -> Result<(CompressionModel, LossTrace)> {
    if cfg.crop == 0 || cfg.crop % DOWNSAMPLE != 0 || cfg.batch == 0 {
        return Err(Error::invalid("adversarial training needs a positive batch and a crop divisible by 8"));
    }
    let mut model = model.clone();
    let lambda = model.lambda();
    let mut crops = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise.set_stream(1);
    let mut directions = ChaCha8Rng::seed_from_u64(cfg.seed);
    directions.set_stream(2);
    let mut adam = AdamState::new();
    let mut trace = LossTrace::default();
    for step in 0..cfg.iters {
        let x = random_crops(dataset, cfg.batch, cfg.crop, &mut crops)?;
        let (gamma_r, gamma_d) = cfg.sampler.sample(&mut directions);
        let attack = AttackConfig { gamma_r, gamma_d, ..cfg.attack.clone() };
        let x_a = attacks::srda(&model, &x, &attack)?.x_a;
        let pair = concat_batch(&x, &x_a)?;
        let row = rd_step(&mut model, &mut adam, &pair, lambda, cfg.lr.at(step), &mut noise, step)?;
        trace.rows.push(row);
    }
    Ok((model, trace))
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if b.shape() != a.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![2 * n, c, h, w], data)
}

/// Online-updating objective `R(x) + lambda * D(x, f(x))` with hard
/// rounding.
pub fn online_loss(model: &CompressionModel, x: &Tensor, lambda: f64) -> Result<f64> {
    let rd = model.evaluate(x)?;
    Ok(rd.bpp + lambda * rd.mse)
}

#[derive(Debug, Clone)]
pub struct OnlineResult {
    /// Best iterate found.
    pub x_u: Tensor,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Loss of each evaluated iterate (entry `k` after `k` updates).
    pub loss_trace: Vec<f64>,
    /// Best loss seen up to each entry of `loss_trace`.
    pub best_trace: Vec<f64>,
    pub best_iteration: usize,
    /// Set when a non-finite loss stopped the optimization early.
    pub unstable: bool,
}

/// Optimizes the pixels of `x_a` (frozen model) for `R + lambda * D`,
/// clamping to `[0, 1]` after every Adam step and returning the best iterate.
pub fn online_update(model: &CompressionModel, x_a: &Tensor, lambda: f64, iters: usize, lr: f64) -> Result<OnlineResult> {
    crate::models::check_image(x_a)?;
    let mut x = x_a.clone();
    let mut adam = AdamState::new();
    let mut res = OnlineResult {
        x_u: x_a.clone(),
        initial_loss: f64::NAN,
        best_loss: f64::INFINITY,
        loss_trace: Vec::new(),
        best_trace: Vec::new(),
        best_iteration: 0,
        unstable: false,
    };
    for k in 0..=iters {
        let mut g = Graph::<f32>::new();
        let p = model.bind(&mut g, false);
        let xv = g.variable(x.clone());
        let out = match model.forward(&mut g, &p, xv, &mut Quantizer::RoundSte) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => {
                res.unstable = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let scaled = g.scale(out.distortion, lambda)?;
        let loss = g.add(out.rate, scaled);
        let loss = match loss {
            Ok(l) if g.value(l).item().is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                res.unstable = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let value = g.value(loss).item() as f64;
        if k == 0 {
            res.initial_loss = value;
        }
        if value < res.best_loss {
            res.best_loss = value;
            res.x_u = x.clone();
            res.best_iteration = k;
        }
        res.loss_trace.push(value);
        res.best_trace.push(res.best_loss);
        if k == iters {
            break;
        }
        let grads = g.backward(loss)?;
        let grad = grads.get(xv).cloned().expect("pixel leaf");
        let stepped = adam.update(std::slice::from_ref(&x), std::slice::from_ref(&grad), lr)?.remove(0);
        x = stepped.map(|v| v.clamp(0.0, 1.0));
    }
    if res.loss_trace.is_empty() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(res)
}
