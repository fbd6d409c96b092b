//! Measurement tools: rate-distortion variation under attack, local
//! variation maps, entropy causal intervention and layer-wise distance
//! magnification.

use std::fmt;

use indexmap::IndexMap;

use crate::diffcore::{Graph, Quantizer, Tensor, Var};
use crate::models::{CompressionModel, Family, LayerHandle};
use crate::{Error, Result};

/// Bits and reconstruction of one hard-rounded pass.
#[derive(Debug, Clone)]
pub struct Measurement {
    /// Per-element bits of `y_hat`.
    pub bits_y: Tensor,
    /// Per-element bits of `z_hat` (hyper families).
    pub bits_z: Option<Tensor>,
    /// Reconstruction with invalid values replaced (see [`sanitize`]).
    pub x_hat: Tensor,
    pub pixels: usize,
}

impl Measurement {
    pub fn bpp_y(&self) -> f64 {
        self.bits_y.sum_f64() / self.pixels as f64
    }

    pub fn bpp_z(&self) -> f64 {
        self.bits_z.as_ref().map(|b| b.sum_f64()).unwrap_or(0.0) / self.pixels as f64
    }

    pub fn bpp(&self) -> f64 {
        self.bpp_y() + self.bpp_z()
    }
}

/// Replaces non-finite reconstruction values by 255 (1.0) and clamps the
/// rest to the displayable range.
pub fn sanitize(x_hat: &Tensor) -> Tensor {
    x_hat.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 1.0 })
}

/// MSE on the 0-255 scale, accumulated in f64.
pub fn mse255(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum();
    Ok(s / a.numel().max(1) as f64 * 255.0 * 255.0)
}

pub fn psnr(mse: f64) -> f64 {
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

pub fn measure(model: &CompressionModel, x: &Tensor) -> Result<Measurement> {
    let mut g = Graph::<f32>::new();
    let p = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &p, xv, &mut Quantizer::RoundSte)?;
    Ok(Measurement {
        bits_y: g.value(out.entropy.bits_y).clone(),
        bits_z: out.bits_z.map(|b| g.value(b).clone()),
        x_hat: sanitize(g.value(out.x_hat)),
        pixels: out.pixels,
    })
}

/// Rate-distortion change caused by replacing `x` with `x_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RdReport {
    pub family: Family,
    pub lambda_index: usize,
    pub direction: (f64, f64),
    pub image_id: String,
    pub method: String,
    pub rate: f64,
    pub rate_adv: f64,
    /// MSE (0-255 scale) of `x` against its reconstruction.
    pub distortion: f64,
    /// MSE (0-255 scale) of `x_a` against its reconstruction.
    pub distortion_adv: f64,
    pub delta_rate: f64,
    pub delta_distortion: f64,
    pub psnr: f64,
    pub psnr_adv: f64,
}

impl RdReport {
    pub fn with_ids(mut self, lambda_index: usize, direction: (f64, f64), image_id: &str, method: &str) -> Self {
        self.lambda_index = lambda_index;
        self.direction = direction;
        self.image_id = image_id.to_string();
        self.method = method.to_string();
        self
    }

    /// `delta_rate + lambda * delta_distortion`.
    pub fn damage(&self, lambda: f64) -> f64 {
        self.delta_rate + lambda * self.delta_distortion
    }
}

pub fn perf_variation(model: &CompressionModel, x: &Tensor, x_a: &Tensor) -> Result<RdReport> {
    if x.shape() != x_a.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x_a.shape())));
    }
    let b = measure(model, x)?;
    let a = measure(model, x_a)?;
    let (rate, rate_adv) = (b.bpp(), a.bpp());
    let distortion = mse255(&b.x_hat, x)?;
    let distortion_adv = mse255(&a.x_hat, x_a)?;
    Ok(RdReport {
        family: model.family(),
        lambda_index: 0,
        direction: (0.0, 0.0),
        image_id: String::new(),
        method: String::new(),
        rate,
        rate_adv,
        distortion,
        distortion_adv,
        delta_rate: rate_adv - rate,
        delta_distortion: distortion_adv - distortion,
        psnr: psnr(distortion),
        psnr_adv: psnr(distortion_adv),
    })
}

/// Population mean and standard deviation of the deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub mean_delta_rate: f64,
    pub mean_delta_distortion: f64,
    pub std_delta_rate: f64,
    pub std_delta_distortion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    All,
    Direction,
    Submodel,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_all(reports: &[RdReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::EmptyGroup("all".into()));
    }
    let dr: Vec<f64> = reports.iter().map(|r| r.delta_rate).collect();
    let dd: Vec<f64> = reports.iter().map(|r| r.delta_distortion).collect();
    let (mean_delta_rate, std_delta_rate) = mean_std(&dr);
    let (mean_delta_distortion, std_delta_distortion) = mean_std(&dd);
    Ok(Aggregate { count: reports.len(), mean_delta_rate, mean_delta_distortion, std_delta_rate, std_delta_distortion })
}

/// Group key used by [`aggregate`].
pub fn group_key(r: &RdReport, by: Grouping) -> String {
    match by {
        Grouping::All => "all".into(),
        Grouping::Direction => format!("({}, {})", r.direction.0, r.direction.1),
        Grouping::Submodel => format!("{}/{}", r.family, r.lambda_index),
    }
}

/// Aggregates per group, groups in first-seen order.
pub fn aggregate(reports: &[RdReport], by: Grouping) -> Result<IndexMap<String, Aggregate>> {
    if reports.is_empty() {
        return Err(Error::EmptyGroup(format!("{by:?}")));
    }
    let mut groups: IndexMap<String, Vec<RdReport>> = IndexMap::new();
    for r in reports {
        groups.entry(group_key(r, by)).or_default().push(r.clone());
    }
    groups.into_iter().map(|(k, v)| aggregate_all(&v).map(|a| (k, a))).collect()
}

/// Spatial maps of the rate and distortion changes.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMaps {
    /// Bit change per latent cell (one cell per 8x8 pixel patch), `h x w`.
    pub rate: Vec<f64>,
    pub rate_dims: (usize, usize),
    /// Squared-error change (0-255 scale, channel mean) per pixel, `H x W`.
    pub distortion: Vec<f64>,
    pub distortion_dims: (usize, usize),
    pub pixels: usize,
}

impl LocalMaps {
    /// Sum of the rate map in bpp (equals the global rate change).
    pub fn rate_total_bpp(&self) -> f64 {
        self.rate.iter().sum::<f64>() / self.pixels as f64
    }

    /// Mean of the distortion map (equals the global distortion change).
    pub fn distortion_mean(&self) -> f64 {
        self.distortion.iter().sum::<f64>() / self.distortion.len().max(1) as f64
    }
}

/// Bits per latent cell, summed over channels and both streams.
fn cell_bits(m: &Measurement) -> Result<(Vec<f64>, (usize, usize))> {
    let (n, c, h, w) = m.bits_y.dims4()?;
    let mut cells = vec![0.0; h * w];
    let mut add = |t: &Tensor, ch: usize| {
        for b in 0..n {
            for k in 0..ch {
                let base = (b * ch + k) * h * w;
                for (cell, v) in cells.iter_mut().zip(&t.data()[base..base + h * w]) {
                    *cell += *v as f64;
                }
            }
        }
    };
    add(&m.bits_y, c);
    if let Some(bz) = &m.bits_z {
        let (_, zc, zh, zw) = bz.dims4()?;
        if (zh, zw) != (h, w) {
            return Err(Error::shape("hyper latent grid differs from the latent grid"));
        }
        add(bz, zc);
    }
    Ok((cells, (h, w)))
}

fn pixel_errors(x_hat: &Tensor, x: &Tensor) -> Result<(Vec<f64>, (usize, usize))> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = vec![0.0; h * w];
    for b in 0..n {
        for k in 0..c {
            let base = (b * c + k) * h * w;
            for (i, o) in out.iter_mut().enumerate() {
                let d = x_hat.data()[base + i] as f64 - x.data()[base + i] as f64;
                *o += d * d * 255.0 * 255.0 / (n * c) as f64;
            }
        }
    }
    Ok((out, (h, w)))
}

pub fn local_maps(model: &CompressionModel, x: &Tensor, x_a: &Tensor) -> Result<LocalMaps> {
    if x.shape() != x_a.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x_a.shape())));
    }
    let b = measure(model, x)?;
    let a = measure(model, x_a)?;
    let (cb, rate_dims) = cell_bits(&b)?;
    let (ca, _) = cell_bits(&a)?;
    let (eb, distortion_dims) = pixel_errors(&b.x_hat, x)?;
    let (ea, _) = pixel_errors(&a.x_hat, x_a)?;
    Ok(LocalMaps {
        rate: ca.iter().zip(&cb).map(|(p, q)| p - q).collect(),
        rate_dims,
        distortion: ea.iter().zip(&eb).map(|(p, q)| p - q).collect(),
        distortion_dims,
        pixels: b.pixels,
    })
}

/// Excess kurtosis-free fourth standardized moment of a map; high values
/// mean the mass is concentrated in few cells.
pub fn spatial_kurtosis(map: &[f64]) -> f64 {
    let (mean, std) = mean_std(map);
    if std == 0.0 {
        return 0.0;
    }
    map.iter().map(|v| ((v - mean) / std).powi(4)).sum::<f64>() / map.len() as f64
}

/// Branches whose adversarial input is replaced by the benign one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DoSet {
    /// `do(y_s)`: the coded samples.
    pub samples: bool,
    /// `do(y_c)`: the context-transform input.
    pub context: bool,
    /// `do(y_h)`: the hyper latent and everything computed from it.
    pub hyper: bool,
}

impl DoSet {
    pub const NONE: DoSet = DoSet { samples: false, context: false, hyper: false };
    pub const SAMPLES: DoSet = DoSet { samples: true, context: false, hyper: false };
    pub const CONTEXT: DoSet = DoSet { samples: false, context: true, hyper: false };
    pub const HYPER: DoSet = DoSet { samples: false, context: false, hyper: true };

    /// Every branch the family has.
    pub fn all_for(family: Family) -> DoSet {
        DoSet { samples: true, context: family.has_context(), hyper: family.has_hyper() }
    }

    /// The single-branch interventions available for a family.
    pub fn singles(family: Family) -> Vec<DoSet> {
        let mut v = vec![DoSet::SAMPLES];
        if family.has_context() {
            v.push(DoSet::CONTEXT);
        }
        if family.has_hyper() {
            v.push(DoSet::HYPER);
        }
        v
    }

    pub fn check(&self, family: Family) -> Result<()> {
        if self.context && !family.has_context() {
            return Err(Error::UnsupportedIntervention { op: "do(y_c)", family: family.to_string() });
        }
        if self.hyper && !family.has_hyper() {
            return Err(Error::UnsupportedIntervention { op: "do(y_h)", family: family.to_string() });
        }
        Ok(())
    }
}

impl fmt::Display for DoSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.samples {
            parts.push("do(y_s)");
        }
        if self.context {
            parts.push("do(y_c)");
        }
        if self.hyper {
            parts.push("do(y_h)");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EciReport {
    pub family: Family,
    pub interventions: DoSet,
    /// Mean `|mu - mu_benign|` (context family only).
    pub delta_mean: Option<f64>,
    /// Mean predicted scale on the evaluated path (hyper families).
    pub scale: Option<f64>,
    /// bpp of `z_hat` (hyper families).
    pub bitrate_z: Option<f64>,
    pub bitrate_y: f64,
    pub total: f64,
}

struct Branches {
    y_hat: Tensor,
    z_hat: Option<Tensor>,
    pixels: usize,
}

fn branches(model: &CompressionModel, x: &Tensor) -> Result<Branches> {
    let bundle = model.encode(x)?;
    Ok(Branches { y_hat: bundle.y_hat, z_hat: bundle.z_hat, pixels: bundle.pixels })
}

struct Hybrid {
    bits_y: f64,
    bits_z: Option<f64>,
    mu: Option<Tensor>,
    sigma: Option<Tensor>,
}

fn hybrid_pass(model: &CompressionModel, samples: &Tensor, context: &Tensor, z_hat: Option<&Tensor>) -> Result<Hybrid> {
    let mut g = Graph::<f32>::new();
    let p = model.bind(&mut g, false);
    let sv = g.constant(samples.clone());
    let cv = g.constant(context.clone());
    let zv: Option<Var> = z_hat.map(|z| g.constant(z.clone()));
    let ent = model.entropy_stage(&mut g, &p, sv, cv, zv)?;
    let bits_z = match zv {
        Some(z) => {
            let bz = model.hyper_bits(&mut g, &p, z)?;
            Some(g.value(bz).sum_f64())
        }
        None => None,
    };
    Ok(Hybrid {
        bits_y: g.value(ent.bits_y).sum_f64(),
        bits_z,
        mu: ent.mu.map(|m| g.value(m).clone()),
        sigma: ent.sigma.map(|s| g.value(s).clone()),
    })
}

/// Entropy causal intervention: evaluates the entropy model with the
/// branches in `do_set` fed from the benign image and the rest from the
/// adversarial one.
pub fn eci(model: &CompressionModel, x: &Tensor, x_a: &Tensor, do_set: DoSet) -> Result<EciReport> {
    do_set.check(model.family())?;
    if x.shape() != x_a.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x_a.shape())));
    }
    let b = branches(model, x)?;
    let a = branches(model, x_a)?;
    let pick = |benign: bool| if benign { &b } else { &a };
    let samples = &pick(do_set.samples).y_hat;
    let context = &pick(do_set.context).y_hat;
    let z = pick(do_set.hyper).z_hat.as_ref();
    let h = hybrid_pass(model, samples, context, z)?;

    let family = model.family();
    let delta_mean = if family.has_context() {
        let reference = hybrid_pass(model, &b.y_hat, &b.y_hat, b.z_hat.as_ref())?;
        let (mu, mu_b) = (h.mu.as_ref().expect("context family predicts mu"), reference.mu.expect("mu"));
        Some(mu.data().iter().zip(mu_b.data()).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / mu.numel() as f64)
    } else {
        None
    };
    let px = b.pixels as f64;
    let bitrate_y = h.bits_y / px;
    let bitrate_z = h.bits_z.map(|bz| bz / px);
    Ok(EciReport {
        family,
        interventions: do_set,
        delta_mean,
        scale: h.sigma.as_ref().map(|s| s.mean_f64()),
        bitrate_z,
        bitrate_y,
        total: bitrate_y + bitrate_z.unwrap_or(0.0),
    })
}

/// Per-layer distance magnification along the distortion path.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnifyProfile {
    pub layers: Vec<LayerHandle>,
    /// `LDMR_[i,I]` for every layer `i`.
    pub interval: Vec<f64>,
    /// `LDMR_i = LDMR_[i,I] / LDMR_[i+1,I]` with `LDMR_[I+1,I] = 1`.
    pub ldmr: Vec<f64>,
    /// `CDMR_i`, the running product of `LDMR_0..=i`.
    pub cdmr: Vec<f64>,
}

impl MagnifyProfile {
    pub fn final_cdmr(&self) -> f64 {
        *self.cdmr.last().expect("non-empty profile")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,ldmr,cdmr\n");
        for ((l, a), c) in self.layers.iter().zip(&self.ldmr).zip(&self.cdmr) {
            s.push_str(&format!("{},{:.6},{:.6}\n", l.name, a, c));
        }
        s
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / a.numel().max(1) as f64
}

/// `LDMR_[0,I]`: distance between reconstructions over distance between
/// inputs. Defined even when deeper layers see identical features.
pub fn final_cdmr(model: &CompressionModel, x: &Tensor, x_a: &Tensor) -> Result<f64> {
    let den = mean_abs_diff(x_a, x);
    if den == 0.0 {
        return Err(Error::ZeroDistance { layer: model.layer_list()[0].name.clone() });
    }
    let fx = sanitize(&model.forward_rd(x, &mut Quantizer::RoundSte)?.2);
    let fa = sanitize(&model.forward_rd(x_a, &mut Quantizer::RoundSte)?.2);
    Ok(mean_abs_diff(&fa, &fx) / den)
}

pub fn ldmr_cdmr(model: &CompressionModel, x: &Tensor, x_a: &Tensor) -> Result<MagnifyProfile> {
    if x.shape() != x_a.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x_a.shape())));
    }
    let layers = model.layer_list();
    let depth = layers.len();
    let tx = model.distortion_trace(x)?;
    let ta = model.distortion_trace(x_a)?;
    let fx = sanitize(&tx[depth]);
    let fa = sanitize(&ta[depth]);
    let tfx = model.distortion_trace(&fx)?;
    let tfa = model.distortion_trace(&fa)?;

    let mut interval = Vec::with_capacity(depth);
    for i in 0..depth {
        let den = mean_abs_diff(&ta[i], &tx[i]);
        if den == 0.0 {
            return Err(Error::ZeroDistance { layer: layers[i].name.clone() });
        }
        interval.push(mean_abs_diff(&tfa[i], &tfx[i]) / den);
    }
    let mut ldmr = Vec::with_capacity(depth);
    for i in 0..depth {
        let next = if i + 1 < depth { interval[i + 1] } else { 1.0 };
        if next == 0.0 {
            return Err(Error::ZeroDistance { layer: layers[i + 1].name.clone() });
        }
        ldmr.push(interval[i] / next);
    }
    let mut cdmr = Vec::with_capacity(depth);
    let mut acc = 1.0;
    for v in &ldmr {
        acc *= v;
        cdmr.push(acc);
    }
    Ok(MagnifyProfile { layers, interval, ldmr, cdmr })
}

