//! Toy compression model zoo.
//!
//! Every family shares one convolutional autoencoder:
//!
//! ```text
//! g_a: conv(3->32,s2) GDN conv(32->32,s2) GDN conv(32->48,s2)
//! Q
//! g_s: tconv(48->32,s2) IGDN tconv(32->32,s2) IGDN tconv(32->32,s2) IGDN conv3x3(32->3)
//! ```
//!
//! and differs only in the entropy model for the quantized latent:
//! a per-channel logistic ([`Family::Factorized`]), a scale hyperprior
//! ([`Family::HyperS`]) or a mean-scale hyperprior combined with a masked 3x3
//! context convolution ([`Family::HyperMc`]). The hyper branch keeps the
//! latent resolution so any image side divisible by 8 is accepted.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{EntropyOutput, ForwardOutput, ParamVars};

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Quantizer, Tensor};
use crate::{Error, Result};

pub const WIDTH: usize = 32;
pub const LATENT: usize = 48;
pub const HYPER_HIDDEN: usize = 32;
pub const HYPER_LATENT: usize = 16;
pub const CONTEXT: usize = 64;
pub const PARAM_HIDDEN: usize = 96;
/// Total spatial downsampling of g_a.
pub const DOWNSAMPLE: usize = 8;

/// Entropy-model family of a submodel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Factorized,
    HyperS,
    HyperMc,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Factorized, Family::HyperS, Family::HyperMc];

    pub fn tag(self) -> u8 {
        match self {
            Family::Factorized => 0,
            Family::HyperS => 1,
            Family::HyperMc => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Family::Factorized),
            1 => Ok(Family::HyperS),
            2 => Ok(Family::HyperMc),
            t => Err(Error::format("family tag", format!("unknown tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Factorized => "FACTORIZED",
            Family::HyperS => "HYPER_S",
            Family::HyperMc => "HYPER_MC",
        }
    }

    pub fn has_hyper(self) -> bool {
        !matches!(self, Family::Factorized)
    }

    pub fn has_context(self) -> bool {
        matches!(self, Family::HyperMc)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "FACTORIZED" => Ok(Family::Factorized),
            "HYPER_S" | "HYPERS" => Ok(Family::HyperS),
            "HYPER_MC" | "HYPERMC" => Ok(Family::HyperMc),
            _ => Err(Error::invalid(format!("unknown model family {s:?}"))),
        }
    }
}

/// One layer of the distortion path `f = g_s . Q . g_a`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerHandle {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerKind {
    Conv { stride: usize, pad: usize },
    ConvTranspose { stride: usize, pad: usize },
    Gdn,
    Igdn,
    Quantize,
}

pub(crate) const DISTORTION_PATH: [(&str, LayerKind); 13] = [
    ("ga.conv0", LayerKind::Conv { stride: 2, pad: 1 }),
    ("ga.gdn0", LayerKind::Gdn),
    ("ga.conv1", LayerKind::Conv { stride: 2, pad: 1 }),
    ("ga.gdn1", LayerKind::Gdn),
    ("ga.conv2", LayerKind::Conv { stride: 2, pad: 1 }),
    ("Q", LayerKind::Quantize),
    ("gs.tconv0", LayerKind::ConvTranspose { stride: 2, pad: 1 }),
    ("gs.igdn0", LayerKind::Igdn),
    ("gs.tconv1", LayerKind::ConvTranspose { stride: 2, pad: 1 }),
    ("gs.igdn1", LayerKind::Igdn),
    ("gs.tconv2", LayerKind::ConvTranspose { stride: 2, pad: 1 }),
    ("gs.igdn2", LayerKind::Igdn),
    ("gs.out", LayerKind::Conv { stride: 1, pad: 1 }),
];

/// Index of the quantizer in the distortion path.
pub const QUANT_LAYER: usize = 5;

/// Quantized latents and entropy parameters of one image batch.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub y: Tensor,
    pub y_hat: Tensor,
    pub z: Option<Tensor>,
    pub z_hat: Option<Tensor>,
    /// Predicted means (zero for families without a mean predictor).
    pub mu: Tensor,
    /// Predicted scales; for the factorized family the per-channel logistic
    /// scale broadcast to the latent shape.
    pub sigma: Tensor,
    /// Natural-log likelihood of every element of `y_hat`.
    pub loglik_y: Tensor,
    pub loglik_z: Option<Tensor>,
    /// Pixel count of the source image (N * H * W).
    pub pixels: usize,
}

impl LatentBundle {
    pub fn bpp_y(&self) -> f64 {
        crate::entropy::bits(self).0 / self.pixels as f64
    }

    pub fn bpp_z(&self) -> f64 {
        crate::entropy::bits(self).1 / self.pixels as f64
    }

    pub fn bpp(&self) -> f64 {
        let (by, bz) = crate::entropy::bits(self);
        (by + bz) / self.pixels as f64
    }
}

/// Rate / distortion of a single evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub bpp_y: f64,
    pub bpp_z: f64,
    /// MSE on the 0-255 scale.
    pub mse: f64,
}

/// A lambda-indexed toy submodel.
#[derive(Clone)]
pub struct CompressionModel {
    family: Family,
    lambda: f64,
    params: IndexMap<String, Tensor>,
}

impl fmt::Debug for CompressionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompressionModel")
            .field("family", &self.family)
            .field("lambda", &self.lambda)
            .field("params", &self.params.len())
            .finish()
    }
}

fn param_specs(family: Family) -> Vec<(String, Vec<usize>)> {
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut conv = |name: &str, shape: [usize; 4], bias: usize| {
        specs.push((format!("{name}.weight"), shape.to_vec()));
        specs.push((format!("{name}.bias"), vec![bias]));
    };
    conv("ga.conv0", [WIDTH, 3, 4, 4], WIDTH);
    conv("ga.conv1", [WIDTH, WIDTH, 4, 4], WIDTH);
    conv("ga.conv2", [LATENT, WIDTH, 4, 4], LATENT);
    // transposed kernels are in_ch x out_ch x k x k
    conv("gs.tconv0", [LATENT, WIDTH, 4, 4], WIDTH);
    conv("gs.tconv1", [WIDTH, WIDTH, 4, 4], WIDTH);
    conv("gs.tconv2", [WIDTH, WIDTH, 4, 4], WIDTH);
    conv("gs.out", [3, WIDTH, 3, 3], 3);
    if family.has_hyper() {
        conv("ha.conv0", [HYPER_HIDDEN, LATENT, 3, 3], HYPER_HIDDEN);
        conv("ha.conv1", [HYPER_HIDDEN, HYPER_HIDDEN, 3, 3], HYPER_HIDDEN);
        conv("ha.conv2", [HYPER_LATENT, HYPER_HIDDEN, 3, 3], HYPER_LATENT);
        conv("hs.conv0", [HYPER_HIDDEN, HYPER_LATENT, 3, 3], HYPER_HIDDEN);
        conv("hs.conv1", [HYPER_HIDDEN, HYPER_HIDDEN, 3, 3], HYPER_HIDDEN);
        let out = if family.has_context() { CONTEXT } else { LATENT };
        conv("hs.conv2", [out, HYPER_HIDDEN, 3, 3], out);
    }
    if family.has_context() {
        conv("ctx", [CONTEXT, LATENT, 3, 3], CONTEXT);
        specs.push(("ep.hyper.weight".into(), vec![PARAM_HIDDEN, CONTEXT, 1, 1]));
        specs.push(("ep.ctx.weight".into(), vec![PARAM_HIDDEN, CONTEXT, 1, 1]));
        specs.push(("ep.bias".into(), vec![PARAM_HIDDEN]));
        specs.push(("ep.out.weight".into(), vec![2 * LATENT, PARAM_HIDDEN, 1, 1]));
        specs.push(("ep.out.bias".into(), vec![2 * LATENT]));
    }
    for (name, ch) in [("ga.gdn0", WIDTH), ("ga.gdn1", WIDTH), ("gs.igdn0", WIDTH), ("gs.igdn1", WIDTH), ("gs.igdn2", WIDTH)] {
        specs.push((format!("{name}.beta"), vec![ch]));
        specs.push((format!("{name}.gamma"), vec![ch, ch]));
    }
    let (prior, ch) = if family.has_hyper() { ("prior_z", HYPER_LATENT) } else { ("prior_y", LATENT) };
    specs.push((format!("{prior}.loc"), vec![ch]));
    specs.push((format!("{prior}.scale"), vec![ch]));
    specs
}

// softplus^-1(1)
const UNIT_SCALE_RAW: f32 = 0.541_324_9;

impl CompressionModel {
    /// Randomly initialised model.
    pub fn new(family: Family, lambda: f64, seed: u64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape) in param_specs(family) {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".weight") {
                let fan_in = if name.starts_with("gs.tconv") {
                    // each output sees in_ch * (k / stride)^2 inputs
                    shape[0] * shape[2] * shape[3] / 4
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let bound = (3.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound) as f32).collect()
            } else if name.ends_with(".beta") {
                vec![1.0; numel]
            } else if name.ends_with(".gamma") {
                let c = shape[0];
                (0..numel).map(|i| if i / c == i % c { 0.1f32.sqrt() } else { 0.0 }).collect()
            } else if name.ends_with(".scale") {
                vec![UNIT_SCALE_RAW; numel]
            } else {
                vec![0.0; numel]
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { family, lambda, params })
    }

    pub(crate) fn from_parts(family: Family, lambda: f64, params: IndexMap<String, Tensor>) -> Result<Self> {
        let expected = param_specs(family);
        if expected.len() != params.len() {
            return Err(Error::format("checkpoint", format!("expected {} parameters, found {}", expected.len(), params.len())));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::format("checkpoint", format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::format("checkpoint", format!("missing parameter {name}"))),
            }
        }
        Ok(Self { family, lambda, params })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(())
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces parameter values (same names and shapes) after an update.
    pub fn set_params(&mut self, values: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        for (name, value) in values {
            let slot = self.params.get_mut(&name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::shape(format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Ordered handles of the distortion path (g_a layers, Q, g_s layers).
    pub fn layer_list(&self) -> Vec<LayerHandle> {
        DISTORTION_PATH.iter().enumerate().map(|(index, (name, _))| LayerHandle { index, name: (*name).to_string() }).collect()
    }

    /// Index `I` of the last layer of the distortion path.
    pub fn last_layer(&self) -> usize {
        DISTORTION_PATH.len() - 1
    }

    /// Compresses an image batch in `[0, 1]` to quantized latents and their
    /// entropy parameters (hard rounding).
    pub fn encode(&self, x: &Tensor) -> Result<LatentBundle> {
        check_image(x)?;
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("encode expects pixel values in [0, 1]"));
        }
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &params, xv, &mut Quantizer::RoundSte)?;
        Ok(out.bundle(&g, self.family))
    }

    /// Reconstruction from integer latents. Values are not clamped.
    pub fn decode(&self, y_hat: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = y_hat.dims4()?;
        if c != LATENT {
            return Err(Error::shape(format!("decode expects {LATENT} latent channels, got {c}")));
        }
        if y_hat.data().iter().any(|v| v.round() != *v) {
            return Err(Error::invalid("decode expects integer-valued latents"));
        }
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let y = g.constant(y_hat.clone());
        let x_hat = self.synthesis(&mut g, &params, y)?;
        Ok(g.value(x_hat).clone())
    }

    /// Hard-rounded rate/distortion of an image (values outside `[0, 1]`
    /// are accepted so attack iterates can be scored).
    pub fn evaluate(&self, x: &Tensor) -> Result<RdPoint> {
        check_image(x)?;
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &params, xv, &mut Quantizer::RoundSte)?;
        Ok(out.rd_point(&g))
    }

    /// Feature map after layers `0..upto` of the distortion path
    /// (`upto = 0` returns the input, `upto = I + 1` the reconstruction).
    pub fn partial_encode(&self, x: &Tensor, upto: &LayerHandle) -> Result<Tensor> {
        if upto.index > DISTORTION_PATH.len() {
            return Err(Error::invalid(format!("layer index {} outside 0..={}", upto.index, DISTORTION_PATH.len())));
        }
        check_image(x)?;
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let mut v = g.constant(x.clone());
        for i in 0..upto.index {
            v = self.apply_layer(&mut g, &params, i, v, &mut Quantizer::RoundSte)?;
        }
        Ok(g.value(v).clone())
    }

    /// Every intermediate of the distortion path: entry `i` is the output of
    /// layers `0..i`, so entry 0 is `x` and the last entry is `f(x)`.
    pub fn distortion_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        check_image(x)?;
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let mut v = g.constant(x.clone());
        let mut trace = vec![x.clone()];
        for i in 0..DISTORTION_PATH.len() {
            v = self.apply_layer(&mut g, &params, i, v, &mut Quantizer::RoundSte)?;
            trace.push(g.value(v).clone());
        }
        Ok(trace)
    }
}

/// Checks NCHW, 3 channels, sides divisible by 8.
pub fn check_image<T: crate::diffcore::Real>(x: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::shape(format!("image sides {h}x{w} must be positive multiples of {DOWNSAMPLE}")));
    }
    Ok(())
}

