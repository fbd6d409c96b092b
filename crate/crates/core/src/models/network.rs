use std::f64::consts::LN_2;

use indexmap::IndexMap;

use super::{CompressionModel, Family, LatentBundle, LayerKind, RdPoint, DISTORTION_PATH, LATENT, QUANT_LAYER};
use crate::diffcore::{quantize, Graph, Quantizer, Real, Tensor, Var};
use crate::entropy::{gaussian_bits, logistic_bits, SIGMA_MIN};
use crate::{Error, Result};

/// Model parameters inserted into one graph.
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("model has no parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Entropy-model outputs for one latent.
#[derive(Debug, Clone, Copy)]
pub struct EntropyOutput {
    /// Per-element bits of the coded samples.
    pub bits_y: Var,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    /// Per-channel logistic scale (factorized family only).
    pub channel_scale: Option<Var>,
}

/// Vars of one differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub x: Var,
    pub y: Var,
    pub y_hat: Var,
    pub z: Option<Var>,
    pub z_hat: Option<Var>,
    pub entropy: EntropyOutput,
    pub bits_z: Option<Var>,
    pub x_hat: Var,
    /// bpp of the y stream.
    pub rate_y: Var,
    /// bpp of the z stream.
    pub rate_z: Option<Var>,
    /// Total bpp.
    pub rate: Var,
    /// MSE on the 0-255 scale.
    pub distortion: Var,
    pub pixels: usize,
}

impl ForwardOutput {
    pub fn rd_point<T: Real>(&self, g: &Graph<T>) -> RdPoint {
        let bits_y = g.value(self.entropy.bits_y).sum_f64();
        let bits_z = self.bits_z.map(|b| g.value(b).sum_f64()).unwrap_or(0.0);
        let px = self.pixels as f64;
        RdPoint {
            bpp: bits_y / px + bits_z / px,
            bpp_y: bits_y / px,
            bpp_z: bits_z / px,
            mse: g.value(self.distortion).item().as_f64(),
        }
    }

    pub fn bundle(&self, g: &Graph<f32>, _family: Family) -> LatentBundle {
        let loglik = |bits: Var| g.value(bits).map(|b| (-(b as f64) * LN_2) as f32);
        let y_hat = g.value(self.y_hat).clone();
        let mu = self.entropy.mu.map(|m| g.value(m).clone()).unwrap_or_else(|| Tensor::zeros(y_hat.shape().to_vec()));
        let sigma = match (self.entropy.sigma, self.entropy.channel_scale) {
            (Some(s), _) => g.value(s).clone(),
            (None, Some(cs)) => {
                let scales = g.value(cs).data().to_vec();
                let shape = y_hat.shape().to_vec();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                Tensor::from_fn(shape, |i| scales[(i / plane) % c])
            }
            (None, None) => Tensor::zeros(y_hat.shape().to_vec()),
        };
        LatentBundle {
            y: g.value(self.y).clone(),
            y_hat,
            z: self.z.map(|z| g.value(z).clone()),
            z_hat: self.z_hat.map(|z| g.value(z).clone()),
            mu,
            sigma,
            loglik_y: loglik(self.entropy.bits_y),
            loglik_z: self.bits_z.map(loglik),
            pixels: self.pixels,
        }
    }
}

fn context_mask<T: Real>(out_ch: usize, in_ch: usize) -> Tensor<T> {
    // raster-causal 3x3: rows above plus the left neighbour
    Tensor::from_fn(vec![out_ch, in_ch, 3, 3], |i| {
        let k = i % 9;
        if k < 4 {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn with_layer<V>(name: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite { op: format!("{name} ({op})") },
        other => other,
    })
}

impl CompressionModel {
    /// Inserts every parameter into `g`, as gradient-tracking leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.variable(t.cast()) } else { g.constant(t.cast()) };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        let y = g.conv2d(x, w, stride, pad)?;
        g.bias_add(y, b)
    }

    fn gdn<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var, inverse: bool) -> Result<Var> {
        let beta = p.get(&format!("{name}.beta"))?;
        let gamma = p.get(&format!("{name}.gamma"))?;
        let b = g.lower_bound(beta, 1e-3)?;
        let b = g.mul(b, b)?;
        let gm = g.lower_bound(gamma, 0.0)?;
        let gm = g.mul(gm, gm)?;
        g.gdn(x, b, gm, inverse)
    }

    /// Applies layer `index` of the distortion path.
    pub fn apply_layer<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, index: usize, x: Var, q: &mut Quantizer<'_>) -> Result<Var> {
        let (name, kind) = DISTORTION_PATH[index];
        let out = match kind {
            LayerKind::Conv { stride, pad } => self.conv(g, p, name, x, stride, pad),
            LayerKind::ConvTranspose { stride, pad } => {
                let w = p.get(&format!("{name}.weight"))?;
                let b = p.get(&format!("{name}.bias"))?;
                g.conv_transpose2d(x, w, stride, pad).and_then(|y| g.bias_add(y, b))
            }
            LayerKind::Gdn => self.gdn(g, p, name, x, false),
            LayerKind::Igdn => self.gdn(g, p, name, x, true),
            LayerKind::Quantize => quantize(g, x, q),
        };
        with_layer(name, out)
    }

    /// `y = g_a(x)`.
    pub fn analysis<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let mut v = x;
        for i in 0..QUANT_LAYER {
            v = self.apply_layer(g, p, i, v, &mut Quantizer::RoundSte)?;
        }
        Ok(v)
    }

    /// `x_hat = g_s(y_hat)`.
    pub fn synthesis<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, y_hat: Var) -> Result<Var> {
        let mut v = y_hat;
        for i in QUANT_LAYER + 1..DISTORTION_PATH.len() {
            v = self.apply_layer(g, p, i, v, &mut Quantizer::RoundSte)?;
        }
        Ok(v)
    }

    /// `z = h_a(y)` (on `|y|` for the scale-only hyperprior).
    pub fn hyper_analysis<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, y: Var) -> Result<Var> {
        let input = if self.family == Family::HyperS { g.abs(y)? } else { y };
        let h = self.conv(g, p, "ha.conv0", input, 1, 1)?;
        let h = g.relu(h)?;
        let h = self.conv(g, p, "ha.conv1", h, 1, 1)?;
        let h = g.relu(h)?;
        with_layer("ha.conv2", self.conv(g, p, "ha.conv2", h, 1, 1))
    }

    fn hyper_synthesis<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, z_hat: Var) -> Result<Var> {
        let h = self.conv(g, p, "hs.conv0", z_hat, 1, 1)?;
        let h = g.relu(h)?;
        let h = self.conv(g, p, "hs.conv1", h, 1, 1)?;
        let h = g.relu(h)?;
        with_layer("hs.conv2", self.conv(g, p, "hs.conv2", h, 1, 1))
    }

    fn prior_scale<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, prior: &str) -> Result<(Var, Var)> {
        let loc = p.get(&format!("{prior}.loc"))?;
        let raw = p.get(&format!("{prior}.scale"))?;
        let s = g.softplus(raw)?;
        let s = g.lower_bound(s, SIGMA_MIN)?;
        Ok((loc, s))
    }

    /// Per-element bits of the hyper latent under its factorized prior.
    pub fn hyper_bits<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, z_hat: Var) -> Result<Var> {
        let (loc, scale) = self.prior_scale(g, p, "prior_z")?;
        logistic_bits(g, z_hat, loc, scale)
    }

    /// Entropy model for the coded samples `y_hat`.
    ///
    /// `context_input` feeds the masked context transform and `z_hat` the
    /// hyper synthesis; they normally equal `y_hat` and the hyper latent of
    /// the same image but can be swapped for causal interventions.
    pub fn entropy_stage<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        y_hat: Var,
        context_input: Var,
        z_hat: Option<Var>,
    ) -> Result<EntropyOutput> {
        match self.family {
            Family::Factorized => {
                let (loc, scale) = self.prior_scale(g, p, "prior_y")?;
                let bits_y = logistic_bits(g, y_hat, loc, scale)?;
                Ok(EntropyOutput { bits_y, mu: None, sigma: None, channel_scale: Some(scale) })
            }
            Family::HyperS => {
                let z_hat = z_hat.ok_or_else(|| Error::invalid("HYPER_S entropy stage needs z_hat"))?;
                let raw = self.hyper_synthesis(g, p, z_hat)?;
                let s = g.softplus(raw)?;
                let sigma = g.lower_bound(s, SIGMA_MIN)?;
                let zero = g.constant(Tensor::zeros(g.shape(y_hat).to_vec()));
                let bits_y = gaussian_bits(g, y_hat, zero, sigma)?;
                Ok(EntropyOutput { bits_y, mu: None, sigma: Some(sigma), channel_scale: None })
            }
            Family::HyperMc => {
                let z_hat = z_hat.ok_or_else(|| Error::invalid("HYPER_MC entropy stage needs z_hat"))?;
                let hyper = self.hyper_synthesis(g, p, z_hat)?;
                let w = p.get("ctx.weight")?;
                let (o, c) = (g.shape(w)[0], g.shape(w)[1]);
                let mask = g.constant(context_mask(o, c));
                let wm = g.mul(w, mask)?;
                let ctx = g.conv2d(context_input, wm, 1, 1)?;
                let ctx = g.bias_add(ctx, p.get("ctx.bias")?)?;
                let a = g.conv2d(hyper, p.get("ep.hyper.weight")?, 1, 0)?;
                let b = g.conv2d(ctx, p.get("ep.ctx.weight")?, 1, 0)?;
                let h = g.add(a, b)?;
                let h = g.bias_add(h, p.get("ep.bias")?)?;
                let h = g.relu(h)?;
                let params = self.conv(g, p, "ep.out", h, 1, 0)?;
                let mu = g.slice_channels(params, 0, LATENT)?;
                let raw = g.slice_channels(params, LATENT, LATENT)?;
                let s = g.softplus(raw)?;
                let sigma = g.lower_bound(s, SIGMA_MIN)?;
                let bits_y = gaussian_bits(g, y_hat, mu, sigma)?;
                Ok(EntropyOutput { bits_y, mu: Some(mu), sigma: Some(sigma), channel_scale: None })
            }
        }
    }

    /// Full differentiable pass: rate in bpp and distortion as 0-255 MSE.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, q: &mut Quantizer<'_>) -> Result<ForwardOutput> {
        let (n, _, h, w) = g.value(x).dims4()?;
        super::check_image(g.value(x))?;
        let pixels = n * h * w;
        let y = self.analysis(g, p, x)?;
        let y_hat = self.apply_layer(g, p, QUANT_LAYER, y, q)?;
        let (z, z_hat, bits_z) = if self.family.has_hyper() {
            let z = self.hyper_analysis(g, p, y)?;
            let z_hat = quantize(g, z, q)?;
            let bits_z = self.hyper_bits(g, p, z_hat)?;
            (Some(z), Some(z_hat), Some(bits_z))
        } else {
            (None, None, None)
        };
        let entropy = self.entropy_stage(g, p, y_hat, y_hat, z_hat)?;
        let x_hat = self.synthesis(g, p, y_hat)?;

        let inv_px = 1.0 / pixels as f64;
        let sy = g.sum(entropy.bits_y)?;
        let rate_y = g.scale(sy, inv_px)?;
        let (rate, rate_z) = match bits_z {
            Some(bz) => {
                let sz = g.sum(bz)?;
                let rz = g.scale(sz, inv_px)?;
                (g.add(rate_y, rz)?, Some(rz))
            }
            None => (rate_y, None),
        };
        let distortion = g.mse(x_hat, x, 255.0 * 255.0)?;
        Ok(ForwardOutput { x, y, y_hat, z, z_hat, entropy, bits_z, x_hat, rate_y, rate_z, rate, distortion, pixels })
    }

    /// `(R, D, x_hat)` on a fresh f32 graph.
    pub fn forward_rd(&self, x: &Tensor, q: &mut Quantizer<'_>) -> Result<(f64, f64, Tensor)> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, q)?;
        let rd = out.rd_point(&g);
        Ok((rd.bpp, rd.mse, g.value(out.x_hat).clone()))
    }
}
