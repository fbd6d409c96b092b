//! Likelihood models for quantized latents.
//!
//! Two parametric families are provided: a per-channel logistic (the
//! factorized prior) and a per-element Gaussian conditional. Both integrate
//! the continuous density over the unit bin around each integer symbol.
//! The same interval probabilities back the differentiable bit estimates
//! recorded on a [`Graph`] and the integer [`CdfTable`]s used by the range
//! coder, so estimated and realized rates share one definition.

use std::f64::consts::{LN_2, SQRT_2};

use crate::diffcore::{CustomOp, Graph, Real, Tensor, Var};
use crate::models::LatentBundle;
use crate::{Error, Result};

/// Lower bound on predicted Gaussian scales.
pub const SIGMA_MIN: f64 = 0.04;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-9;
/// Probability precision of [`CdfTable`]s.
pub const PRECISION_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << PRECISION_BITS;
/// Default coding range for latent symbols.
pub const SYMBOL_MIN: i32 = -128;
pub const SYMBOL_MAX: i32 = 127;

fn std_normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / SQRT_2)
}

fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn logistic_cdf(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn logistic_pdf(u: f64) -> f64 {
    let f = logistic_cdf(u);
    f * (1.0 - f)
}

/// Probability mass of the unit bin centred on `y` together with its partial
/// derivatives `(p, dp/dy, dp/dloc, dp/dscale)`.
fn interval_prob(y: f64, loc: f64, scale: f64, cdf: fn(f64) -> f64, pdf: fn(f64) -> f64) -> (f64, f64, f64, f64) {
    let d = y - loc;
    // Evaluate in the lower tail to avoid cancellation near 1.
    let v = -d.abs();
    let p = cdf((v + 0.5) / scale) - cdf((v - 0.5) / scale);
    let a = (d + 0.5) / scale;
    let b = (d - 0.5) / scale;
    let (fa, fb) = (pdf(a), pdf(b));
    let dy = (fa - fb) / scale;
    let ds = -(a * fa - b * fb) / scale;
    (p, dy, -dy, ds)
}

/// `P(Y = y)` for `Y` a Gaussian with the given mean and scale, discretized
/// to unit bins. The scale is clamped to [`SIGMA_MIN`].
pub fn gaussian_likelihood(y: f64, mean: f64, scale: f64) -> f64 {
    interval_prob(y, mean, scale.max(SIGMA_MIN), std_normal_cdf, std_normal_pdf).0
}

/// `P(Y = y)` for a discretized logistic.
pub fn logistic_likelihood(y: f64, loc: f64, scale: f64) -> f64 {
    interval_prob(y, loc, scale, logistic_cdf, logistic_pdf).0
}

fn bits_and_slope(p: f64) -> (f64, f64) {
    if p > PROB_FLOOR {
        (-p.log2(), -1.0 / (p * LN_2))
    } else {
        (-PROB_FLOOR.log2(), 0.0)
    }
}

/// Per-channel logistic prior.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPrior {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FactorizedPrior {
    pub fn new(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if loc.len() != scale.len() {
            return Err(Error::shape("factorized prior loc/scale length mismatch"));
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("logistic scale must be positive, got {s}")));
        }
        Ok(Self { loc, scale })
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn likelihood(&self, channel: usize, y: f64) -> f64 {
        logistic_likelihood(y, self.loc[channel], self.scale[channel])
    }

    pub fn model(&self, channel: usize) -> ContinuousModel {
        ContinuousModel::Logistic { loc: self.loc[channel], scale: self.scale[channel] }
    }
}

/// Per-element Gaussian conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl GaussianConditional {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(Error::shape("gaussian conditional mean/scale length mismatch"));
        }
        Ok(Self { mean, scale: scale.into_iter().map(|s| s.max(SIGMA_MIN)).collect() })
    }

    pub fn likelihood(&self, index: usize, y: f64) -> f64 {
        gaussian_likelihood(y, self.mean[index], self.scale[index])
    }

    pub fn model(&self, index: usize) -> ContinuousModel {
        ContinuousModel::Gaussian { mean: self.mean[index], scale: self.scale[index] }
    }
}

/// Per-element probabilities of `y` under the factorized prior (`y` is NCHW).
pub fn factorized_likelihood(prior: &FactorizedPrior, y: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = y.dims4()?;
    if c != prior.channels() {
        return Err(Error::shape(format!("prior has {} channels, latent has {c}", prior.channels())));
    }
    let plane = h * w;
    Ok((0..n * c * plane).map(|i| prior.likelihood((i / plane) % c, y.data()[i] as f64)).collect())
}

/// Per-element probabilities of `y` under a Gaussian conditional.
pub fn conditional_likelihood(cond: &GaussianConditional, y: &Tensor) -> Result<Vec<f64>> {
    if cond.mean.len() != y.numel() {
        return Err(Error::shape("conditional parameters do not match latent size"));
    }
    Ok(y.data().iter().enumerate().map(|(i, &v)| cond.likelihood(i, v as f64)).collect())
}

struct GaussianBitsOp {
    // (dbits/dy, dbits/dmean, dbits/dscale) per element
    partials: Vec<[f64; 3]>,
}

impl<T: Real> CustomOp<T> for GaussianBitsOp {
    fn name(&self) -> &'static str {
        "gaussian_bits"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        (0..3)
            .map(|k| {
                needs[k].then(|| {
                    grad_out
                        .iter()
                        .zip(&self.partials)
                        .map(|(&g, p)| T::from_f64_lossy(g.as_f64() * p[k]))
                        .collect()
                })
            })
            .collect()
    }
}

/// Per-element `-log2 P(y)` under a Gaussian with per-element `mean` and
/// `scale`. `scale` is expected to be lower-bounded by [`SIGMA_MIN`] already.
pub fn gaussian_bits<T: Real>(g: &mut Graph<T>, y: Var, mean: Var, scale: Var) -> Result<Var> {
    if g.shape(y) != g.shape(mean) || g.shape(y) != g.shape(scale) {
        return Err(Error::shape(format!(
            "gaussian_bits: y {:?}, mean {:?}, scale {:?}",
            g.shape(y),
            g.shape(mean),
            g.shape(scale)
        )));
    }
    let (yv, mv, sv) = (g.value(y), g.value(mean), g.value(scale));
    let mut bits = Vec::with_capacity(yv.numel());
    let mut partials = Vec::with_capacity(yv.numel());
    for i in 0..yv.numel() {
        let s = sv.data()[i].as_f64();
        if !(s > 0.0) {
            return Err(Error::invalid(format!("gaussian scale must be positive, got {s}")));
        }
        let (p, dy, dm, ds) = interval_prob(yv.data()[i].as_f64(), mv.data()[i].as_f64(), s, std_normal_cdf, std_normal_pdf);
        let (b, slope) = bits_and_slope(p);
        bits.push(T::from_f64_lossy(b));
        partials.push([slope * dy, slope * dm, slope * ds]);
    }
    let out = Tensor::new(yv.shape().to_vec(), bits)?;
    g.custom(&[y, mean, scale], out, Box::new(GaussianBitsOp { partials }))
}

struct LogisticBitsOp {
    channels: usize,
    plane: usize,
    partials: Vec<[f64; 3]>,
}

impl<T: Real> CustomOp<T> for LogisticBitsOp {
    fn name(&self) -> &'static str {
        "logistic_bits"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let dy = needs[0].then(|| {
            grad_out.iter().zip(&self.partials).map(|(&g, p)| T::from_f64_lossy(g.as_f64() * p[0])).collect()
        });
        let per_channel = |k: usize| {
            let mut acc = vec![0.0f64; self.channels];
            for (i, (&g, p)) in grad_out.iter().zip(&self.partials).enumerate() {
                acc[(i / self.plane) % self.channels] += g.as_f64() * p[k];
            }
            acc.into_iter().map(T::from_f64_lossy).collect()
        };
        let dloc = needs[1].then(|| per_channel(1));
        let dscale = needs[2].then(|| per_channel(2));
        vec![dy, dloc, dscale]
    }
}

/// Per-element `-log2 P(y)` under a per-channel logistic; `loc` and `scale`
/// have shape `[C]`.
pub fn logistic_bits<T: Real>(g: &mut Graph<T>, y: Var, loc: Var, scale: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(y).dims4()?;
    if g.shape(loc) != [c] || g.shape(scale) != [c] {
        return Err(Error::shape(format!("logistic_bits: {c} channels, loc {:?}, scale {:?}", g.shape(loc), g.shape(scale))));
    }
    let plane = h * w;
    let (yv, lv, sv) = (g.value(y), g.value(loc), g.value(scale));
    let mut bits = Vec::with_capacity(yv.numel());
    let mut partials = Vec::with_capacity(yv.numel());
    for (i, &v) in yv.data().iter().enumerate() {
        let ch = (i / plane) % c;
        let s = sv.data()[ch].as_f64();
        if !(s > 0.0) {
            return Err(Error::invalid(format!("logistic scale must be positive, got {s}")));
        }
        let (p, dy, dl, ds) = interval_prob(v.as_f64(), lv.data()[ch].as_f64(), s, logistic_cdf, logistic_pdf);
        let (b, slope) = bits_and_slope(p);
        bits.push(T::from_f64_lossy(b));
        partials.push([slope * dy, slope * dl, slope * ds]);
    }
    let out = Tensor::new(yv.shape().to_vec(), bits)?;
    g.custom(&[y, loc, scale], out, Box::new(LogisticBitsOp { channels: c, plane, partials }))
}

/// Total bits `(bits_y, bits_z)` of a bundle, from its stored log-likelihoods.
pub fn bits(bundle: &LatentBundle) -> (f64, f64) {
    let to_bits = |ll: &Tensor| -ll.sum_f64() / LN_2;
    let by = to_bits(&bundle.loglik_y);
    let bz = bundle.loglik_z.as_ref().map(to_bits).unwrap_or(0.0);
    (by, bz)
}

/// A continuous density to be discretized into a [`CdfTable`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContinuousModel {
    Logistic { loc: f64, scale: f64 },
    Gaussian { mean: f64, scale: f64 },
}

impl ContinuousModel {
    pub fn prob(&self, symbol: i32) -> f64 {
        match *self {
            ContinuousModel::Logistic { loc, scale } => logistic_likelihood(symbol as f64, loc, scale),
            ContinuousModel::Gaussian { mean, scale } => gaussian_likelihood(symbol as f64, mean, scale),
        }
    }
}

/// Inclusive symbol range covered by a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymbolRange {
    pub min: i32,
    pub max: i32,
}

impl SymbolRange {
    pub const LATENT: SymbolRange = SymbolRange { min: SYMBOL_MIN, max: SYMBOL_MAX };

    pub fn new(min: i32, max: i32) -> Result<Self> {
        if max < min {
            return Err(Error::invalid(format!("empty symbol range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        (self.max as i64 - self.min as i64 + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, s: i32) -> bool {
        s >= self.min && s <= self.max
    }
}

/// Integer cumulative frequencies summing to [`CDF_TOTAL`].
///
/// With `escape` enabled the last slot stands for "outside the range"; the
/// coder then writes the raw value after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    range: SymbolRange,
    escape: bool,
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a probability mass function over `range` (plus an optional
    /// escape mass) so every slot keeps at least one count.
    pub fn from_pmf(range: SymbolRange, pmf: &[f64], escape_mass: Option<f64>) -> Result<Self> {
        if pmf.len() != range.len() {
            return Err(Error::shape(format!("pmf has {} entries for {} symbols", pmf.len(), range.len())));
        }
        let mut probs: Vec<f64> = pmf.to_vec();
        if let Some(e) = escape_mass {
            probs.push(e);
        }
        let slots = probs.len();
        if slots as u64 >= CDF_TOTAL as u64 {
            return Err(Error::invalid(format!("{slots} slots exceed {PRECISION_BITS}-bit precision")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("pmf entries must be finite and nonnegative"));
        }
        let mass: f64 = probs.iter().sum();
        let free = (CDF_TOTAL as usize - slots) as f64;
        let mut freq: Vec<u32> = probs
            .iter()
            .map(|&p| {
                let share = if mass > 0.0 { p / mass } else { 1.0 / slots as f64 };
                1 + (share * free).floor() as u32
            })
            .collect();
        let used: u32 = freq.iter().sum();
        let (argmax, _) = probs
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bp), (i, &p)| if p > bp { (i, p) } else { (bi, bp) });
        freq[argmax] += CDF_TOTAL - used;
        let mut cdf = Vec::with_capacity(slots + 1);
        cdf.push(0u32);
        for f in freq {
            cdf.push(cdf.last().copied().unwrap_or(0) + f);
        }
        Ok(Self { range, escape: escape_mass.is_some(), cdf })
    }

    pub fn range(&self) -> SymbolRange {
        self.range
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cdf
    }

    pub fn slots(&self) -> usize {
        self.cdf.len() - 1
    }

    /// `(start, freq)` of slot `i`.
    pub fn interval(&self, slot: usize) -> (u32, u32) {
        (self.cdf[slot], self.cdf[slot + 1] - self.cdf[slot])
    }

    pub fn escape_slot(&self) -> Option<usize> {
        self.escape.then(|| self.range.len())
    }

    /// Slot for a symbol: its own slot, the escape slot, or an error.
    pub fn slot_of(&self, symbol: i32) -> Result<usize> {
        if self.range.contains(symbol) {
            Ok((symbol - self.range.min) as usize)
        } else if let Some(e) = self.escape_slot() {
            Ok(e)
        } else {
            Err(Error::SymbolOutOfRange { symbol, min: self.range.min, max: self.range.max })
        }
    }

    /// Slot whose interval contains the cumulative value `target`.
    pub fn find(&self, target: u32) -> usize {
        // cdf[0] == 0 <= target < CDF_TOTAL == cdf[last]
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Probability the table assigns to a slot.
    pub fn slot_prob(&self, slot: usize) -> f64 {
        self.interval(slot).1 as f64 / CDF_TOTAL as f64
    }
}

/// Discretizes `model` over `range` into a coding table. With `escape` the
/// tail mass outside the range gets its own slot.
pub fn build_cdf(model: &ContinuousModel, range: SymbolRange, escape: bool) -> Result<CdfTable> {
    let pmf: Vec<f64> = (range.min..=range.max).map(|s| model.prob(s)).collect();
    let inside: f64 = pmf.iter().sum();
    let tail = escape.then(|| (1.0 - inside).max(0.0));
    CdfTable::from_pmf(range, &pmf, tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_zero_symbol_matches_erf() {
        // P(|N(0,1)| < 0.5) = erf(0.5 / sqrt 2)
        let oracle = libm::erf(0.5 / SQRT_2);
        let p = gaussian_likelihood(0.0, 0.0, 1.0);
        assert!((p - oracle).abs() < 1e-12);
        assert!((p - 0.3829).abs() < 5e-5);
    }

    #[test]
    fn pmf_sums_to_one() {
        for (mean, scale) in [(0.0, 1.0), (0.3, 2.5), (-4.2, 0.04), (1.7, 9.0)] {
            let s: f64 = (-200..=200).map(|k| gaussian_likelihood(k as f64, mean, scale)).sum();
            assert!((s - 1.0).abs() < 1e-6, "gaussian {mean} {scale}: {s}");
            let s: f64 = (-400..=400).map(|k| logistic_likelihood(k as f64, mean, scale)).sum();
            assert!((s - 1.0).abs() < 1e-6, "logistic {mean} {scale}: {s}");
        }
    }

    #[test]
    fn mode_at_rounded_mean() {
        for mean in [-2.3, -0.49, 0.0, 0.51, 3.7] {
            let best = (-10..=10)
                .max_by(|a, b| gaussian_likelihood(*a as f64, mean, 0.8).total_cmp(&gaussian_likelihood(*b as f64, mean, 0.8)))
                .unwrap();
            assert_eq!(best as f64, f64::round(mean));
        }
    }

    #[test]
    fn scale_is_clamped() {
        assert_eq!(gaussian_likelihood(0.0, 0.0, 1e-6), gaussian_likelihood(0.0, 0.0, SIGMA_MIN));
    }

    #[test]
    fn uniform_table_is_exact_quarters() {
        let t = CdfTable::from_pmf(SymbolRange::new(0, 3).unwrap(), &[0.25; 4], None).unwrap();
        assert_eq!(t.cumulative(), &[0, 16384, 32768, 49152, 65536]);
    }

    #[test]
    fn gaussian_table_is_symmetric() {
        let t = build_cdf(&ContinuousModel::Gaussian { mean: 0.0, scale: 1.0 }, SymbolRange::new(-8, 8).unwrap(), false).unwrap();
        let freqs: Vec<u32> = (0..t.slots()).map(|i| t.interval(i).1).collect();
        let rev: Vec<u32> = freqs.iter().rev().copied().collect();
        assert_eq!(freqs, rev);
    }

    #[test]
    fn every_slot_has_mass() {
        let t = build_cdf(&ContinuousModel::Gaussian { mean: 100.0, scale: 0.04 }, SymbolRange::LATENT, true).unwrap();
        assert_eq!(*t.cumulative().last().unwrap(), CDF_TOTAL);
        assert!(t.cumulative().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t.slots(), 257);
    }

    #[test]
    fn out_of_range_without_escape_is_an_error() {
        let t = build_cdf(&ContinuousModel::Logistic { loc: 0.0, scale: 1.0 }, SymbolRange::new(-4, 4).unwrap(), false).unwrap();
        assert!(matches!(t.slot_of(5), Err(Error::SymbolOutOfRange { .. })));
        let t = build_cdf(&ContinuousModel::Logistic { loc: 0.0, scale: 1.0 }, SymbolRange::new(-4, 4).unwrap(), true).unwrap();
        assert_eq!(t.slot_of(5).unwrap(), 9);
    }

    #[test]
    fn half_probability_costs_one_bit() {
        let (b, _) = bits_and_slope(0.5);
        assert!((b - 1.0).abs() < 1e-15);
        let (b, s) = bits_and_slope(0.0);
        assert!((b + PROB_FLOOR.log2()).abs() < 1e-12 && s == 0.0);
    }
}
