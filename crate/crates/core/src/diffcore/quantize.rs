use rand::{Rng, RngCore};

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::Result;

/// How latents are quantized inside a differentiable forward pass.
pub enum Quantizer<'a> {
    /// Additive i.i.d. uniform noise on [-0.5, 0.5): the training proxy.
    Noise(&'a mut dyn RngCore),
    /// Hard rounding forward, identity backward.
    RoundSte,
}

impl Quantizer<'_> {
    pub fn is_noise(&self) -> bool {
        matches!(self, Quantizer::Noise(_))
    }
}

pub fn quantize<T: Real>(g: &mut Graph<T>, x: Var, q: &mut Quantizer<'_>) -> Result<Var> {
    match q {
        Quantizer::RoundSte => g.round_ste(x),
        Quantizer::Noise(rng) => {
            let shape = g.shape(x).to_vec();
            let noise = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen::<f64>() - 0.5));
            let n = g.constant(noise);
            g.add(x, n)
        }
    }
}
