use dualcorr_numcore::Tensor;
use rand::Rng;

/// Glorot-uniform initialisation.
pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}
