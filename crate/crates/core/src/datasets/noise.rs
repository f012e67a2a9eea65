use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Salt-and-pepper corruption of a frame stack.
///
/// A pixel position is one spatial location of one frame; when the channel
/// count is a multiple of three each RGB triple is one frame, otherwise each
/// channel is. Exactly `round(fraction · positions)` positions are
/// corrupted: the first half of the sampled positions become 0, the rest 1.
pub fn add_salt_pepper<T: Scalar>(stack: &Tensor<T>, fraction: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let [n, c, h, w] = stack.shape();
    let group = if c % 3 == 0 { 3 } else { 1 };
    let frames = n * c / group;
    let plane = h * w;
    let positions = frames * plane;
    let count = (fraction * positions as f64).round() as usize;
    let mut out = stack.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, positions, count);
    let pepper = count / 2;
    let data = out.data_mut();
    for (rank, pos) in chosen.into_iter().enumerate() {
        let value = if rank < pepper { T::zero() } else { T::one() };
        let (frame, p) = (pos / plane, pos % plane);
        let base = frame * group * plane;
        for g in 0..group {
            data[base + g * plane + p] = value;
        }
    }
    Ok(out)
}
