//! Continuous action quantizers: uniform binning and the learned residual
//! VQ codec, plus the regression head used by the untokenized adapter.

mod codec;
mod kmeans;
mod pred;
mod train;
mod uniform;

pub use codec::{CodecShape, ResidualCodec, CODEC_LAYERS, CODEC_MAGIC, CODEC_VERSION};
pub use kmeans::{kmeans, kmeans_pp, nearest_index, sq_dist, KMeans};
pub use pred::RegressionHead;
pub use train::{train_codec, CodecReport, CodecTrainConfig};
pub use uniform::UniformQuantizer;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything that maps a continuous action to tokens and back.
pub trait RoundTrip<S: Scalar> {
    fn dims(&self) -> usize;

    fn round_trip(&self, a: &[S]) -> Result<Vec<S>>;

    fn round_trip_batch(&self, actions: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        actions.iter().map(|a| self.round_trip(a)).collect()
    }
}

/// Mean over actions of `|round_trip(a) - a|^2 / D`.
pub fn reconstruction_mse<S: Scalar, Q: RoundTrip<S> + ?Sized>(
    q: &Q,
    actions: &[Vec<S>],
) -> Result<f64> {
    if actions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = q.dims() as f64;
    let back = q.round_trip_batch(actions)?;
    let total: f64 = back
        .iter()
        .zip(actions)
        .map(|(r, a)| sq_dist(r, a).to_f64_lossy() / d)
        .sum();
    Ok(total / actions.len() as f64)
}
