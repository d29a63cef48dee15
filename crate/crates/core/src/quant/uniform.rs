use crate::action::{
    clamp_action, validate_space, Action, ActionSpace, ActionTokens, BoxSpace, TokenAdapter,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::RoundTrip;

/// Per-dimension uniform binning into `bins` equal-width bins.
///
/// Dimension `d` is split into bins `[m_d + k w_d / K, m_d + (k+1) w_d / K]`;
/// bins are half-open except the last, which includes the upper bound. Tokens
/// decode to bin centres.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformQuantizer {
    space: BoxSpace,
    bins: usize,
}

impl UniformQuantizer {
    pub fn new(space: BoxSpace, bins: usize) -> Result<Self> {
        validate_space(&ActionSpace::Continuous(space.clone()))?;
        if bins < 2 {
            return Err(Error::Config(format!(
                "uniform quantizer needs at least 2 bins, got {bins}"
            )));
        }
        Ok(Self { space, bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn space(&self) -> &BoxSpace {
        &self.space
    }

    pub fn half_bin_width(&self, d: usize) -> f64 {
        self.space.width(d) / (2.0 * self.bins as f64)
    }

    fn center<S: Scalar>(&self, d: usize, k: usize) -> S {
        let w = S::of(self.space.width(d)) / S::of(self.bins as f64);
        S::of(self.space.lower[d]) + (S::of(k as f64) + S::of(0.5)) * w
    }

    /// Bin index per dimension. Out-of-box components are clamped first.
    pub fn tokenize<S: Scalar>(&self, a: &[S]) -> Result<ActionTokens> {
        let a = clamp_action(a, &self.space)?;
        let k_max = self.bins - 1;
        let tokens = a
            .iter()
            .enumerate()
            .map(|(d, &x)| {
                let lo = S::of(self.space.lower[d]);
                let scaled = (x - lo) * S::of(self.bins as f64) / S::of(self.space.width(d));
                let mut k = scaled.floor().to_usize().unwrap_or(0).min(k_max);
                // On a bin edge both neighbours are valid bins; keep whichever
                // centre the rounded arithmetic places within half a bin.
                let half = S::of(self.half_bin_width(d));
                if (x - self.center::<S>(d, k)).abs() > half {
                    if k > 0 && (x - self.center::<S>(d, k - 1)).abs() <= half {
                        k -= 1;
                    } else if k < k_max && (x - self.center::<S>(d, k + 1)).abs() <= half {
                        k += 1;
                    }
                }
                k
            })
            .collect();
        Ok(ActionTokens(tokens))
    }

    pub fn detokenize<S: Scalar>(&self, tokens: &[usize]) -> Result<Vec<S>> {
        if tokens.len() != self.space.dims() {
            return Err(Error::WrongTokenCount {
                expected: self.space.dims(),
                got: tokens.len(),
            });
        }
        tokens
            .iter()
            .enumerate()
            .map(|(d, &k)| {
                if k >= self.bins {
                    Err(Error::TokenOutOfRange {
                        token: k,
                        vocab: self.bins,
                    })
                } else {
                    Ok(self.center(d, k))
                }
            })
            .collect()
    }
}

impl<S: Scalar> TokenAdapter<S> for UniformQuantizer {
    fn vocab_size(&self) -> usize {
        self.bins
    }

    fn tokens_per_action(&self) -> usize {
        self.space.dims()
    }

    fn encode(&self, action: &Action<S>) -> Result<ActionTokens> {
        match action {
            Action::Continuous(a) => self.tokenize(a),
            _ => Err(Error::EncodeFailure(
                "uniform quantizer needs a continuous action".into(),
            )),
        }
    }

    fn decode(&self, tokens: &[usize]) -> Result<Action<S>> {
        self.detokenize(tokens).map(Action::Continuous)
    }
}

impl<S: Scalar> RoundTrip<S> for UniformQuantizer {
    fn dims(&self) -> usize {
        self.space.dims()
    }

    fn round_trip(&self, a: &[S]) -> Result<Vec<S>> {
        let t = self.tokenize(a)?;
        self.detokenize(t.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(dims: usize, k: usize) -> UniformQuantizer {
        UniformQuantizer::new(BoxSpace::symmetric(dims, 1.0), k).unwrap()
    }

    #[test]
    fn bounds_map_to_first_and_last_bin() {
        assert_eq!(q(1, 4).tokenize(&[-1.0]).unwrap().0, vec![0]);
        assert_eq!(q(1, 4).tokenize(&[1.0]).unwrap().0, vec![3]);
    }

    #[test]
    fn interior_values_follow_floor_formula() {
        // floor(1.9 * 2) = 3, floor(0.9 * 2) = 1
        assert_eq!(q(2, 4).tokenize(&[0.9, -0.1]).unwrap().0, vec![3, 1]);
    }

    #[test]
    fn centres() {
        let d: Vec<f64> = q(1, 4).detokenize(&[0]).unwrap();
        assert_eq!(d, vec![-0.75]);
        let d: Vec<f64> = q(1, 4).detokenize(&[3]).unwrap();
        assert_eq!(d, vec![0.75]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            q(1, 4).detokenize::<f64>(&[4]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            q(2, 4).tokenize(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(UniformQuantizer::new(BoxSpace::symmetric(1, 1.0), 1).is_err());
    }

    #[test]
    fn out_of_range_actions_are_clamped() {
        assert_eq!(q(2, 4).tokenize(&[5.0, -5.0]).unwrap().0, vec![3, 0]);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(
            a in proptest::collection::vec(-1.0f64..=1.0, 3),
            k in 2usize..300,
            lo in -3.0f64..0.0,
            span in 0.1f64..5.0,
        ) {
            let space = BoxSpace { lower: vec![lo; 3], upper: vec![lo + span; 3] };
            let uq = UniformQuantizer::new(space, k).unwrap();
            let x: Vec<f64> = a.iter().map(|v| lo + (v + 1.0) / 2.0 * span).collect();
            let back: Vec<f64> = uq.round_trip(&x).unwrap();
            for d in 0..3 {
                prop_assert!((back[d] - x[d]).abs() <= uq.half_bin_width(d));
            }
        }
    }
}
