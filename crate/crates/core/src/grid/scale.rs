use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DemandTensor;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Global max-scaling fit on the training portion of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePolicy {
    pub max_train: f64,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        Self { max_train: 1.0 }
    }
}

impl ScalePolicy {
    #[inline]
    pub fn apply<S: Scalar>(&self, x: f64) -> S {
        S::of(x / self.max_train)
    }

    #[inline]
    pub fn invert<S: Scalar>(&self, y: S) -> S {
        y * S::of(self.max_train)
    }

    /// Maps a scaled count back onto the integer lattice it came from.
    #[inline]
    pub fn invert_count<S: Scalar>(&self, y: S) -> f64 {
        self.invert(y).as_f64().round()
    }
}

/// Fits the scale on intervals `train` only. An all-zero slice yields the identity scale.
pub fn fit_scale(tensor: &DemandTensor, train: Range<usize>) -> ScalePolicy {
    let end = train.end.min(tensor.periods());
    let max = (train.start..end)
        .flat_map(|t| tensor.row(t).iter().copied())
        .max()
        .unwrap_or(0);
    if max == 0 {
        log::warn!("training slice of {} tensor is all zero; scaling disabled", tensor.kind().as_str());
        ScalePolicy::default()
    } else {
        ScalePolicy { max_train: max as f64 }
    }
}

/// `N x window` matrix whose row `i` is `[x_t, x_{t-1}, ..., x_{t-window+1}]` for node `i`,
/// scaled by `scale`.
pub fn node_features<S: Scalar>(tensor: &DemandTensor, t: usize, window: usize, scale: &ScalePolicy) -> Result<Tensor<S>> {
    if window == 0 || t + 1 < window || t >= tensor.periods() {
        return Err(Error::WindowUnderflow {
            t,
            needed: window,
            available: (t + 1).min(tensor.periods()),
        });
    }
    let n = tensor.nodes();
    let mut out = Tensor::zeros(&[n, window]);
    let data = out.data_mut();
    for lag in 0..window {
        let row = tensor.row(t - lag);
        for (i, &x) in row.iter().enumerate() {
            data[i * window + lag] = scale.apply(x as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LogKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, periods: usize, nodes: usize) -> DemandTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..periods * nodes).map(|_| rng.random_range(0..50)).collect();
        DemandTensor::from_vec(LogKind::Pickup, periods, nodes, values).unwrap()
    }

    #[test]
    fn window_of_one_is_the_current_row() {
        let x = random_tensor(1, 5, 4);
        let f = node_features::<f64>(&x, 3, 1, &ScalePolicy::default()).unwrap();
        assert_eq!(f.shape(), &[4, 1]);
        let expected: Vec<f64> = x.row(3).iter().map(|&v| v as f64).collect();
        assert_eq!(f.data(), &expected[..]);
    }

    #[test]
    fn constant_tensor_gives_constant_features() {
        let x = DemandTensor::from_vec(LogKind::Pickup, 6, 3, vec![7; 18]).unwrap();
        let f = node_features::<f64>(&x, 5, 4, &ScalePolicy::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn seeded_four_by_three_by_hand() {
        let x = random_tensor(42, 4, 3);
        let f = node_features::<f64>(&x, 2, 3, &ScalePolicy::default()).unwrap();
        let v = x.values();
        // values[t * 3 + i]; row i = [x_2, x_1, x_0]
        for i in 0..3 {
            assert_eq!(f.data()[i * 3], v[2 * 3 + i] as f64);
            assert_eq!(f.data()[i * 3 + 1], v[3 + i] as f64);
            assert_eq!(f.data()[i * 3 + 2], v[i] as f64);
        }
    }

    #[test]
    fn underflow_is_an_error() {
        let x = random_tensor(0, 5, 2);
        assert!(matches!(
            node_features::<f64>(&x, 1, 3, &ScalePolicy::default()),
            Err(Error::WindowUnderflow { .. })
        ));
        assert!(node_features::<f64>(&x, 2, 3, &ScalePolicy::default()).is_ok());
    }

    #[test]
    fn matches_naive_slicing_on_random_windows() {
        let x = random_tensor(9, 40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scale = fit_scale(&x, 0..40);
        for _ in 0..1000 {
            let window = rng.random_range(1..=20);
            let t = rng.random_range(window - 1..40);
            let f = node_features::<f64>(&x, t, window, &scale).unwrap();
            for i in 0..6 {
                let naive: Vec<f64> = (0..window).map(|k| x.get(t - k, i) as f64 / scale.max_train).collect();
                assert_eq!(&f.data()[i * window..(i + 1) * window], &naive[..]);
            }
        }
    }

    #[test]
    fn scale_examples() {
        let s = ScalePolicy { max_train: 100.0 };
        assert_eq!(s.apply::<f64>(50.0), 0.5);
        let zero = DemandTensor::zeros(LogKind::Pickup, 4, 2);
        assert_eq!(fit_scale(&zero, 0..4), ScalePolicy::default());
        assert_eq!(ScalePolicy::default().apply::<f64>(3.0), 3.0);
    }

    #[test]
    fn fit_ignores_intervals_outside_training_range() {
        let mut x = random_tensor(3, 10, 2);
        let before = fit_scale(&x, 0..6);
        x.set(8, 1, 10_000);
        assert_eq!(fit_scale(&x, 0..6), before);
    }

    proptest::proptest! {
        #[test]
        fn invert_apply_roundtrip_on_counts(seed in 0u64..1000) {
            let x = random_tensor(seed, 8, 5);
            let s = fit_scale(&x, 0..8);
            for &v in x.values() {
                let y: f64 = s.apply(v as f64);
                proptest::prop_assert_eq!(s.invert_count(y), v as f64);
                proptest::prop_assert!((s.invert(y) - v as f64).abs() <= 1e-12 * (v as f64).max(1.0));
            }
        }
    }
}
