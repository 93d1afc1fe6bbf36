//! Enhancement chain: channel dropout, complex masks and mask estimators.

mod calibrate;
mod ftjnf;

pub use calibrate::{toy_calibrate, CalibrateConfig, CalibrationResult, FreeParam, GainLayout, Part};
pub use ftjnf::{ft_jnf_forward, ft_jnf_forward_without_time_stage, BiLstm, FtJnfWeights, LstmDirection, WEIGHTS_MAGIC};

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::TimeFreqTensor;

pub const DEFAULT_MASK_CLIP: f64 = 10.0;

/// Below this magnitude the noisy reference is treated as empty.
pub const ORACLE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// One event per call with probability `p`, then 1..=D channels uniformly.
    #[default]
    PerSample,
    /// Every unprotected channel independently with probability `p`, at most D kept dropped.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub p: f64,
    pub max_dropped: usize,
    pub protected: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub mode: DropoutMode,
}

impl DropoutSpec {
    /// Training setting: p = 0.4, up to three channels, a_00 (channel 0) protected.
    pub fn training(seed: u64) -> Self {
        Self {
            p: 0.4,
            max_dropped: 3,
            protected: vec![0],
            seed,
            mode: DropoutMode::PerSample,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Validation(format!("dropout p must be in [0, 1], got {}", self.p)));
        }
        if let Some(&bad) = self.protected.iter().find(|&&c| c >= channels) {
            return Err(Error::Validation(format!(
                "protected channel {bad} out of range ({channels} channels)"
            )));
        }
        if self.max_dropped >= channels {
            return Err(Error::Validation(format!(
                "max dropped channels {} must be below the channel count {channels}",
                self.max_dropped
            )));
        }
        let free = (0..channels).filter(|c| !self.protected.contains(c)).count();
        if self.max_dropped > free {
            return Err(Error::Validation(format!(
                "cannot drop {} channels with only {free} unprotected",
                self.max_dropped
            )));
        }
        Ok(())
    }
}

/// Channels that `channel_dropout` zeroes for this spec, ascending.
pub fn dropout_draw(channels: usize, spec: &DropoutSpec) -> Result<Vec<usize>> {
    spec.validate(channels)?;
    let candidates: Vec<usize> = (0..channels).filter(|c| !spec.protected.contains(c)).collect();
    if spec.max_dropped == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dropped = match spec.mode {
        DropoutMode::PerSample => {
            if !rng.random_bool(spec.p) {
                return Ok(Vec::new());
            }
            let d = rng.random_range(1..=spec.max_dropped);
            sample(&mut rng, candidates.len(), d)
                .into_iter()
                .map(|i| candidates[i])
                .collect::<Vec<_>>()
        }
        DropoutMode::PerChannel => {
            let mut hit: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|_| rng.random_bool(spec.p))
                .collect();
            if hit.len() > spec.max_dropped {
                hit = sample(&mut rng, hit.len(), spec.max_dropped)
                    .into_iter()
                    .map(|i| hit[i])
                    .collect();
            }
            hit
        }
    };
    dropped.sort_unstable();
    Ok(dropped)
}

/// Zeroes whole channels as drawn by [`dropout_draw`]; other channels are untouched.
pub fn channel_dropout(tf: &TimeFreqTensor, spec: &DropoutSpec) -> Result<TimeFreqTensor> {
    let dropped = dropout_draw(tf.channels(), spec)?;
    let mut out = tf.clone();
    for c in dropped {
        out.data_mut()
            .index_axis_mut(Axis(0), c)
            .fill(Complex64::new(0.0, 0.0));
    }
    Ok(out)
}

/// Complex gain per time-frequency bin, shape `frames × bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    data: Array2<Complex64>,
    clip: f64,
}

impl ComplexMask {
    /// `clip` may be infinite for unbounded (network) masks.
    pub fn new(data: Array2<Complex64>, clip: f64) -> Result<Self> {
        if !(clip >= 0.0) {
            return Err(Error::Validation(format!("mask clip must be non-negative, got {clip}")));
        }
        // clipped values may land a few ulps above the bound
        let bound = clip * (1.0 + 1e-12);
        if let Some(z) = data.iter().find(|z| !z.is_finite() || z.norm() > bound) {
            return Err(Error::Domain(format!(
                "mask value {z} is non-finite or exceeds the clip bound {clip}"
            )));
        }
        Ok(Self { data, clip })
    }

    pub fn ones(frames: usize, bins: usize) -> Self {
        Self {
            data: Array2::from_elem((frames, bins), Complex64::new(1.0, 0.0)),
            clip: f64::INFINITY,
        }
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            data: Array2::zeros((frames, bins)),
            clip: f64::INFINITY,
        }
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

/// `Ŝ(t,f) = M(t,f) · X_ref(t,f)`.
pub fn apply_mask(mask: &ComplexMask, tf: &TimeFreqTensor, ref_channel: usize) -> Result<TimeFreqTensor> {
    if ref_channel >= tf.channels() {
        return Err(Error::Shape(format!(
            "reference channel {ref_channel} out of range ({} channels)",
            tf.channels()
        )));
    }
    if mask.data.dim() != (tf.frames(), tf.bins()) {
        return Err(Error::Shape(format!(
            "mask is {:?}, tensor is {} frames × {} bins",
            mask.data.dim(),
            tf.frames(),
            tf.bins()
        )));
    }
    let plane = &mask.data * &tf.channel(ref_channel);
    TimeFreqTensor::from_channel(plane, *tf.config())
}

fn single_plane<'a>(tf: &'a TimeFreqTensor, what: &str) -> Result<ndarray::ArrayView2<'a, Complex64>> {
    if tf.channels() != 1 {
        return Err(Error::Shape(format!(
            "{what} must be a single channel, got {}",
            tf.channels()
        )));
    }
    Ok(tf.channel(0))
}

/// Complex ideal ratio mask `clean / noisy`, magnitude clipped to `clip`
/// with the phase kept. Bins where the noisy value is (near) zero get 0.
pub fn oracle_cirm(clean_ref: &TimeFreqTensor, noisy_ref: &TimeFreqTensor, clip: f64) -> Result<ComplexMask> {
    let clean = single_plane(clean_ref, "clean reference")?;
    let noisy = single_plane(noisy_ref, "noisy reference")?;
    if clean.dim() != noisy.dim() {
        return Err(Error::Shape(format!(
            "clean {:?} and noisy {:?} differ",
            clean.dim(),
            noisy.dim()
        )));
    }
    let mut data = Array2::zeros(clean.dim());
    ndarray::Zip::from(&mut data)
        .and(&clean)
        .and(&noisy)
        .for_each(|m, &s, &x| {
            if x.norm() >= ORACLE_FLOOR {
                let r = s / x;
                let mag = r.norm();
                *m = if mag > clip { Complex64::from_polar(clip, r.arg()) } else { r };
            }
        });
    ComplexMask::new(data, clip)
}

/// Source of a mask for the enhancement chain.
#[derive(Debug, Clone)]
pub enum MaskEstimator {
    /// All-ones mask: output equals the reference channel.
    Unit,
    /// cIRM computed from the known clean reference spectrum.
    Oracle { clean: TimeFreqTensor, clip: f64 },
    FtJnf(Box<FtJnfWeights>),
}

impl MaskEstimator {
    pub fn estimate(&self, tf: &TimeFreqTensor, ref_channel: usize) -> Result<ComplexMask> {
        match self {
            MaskEstimator::Unit => Ok(ComplexMask::ones(tf.frames(), tf.bins())),
            MaskEstimator::Oracle { clean, clip } => oracle_cirm(clean, &tf.select(ref_channel)?, *clip),
            MaskEstimator::FtJnf(w) => ft_jnf_forward(tf, w),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskEstimator::Unit => "unit",
            MaskEstimator::Oracle { .. } => "oracle",
            MaskEstimator::FtJnf(_) => "ft_jnf",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::{stft_forward, StftConfig};
    use ndarray::Array3;

    fn cfg(fft: usize) -> StftConfig {
        StftConfig {
            window_len: fft,
            hop: fft / 2,
            fft_size: fft,
            ..StftConfig::default()
        }
    }

    fn tensor(channels: usize, frames: usize, seed: u64) -> TimeFreqTensor {
        let c = cfg(16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((channels, frames, c.bins()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        TimeFreqTensor::new(data, c).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let tf = tensor(5, 4, 1);
        for seed in 0..50 {
            let spec = DropoutSpec {
                p: 0.0,
                seed,
                ..DropoutSpec::training(0)
            };
            assert_eq!(channel_dropout(&tf, &spec).unwrap(), tf);
        }
    }

    #[test]
    fn certain_dropout_respects_protection_and_bounds() {
        let tf = tensor(5, 3, 2);
        for seed in 0..500 {
            let spec = DropoutSpec {
                p: 1.0,
                max_dropped: 4,
                protected: vec![0],
                seed,
                mode: DropoutMode::PerSample,
            };
            let out = channel_dropout(&tf, &spec).unwrap();
            let zeroed: Vec<usize> = (0..5)
                .filter(|&c| out.channel(c).iter().all(|z| *z == Complex64::new(0.0, 0.0)))
                .collect();
            assert!(!zeroed.contains(&0));
            assert!((1..=4).contains(&zeroed.len()));
            for c in 0..5 {
                if !zeroed.contains(&c) {
                    assert_eq!(out.channel(c), tf.channel(c));
                }
            }
        }
    }

    #[test]
    fn mean_dropped_count_matches_expectation() {
        // E[dropped] = p (1 + D) / 2
        let trials = 40_000;
        let mut total = 0usize;
        for seed in 0..trials {
            let spec = DropoutSpec::training(seed);
            total += dropout_draw(5, &spec).unwrap().len();
        }
        let mean = total as f64 / trials as f64;
        let want = 0.4 * 2.0;
        assert!((mean - want).abs() / want < 0.02, "mean {mean}");
    }

    #[test]
    fn per_channel_mode_caps_the_count() {
        for seed in 0..300 {
            let spec = DropoutSpec {
                p: 0.9,
                max_dropped: 2,
                protected: vec![0],
                seed,
                mode: DropoutMode::PerChannel,
            };
            let d = dropout_draw(9, &spec).unwrap();
            assert!(d.len() <= 2 && !d.contains(&0));
        }
    }

    #[test]
    fn dropout_is_deterministic_and_validated() {
        let spec = DropoutSpec::training(77);
        assert_eq!(dropout_draw(9, &spec).unwrap(), dropout_draw(9, &spec).unwrap());
        assert!(dropout_draw(3, &spec).is_err());
        let bad = DropoutSpec {
            protected: vec![9],
            ..DropoutSpec::training(0)
        };
        assert!(dropout_draw(9, &bad).is_err());
    }

    #[test]
    fn unit_and_zero_masks() {
        let tf = tensor(3, 4, 3);
        let ones = apply_mask(&ComplexMask::ones(4, 9), &tf, 1).unwrap();
        assert_eq!(ones.channel(0), tf.channel(1));
        let zeros = apply_mask(&ComplexMask::zeros(4, 9), &tf, 1).unwrap();
        assert!(zeros.data().iter().all(|z| z.norm() == 0.0));
        assert!(apply_mask(&ComplexMask::ones(5, 9), &tf, 0).is_err());
        assert!(apply_mask(&ComplexMask::ones(4, 9), &tf, 3).is_err());
    }

    #[test]
    fn ratio_mask_recovers_target() {
        let x = tensor(1, 6, 4);
        let s = tensor(1, 6, 5);
        let mask = oracle_cirm(&s, &x, f64::INFINITY).unwrap();
        let est = apply_mask(&mask, &x, 0).unwrap();
        for (a, b) in est.data().iter().zip(s.data()) {
            assert!((a - b).norm() < 1e-12);
        }
        // explicit conj(X)/|X|² · S form
        let m2 = ndarray::Zip::from(&x.channel(0))
            .and(&s.channel(0))
            .map_collect(|&xv, &sv| xv.conj() / xv.norm_sqr() * sv);
        let est2 = apply_mask(&ComplexMask::new(m2, f64::INFINITY).unwrap(), &x, 0).unwrap();
        for (a, b) in est2.data().iter().zip(s.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_mask_edge_cases() {
        let x = tensor(1, 5, 6);
        let same = oracle_cirm(&x, &x, 10.0).unwrap();
        assert!(same.data().iter().all(|m| (m - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        let zero = TimeFreqTensor::zeros(1, 5, *x.config());
        assert!(oracle_cirm(&zero, &x, 10.0).unwrap().data().iter().all(|m| m.norm() == 0.0));
        // silent noisy bins map to 0 and large ratios are clipped
        let clipped = oracle_cirm(&x, &zero, 10.0).unwrap();
        assert!(clipped.data().iter().all(|m| m.norm() == 0.0));
        let tiny = TimeFreqTensor::new(x.data().mapv(|z| z * 1e-3), *x.config()).unwrap();
        let m = oracle_cirm(&x, &tiny, 10.0).unwrap();
        assert!(m.data().iter().all(|v| (v.norm() - 10.0).abs() < 1e-9));
    }

    #[test]
    fn mask_is_linear_in_each_argument() {
        let x = tensor(1, 3, 7);
        let a = tensor(1, 3, 8).channel(0).to_owned();
        let b = tensor(1, 3, 9).channel(0).to_owned();
        let k = Complex64::new(0.5, -2.0);
        let sum = ComplexMask::new(&a + &b.mapv(|z| z * k), f64::INFINITY).unwrap();
        let lhs = apply_mask(&sum, &x, 0).unwrap();
        let ra = apply_mask(&ComplexMask::new(a, f64::INFINITY).unwrap(), &x, 0).unwrap();
        let rb = apply_mask(&ComplexMask::new(b, f64::INFINITY).unwrap(), &x, 0).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
            assert!((l - (p + q * k)).norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_mask_improves_noisy_speechlike_signal() {
        let c = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clean: Vec<f64> = (0..8000)
            .map(|i| (i as f64 * 0.05).sin() * (i as f64 * 0.001).sin())
            .collect();
        let noise: Vec<f64> = (0..8000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ec: f64 = clean.iter().map(|v| v * v).sum();
        let en: f64 = noise.iter().map(|v| v * v).sum();
        let g = (ec / en).sqrt();
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(s, n)| s + g * n).collect();
        let s_tf = stft_forward(std::slice::from_ref(&clean), &c).unwrap();
        let x_tf = stft_forward(std::slice::from_ref(&noisy), &c).unwrap();
        let mask = oracle_cirm(&s_tf, &x_tf, DEFAULT_MASK_CLIP).unwrap();
        let out = crate::stft::stft_inverse(&apply_mask(&mask, &x_tf, 0).unwrap()).unwrap();
        let before = crate::metrics::si_sdr(&clean, &noisy).unwrap().value;
        let after = crate::metrics::si_sdr(&clean, &out[0][..8000]).unwrap().value;
        assert!(after > before + 10.0, "{before} -> {after}");
    }
}
