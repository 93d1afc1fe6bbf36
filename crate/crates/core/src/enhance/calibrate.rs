//! Per-frequency complex gains fitted by finite-difference gradient descent
//! on the negative SI-SDR of the resynthesized signal.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_mask, ComplexMask};
use crate::error::{Error, Result};
use crate::metrics::si_sdr;
use crate::stft::{stft_inverse, TimeFreqTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Re,
    Im,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParam {
    pub bin: usize,
    pub part: Part,
}

/// Fixed gains plus the real parameters that may move.
#[derive(Debug, Clone, PartialEq)]
pub struct GainLayout {
    pub base: Vec<Complex64>,
    pub free: Vec<FreeParam>,
}

impl GainLayout {
    /// Every bin free (real and imaginary part), starting from unit gain.
    pub fn per_bin(bins: usize) -> Self {
        Self {
            base: vec![Complex64::new(1.0, 0.0); bins],
            free: (0..bins)
                .flat_map(|bin| [FreeParam { bin, part: Part::Re }, FreeParam { bin, part: Part::Im }])
                .collect(),
        }
    }

    /// Only the real part of one bin's gain is free.
    pub fn single(base: Vec<Complex64>, bin: usize) -> Self {
        Self {
            base,
            free: vec![FreeParam { bin, part: Part::Re }],
        }
    }

    fn initial(&self) -> Vec<f64> {
        self.free
            .iter()
            .map(|p| match p.part {
                Part::Re => self.base[p.bin].re,
                Part::Im => self.base[p.bin].im,
            })
            .collect()
    }

    pub fn gains(&self, theta: &[f64]) -> Vec<Complex64> {
        let mut g = self.base.clone();
        for (p, &v) in self.free.iter().zip(theta) {
            match p.part {
                Part::Re => g[p.bin].re = v,
                Part::Im => g[p.bin].im = v,
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrateConfig {
    pub iterations: usize,
    pub step: f64,
    /// Central-difference half width.
    pub fd_step: f64,
    /// SI-SDR ceiling in dB, so a perfect estimate still has a finite loss.
    pub max_si_sdr: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            step: 1e-3,
            fd_step: 1e-4,
            max_si_sdr: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    /// Gains with the lowest loss seen.
    pub gains: Vec<Complex64>,
    /// Gains at every iterate, starting with the initial ones.
    pub trajectory: Vec<Vec<Complex64>>,
    /// Loss (negative SI-SDR, dB) at every iterate.
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub best_losses: Vec<f64>,
}

struct Problem<'a> {
    noisy: &'a TimeFreqTensor,
    clean: &'a [f64],
    layout: &'a GainLayout,
    cap: f64,
}

impl Problem<'_> {
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let gains = self.layout.gains(theta);
        if gains.iter().any(|g| !g.is_finite()) {
            return Ok(f64::NAN);
        }
        let frames = self.noisy.frames();
        let mask = ndarray::Array2::from_shape_fn((frames, gains.len()), |(_, k)| gains[k]);
        let est = apply_mask(&ComplexMask::new(mask, f64::INFINITY)?, self.noisy, 0)?;
        let y = stft_inverse(&est)?;
        let sdr = si_sdr(self.clean, &y[0][..self.clean.len()])?.value;
        // f64::min would turn NaN into the cap
        Ok(if sdr.is_nan() { f64::NAN } else { -sdr.min(self.cap) })
    }
}

/// Gradient descent from the layout's base gains. The returned gains are the
/// best seen, so the final loss never exceeds the initial one.
pub fn toy_calibrate(
    noisy_ref: &TimeFreqTensor,
    clean: &[f64],
    layout: &GainLayout,
    cfg: &CalibrateConfig,
) -> Result<CalibrationResult> {
    if noisy_ref.channels() != 1 {
        return Err(Error::Shape("calibration works on the single reference channel".into()));
    }
    if layout.base.len() != noisy_ref.bins() {
        return Err(Error::Shape(format!(
            "{} gains for {} bins",
            layout.base.len(),
            noisy_ref.bins()
        )));
    }
    if layout.free.iter().any(|p| p.bin >= noisy_ref.bins()) {
        return Err(Error::Shape("free parameter bin out of range".into()));
    }
    if layout.free.len() > 2 * noisy_ref.bins() {
        return Err(Error::Validation("more free parameters than 2 × bins".into()));
    }
    if noisy_ref.config().signal_len(noisy_ref.frames()) < clean.len() {
        return Err(Error::Shape("clean reference is longer than the resynthesized signal".into()));
    }
    if !(cfg.step > 0.0 && cfg.fd_step > 0.0) {
        return Err(Error::Validation("step sizes must be positive".into()));
    }
    let problem = Problem {
        noisy: noisy_ref,
        clean,
        layout,
        cap: cfg.max_si_sdr,
    };
    let mut theta = layout.initial();
    let first = problem.loss(&theta)?;
    if !first.is_finite() {
        return Err(Error::Divergence(0));
    }
    let mut losses = vec![first];
    let mut best_losses = vec![first];
    let mut trajectory = vec![layout.gains(&theta)];
    let mut best = theta.clone();

    for it in 1..=cfg.iterations {
        let h = cfg.fd_step;
        let grad = (0..theta.len())
            .into_par_iter()
            .map(|j| {
                let mut p = theta.clone();
                p[j] += h;
                let up = problem.loss(&p)?;
                p[j] -= 2.0 * h;
                let down = problem.loss(&p)?;
                Ok((up - down) / (2.0 * h))
            })
            .collect::<Result<Vec<f64>>>()?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(it));
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.step * g;
        }
        let loss = problem.loss(&theta)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(it));
        }
        let prev_best = *best_losses.last().unwrap();
        if loss < prev_best {
            best = theta.clone();
        }
        best_losses.push(loss.min(prev_best));
        losses.push(loss);
        trajectory.push(layout.gains(&theta));
    }
    Ok(CalibrationResult {
        gains: layout.gains(&best),
        trajectory,
        losses,
        best_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::{stft_forward, StftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> StftConfig {
        StftConfig {
            window_len: 32,
            hop: 16,
            fft_size: 32,
            ..StftConfig::default()
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_input_stays_at_unit_gain() {
        let x = noise(400, 1);
        let tf = stft_forward(std::slice::from_ref(&x), &small_cfg()).unwrap();
        let layout = GainLayout::per_bin(tf.bins());
        let cfg = CalibrateConfig {
            iterations: 5,
            ..CalibrateConfig::default()
        };
        let r = toy_calibrate(&tf, &x, &layout, &cfg).unwrap();
        assert_eq!(r.losses[0], -100.0);
        for g in &r.gains {
            assert!((g - Complex64::new(1.0, 0.0)).norm() < 1e-6);
        }
        assert!(r.best_losses.last().unwrap() - r.losses[0] <= 0.0);
    }

    /// Reference time signal for the masked spectrum with the given gains.
    fn synth(tf: &TimeFreqTensor, gains: &[Complex64], len: usize) -> Vec<f64> {
        let mask = ndarray::Array2::from_shape_fn((tf.frames(), gains.len()), |(_, k)| gains[k]);
        let est = apply_mask(&ComplexMask::new(mask, f64::INFINITY).unwrap(), tf, 0).unwrap();
        stft_inverse(&est).unwrap()[0][..len].to_vec()
    }

    #[test]
    fn single_real_gain_reaches_the_closed_form_optimum() {
        let len = 600;
        let cfg = small_cfg();
        let x = noise(len, 2);
        let s: Vec<f64> = noise(len, 3).iter().zip(&x).map(|(n, v)| 0.3 * n + v).collect();
        let tf = stft_forward(std::slice::from_ref(&x), &cfg).unwrap();
        let bins = tf.bins();
        let bin = 4;
        let mut base = vec![Complex64::new(1.0, 0.0); bins];
        base[bin] = Complex64::new(0.0, 0.0);
        // ŝ(g) = u + g v with u the frozen bins and v the free bin alone
        let u = synth(&tf, &base, len);
        let mut only = vec![Complex64::new(0.0, 0.0); bins];
        only[bin] = Complex64::new(1.0, 0.0);
        let v = synth(&tf, &only, len);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a, b) = (dot(&u, &s), dot(&v, &s));
        let (p, q, r) = (dot(&u, &u), dot(&v, &v), dot(&u, &v));
        let g_star = (a * r - b * p) / (b * r - a * q);

        let layout = GainLayout::single(base, bin);
        let conf = CalibrateConfig {
            iterations: 200,
            step: 0.1,
            fd_step: 1e-5,
            max_si_sdr: 100.0,
        };
        let res = toy_calibrate(&tf, &s, &layout, &conf).unwrap();
        let g = res.gains[bin].re;
        assert!((g - g_star).abs() < 1e-3, "got {g}, optimum {g_star}");
    }

    #[test]
    fn best_loss_never_increases_and_divergence_is_reported() {
        let len = 800;
        let cfg = small_cfg();
        let s = noise(len, 4);
        let x: Vec<f64> = s.iter().zip(noise(len, 5)).map(|(a, n)| a + 0.7 * n).collect();
        let tf = stft_forward(&[x], &cfg).unwrap();
        let layout = GainLayout::per_bin(tf.bins());
        let res = toy_calibrate(&tf, &s, &layout, &CalibrateConfig { iterations: 20, step: 0.01, ..CalibrateConfig::default() }).unwrap();
        assert!(res.best_losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.best_losses.last().unwrap() < &res.losses[0]);
        assert_eq!(res.trajectory.len(), 21);

        let wild = CalibrateConfig {
            iterations: 50,
            step: 1e300,
            ..CalibrateConfig::default()
        };
        assert!(matches!(toy_calibrate(&tf, &s, &layout, &wild), Err(Error::Divergence(_))));
    }
}
