//! Multichannel STFT / weighted overlap-add ISTFT.
//!
//! Frames start at `t·hop`; the tail is zero-padded so that
//! `frames = ceil((len - window)/hop) + 1`. The inverse multiplies each frame by
//! the analysis window again and divides by the accumulated squared window,
//! which reconstructs exactly wherever the window sum is nonzero (the periodic
//! Hamming window never vanishes, so that is everywhere).

use std::f64::consts::TAU;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hamming, `0.54 - 0.46 cos(2πn/N)`.
    Hamming,
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let x = TAU * i as f64 / n;
                match self {
                    WindowKind::Hamming => 0.54 - 0.46 * x.cos(),
                    WindowKind::Hann => 0.5 - 0.5 * x.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub sample_rate: f64,
    pub fft_size: usize,
}

impl Default for StftConfig {
    /// 32 ms periodic Hamming at 16 kHz with 50 % overlap.
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 256,
            window: WindowKind::Hamming,
            sample_rate: 16000.0,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.hop > self.window_len {
            return Err(Error::Validation(format!(
                "hop {} must be in 1..={}",
                self.hop, self.window_len
            )));
        }
        if self.fft_size < self.window_len {
            return Err(Error::Validation(format!(
                "fft size {} shorter than window {}",
                self.fft_size, self.window_len
            )));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len <= self.window_len {
            1
        } else {
            (len - self.window_len).div_ceil(self.hop) + 1
        }
    }

    /// Length produced by the inverse for `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.window_len
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.fft_size as f64
    }
}

/// Complex STFT data, shape `channels × frames × bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFreqTensor {
    data: Array3<Complex64>,
    config: StftConfig,
}

impl TimeFreqTensor {
    pub fn new(data: Array3<Complex64>, config: StftConfig) -> Result<Self> {
        if data.shape()[2] != config.bins() {
            return Err(Error::Shape(format!(
                "{} bins, config implies {}",
                data.shape()[2],
                config.bins()
            )));
        }
        Ok(Self { data, config })
    }

    pub fn zeros(channels: usize, frames: usize, config: StftConfig) -> Self {
        Self {
            data: Array3::zeros((channels, frames, config.bins())),
            config,
        }
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), c)
    }

    /// Single-channel tensor holding a copy of channel `c`.
    pub fn select(&self, c: usize) -> Result<TimeFreqTensor> {
        if c >= self.channels() {
            return Err(Error::Shape(format!(
                "channel {c} out of range ({} channels)",
                self.channels()
            )));
        }
        let data = self.channel(c).to_owned().insert_axis(Axis(0));
        Ok(Self {
            data,
            config: self.config,
        })
    }

    pub fn from_channel(plane: Array2<Complex64>, config: StftConfig) -> Result<Self> {
        Self::new(plane.insert_axis(Axis(0)), config)
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn stft_forward(signals: &[Vec<f64>], cfg: &StftConfig) -> Result<TimeFreqTensor> {
    cfg.validate()?;
    let len = match signals.first() {
        Some(s) if !s.is_empty() => s.len(),
        _ => return Err(Error::Shape("STFT of an empty signal".into())),
    };
    if signals.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("channels differ in length".into()));
    }
    let frames = cfg.frame_count(len);
    let bins = cfg.bins();
    let window = cfg.window.coefficients(cfg.window_len);
    let fft = plans(cfg.fft_size).forward;

    let planes: Vec<Array2<Complex64>> = signals
        .par_iter()
        .map(|sig| {
            let mut plane = Array2::zeros((frames, bins));
            let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
            let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for t in 0..frames {
                let start = t * cfg.hop;
                buf.fill(Complex64::new(0.0, 0.0));
                for (i, w) in window.iter().enumerate() {
                    if let Some(&x) = sig.get(start + i) {
                        buf[i] = Complex64::new(x * w, 0.0);
                    }
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                plane.row_mut(t).assign(&ndarray::ArrayView1::from(&buf[..bins]));
            }
            plane
        })
        .collect();

    let mut data = Array3::zeros((signals.len(), frames, bins));
    for (c, plane) in planes.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), c).assign(&plane);
    }
    Ok(TimeFreqTensor { data, config: *cfg })
}

/// Weighted overlap-add inverse. Output length is `(frames-1)·hop + window_len`,
/// i.e. at most one hop longer than the analysed signal.
pub fn stft_inverse(tf: &TimeFreqTensor) -> Result<Vec<Vec<f64>>> {
    let cfg = tf.config;
    cfg.validate()?;
    if tf.bins() != cfg.bins() {
        return Err(Error::Shape(format!(
            "{} bins, config implies {}",
            tf.bins(),
            cfg.bins()
        )));
    }
    let frames = tf.frames();
    if frames == 0 {
        return Err(Error::Shape("tensor has no frames".into()));
    }
    let n = cfg.fft_size;
    let out_len = cfg.signal_len(frames);
    let window = cfg.window.coefficients(cfg.window_len);
    let mut norm = vec![0.0; out_len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * cfg.hop + i] += w * w;
        }
    }
    let ifft = plans(n).inverse;

    let out = (0..tf.channels())
        .into_par_iter()
        .map(|c| {
            let plane = tf.channel(c);
            let mut y = vec![0.0; out_len];
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
            for t in 0..frames {
                let row = plane.row(t);
                buf[0] = Complex64::new(row[0].re, 0.0);
                for k in 1..n.div_ceil(2) {
                    buf[k] = row[k];
                    buf[n - k] = row[k].conj();
                }
                if n.is_multiple_of(2) {
                    buf[n / 2] = Complex64::new(row[n / 2].re, 0.0);
                }
                ifft.process_with_scratch(&mut buf, &mut scratch);
                let start = t * cfg.hop;
                for (i, w) in window.iter().enumerate() {
                    y[start + i] += buf[i].re / n as f64 * w;
                }
            }
            for (v, d) in y.iter_mut().zip(&norm) {
                if *d > 1e-12 {
                    *v /= d;
                } else {
                    *v = 0.0;
                }
            }
            y
        })
        .collect();
    Ok(out)
}
