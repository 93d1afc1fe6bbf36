//! Forward pass of the two-stage BiLSTM mask estimator.
//!
//! Stage 1 runs along frequency inside every frame, stage 2 along time inside
//! every bin, and a linear layer maps each bin's features to `(re, im)` of
//! the mask. Input features per bin are `[re_0..re_{C-1}, im_0..im_{C-1}]`
//! with no normalization. Gate order is `i, f, g, o`; each direction has a
//! single bias vector (the sum of the usual input and recurrent biases).

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ComplexMask;
use crate::container;
use crate::error::{Error, Result};
use crate::stft::TimeFreqTensor;

pub const WEIGHTS_MAGIC: &[u8; 5] = b"FTJW1";

#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    /// `4H × I`
    pub w_ih: Array2<f64>,
    /// `4H × H`
    pub w_hh: Array2<f64>,
    /// `4H`
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtJnfWeights {
    pub channels: usize,
    pub stage1: BiLstm,
    pub stage2: BiLstm,
    /// `2 × 2·H2`
    pub out_weight: Array2<f64>,
    /// `2`
    pub out_bias: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmDirection {
    fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    fn check(&self, input: usize, hidden: usize, what: &str) -> Result<()> {
        let g = 4 * hidden;
        if self.w_ih.dim() != (g, input) || self.w_hh.dim() != (g, hidden) || self.bias.len() != g {
            return Err(Error::Weights(format!(
                "{what}: expected w_ih {g}×{input}, w_hh {g}×{hidden}, bias {g}; got {:?}, {:?}, {}",
                self.w_ih.dim(),
                self.w_hh.dim(),
                self.bias.len()
            )));
        }
        let finite = self.w_ih.iter().chain(&self.w_hh).chain(&self.bias).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Weights(format!("{what}: non-finite value")));
        }
        Ok(())
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform in ±1/√H, rounded to f32 so the values survive the file format exactly.
    fn random(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut draw = || f64::from(rng.random_range(-k..k) as f32);
        Self {
            w_ih: Array2::from_shape_simple_fn((4 * hidden, input), &mut draw),
            w_hh: Array2::from_shape_simple_fn((4 * hidden, hidden), &mut draw),
            bias: Array1::from_shape_simple_fn(4 * hidden, &mut draw),
        }
    }

    /// `x` is `seq × batch × I`; returns `seq × batch × H`. All batch rows
    /// advance together, so each step is one matrix product.
    fn run(&self, x: &Array3<f64>, reverse: bool) -> Array3<f64> {
        let (seq, batch, input) = x.dim();
        let h = self.hidden();
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((seq * batch, input))
            .expect("contiguous");
        let mut proj = flat.dot(&self.w_ih.t());
        proj += &self.bias;
        let proj = proj.into_shape_with_order((seq, batch, 4 * h)).expect("contiguous");

        let mut out = Array3::zeros((seq, batch, h));
        let mut hs = Array2::<f64>::zeros((batch, h));
        let mut cs = Array2::<f64>::zeros((batch, h));
        let w_hh_t = self.w_hh.t();
        for step in 0..seq {
            let t = if reverse { seq - 1 - step } else { step };
            let mut gates = hs.dot(&w_hh_t);
            gates += &proj.index_axis(Axis(0), t);
            for b in 0..batch {
                let g = gates.row(b);
                for j in 0..h {
                    let i_g = sigmoid(g[j]);
                    let f_g = sigmoid(g[h + j]);
                    let c_g = g[2 * h + j].tanh();
                    let o_g = sigmoid(g[3 * h + j]);
                    let c = f_g * cs[[b, j]] + i_g * c_g;
                    cs[[b, j]] = c;
                    hs[[b, j]] = o_g * c.tanh();
                }
            }
            out.index_axis_mut(Axis(0), t).assign(&hs);
        }
        out
    }
}

impl BiLstm {
    fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    fn check(&self, input: usize, hidden: usize, what: &str) -> Result<()> {
        self.forward.check(input, hidden, &format!("{what} forward"))?;
        self.backward.check(input, hidden, &format!("{what} backward"))
    }

    /// Concatenates forward then backward features: `seq × batch × 2H`.
    fn run(&self, x: &Array3<f64>) -> Array3<f64> {
        let f = self.forward.run(x, false);
        let b = self.backward.run(x, true);
        let h = f.dim().2;
        let mut out = Array3::zeros((f.dim().0, f.dim().1, 2 * h));
        out.slice_mut(s![.., .., ..h]).assign(&f);
        out.slice_mut(s![.., .., h..]).assign(&b);
        out
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    #[serde(rename = "C")]
    channels: usize,
    #[serde(rename = "H1")]
    h1: usize,
    #[serde(rename = "H2")]
    h2: usize,
    gate_order: String,
}

const GATE_ORDER: &str = "i,f,g,o";

impl FtJnfWeights {
    pub fn zeros(channels: usize, h1: usize, h2: usize) -> Self {
        let bi = |i, h| BiLstm {
            forward: LstmDirection::zeros(i, h),
            backward: LstmDirection::zeros(i, h),
        };
        Self {
            channels,
            stage1: bi(2 * channels, h1),
            stage2: bi(2 * h1, h2),
            out_weight: Array2::zeros((2, 2 * h2)),
            out_bias: Array1::zeros(2),
        }
    }

    pub fn random(channels: usize, h1: usize, h2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bi = |i, h| BiLstm {
            forward: LstmDirection::random(i, h, &mut rng),
            backward: LstmDirection::random(i, h, &mut rng),
        };
        let stage1 = bi(2 * channels, h1);
        let stage2 = bi(2 * h1, h2);
        let k = 1.0 / ((2 * h2) as f64).sqrt();
        let mut draw = || f64::from(rng.random_range(-k..k) as f32);
        Self {
            channels,
            stage1,
            stage2,
            out_weight: Array2::from_shape_simple_fn((2, 2 * h2), &mut draw),
            out_bias: Array1::from_shape_simple_fn(2, &mut draw),
        }
    }

    pub fn h1(&self) -> usize {
        self.stage1.hidden()
    }

    pub fn h2(&self) -> usize {
        self.stage2.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let (h1, h2) = (self.h1(), self.h2());
        if self.channels == 0 || h1 == 0 || h2 == 0 {
            return Err(Error::Weights("channel count and hidden sizes must be positive".into()));
        }
        self.stage1.check(2 * self.channels, h1, "stage 1")?;
        self.stage2.check(2 * h1, h2, "stage 2")?;
        if self.out_weight.dim() != (2, 2 * h2) || self.out_bias.len() != 2 {
            return Err(Error::Weights(format!(
                "output layer must be 2×{} with 2 biases, got {:?} and {}",
                2 * h2,
                self.out_weight.dim(),
                self.out_bias.len()
            )));
        }
        if !self.out_weight.iter().chain(&self.out_bias).all(|v| v.is_finite()) {
            return Err(Error::Weights("output layer: non-finite value".into()));
        }
        Ok(())
    }

    fn directions(&self) -> [&LstmDirection; 4] {
        [
            &self.stage1.forward,
            &self.stage1.backward,
            &self.stage2.forward,
            &self.stage2.backward,
        ]
    }

    /// Container bytes: per direction `w_ih, w_hh, bias` (row-major) in the
    /// order stage-1 forward, stage-1 backward, stage-2 forward, stage-2
    /// backward, then the output weight and bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = WeightsHeader {
            channels: self.channels,
            h1: self.h1(),
            h2: self.h2(),
            gate_order: GATE_ORDER.into(),
        };
        let mut payload = Vec::new();
        for d in self.directions() {
            payload.extend(d.w_ih.iter().map(|&v| v as f32));
            payload.extend(d.w_hh.iter().map(|&v| v as f32));
            payload.extend(d.bias.iter().map(|&v| v as f32));
        }
        payload.extend(self.out_weight.iter().map(|&v| v as f32));
        payload.extend(self.out_bias.iter().map(|&v| v as f32));
        container::encode(WEIGHTS_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = container::decode::<WeightsHeader>(WEIGHTS_MAGIC, bytes, |h| {
            if h.gate_order != GATE_ORDER {
                return Err(Error::Weights(format!(
                    "unsupported gate order `{}`, expected `{GATE_ORDER}`",
                    h.gate_order
                )));
            }
            let dir = |i: usize, h: usize| 4 * h * i + 4 * h * h + 4 * h;
            Ok(2 * dir(2 * h.channels, h.h1) + 2 * dir(2 * h.h1, h.h2) + 2 * 2 * h.h2 + 2)
        })?;
        let mut pos = 0;
        let mut take = |n: usize| {
            let v: Vec<f64> = values[pos..pos + n].iter().map(|&x| f64::from(x)).collect();
            pos += n;
            v
        };
        let mut dir = |i: usize, h: usize| LstmDirection {
            w_ih: Array2::from_shape_vec((4 * h, i), take(4 * h * i)).unwrap(),
            w_hh: Array2::from_shape_vec((4 * h, h), take(4 * h * h)).unwrap(),
            bias: Array1::from(take(4 * h)),
        };
        let (c, h1, h2) = (header.channels, header.h1, header.h2);
        let stage1 = BiLstm {
            forward: dir(2 * c, h1),
            backward: dir(2 * c, h1),
        };
        let stage2 = BiLstm {
            forward: dir(2 * h1, h2),
            backward: dir(2 * h1, h2),
        };
        let out_weight = Array2::from_shape_vec((2, 2 * h2), take(4 * h2)).unwrap();
        let out_bias = Array1::from(take(2));
        let w = Self {
            channels: c,
            stage1,
            stage2,
            out_weight,
            out_bias,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

fn features(tf: &TimeFreqTensor) -> Array3<f64> {
    let (c, t, f) = tf.data().dim();
    let d = tf.data();
    // frequency is the sequence axis of stage 1, frames are the batch
    Array3::from_shape_fn((f, t, 2 * c), |(k, tt, i)| {
        if i < c {
            d[[i, tt, k]].re
        } else {
            d[[i - c, tt, k]].im
        }
    })
}

fn linear_mask(h: ArrayView2<'_, f64>, w: &FtJnfWeights, frames: usize, bins: usize) -> Result<ComplexMask> {
    let mut out = h.dot(&w.out_weight.t());
    out += &w.out_bias;
    let data = Array2::from_shape_fn((frames, bins), |(t, k)| {
        let row = out.row(t * bins + k);
        Complex64::new(row[0], row[1])
    });
    ComplexMask::new(data, f64::INFINITY)
}

fn check_input(tf: &TimeFreqTensor, w: &FtJnfWeights) -> Result<()> {
    w.validate()?;
    if tf.channels() != w.channels {
        return Err(Error::Weights(format!(
            "weights expect {} channels ({} input features), tensor has {}",
            w.channels,
            2 * w.channels,
            tf.channels()
        )));
    }
    Ok(())
}

/// Mask estimate for every frame and bin of `tf`.
pub fn ft_jnf_forward(tf: &TimeFreqTensor, weights: &FtJnfWeights) -> Result<ComplexMask> {
    check_input(tf, weights)?;
    let (frames, bins) = (tf.frames(), tf.bins());
    let s1 = weights.stage1.run(&features(tf)); // F × T × 2H1
    let s2_in = s1.permuted_axes([1, 0, 2]).as_standard_layout().into_owned(); // T × F × 2H1
    let s2 = weights.stage2.run(&s2_in); // T × F × 2H2
    let width = s2.dim().2;
    let flat = s2.into_shape_with_order((frames * bins, width)).expect("contiguous");
    linear_mask(flat.view(), weights, frames, bins)
}

/// Stage 1 and the output layer only (the time recurrence replaced by the
/// identity). Needs `H1 == H2` so the output layer accepts stage-1 features.
pub fn ft_jnf_forward_without_time_stage(tf: &TimeFreqTensor, weights: &FtJnfWeights) -> Result<ComplexMask> {
    check_input(tf, weights)?;
    if weights.h1() != weights.h2() {
        return Err(Error::Weights("bypassing the time stage needs H1 == H2".into()));
    }
    let (frames, bins) = (tf.frames(), tf.bins());
    let s1 = weights.stage1.run(&features(tf));
    let t_major = s1.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
    let width = t_major.dim().2;
    let flat = t_major.into_shape_with_order((frames * bins, width)).expect("contiguous");
    linear_mask(flat.view(), weights, frames, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;

    fn input(channels: usize, frames: usize, fft: usize, seed: u64) -> TimeFreqTensor {
        let cfg = StftConfig {
            window_len: fft,
            hop: fft / 2,
            fft_size: fft,
            ..StftConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((channels, frames, cfg.bins()), || {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        TimeFreqTensor::new(data, cfg).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_mask() {
        let tf = input(5, 4, 32, 1);
        let m = ft_jnf_forward(&tf, &FtJnfWeights::zeros(5, 8, 6)).unwrap();
        assert_eq!(m.data().dim(), (4, 17));
        assert!(m.data().iter().all(|z| z.norm() == 0.0));
    }

    /// Direct per-sequence LSTM, written independently of the batched code.
    fn reference_lstm(d: &LstmDirection, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
        let h = d.hidden();
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = vec![vec![0.0; h]; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let mut z = d.bias.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                for (i, x) in xs[t].iter().enumerate() {
                    *zr += d.w_ih[[r, i]] * x;
                }
                for (j, hv) in hs.iter().enumerate() {
                    *zr += d.w_hh[[r, j]] * hv;
                }
            }
            for j in 0..h {
                let c = sigmoid(z[h + j]) * cs[j] + sigmoid(z[j]) * z[2 * h + j].tanh();
                cs[j] = c;
                hs[j] = sigmoid(z[3 * h + j]) * c.tanh();
            }
            out[t] = hs.clone();
        }
        out
    }

    fn reference_bi(b: &BiLstm, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let f = reference_lstm(&b.forward, xs, false);
        let r = reference_lstm(&b.backward, xs, true);
        f.into_iter().zip(r).map(|(mut a, b)| {
            a.extend(b);
            a
        }).collect()
    }

    #[test]
    fn batched_forward_matches_per_sequence_reference() {
        let (c, t, fft) = (3, 4, 16);
        let tf = input(c, t, fft, 2);
        let w = FtJnfWeights::random(c, 5, 4, 3);
        let got = ft_jnf_forward(&tf, &w).unwrap();
        let f = tf.bins();
        // stage 1 per frame along frequency
        let mut s1 = vec![vec![Vec::new(); f]; t];
        for tt in 0..t {
            let xs: Vec<Vec<f64>> = (0..f)
                .map(|k| {
                    let mut v: Vec<f64> = (0..c).map(|ch| tf.data()[[ch, tt, k]].re).collect();
                    v.extend((0..c).map(|ch| tf.data()[[ch, tt, k]].im));
                    v
                })
                .collect();
            for (k, h) in reference_bi(&w.stage1, &xs).into_iter().enumerate() {
                s1[tt][k] = h;
            }
        }
        for k in 0..f {
            let xs: Vec<Vec<f64>> = (0..t).map(|tt| s1[tt][k].clone()).collect();
            for (tt, h) in reference_bi(&w.stage2, &xs).into_iter().enumerate() {
                let re = w.out_bias[0] + h.iter().zip(w.out_weight.row(0)).map(|(a, b)| a * b).sum::<f64>();
                let im = w.out_bias[1] + h.iter().zip(w.out_weight.row(1)).map(|(a, b)| a * b).sum::<f64>();
                let z = got.data()[[tt, k]];
                assert!((z.re - re).abs() < 1e-12 && (z.im - im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frames_are_independent_without_time_stage() {
        let tf = input(2, 5, 16, 4);
        let w = FtJnfWeights::random(2, 6, 6, 5);
        let base = ft_jnf_forward_without_time_stage(&tf, &w).unwrap();
        let mut swapped = tf.data().clone();
        for c in 0..2 {
            for k in 0..tf.bins() {
                swapped.swap([c, 1, k], [c, 3, k]);
            }
        }
        let tf2 = TimeFreqTensor::new(swapped, *tf.config()).unwrap();
        let m2 = ft_jnf_forward_without_time_stage(&tf2, &w).unwrap();
        for k in 0..tf.bins() {
            assert_eq!(m2.data()[[1, k]], base.data()[[3, k]]);
            assert_eq!(m2.data()[[3, k]], base.data()[[1, k]]);
            assert_eq!(m2.data()[[0, k]], base.data()[[0, k]]);
        }
        let narrow = FtJnfWeights::random(2, 6, 4, 5);
        assert!(ft_jnf_forward_without_time_stage(&tf, &narrow).is_err());
    }

    #[test]
    fn weight_file_round_trip() {
        let w = FtJnfWeights::random(3, 5, 4, 9);
        let bytes = w.to_bytes();
        let back = FtJnfWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        assert!(FtJnfWeights::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_a_weight_error() {
        let tf = input(4, 2, 16, 6);
        let w = FtJnfWeights::random(5, 4, 3, 1);
        assert!(matches!(ft_jnf_forward(&tf, &w), Err(Error::Weights(_))));
        let mut bad = FtJnfWeights::random(4, 4, 3, 1);
        bad.stage2.forward.bias = Array1::zeros(3);
        assert!(matches!(ft_jnf_forward(&tf, &bad), Err(Error::Weights(_))));
        let mut nan = FtJnfWeights::random(4, 4, 3, 1);
        nan.out_bias[0] = f64::NAN;
        assert!(matches!(ft_jnf_forward(&tf, &nan), Err(Error::Weights(_))));
    }
}
