//! Seeded speech-like test signals: voiced and unvoiced bursts shaped by
//! formant resonators, separated by pauses, after a stretch of silence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::room::scene_rng;

/// Random stream used for speech, offset by the speaker slot.
pub const SPEECH_STREAM_BASE: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpeechParams {
    pub sample_rate: f64,
    pub duration: f64,
    /// Silence before the first burst, drawn from this range in seconds.
    pub leading_silence: (f64, f64),
    pub peak: f64,
}

impl Default for SynthSpeechParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            duration: 7.0,
            leading_silence: (0.2, 0.6),
            peak: 0.5,
        }
    }
}

/// Two-pole resonator at `freq` with the given bandwidth, unit peak gain.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, fs: f64) -> Self {
        let r = (-std::f64::consts::PI * bandwidth / fs).exp();
        let w = std::f64::consts::TAU * freq / fs;
        Self {
            a1: 2.0 * r * w.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn burst(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let voiced = rng.random_bool(0.75);
    let f0 = rng.random_range(100.0..220.0);
    let formants = [
        (rng.random_range(300.0..900.0), 80.0),
        (rng.random_range(900.0..2500.0), 120.0),
        (rng.random_range(2400.0..3400.0), 180.0),
    ];
    let mut filters: Vec<Resonator> = formants.iter().map(|&(f, b)| Resonator::new(f, b, fs)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let noise: f64 = rng.sample(StandardNormal);
        let excitation = if voiced {
            phase += f0 * (1.0 + 0.01 * noise) / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            pulse + 0.05 * noise
        } else {
            0.3 * noise
        };
        let y: f64 = filters.iter_mut().map(|f| f.tick(excitation)).sum();
        let env = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos();
        out.push(y * env);
    }
    out
}

/// Deterministic in `(seed, slot)`; different slots give independent talkers.
pub fn synthetic_speech(seed: u64, slot: u64, params: &SynthSpeechParams) -> Vec<f64> {
    let fs = params.sample_rate;
    let n = (params.duration * fs).round() as usize;
    let mut rng = scene_rng(seed, SPEECH_STREAM_BASE + slot);
    let mut x = vec![0.0; n];
    let (lo, hi) = params.leading_silence;
    let mut pos = (rng.random_range(lo..=hi) * fs) as usize;
    while pos < n {
        let len = (rng.random_range(0.08..0.25) * fs) as usize;
        let end = (pos + len).min(n);
        let b = burst(&mut rng, len, fs);
        for (d, s) in x[pos..end].iter_mut().zip(&b) {
            *d += s;
        }
        let gap = if rng.random_bool(0.1) { 0.3..0.6 } else { 0.03..0.15 };
        pos = end + (rng.random_range(gap) * fs) as usize;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = params.peak / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::detect_onset;

    #[test]
    fn deterministic_and_slot_dependent() {
        let p = SynthSpeechParams {
            duration: 1.0,
            ..Default::default()
        };
        let a = synthetic_speech(3, 0, &p);
        assert_eq!(a, synthetic_speech(3, 0, &p));
        assert_ne!(a, synthetic_speech(3, 1, &p));
        assert_eq!(a.len(), 16_000);
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-12);
    }

    #[test]
    fn starts_with_silence_then_speech() {
        let p = SynthSpeechParams::default();
        let x = synthetic_speech(9, 2, &p);
        let onset = detect_onset(&x, 160, 0.01).unwrap();
        assert!(onset >= (0.2 * 16_000.0) as usize - 160, "onset {onset}");
        assert!(x[..3000].iter().all(|&v| v == 0.0));
    }
}
