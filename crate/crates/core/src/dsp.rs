//! Small signal helpers shared by rendering and the pipeline.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

/// Half-width of the fractional-delay kernel (8 taps total).
pub const FRACTIONAL_HALF_TAPS: i64 = 4;

/// Adds `gain · δ(n − delay)` into `buf` using an 8-tap Hann-windowed sinc.
/// Integer delays land on a single tap exactly.
pub fn add_fractional_impulse(buf: &mut [f64], delay: f64, gain: f64) {
    let base = delay.floor() as i64;
    if delay == base as f64 {
        // sin(πk) is not exactly zero in floating point
        if base >= 0 && (base as usize) < buf.len() {
            buf[base as usize] += gain;
        }
        return;
    }
    for n in base - FRACTIONAL_HALF_TAPS + 1..=base + FRACTIONAL_HALF_TAPS {
        if n < 0 || n as usize >= buf.len() {
            continue;
        }
        let x = n as f64 - delay;
        if x.abs() >= FRACTIONAL_HALF_TAPS as f64 {
            continue;
        }
        let window = 0.5 * (1.0 + (PI * x / FRACTIONAL_HALF_TAPS as f64).cos());
        buf[n as usize] += gain * sinc(x) * window;
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Linear convolution truncated to `out_len` samples.
pub fn fft_convolve(signal: &[f64], kernel: &[f64], out_len: usize) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let full = signal.len() + kernel.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = kernel.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < full { a[i].re * scale } else { 0.0 })
        .collect()
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        energy(x) / x.len() as f64
    }
}

/// First sample at which the RMS of the following `window` samples exceeds
/// `fraction` of the largest such RMS. `None` for silent input.
pub fn detect_onset(x: &[f64], window: usize, fraction: f64) -> Option<usize> {
    let window = window.max(1);
    if x.len() < window {
        return None;
    }
    // running sums over every window start
    let mut sums = Vec::with_capacity(x.len() - window + 1);
    let mut acc: f64 = x[..window].iter().map(|v| v * v).sum();
    sums.push(acc);
    for i in window..x.len() {
        acc += x[i] * x[i] - x[i - window] * x[i - window];
        sums.push(acc.max(0.0));
    }
    let peak = sums.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return None;
    }
    // RMS ratio `fraction` is an energy ratio of fraction²
    let threshold = peak * fraction * fraction;
    sums.iter().position(|&s| s > threshold)
}
