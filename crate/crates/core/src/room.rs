//! Shoebox image-method rendering of one scene to microphone signals and to
//! ideal (plane-wave) Ambisonics signals.
//!
//! Rendered signals have the same length as the source signals; the
//! reverberant tail beyond the last input sample is dropped.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{add_fractional_impulse, energy, FRACTIONAL_HALF_TAPS};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, CartesianPoint, HarmonicIndex, HarmonicSet, SphericalDirection};
use crate::sh::{sh_eval, sh_vector};

/// Below this source–receiver distance the free-field Green's function is undefined.
pub const MIN_DISTANCE: f64 = 1e-6;

pub const DEFAULT_DIMENSIONS: [f64; 3] = [6.0, 5.0, 3.0];
pub const DEFAULT_RT60: f64 = 0.3;
pub const DEFAULT_MAX_ORDER: u32 = 24;

/// RNG stream ids, so microphone and Ambisonics noise never share draws.
pub const MIC_NOISE_STREAM: u64 = 1;
pub const AMBI_NOISE_STREAM: u64 = 2;

/// Wall order for `beta`: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dimensions: [f64; 3],
    pub beta: [f64; 6],
    pub max_order: u32,
}

impl RoomSpec {
    pub fn new(dimensions: [f64; 3], beta: [f64; 6], max_order: u32) -> Result<Self> {
        let room = Self {
            dimensions,
            beta,
            max_order,
        };
        room.validate()?;
        Ok(room)
    }

    /// Uniform walls whose Eyring reverberation time equals `rt60` seconds.
    pub fn from_rt60(dimensions: [f64; 3], rt60: f64, max_order: u32) -> Result<Self> {
        if !(rt60 > 0.0) {
            return Err(Error::Validation(format!("rt60 must be positive, got {rt60}")));
        }
        let [lx, ly, lz] = dimensions;
        let volume = lx * ly * lz;
        let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
        // Eyring: T = 0.161 V / (-S ln(1 - α)), with α = 1 - β²
        let beta = (-0.161 * volume / (2.0 * surface * rt60)).exp();
        Self::new(dimensions, [beta; 6], max_order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Validation(format!(
                "room dimensions must be positive, got {:?}",
                self.dimensions
            )));
        }
        if self.beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Validation(format!(
                "reflection coefficients must lie in [0, 1], got {:?}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Strictly inside the room.
    pub fn contains(&self, p: &CartesianPoint) -> bool {
        let c = p.to_array();
        c.iter()
            .zip(&self.dimensions)
            .all(|(v, l)| *v > 0.0 && *v < *l)
    }

    pub fn center(&self) -> CartesianPoint {
        let [lx, ly, lz] = self.dimensions;
        CartesianPoint::new(lx / 2.0, ly / 2.0, lz / 2.0)
    }
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self::from_rt60(DEFAULT_DIMENSIONS, DEFAULT_RT60, DEFAULT_MAX_ORDER)
            .expect("default room is valid")
    }
}

/// Receiver-independent mirror image of a source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeImage {
    pub position: CartesianPoint,
    /// Total number of wall reflections.
    pub reflections: u32,
    /// Product of the reflection coefficients along the path.
    pub attenuation: f64,
}

/// One image as seen from a receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageEntry {
    pub position: CartesianPoint,
    pub reflections: u32,
    /// `attenuation / (4π d)`.
    pub gain: f64,
    /// Propagation time in seconds.
    pub delay: f64,
    /// Direction from the receiver towards the image.
    pub doa: SphericalDirection,
}

/// Every image up to the room's maximum order, direct path first.
/// Images with zero attenuation are omitted.
pub fn image_lattice(room: &RoomSpec, source: &CartesianPoint) -> Result<Vec<LatticeImage>> {
    room.validate()?;
    if !room.contains(source) {
        return Err(Error::Geometry(format!("source {source:?} is not inside the room")));
    }
    let k = room.max_order as i64;
    let s = source.to_array();
    let mut out = vec![LatticeImage {
        position: *source,
        reflections: 0,
        attenuation: 1.0,
    }];
    // Per axis: parity u ∈ {0,1}, lattice index l; the image coordinate is
    // (1-2u)·s + 2l·L after |l-u| hits on the lower wall and |l| on the upper.
    let axis_terms = |axis: usize| {
        let mut terms = Vec::new();
        for u in 0..=1i64 {
            for l in -k..=k {
                let lo = (l - u).unsigned_abs() as u32;
                let hi = l.unsigned_abs() as u32;
                if (lo + hi) as i64 > k {
                    continue;
                }
                let coord = (1 - 2 * u) as f64 * s[axis] + 2.0 * l as f64 * room.dimensions[axis];
                let att = room.beta[2 * axis].powi(lo as i32) * room.beta[2 * axis + 1].powi(hi as i32);
                terms.push((coord, lo + hi, att));
            }
        }
        terms
    };
    let (xs, ys, zs) = (axis_terms(0), axis_terms(1), axis_terms(2));
    for &(x, ox, ax) in &xs {
        for &(y, oy, ay) in &ys {
            if ox + oy > room.max_order {
                continue;
            }
            for &(z, oz, az) in &zs {
                let order = ox + oy + oz;
                if order == 0 || order > room.max_order {
                    continue;
                }
                let attenuation = ax * ay * az;
                if attenuation == 0.0 {
                    continue;
                }
                out.push(LatticeImage {
                    position: CartesianPoint::new(x, y, z),
                    reflections: order,
                    attenuation,
                });
            }
        }
    }
    Ok(out)
}

fn entry_for(image: &LatticeImage, receiver: &CartesianPoint, c: f64) -> Result<ImageEntry> {
    let rel = image.position.sub(receiver);
    let (d, doa) = rel.to_spherical();
    if d < MIN_DISTANCE {
        return Err(Error::Degenerate(format!(
            "image at {:?} coincides with the receiver",
            image.position
        )));
    }
    Ok(ImageEntry {
        position: image.position,
        reflections: image.reflections,
        gain: image.attenuation / (4.0 * PI * d),
        delay: d / c,
        doa,
    })
}

/// Image sources of `source` seen from `receiver`, direct path first.
pub fn compute_images(
    room: &RoomSpec,
    source: &CartesianPoint,
    receiver: &CartesianPoint,
    speed_of_sound: f64,
) -> Result<Vec<ImageEntry>> {
    if !room.contains(receiver) {
        return Err(Error::Geometry(format!("receiver {receiver:?} is not inside the room")));
    }
    image_lattice(room, source)?
        .iter()
        .map(|im| entry_for(im, receiver, speed_of_sound))
        .collect()
}

/// One acoustic scene. `signals` are not serialized; the pipeline stores them as WAV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    /// Source positions, target first.
    pub sources: Vec<CartesianPoint>,
    #[serde(skip)]
    pub signals: Vec<Vec<f64>>,
    pub array: ArrayGeometry,
    pub array_center: CartesianPoint,
    /// Rotation of the array about +z. Ambisonics DOAs are expressed in the array frame.
    pub array_azimuth: f64,
    /// Sensor SNR in dB; `None` renders without noise.
    pub snr_db: Option<f64>,
    pub sample_rate: f64,
    pub speed_of_sound: f64,
    pub seed: u64,
}

/// Per source, the images seen from the array center with DOAs in the array frame.
#[derive(Debug, Clone)]
pub struct ImageSourceSet {
    pub sources: Vec<Vec<ImageEntry>>,
}

impl SceneSpec {
    pub fn mic_positions(&self) -> Vec<CartesianPoint> {
        self.array
            .rotated(self.array_azimuth)
            .mics()
            .iter()
            .map(|m| m.add(&self.array_center))
            .collect()
    }

    pub fn signal_len(&self) -> usize {
        self.signals.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.sources.is_empty() {
            return Err(Error::Shape("scene has no sources".into()));
        }
        if self.signals.len() != self.sources.len() {
            return Err(Error::Shape(format!(
                "{} source positions but {} signals",
                self.sources.len(),
                self.signals.len()
            )));
        }
        let len = self.signal_len();
        if self.signals.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("source signals differ in length".into()));
        }
        if !(self.sample_rate > 0.0) || !(self.speed_of_sound > 0.0) {
            return Err(Error::Validation(
                "sample rate and speed of sound must be positive".into(),
            ));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Validation(format!("snr must be finite, got {snr}")));
            }
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !self.room.contains(s) {
                return Err(Error::Geometry(format!("source {i} at {s:?} is outside the room")));
            }
        }
        if !self.room.contains(&self.array_center) {
            return Err(Error::Geometry("array center is outside the room".into()));
        }
        for (i, m) in self.mic_positions().iter().enumerate() {
            if !self.room.contains(m) {
                return Err(Error::Geometry(format!("mic {i} at {m:?} is outside the room")));
            }
        }
        Ok(())
    }

    /// Mic closest to the target source.
    pub fn reference_mic(&self) -> usize {
        let target = self.sources[0];
        let mics = self.mic_positions();
        let mut best = 0;
        for (i, m) in mics.iter().enumerate() {
            if m.distance(&target) < mics[best].distance(&target) {
                best = i;
            }
        }
        best
    }

    fn to_array_frame(&self, p: &CartesianPoint) -> CartesianPoint {
        let rel = p.sub(&self.array_center);
        let (s, c) = (-self.array_azimuth).sin_cos();
        CartesianPoint::new(c * rel.x - s * rel.y, s * rel.x + c * rel.y, rel.z)
    }

    pub fn images(&self) -> Result<ImageSourceSet> {
        let mut sources = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            let lattice = image_lattice(&self.room, s)?;
            let entries = lattice
                .iter()
                .map(|im| {
                    let local = LatticeImage {
                        position: self.to_array_frame(&im.position),
                        ..*im
                    };
                    let mut e = entry_for(&local, &CartesianPoint::ORIGIN, self.speed_of_sound)?;
                    e.position = im.position;
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            sources.push(entries);
        }
        Ok(ImageSourceSet { sources })
    }
}

#[derive(Debug, Clone)]
pub struct MicRender {
    pub signals: Vec<Vec<f64>>,
    /// Direct path of the target at the reference mic, noise free.
    pub clean: Vec<f64>,
    pub reference_mic: usize,
}

#[derive(Debug, Clone)]
pub struct AmbisonicsRender {
    /// Real-packed channels in the order of the harmonic set.
    pub signals: Vec<Vec<f64>>,
    /// `a_00` of the target's direct path, noise free.
    pub clean_a00: Vec<f64>,
}

/// FFT-domain sum of many source signals, each through its own kernel.
struct Convolver {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    spectra: Vec<Vec<Complex64>>,
}

impl Convolver {
    fn new(signals: &[Vec<f64>], max_kernel: usize) -> Self {
        let len = signals.iter().map(Vec::len).max().unwrap_or(0);
        let n = (len + max_kernel).max(1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let spectra = signals
            .par_iter()
            .map(|s| {
                let mut buf: Vec<Complex64> = s.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                buf.resize(n, Complex64::new(0.0, 0.0));
                fwd.process(&mut buf);
                buf
            })
            .collect();
        Self {
            n,
            fwd,
            inv,
            spectra,
        }
    }

    /// `Σ_s signal_s * kernel_s`, first `out_len` samples.
    fn render(&self, kernels: &[Vec<f64>], out_len: usize) -> Vec<f64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.n];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        for (spec, k) in self.spectra.iter().zip(kernels) {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for (b, &v) in buf.iter_mut().zip(k) {
                b.re = v;
            }
            self.fwd.process(&mut buf);
            for ((a, s), h) in acc.iter_mut().zip(spec).zip(&buf) {
                *a += s * h;
            }
        }
        self.inv.process(&mut acc);
        let scale = 1.0 / self.n as f64;
        acc[..out_len].iter().map(|z| z.re * scale).collect()
    }
}

fn kernel_len(max_delay_samples: f64) -> usize {
    max_delay_samples.ceil() as usize + FRACTIONAL_HALF_TAPS as usize + 1
}

/// Microphone signals of the scene: every image of every source at every mic, plus optional noise.
pub fn render_mics(scene: &SceneSpec) -> Result<MicRender> {
    scene.validate()?;
    let fs = scene.sample_rate;
    let c = scene.speed_of_sound;
    let mics = scene.mic_positions();
    let lattices = scene
        .sources
        .iter()
        .map(|s| image_lattice(&scene.room, s))
        .collect::<Result<Vec<_>>>()?;
    // per mic, per source: entries
    let entries: Vec<Vec<Vec<ImageEntry>>> = mics
        .iter()
        .map(|m| {
            lattices
                .iter()
                .map(|l| l.iter().map(|im| entry_for(im, m, c)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let max_delay = entries
        .iter()
        .flatten()
        .flatten()
        .map(|e| e.delay * fs)
        .fold(0.0, f64::max);
    let klen = kernel_len(max_delay);
    let len = scene.signal_len();
    let conv = Convolver::new(&scene.signals, klen);

    let mut signals: Vec<Vec<f64>> = entries
        .par_iter()
        .map(|per_source| {
            let kernels: Vec<Vec<f64>> = per_source
                .iter()
                .map(|es| {
                    let mut h = vec![0.0; klen];
                    for e in es {
                        add_fractional_impulse(&mut h, e.delay * fs, e.gain);
                    }
                    h
                })
                .collect();
            conv.render(&kernels, len)
        })
        .collect();

    let reference_mic = scene.reference_mic();
    let direct = &entries[reference_mic][0][0];
    let mut h = vec![0.0; kernel_len(direct.delay * fs)];
    add_fractional_impulse(&mut h, direct.delay * fs, direct.gain);
    let clean = crate::dsp::fft_convolve(&scene.signals[0], &h, len);

    if let Some(snr) = scene.snr_db {
        let mut rng = scene_rng(scene.seed, MIC_NOISE_STREAM);
        add_sensor_noise(&mut signals, snr, NoiseLevel::Reference(reference_mic), &mut rng);
    }
    Ok(MicRender {
        signals,
        clean,
        reference_mic,
    })
}

/// Packed-channel weights for a plane wave from `doa`: the real or imaginary
/// part of `conj(Y_n^{|m|})` depending on the slot.
fn packed_weights(set: &HarmonicSet, doa: SphericalDirection) -> Result<Vec<f64>> {
    let y = sh_vector(set, doa)?;
    Ok(set
        .indices()
        .iter()
        .map(|h| {
            let pos = set.position(HarmonicIndex { n: h.n, m: h.m.abs() }).unwrap();
            let a = y[pos].conj();
            if h.m >= 0 {
                a.re
            } else {
                a.im
            }
        })
        .collect())
}

/// Ideal Ambisonics of the scene: every image is a plane wave arriving at the
/// array center. `set` must contain each `(n,m)` together with `(n,-m)`.
pub fn render_ideal_ambisonics(scene: &SceneSpec, set: &HarmonicSet) -> Result<AmbisonicsRender> {
    scene.validate()?;
    if !set.is_mirror_closed() {
        return Err(Error::Domain(
            "ideal rendering stores real-packed channels; the set must be mirror closed".into(),
        ));
    }
    let fs = scene.sample_rate;
    let images = scene.images()?;
    let max_delay = images
        .sources
        .iter()
        .flatten()
        .map(|e| e.delay * fs)
        .fold(0.0, f64::max);
    let klen = kernel_len(max_delay);
    let len = scene.signal_len();

    // kernels[channel][source]
    let mut kernels = vec![vec![vec![0.0; klen]; scene.sources.len()]; set.len()];
    for (s, entries) in images.sources.iter().enumerate() {
        for e in entries {
            let w = packed_weights(set, e.doa)?;
            for (ch, wc) in w.iter().enumerate() {
                if *wc != 0.0 {
                    add_fractional_impulse(&mut kernels[ch][s], e.delay * fs, e.gain * wc);
                }
            }
        }
    }
    let conv = Convolver::new(&scene.signals, klen);
    let mut signals: Vec<Vec<f64>> = kernels.par_iter().map(|k| conv.render(k, len)).collect();

    let direct = &images.sources[0][0];
    let y00 = sh_eval(HarmonicIndex { n: 0, m: 0 }, direct.doa)?.re;
    let mut h = vec![0.0; kernel_len(direct.delay * fs)];
    add_fractional_impulse(&mut h, direct.delay * fs, direct.gain * y00);
    let clean_a00 = crate::dsp::fft_convolve(&scene.signals[0], &h, len);

    if let Some(snr) = scene.snr_db {
        let mut rng = scene_rng(scene.seed, AMBI_NOISE_STREAM);
        add_sensor_noise(&mut signals, snr, NoiseLevel::PerChannel, &mut rng);
    }
    Ok(AmbisonicsRender { signals, clean_a00 })
}

/// How sensor noise is levelled against the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    /// One noise level for all channels, set by the SNR at this channel.
    Reference(usize),
    /// Each channel at the SNR of its own power.
    PerChannel,
}

/// Adds white Gaussian noise whose realized power gives exactly `snr_db`
/// against the noiseless signal power. Silent channels stay silent under
/// [`NoiseLevel::PerChannel`].
pub fn add_sensor_noise(signals: &mut [Vec<f64>], snr_db: f64, level: NoiseLevel, rng: &mut impl Rng) {
    let noise: Vec<Vec<f64>> = signals
        .iter()
        .map(|s| (0..s.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let ratio = 10f64.powf(snr_db / 10.0);
    let scale_for = |i: usize| {
        let e_noise = energy(&noise[i]);
        if e_noise == 0.0 {
            0.0
        } else {
            (energy(&signals[i]) / ratio / e_noise).sqrt()
        }
    };
    let scales: Vec<f64> = match level {
        NoiseLevel::Reference(r) => vec![scale_for(r); signals.len()],
        NoiseLevel::PerChannel => (0..signals.len()).map(scale_for).collect(),
    };
    for ((s, n), g) in signals.iter_mut().zip(&noise).zip(&scales) {
        for (x, v) in s.iter_mut().zip(n) {
            *x += g * v;
        }
    }
}

pub fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Randomized placement used by scene generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutRules {
    /// Minimum source distance from every wall.
    pub wall_margin: f64,
    /// Minimum source distance from the array center (raised to clear large apertures).
    pub min_source_distance: f64,
    /// Maximum horizontal offset of the array center from the room center.
    pub center_jitter: f64,
    /// Height band for sources and the array.
    pub height: (f64, f64),
}

impl Default for LayoutRules {
    fn default() -> Self {
        Self {
            wall_margin: 0.5,
            min_source_distance: 1.0,
            center_jitter: 0.5,
            height: (1.2, 1.8),
        }
    }
}

/// Draws array center, array azimuth and `count` source positions.
pub fn random_layout(
    room: &RoomSpec,
    array: &ArrayGeometry,
    count: usize,
    rules: &LayoutRules,
    rng: &mut impl Rng,
) -> Result<(CartesianPoint, f64, Vec<CartesianPoint>)> {
    let [lx, ly, lz] = room.dimensions;
    let m = rules.wall_margin;
    if lx <= 2.0 * m || ly <= 2.0 * m || lz <= 2.0 * m {
        return Err(Error::Geometry("room too small for the wall margin".into()));
    }
    let (z_lo, z_hi) = {
        let lo = rules.height.0.max(m);
        let hi = rules.height.1.min(lz - m);
        if lo < hi {
            (lo, hi)
        } else {
            (m, lz - m)
        }
    };
    let mid = room.center();
    let j = rules.center_jitter;
    let center = CartesianPoint::new(
        mid.x + rng.random_range(-j..=j),
        mid.y + rng.random_range(-j..=j),
        (z_lo + z_hi) / 2.0,
    );
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    // sources stay clear of the array aperture as well
    let min_d = rules.min_source_distance.max(array.aperture_radius() + 0.1);
    let mut sources = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = None;
        for _ in 0..10_000 {
            let p = CartesianPoint::new(
                rng.random_range(m..lx - m),
                rng.random_range(m..ly - m),
                rng.random_range(z_lo..z_hi),
            );
            if p.distance(&center) >= min_d
                && sources.iter().all(|q: &CartesianPoint| q.distance(&p) >= m)
            {
                placed = Some(p);
                break;
            }
        }
        match placed {
            Some(p) => sources.push(p),
            None => {
                return Err(Error::Geometry(format!(
                    "could not place source {i} under the layout rules"
                )))
            }
        }
    }
    Ok((center, azimuth, sources))
}
