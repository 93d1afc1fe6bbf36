//! Ambisonics signal matching: per-frequency regularized least-squares
//! encoders from arbitrary microphone arrays to spherical-harmonic channels.
//!
//! For steering `V(k)` (M×Q) and harmonic samples `y_nm` on the same Q
//! directions, the encoder minimizing the diffuse-field NMSE is
//!
//! ```text
//! c_nm(k) = (V Vᴴ + λ I)⁻¹ V y_nm,   λ = σ_n² / σ_s² = 10^(-snr_db/10)
//! ```
//!
//! and the estimate is `â_nm = c_nmᴴ x`. Each harmonic is solved
//! independently, so designing a superset and selecting channels afterwards
//! gives exactly the same filters as designing the subset directly.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, HarmonicIndex, HarmonicSet};
use crate::sh::{sh_matrix, DirectionGrid};
use crate::steering::{FrequencyGrid, SteeringMatrix};
use crate::stft::TimeFreqTensor;

pub const FILTER_MAGIC: &[u8; 5] = b"ASMF1";

/// Frequency grids closer than this (Hz) are considered aligned.
pub const ALIGNMENT_TOLERANCE_HZ: f64 = 1e-6;

/// Pivots below this fraction of the largest diagonal entry are treated as singular.
const PIVOT_TOLERANCE: f64 = 1e-13;

/// Design-SNR to regularization mapping, `λ = 10^(-snr_db/10)`.
pub fn regularization(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Debug, Clone)]
pub struct AsmDesignParams {
    pub harmonic_set: HarmonicSet,
    pub grid: DirectionGrid,
    pub freqs: FrequencyGrid,
    pub snr_db: f64,
}

impl AsmDesignParams {
    pub fn lambda(&self) -> f64 {
        regularization(self.snr_db)
    }
}

/// Designed encoders. `filters[f]` is `channels × M`; row `c` holds the
/// vector `c_nm` itself, so the estimate is `Σ_m conj(row[m]) X_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsmFilterBank {
    array_name: String,
    harmonic_set: HarmonicSet,
    freqs: FrequencyGrid,
    snr_db: f64,
    filters: Vec<Array2<Complex64>>,
}

/// Cholesky solve of `A X = B` for Hermitian positive-definite `A`,
/// followed by one step of iterative refinement. `None` when a pivot is
/// not safely positive.
fn hermitian_solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[[i, i]].re).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    let mut l = Array2::<Complex64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > PIVOT_TOLERANCE * max_diag) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / d;
        }
    }
    let substitute = |rhs: &Array2<Complex64>| {
        let mut x = rhs.clone();
        for col in 0..x.ncols() {
            // L y = rhs
            for i in 0..n {
                let mut s = x[[i, col]];
                for k in 0..i {
                    s -= l[[i, k]] * x[[k, col]];
                }
                x[[i, col]] = s / l[[i, i]];
            }
            // Lᴴ x = y
            for i in (0..n).rev() {
                let mut s = x[[i, col]];
                for k in i + 1..n {
                    s -= l[[k, i]].conj() * x[[k, col]];
                }
                x[[i, col]] = s / l[[i, i]];
            }
        }
        x
    };
    let mut x = substitute(b);
    let residual = b - &a.dot(&x);
    x = x + substitute(&residual);
    Some(x)
}

fn hermitian_transpose(m: &Array2<Complex64>) -> Array2<Complex64> {
    m.t().mapv(|z| z.conj())
}

fn same_grid(a: &DirectionGrid, b: &DirectionGrid) -> bool {
    a.len() == b.len()
        && a.directions().iter().zip(b.directions()).all(|(x, y)| {
            (x.theta - y.theta).abs() < 1e-12 && (x.phi - y.phi).abs() < 1e-12
        })
}

/// Designs `c_nm(k)` for every harmonic of the set at every frequency of `V`.
/// All failing frequencies are collected into one [`Error::Solver`].
pub fn asm_design(v: &SteeringMatrix, params: &AsmDesignParams) -> Result<AsmFilterBank> {
    if !same_grid(v.grid(), &params.grid) {
        return Err(Error::Alignment(
            "steering directions differ from the design grid".into(),
        ));
    }
    if !v.freqs().aligned_with(&params.freqs, ALIGNMENT_TOLERANCE_HZ) {
        return Err(Error::Alignment(
            "steering frequencies differ from the design frequencies".into(),
        ));
    }
    let y = sh_matrix(&params.harmonic_set, &params.grid)?;
    let lambda = params.lambda();
    let m = v.mic_count();

    let solved: Vec<std::result::Result<Array2<Complex64>, usize>> = v
        .matrices()
        .par_iter()
        .enumerate()
        .map(|(fi, vk)| {
            let mut a = vk.dot(&hermitian_transpose(vk));
            for i in 0..m {
                a[[i, i]] += lambda;
            }
            let rhs = vk.dot(&y);
            hermitian_solve(&a, &rhs)
                .map(|x| x.reversed_axes())
                .ok_or(fi)
        })
        .collect();

    let mut filters = Vec::with_capacity(solved.len());
    let mut failures = Vec::new();
    for r in solved {
        match r {
            Ok(f) => filters.push(f),
            Err(fi) => failures.push((fi, v.freqs().frequencies()[fi])),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Solver(failures));
    }
    Ok(AsmFilterBank {
        array_name: v.array_name().to_string(),
        harmonic_set: params.harmonic_set.clone(),
        freqs: params.freqs.clone(),
        snr_db: params.snr_db,
        filters,
    })
}

impl AsmFilterBank {
    pub fn from_parts(
        array_name: impl Into<String>,
        harmonic_set: HarmonicSet,
        freqs: FrequencyGrid,
        snr_db: f64,
        filters: Vec<Array2<Complex64>>,
    ) -> Result<Self> {
        if filters.len() != freqs.len() {
            return Err(Error::Shape(format!(
                "{} filter matrices for {} frequencies",
                filters.len(),
                freqs.len()
            )));
        }
        let m = filters.first().map_or(0, |f| f.ncols());
        for f in &filters {
            if f.dim() != (harmonic_set.len(), m) {
                return Err(Error::Shape(format!(
                    "filter matrix {:?}, expected ({}, {m})",
                    f.dim(),
                    harmonic_set.len()
                )));
            }
            if f.iter().any(|z| !z.is_finite()) {
                return Err(Error::Domain("non-finite filter coefficient".into()));
            }
        }
        Ok(Self {
            array_name: array_name.into(),
            harmonic_set,
            freqs,
            snr_db,
            filters,
        })
    }

    pub fn array_name(&self) -> &str {
        &self.array_name
    }

    pub fn harmonic_set(&self) -> &HarmonicSet {
        &self.harmonic_set
    }

    pub fn freqs(&self) -> &FrequencyGrid {
        &self.freqs
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn filters(&self) -> &[Array2<Complex64>] {
        &self.filters
    }

    pub fn mic_count(&self) -> usize {
        self.filters.first().map_or(0, |f| f.ncols())
    }

    pub fn channels(&self) -> usize {
        self.harmonic_set.len()
    }

    /// The filter vector of one harmonic at one frequency.
    pub fn filter(&self, bin: usize, channel: usize) -> Array1<Complex64> {
        self.filters[bin].row(channel).to_owned()
    }

    /// Keeps only the channels of `subset` (which must be contained in this bank's set).
    pub fn select(&self, subset: &HarmonicSet) -> Result<Self> {
        let rows = subset
            .indices()
            .iter()
            .map(|h| {
                self.harmonic_set
                    .position(*h)
                    .ok_or_else(|| Error::Domain(format!("harmonic {h} not in filter bank")))
            })
            .collect::<Result<Vec<_>>>()?;
        let filters = self.filters.iter().map(|f| f.select(Axis(0), &rows)).collect();
        Ok(Self {
            array_name: self.array_name.clone(),
            harmonic_set: subset.clone(),
            freqs: self.freqs.clone(),
            snr_db: self.snr_db,
            filters,
        })
    }

    /// Linear interpolation of every coefficient onto another frequency grid.
    pub fn resample(&self, target: &FrequencyGrid) -> Result<Self> {
        let src = self.freqs.frequencies();
        let filters = target
            .frequencies()
            .iter()
            .map(|&f| {
                let j = src.partition_point(|&x| x < f);
                if j == 0 {
                    self.filters[0].clone()
                } else if j >= src.len() {
                    self.filters[src.len() - 1].clone()
                } else {
                    let t = (f - src[j - 1]) / (src[j] - src[j - 1]);
                    &self.filters[j - 1] * Complex64::from(1.0 - t)
                        + &self.filters[j] * Complex64::from(t)
                }
            })
            .collect();
        Self::from_parts(
            self.array_name.clone(),
            self.harmonic_set.clone(),
            target.clone(),
            self.snr_db,
            filters,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FilterHeader {
            c: self.channels(),
            m: self.mic_count(),
            f: self.freqs.len(),
            frequencies: self.freqs.frequencies().to_vec(),
            harmonics: self.harmonic_set.indices().iter().map(|h| [h.n as i64, h.m as i64]).collect(),
            array_name: self.array_name.clone(),
            snr_db: self.snr_db,
            speed_of_sound: self.freqs.speed_of_sound(),
        };
        let mut payload = Vec::with_capacity(2 * header.c * header.m * header.f);
        for f in &self.filters {
            for z in f.iter() {
                container::push_complex(&mut payload, *z);
            }
        }
        container::encode(FILTER_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, values) = container::decode::<FilterHeader>(FILTER_MAGIC, bytes, |h| {
            if h.frequencies.len() != h.f || h.harmonics.len() != h.c {
                return Err(Error::Format("header lists disagree with declared sizes".into()));
            }
            Ok(2 * h.f * h.c * h.m)
        })?;
        let harmonics = h
            .harmonics
            .iter()
            .map(|&[n, m]| {
                u32::try_from(n)
                    .ok()
                    .and_then(|n| HarmonicIndex::new(n, m as i32).ok())
                    .ok_or_else(|| Error::Format(format!("bad harmonic ({n},{m})")))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = HarmonicSet::from_indices(harmonics.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        if set.indices() != harmonics.as_slice() {
            return Err(Error::Format("harmonics must be listed in ACN order".into()));
        }
        let freqs = FrequencyGrid::new(h.frequencies, h.speed_of_sound)
            .map_err(|e| Error::Format(e.to_string()))?;
        let block = h.c * h.m;
        let filters = (0..h.f)
            .map(|fi| {
                Array2::from_shape_fn((h.c, h.m), |(c, m)| {
                    container::complex_at(&values, fi * block + c * h.m + m)
                })
            })
            .collect();
        Self::from_parts(h.array_name, set, freqs, h.snr_db, filters)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FilterHeader {
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "F")]
    f: usize,
    frequencies: Vec<f64>,
    harmonics: Vec<[i64; 2]>,
    array_name: String,
    snr_db: f64,
    speed_of_sound: f64,
}

/// Applies the encoders bin by bin: `â_c(t,f) = Σ_m conj(c[c,m](f)) X_m(t,f)`.
pub fn asm_apply(filters: &AsmFilterBank, mic_tf: &TimeFreqTensor) -> Result<TimeFreqTensor> {
    if mic_tf.channels() != filters.mic_count() {
        return Err(Error::Shape(format!(
            "{} input channels, filter bank expects {}",
            mic_tf.channels(),
            filters.mic_count()
        )));
    }
    let cfg = *mic_tf.config();
    let bin_freqs: Vec<f64> = (0..mic_tf.bins()).map(|k| cfg.bin_frequency(k)).collect();
    let aligned = bin_freqs.len() == filters.freqs.len()
        && bin_freqs
            .iter()
            .zip(filters.freqs.frequencies())
            .all(|(a, b)| (a - b).abs() <= ALIGNMENT_TOLERANCE_HZ);
    if !aligned {
        return Err(Error::Alignment(format!(
            "STFT has {} bins at {} Hz spacing, filter bank has {} frequencies",
            bin_freqs.len(),
            cfg.sample_rate / cfg.fft_size as f64,
            filters.freqs.len()
        )));
    }
    let channels = filters.channels();
    let frames = mic_tf.frames();
    let x = mic_tf.data();
    let mut out = Array3::<Complex64>::zeros((channels, frames, mic_tf.bins()));
    let conj: Vec<Array2<Complex64>> = filters.filters.iter().map(|f| f.mapv(|z| z.conj())).collect();
    for c in 0..channels {
        for t in 0..frames {
            for (k, w) in conj.iter().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..w.ncols() {
                    acc += w[[c, m]] * x[[m, t, k]];
                }
                out[[c, t, k]] = acc;
            }
        }
    }
    TimeFreqTensor::new(out, cfg)
}

/// Closed-form diffuse-field NMSE of one channel per frequency:
/// `(‖Vᴴc − y‖² + λ‖c‖²) / ‖y‖²`.
pub fn asm_nmse(
    v: &SteeringMatrix,
    filters: &AsmFilterBank,
    harmonic: HarmonicIndex,
    lambda: f64,
) -> Result<Vec<f64>> {
    let channel = filters
        .harmonic_set
        .position(harmonic)
        .ok_or_else(|| Error::Domain(format!("harmonic {harmonic} not in filter bank")))?;
    if v.freqs().len() != filters.freqs.len() || v.mic_count() != filters.mic_count() {
        return Err(Error::Shape("steering and filter bank sizes differ".into()));
    }
    let single = HarmonicSet::from_indices(vec![harmonic])?;
    let y = sh_matrix(&single, v.grid())?.column(0).to_owned();
    let y_energy: f64 = y.iter().map(|z| z.norm_sqr()).sum();
    Ok(v
        .matrices()
        .iter()
        .enumerate()
        .map(|(fi, vk)| {
            let c = filters.filters[fi].row(channel);
            let c_energy: f64 = c.iter().map(|z| z.norm_sqr()).sum();
            let mismatch: f64 = (0..vk.ncols())
                .map(|q| {
                    let vhc: Complex64 = (0..vk.nrows()).map(|m| vk[[m, q]].conj() * c[m]).sum();
                    (vhc - y[q]).norm_sqr()
                })
                .sum();
            (mismatch + lambda * c_energy) / y_energy
        })
        .collect())
}

/// Per-frequency NMSE for every channel of the bank, shape `frequencies × channels`.
pub fn asm_nmse_table(v: &SteeringMatrix, filters: &AsmFilterBank) -> Result<Array2<f64>> {
    let lambda = regularization(filters.snr_db);
    let mut table = Array2::zeros((v.freqs().len(), filters.channels()));
    for (c, h) in filters.harmonic_set.indices().iter().enumerate() {
        let col = asm_nmse(v, filters, *h, lambda)?;
        table.column_mut(c).assign(&Array1::from(col));
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encodability {
    Pass,
    /// More channels than microphones; some channels will be poorly encoded.
    Warn { channels: usize, mics: usize },
}

/// Channel count versus microphone count. Only advisory: least-squares
/// filters exist either way.
pub fn check_encodability(set: &HarmonicSet, mics: usize) -> Encodability {
    if set.len() <= mics {
        Encodability::Pass
    } else {
        Encodability::Warn {
            channels: set.len(),
            mics,
        }
    }
}

/// Rough upper frequency for alias-free encoding of `order`, `N c / (2π r_max)`.
pub fn spatial_aliasing_frequency(array: &ArrayGeometry, order: u32, speed_of_sound: f64) -> f64 {
    let r = array.aperture_radius();
    if r == 0.0 {
        f64::INFINITY
    } else {
        order.max(1) as f64 * speed_of_sound / (std::f64::consts::TAU * r)
    }
}

/// Free-field design for a geometry on the one-sided STFT grid.
pub fn design_for_array(
    array: &ArrayGeometry,
    set: &HarmonicSet,
    grid: &DirectionGrid,
    freqs: &FrequencyGrid,
    snr_db: f64,
) -> Result<(SteeringMatrix, AsmFilterBank)> {
    let v = crate::steering::free_field_steering(array, grid, freqs);
    let params = AsmDesignParams {
        harmonic_set: set.clone(),
        grid: grid.clone(),
        freqs: freqs.clone(),
        snr_db,
    };
    let bank = asm_design(&v, &params)?;
    Ok((v, bank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_array, full_set, horizontal_subset, CartesianPoint};
    use crate::sh::sh_vector;
    use crate::stft::StftConfig;
    use std::f64::consts::PI;

    fn bins() -> FrequencyGrid {
        FrequencyGrid::dft_bins(512, 16000.0, 343.0).unwrap()
    }

    /// `‖(V Vᴴ + λI) c − V y‖ / ‖V y‖` with `V y` taken from the product `V Y`.
    fn residual(v: &Array2<Complex64>, y: &Array2<Complex64>, channel: usize, c: &Array1<Complex64>, lambda: f64) -> f64 {
        let mut a = v.dot(&hermitian_transpose(v));
        for i in 0..a.nrows() {
            a[[i, i]] += lambda;
        }
        let rhs = v.dot(y).column(channel).to_owned();
        let num: f64 = (&a.dot(c) - &rhs).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let den: f64 = rhs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn single_omni_mic_scalar_solution() {
        let arr = ArrayGeometry::new("omni", vec![CartesianPoint::ORIGIN], 0).unwrap();
        let grid = DirectionGrid::horizontal(36);
        let freqs = FrequencyGrid::new(vec![0.0, 1000.0], 343.0).unwrap();
        let lambda: f64 = 0.5;
        let snr = -10.0 * lambda.log10();
        let (_, bank) = design_for_array(&arr, &full_set(0), &grid, &freqs, snr).unwrap();
        let q = 36.0;
        let want = q / (q + lambda) / (4.0 * PI).sqrt();
        for fi in 0..2 {
            let c = bank.filter(fi, 0)[0];
            assert!((c.re - want).abs() < 1e-12 && c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn heavy_regularization_gives_vanishing_filters() {
        let arr = builtin_array("full_circle_r10").unwrap();
        let (_, bank) =
            design_for_array(&arr, &horizontal_subset(2), &DirectionGrid::horizontal(90), &bins(), -200.0)
                .unwrap();
        let max = bank.filters().iter().flat_map(|f| f.iter()).map(|z| z.norm()).fold(0.0, f64::max);
        assert!(max < 1e-15);
    }

    #[test]
    fn normal_equations_hold() {
        let arr = builtin_array("full_circle_r10").unwrap();
        let grid = DirectionGrid::horizontal(360);
        let (v, bank) = design_for_array(&arr, &horizontal_subset(2), &grid, &bins(), 30.0).unwrap();
        let y = sh_matrix(&horizontal_subset(2), &grid).unwrap();
        for fi in 0..257 {
            for c in 0..5 {
                let r = residual(v.at(fi), &y, c, &bank.filter(fi, c), 1e-3);
                assert!(r < 1e-8, "bin {fi} channel {c}: {r}");
            }
        }
    }

    #[test]
    fn unregularized_singular_dc_is_reported() {
        let arr = builtin_array("ula_x").unwrap();
        let grid = DirectionGrid::horizontal(36);
        let freqs = FrequencyGrid::new(vec![0.0, 500.0], 343.0).unwrap();
        let v = crate::steering::free_field_steering(&arr, &grid, &freqs);
        let params = AsmDesignParams {
            harmonic_set: full_set(0),
            grid,
            freqs,
            snr_db: f64::INFINITY,
        };
        match asm_design(&v, &params) {
            Err(Error::Solver(failed)) => {
                assert_eq!(failed[0], (0, 0.0));
            }
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn square_invertible_steering_interpolates_exactly() {
        // 3 mics, 3 directions: V is square and generically invertible
        let arr = ArrayGeometry::new(
            "tri",
            vec![
                CartesianPoint::new(0.05, 0.0, 0.0),
                CartesianPoint::new(-0.02, 0.04, 0.0),
                CartesianPoint::new(-0.03, -0.05, 0.0),
            ],
            0,
        )
        .unwrap();
        let grid = DirectionGrid::horizontal(3);
        let freqs = FrequencyGrid::new(vec![2000.0], 343.0).unwrap();
        let v = crate::steering::free_field_steering(&arr, &grid, &freqs);
        let params = AsmDesignParams {
            harmonic_set: horizontal_subset(1),
            grid,
            freqs,
            snr_db: f64::INFINITY,
        };
        let bank = asm_design(&v, &params).unwrap();
        for h in horizontal_subset(1).indices() {
            let e = asm_nmse(&v, &bank, *h, 0.0).unwrap()[0];
            assert!(e < 1e-20, "{h}: {e}");
        }
    }

    #[test]
    fn zero_filters_have_unit_nmse() {
        let arr = builtin_array("random1").unwrap();
        let grid = DirectionGrid::horizontal(72);
        let freqs = FrequencyGrid::new(vec![100.0, 900.0], 343.0).unwrap();
        let v = crate::steering::free_field_steering(&arr, &grid, &freqs);
        let set = horizontal_subset(2);
        let zero = AsmFilterBank::from_parts("z", set.clone(), freqs, 30.0, vec![Array2::zeros((5, 5)); 2]).unwrap();
        for h in set.indices() {
            for e in asm_nmse(&v, &zero, *h, 1e-3).unwrap() {
                assert!((e - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn designed_filters_are_local_minima() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let grid = DirectionGrid::horizontal(120);
        let freqs = FrequencyGrid::new(vec![300.0, 1500.0, 3000.0], 343.0).unwrap();
        for name in ["random2", "ula_y"] {
            let arr = builtin_array(name).unwrap();
            let (v, bank) = design_for_array(&arr, &horizontal_subset(2), &grid, &freqs, 30.0).unwrap();
            for (c, h) in horizontal_subset(2).indices().iter().enumerate() {
                let base = asm_nmse(&v, &bank, *h, 1e-3).unwrap();
                for _ in 0..100 {
                    let mut filters = bank.filters().to_vec();
                    for f in filters.iter_mut() {
                        let mut row = f.row_mut(c);
                        let norm: f64 = row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                        let delta: Vec<Complex64> = (0..row.len())
                            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                            .collect();
                        let dn: f64 = delta.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                        for (x, d) in row.iter_mut().zip(&delta) {
                            *x += d * (1e-3 * norm / dn);
                        }
                    }
                    let perturbed = AsmFilterBank::from_parts(name, bank.harmonic_set().clone(), freqs.clone(), 30.0, filters).unwrap();
                    let e = asm_nmse(&v, &perturbed, *h, 1e-3).unwrap();
                    for (a, b) in base.iter().zip(&e) {
                        assert!(b >= a, "{name} {h}: {b} < {a}");
                    }
                }
            }
        }
    }

    #[test]
    fn vanishing_regularization_approaches_pseudoinverse() {
        let arr = builtin_array("random3").unwrap();
        let grid = DirectionGrid::horizontal(60);
        let freqs = FrequencyGrid::new(vec![2500.0], 343.0).unwrap();
        let set = horizontal_subset(2);
        let exact = design_for_array(&arr, &set, &grid, &freqs, f64::INFINITY).unwrap().1;
        let mut last = f64::INFINITY;
        for snr in [20.0, 40.0, 60.0, 80.0] {
            let b = design_for_array(&arr, &set, &grid, &freqs, snr).unwrap().1;
            let diff: f64 = (&b.filters()[0] - &exact.filters()[0]).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(diff < last);
            last = diff;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn suppressed_channels_have_low_output_power() {
        // For the optimal filter, output power / ‖y‖² equals 1 - NMSE.
        let arr = builtin_array("ula_y").unwrap();
        let grid = DirectionGrid::horizontal(360);
        let (v, bank) = design_for_array(&arr, &horizontal_subset(2), &grid, &bins(), 30.0).unwrap();
        let y = sh_matrix(&horizontal_subset(2), &grid).unwrap();
        let mut seen = 0;
        for (c, h) in horizontal_subset(2).indices().iter().enumerate() {
            let nmse = asm_nmse(&v, &bank, *h, 1e-3).unwrap();
            let ye: f64 = y.column(c).iter().map(|z| z.norm_sqr()).sum();
            for (fi, e) in nmse.iter().enumerate() {
                let cf = bank.filter(fi, c);
                let vhc = hermitian_transpose(v.at(fi)).dot(&cf);
                let power = (vhc.iter().map(|z| z.norm_sqr()).sum::<f64>()
                    + 1e-3 * cf.iter().map(|z| z.norm_sqr()).sum::<f64>())
                    / ye;
                assert!((power + e - 1.0).abs() < 1e-8);
                if *e > 0.5 {
                    seen += 1;
                    assert!(power < 0.5);
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn subset_design_equals_selected_superset() {
        let arr = builtin_array("semi_circle_r10").unwrap();
        let grid = DirectionGrid::horizontal(90);
        let freqs = FrequencyGrid::new(vec![400.0, 2000.0], 343.0).unwrap();
        let (_, full) = design_for_array(&arr, &full_set(2), &grid, &freqs, 30.0).unwrap();
        let (_, sub) = design_for_array(&arr, &horizontal_subset(2), &grid, &freqs, 30.0).unwrap();
        let picked = full.select(&horizontal_subset(2)).unwrap();
        for (a, b) in picked.filters().iter().zip(sub.filters()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_identity_zero_and_alignment() {
        let cfg = StftConfig { window_len: 8, hop: 4, fft_size: 8, ..StftConfig::default() };
        let freqs = FrequencyGrid::dft_bins(8, cfg.sample_rate, 343.0).unwrap();
        let set = horizontal_subset(1);
        let mut data = Array3::zeros((3, 2, 5));
        for (i, v) in data.iter_mut().enumerate() {
            *v = Complex64::new(i as f64, -(i as f64) * 0.5);
        }
        let tf = TimeFreqTensor::new(data.clone(), cfg).unwrap();
        // rows pick mics 2, 0, 1
        let perm = Array2::from_shape_fn((3, 3), |(c, m)| {
            if [2, 0, 1][c] == m { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) }
        });
        let bank = AsmFilterBank::from_parts("p", set.clone(), freqs.clone(), 30.0, vec![perm; 5]).unwrap();
        let out = asm_apply(&bank, &tf).unwrap();
        for (c, m) in [2, 0, 1].into_iter().enumerate() {
            assert_eq!(out.channel(c), data.index_axis(Axis(0), m));
        }
        let zero = AsmFilterBank::from_parts("z", set.clone(), freqs, 30.0, vec![Array2::zeros((3, 3)); 5]).unwrap();
        assert!(asm_apply(&zero, &tf).unwrap().data().iter().all(|z| z.norm() == 0.0));

        let shifted = FrequencyGrid::new((0..5).map(|k| k as f64 * 1000.0 + 1.0).collect(), 343.0).unwrap();
        let bad = AsmFilterBank::from_parts("s", set, shifted, 30.0, vec![Array2::zeros((3, 3)); 5]).unwrap();
        assert!(matches!(asm_apply(&bad, &tf), Err(Error::Alignment(_))));
    }

    #[test]
    fn encodability() {
        assert_eq!(check_encodability(&full_set(2), 5), Encodability::Warn { channels: 9, mics: 5 });
        assert_eq!(check_encodability(&horizontal_subset(2), 5), Encodability::Pass);
        assert_eq!(check_encodability(&full_set(1), 4), Encodability::Pass);
    }

    #[test]
    fn filter_bank_container_round_trip() {
        let arr = builtin_array("plus_shape").unwrap();
        let (_, bank) = design_for_array(&arr, &horizontal_subset(2), &DirectionGrid::horizontal(72), &bins(), 30.0).unwrap();
        let bytes = bank.to_bytes();
        let back = AsmFilterBank::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.harmonic_set(), bank.harmonic_set());
        assert!(AsmFilterBank::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn sh_vector_matches_matrix_column() {
        let grid = DirectionGrid::horizontal(4);
        let y = sh_matrix(&horizontal_subset(2), &grid).unwrap();
        let row = sh_vector(&horizontal_subset(2), grid.directions()[1]).unwrap();
        assert_eq!(y.row(1).to_vec(), row);
    }
}
