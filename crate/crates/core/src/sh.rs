//! Complex orthonormal spherical harmonics and ideal plane-wave Ambisonics encoding.
//!
//! `Y_n^m(θ,φ) = N_n^m P_n^m(cos θ) e^{imφ}` with the Condon–Shortley phase
//! included in `P_n^m`, so that `Y_n^{-m} = (-1)^m conj(Y_n^m)` and the
//! functions are orthonormal over the unit sphere.
//!
//! Ambisonics signals built from complex harmonics are complex in the time
//! domain. For fields produced by real pressure signals the pair `(n, ±m)`
//! is redundant, so on disk and in WAV files a mirror-closed set is stored
//! in a *real packing*: the slot of `(n, +m)` carries `Re a_{n,m}` and the
//! slot of `(n, -m)` carries `Im a_{n,m}` (`m > 0`); `m = 0` channels are
//! real already. See [`pack_time`], [`pack_spectra`] and [`unpack_spectra`].

use std::f64::consts::{PI, TAU};

use ndarray::Array3;
use num_complex::Complex64;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{HarmonicIndex, HarmonicSet, SphericalDirection};

/// Highest order accepted by [`sh_eval`].
pub const MAX_ORDER: u32 = 30;

/// Orthonormalized associated Legendre values `N_n^m P_n^m(x)` for `0 <= m <= n <= order`,
/// indexed `[n][m]`, Condon–Shortley phase included.
fn normalized_legendre(order: usize, x: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    p[0][0] = (1.0 / (4.0 * PI)).sqrt();
    for m in 1..=order {
        let mf = m as f64;
        p[m][m] = -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[m - 1][m - 1];
    }
    for m in 0..order {
        let mf = m as f64;
        p[m + 1][m] = (2.0 * mf + 3.0).sqrt() * x * p[m][m];
    }
    for m in 0..=order {
        let mf = m as f64;
        for n in m + 2..=order {
            let nf = n as f64;
            let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf * mf)).sqrt();
            let b = (((nf - 1.0) * (nf - 1.0) - mf * mf) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0))
                .sqrt();
            p[n][m] = a * (x * p[n - 1][m] - b * p[n - 2][m]);
        }
    }
    p
}

fn check_order(n: u32) -> Result<()> {
    if n > MAX_ORDER {
        Err(Error::UnsupportedOrder(n))
    } else {
        Ok(())
    }
}

fn combine(plm: f64, m: i32, phi: f64) -> Complex64 {
    let y = Complex64::from_polar(plm, m.unsigned_abs() as f64 * phi);
    if m < 0 {
        // Y_n^{-m} = (-1)^m conj(Y_n^m)
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        y.conj() * sign
    } else {
        y
    }
}

/// Evaluates one complex spherical harmonic.
pub fn sh_eval(idx: HarmonicIndex, dir: SphericalDirection) -> Result<Complex64> {
    check_order(idx.n)?;
    let n = idx.n as usize;
    let p = normalized_legendre(n, dir.theta.cos());
    Ok(combine(p[n][idx.m.unsigned_abs() as usize], idx.m, dir.phi))
}

/// Evaluates every harmonic of `set` at one direction (one row of the SH matrix).
pub fn sh_vector(set: &HarmonicSet, dir: SphericalDirection) -> Result<Vec<Complex64>> {
    check_order(set.max_order())?;
    let p = normalized_legendre(set.max_order() as usize, dir.theta.cos());
    Ok(set
        .indices()
        .iter()
        .map(|h| combine(p[h.n as usize][h.m.unsigned_abs() as usize], h.m, dir.phi))
        .collect())
}

/// Set of plane-wave directions with optional quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrid {
    directions: Vec<SphericalDirection>,
    weights: Option<Vec<f64>>,
}

impl DirectionGrid {
    pub fn new(directions: Vec<SphericalDirection>, weights: Option<Vec<f64>>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Domain("direction grid is empty".into()));
        }
        if let Some(w) = &weights {
            if w.len() != directions.len() {
                return Err(Error::Shape(format!(
                    "{} weights for {} directions",
                    w.len(),
                    directions.len()
                )));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Domain("quadrature weights must be positive".into()));
            }
        }
        Ok(Self {
            directions,
            weights,
        })
    }

    /// `count` equally spaced azimuths on the horizon, weights summing to 2π.
    pub fn horizontal(count: usize) -> Self {
        let count = count.max(1);
        let step = TAU / count as f64;
        Self {
            directions: (0..count)
                .map(|q| SphericalDirection::horizontal(q as f64 * step))
                .collect(),
            weights: Some(vec![step; count]),
        }
    }

    /// Gauss–Legendre nodes in `cos θ` times uniform azimuths; weights sum to 4π.
    /// Integrates band-limited functions of order `< min(n_theta, n_phi / 2)` exactly.
    pub fn gauss_sphere(n_theta: usize, n_phi: usize) -> Self {
        let (nodes, gw) = gauss_legendre(n_theta.max(1));
        let n_phi = n_phi.max(1);
        let dphi = TAU / n_phi as f64;
        let mut directions = Vec::with_capacity(nodes.len() * n_phi);
        let mut weights = Vec::with_capacity(nodes.len() * n_phi);
        for (x, w) in nodes.iter().zip(&gw) {
            let theta = x.clamp(-1.0, 1.0).acos();
            for j in 0..n_phi {
                directions.push(SphericalDirection {
                    theta,
                    phi: j as f64 * dphi,
                });
                weights.push(w * dphi);
            }
        }
        Self {
            directions,
            weights: Some(weights),
        }
    }

    pub fn directions(&self) -> &[SphericalDirection] {
        &self.directions
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 0 { 0.0 } else { p0 };
            dp = nf * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// SH matrix with entry `(q, c) = Y_{n_c}^{m_c}(Ω_q)`.
pub fn sh_matrix(set: &HarmonicSet, grid: &DirectionGrid) -> Result<Array2<Complex64>> {
    let mut y = Array2::zeros((grid.len(), set.len()));
    for (q, dir) in grid.directions().iter().enumerate() {
        for (c, v) in sh_vector(set, *dir)?.into_iter().enumerate() {
            y[[q, c]] = v;
        }
    }
    Ok(y)
}

/// Far-field plane wave: amplitude at the origin over time, arriving from `direction`.
#[derive(Debug, Clone)]
pub struct PlaneWave {
    pub direction: SphericalDirection,
    pub signal: Vec<f64>,
}

/// Ideal Ambisonics encoding `a_c(t) = Σ_q conj(Y_c(Ω_q)) s_q(t)`.
/// Returns one complex signal of length `len` per harmonic in `set`.
pub fn ideal_encode(
    sources: &[PlaneWave],
    set: &HarmonicSet,
    len: usize,
) -> Result<Vec<Vec<Complex64>>> {
    let mut out = vec![vec![Complex64::new(0.0, 0.0); len]; set.len()];
    for (q, src) in sources.iter().enumerate() {
        if src.signal.len() != len {
            return Err(Error::Shape(format!(
                "plane wave {q} has {} samples, expected {len}",
                src.signal.len()
            )));
        }
        let y = sh_vector(set, src.direction)?;
        for (ch, yc) in out.iter_mut().zip(&y) {
            let g = yc.conj();
            for (o, &s) in ch.iter_mut().zip(&src.signal) {
                *o += g * s;
            }
        }
    }
    Ok(out)
}

fn require_mirror_closed(set: &HarmonicSet) -> Result<()> {
    if set.is_mirror_closed() {
        Ok(())
    } else {
        Err(Error::Domain(
            "real packing needs every (n,m) paired with (n,-m)".into(),
        ))
    }
}

fn parity(m: i32) -> f64 {
    if m % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Real packing of complex Ambisonics time signals (see module docs).
pub fn pack_time(set: &HarmonicSet, channels: &[Vec<Complex64>]) -> Result<Vec<Vec<f64>>> {
    require_mirror_closed(set)?;
    if channels.len() != set.len() {
        return Err(Error::Shape(format!(
            "{} channels for a {}-channel set",
            channels.len(),
            set.len()
        )));
    }
    let mut out = Vec::with_capacity(set.len());
    for h in set.indices() {
        let source = &channels[set.position(HarmonicIndex { n: h.n, m: h.m.abs() }).unwrap()];
        out.push(if h.m >= 0 {
            source.iter().map(|z| z.re).collect()
        } else {
            source.iter().map(|z| z.im).collect()
        });
    }
    Ok(out)
}

/// Converts one-sided spectra of complex Ambisonics channels (channel axis first)
/// into the one-sided spectra of their real packing.
pub fn pack_spectra(set: &HarmonicSet, spectra: &Array3<Complex64>) -> Result<Array3<Complex64>> {
    require_mirror_closed(set)?;
    if spectra.shape()[0] != set.len() {
        return Err(Error::Shape("channel count differs from harmonic set".into()));
    }
    let mut out = spectra.clone();
    let half_i = Complex64::new(0.0, 0.5);
    for (c, h) in set.indices().iter().enumerate() {
        if h.m == 0 {
            continue;
        }
        let m = h.m.abs();
        let pos = set.position(HarmonicIndex { n: h.n, m }).unwrap();
        let neg = set.position(HarmonicIndex { n: h.n, m: -m }).unwrap();
        let sign = parity(m);
        let a_pos = spectra.index_axis(ndarray::Axis(0), pos);
        let a_neg = spectra.index_axis(ndarray::Axis(0), neg);
        let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
        if h.m > 0 {
            ndarray::Zip::from(&mut dst)
                .and(&a_pos)
                .and(&a_neg)
                .for_each(|d, &p, &q| *d = (p + q * sign) * 0.5);
        } else {
            ndarray::Zip::from(&mut dst)
                .and(&a_pos)
                .and(&a_neg)
                .for_each(|d, &p, &q| *d = -(p - q * sign) * half_i);
        }
    }
    Ok(out)
}

/// Inverse of [`pack_spectra`]: one-sided spectra of packed real channels back
/// to the positive-frequency spectra of the complex Ambisonics channels.
pub fn unpack_spectra(set: &HarmonicSet, packed: &Array3<Complex64>) -> Result<Array3<Complex64>> {
    require_mirror_closed(set)?;
    if packed.shape()[0] != set.len() {
        return Err(Error::Shape("channel count differs from harmonic set".into()));
    }
    let mut out = packed.clone();
    let i = Complex64::new(0.0, 1.0);
    for (c, h) in set.indices().iter().enumerate() {
        if h.m == 0 {
            continue;
        }
        let m = h.m.abs();
        let re = packed.index_axis(ndarray::Axis(0), set.position(HarmonicIndex { n: h.n, m }).unwrap());
        let im = packed.index_axis(
            ndarray::Axis(0),
            set.position(HarmonicIndex { n: h.n, m: -m }).unwrap(),
        );
        let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
        if h.m > 0 {
            ndarray::Zip::from(&mut dst)
                .and(&re)
                .and(&im)
                .for_each(|d, &r, &q| *d = r + i * q);
        } else {
            let sign = parity(m);
            ndarray::Zip::from(&mut dst)
                .and(&re)
                .and(&im)
                .for_each(|d, &r, &q| *d = (r - i * q) * sign);
        }
    }
    Ok(out)
}
