//! Array steering matrices `V(k)` (M mics × Q plane waves per frequency).
//!
//! Phase convention: a plane wave arriving from unit direction `û` reaches a
//! microphone at `r` with transfer `e^{+i k r·û}` relative to the origin, i.e.
//! mics closer to the source lead in phase. Scene rendering and filter design
//! both rely on this sign.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, SphericalDirection};
use crate::sh::DirectionGrid;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

pub const STEERING_MAGIC: &[u8; 5] = b"ASMV1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    frequencies: Vec<f64>,
    speed_of_sound: f64,
}

impl FrequencyGrid {
    pub fn new(frequencies: Vec<f64>, speed_of_sound: f64) -> Result<Self> {
        if !(speed_of_sound > 0.0 && speed_of_sound.is_finite()) {
            return Err(Error::Domain(format!("speed of sound {speed_of_sound}")));
        }
        if frequencies.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Domain("frequencies must be finite and non-negative".into()));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("frequencies must be strictly ascending".into()));
        }
        Ok(Self {
            frequencies,
            speed_of_sound,
        })
    }

    /// One-sided DFT bin centers `k·fs/fft_size`, `k = 0..=fft_size/2`.
    pub fn dft_bins(fft_size: usize, sample_rate: f64, speed_of_sound: f64) -> Result<Self> {
        let df = sample_rate / fft_size as f64;
        Self::new(
            (0..=fft_size / 2).map(|k| k as f64 * df).collect(),
            speed_of_sound,
        )
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn wavenumber(&self, i: usize) -> f64 {
        TAU * self.frequencies[i] / self.speed_of_sound
    }

    /// True when both grids list the same frequencies to within `tol` Hz.
    pub fn aligned_with(&self, other: &FrequencyGrid, tol: f64) -> bool {
        self.len() == other.len()
            && self
                .frequencies
                .iter()
                .zip(&other.frequencies)
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringMatrix {
    array_name: String,
    array: Option<ArrayGeometry>,
    grid: DirectionGrid,
    freqs: FrequencyGrid,
    /// One `M × Q` matrix per frequency.
    matrices: Vec<Array2<Complex64>>,
}

impl SteeringMatrix {
    pub fn from_parts(
        array_name: impl Into<String>,
        array: Option<ArrayGeometry>,
        grid: DirectionGrid,
        freqs: FrequencyGrid,
        matrices: Vec<Array2<Complex64>>,
    ) -> Result<Self> {
        if matrices.len() != freqs.len() {
            return Err(Error::Shape(format!(
                "{} matrices for {} frequencies",
                matrices.len(),
                freqs.len()
            )));
        }
        let m = match &array {
            Some(a) => a.len(),
            None => matrices.first().map_or(0, |v| v.nrows()),
        };
        for (i, v) in matrices.iter().enumerate() {
            if v.dim() != (m, grid.len()) {
                return Err(Error::Shape(format!(
                    "matrix {i} is {:?}, expected ({m}, {})",
                    v.dim(),
                    grid.len()
                )));
            }
            if v.iter().any(|z| !z.is_finite()) {
                return Err(Error::Domain(format!("non-finite steering entry at bin {i}")));
            }
        }
        Ok(Self {
            array_name: array_name.into(),
            array,
            grid,
            freqs,
            matrices,
        })
    }

    pub fn array_name(&self) -> &str {
        &self.array_name
    }

    pub fn array(&self) -> Option<&ArrayGeometry> {
        self.array.as_ref()
    }

    pub fn grid(&self) -> &DirectionGrid {
        &self.grid
    }

    pub fn freqs(&self) -> &FrequencyGrid {
        &self.freqs
    }

    pub fn matrices(&self) -> &[Array2<Complex64>] {
        &self.matrices
    }

    pub fn at(&self, bin: usize) -> &Array2<Complex64> {
        &self.matrices[bin]
    }

    pub fn mic_count(&self) -> usize {
        self.matrices.first().map_or(0, |v| v.nrows())
    }

    /// Linearly interpolates every complex entry onto `target`. Frequencies
    /// outside the source range take the nearest endpoint value.
    pub fn resample(&self, target: &FrequencyGrid) -> Result<Self> {
        let src = self.freqs.frequencies();
        let matrices = target
            .frequencies()
            .iter()
            .map(|&f| {
                let j = src.partition_point(|&x| x < f);
                if j == 0 {
                    self.matrices[0].clone()
                } else if j >= src.len() {
                    self.matrices[src.len() - 1].clone()
                } else {
                    let t = (f - src[j - 1]) / (src[j] - src[j - 1]);
                    &self.matrices[j - 1] * Complex64::from(1.0 - t) + &self.matrices[j] * Complex64::from(t)
                }
            })
            .collect();
        Self::from_parts(
            self.array_name.clone(),
            self.array.clone(),
            self.grid.clone(),
            target.clone(),
            matrices,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SteeringHeader {
            m: self.mic_count(),
            q: self.grid.len(),
            f: self.freqs.len(),
            frequencies: self.freqs.frequencies().to_vec(),
            directions: self
                .grid
                .directions()
                .iter()
                .map(|d| [d.theta, d.phi])
                .collect(),
            array_name: self.array_name.clone(),
            speed_of_sound: Some(self.freqs.speed_of_sound()),
        };
        let mut payload = Vec::with_capacity(2 * header.m * header.q * header.f);
        for v in &self.matrices {
            for z in v.iter() {
                container::push_complex(&mut payload, *z);
            }
        }
        container::encode(STEERING_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, values) = container::decode::<SteeringHeader>(STEERING_MAGIC, bytes, |h| {
            if h.frequencies.len() != h.f || h.directions.len() != h.q {
                return Err(Error::Format(format!(
                    "header lists {} frequencies / {} directions, declares F={} Q={}",
                    h.frequencies.len(),
                    h.directions.len(),
                    h.f,
                    h.q
                )));
            }
            Ok(2 * h.f * h.m * h.q)
        })?;
        let directions = h
            .directions
            .iter()
            .map(|&[t, p]| SphericalDirection::new(t, p))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let grid = DirectionGrid::new(directions, None).map_err(|e| Error::Format(e.to_string()))?;
        let freqs = FrequencyGrid::new(
            h.frequencies,
            h.speed_of_sound.unwrap_or(DEFAULT_SPEED_OF_SOUND),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let block = h.m * h.q;
        let matrices = (0..h.f)
            .map(|fi| {
                Array2::from_shape_fn((h.m, h.q), |(m, q)| {
                    container::complex_at(&values, fi * block + m * h.q + q)
                })
            })
            .collect();
        Self::from_parts(h.array_name, None, grid, freqs, matrices)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SteeringHeader {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "Q")]
    q: usize,
    #[serde(rename = "F")]
    f: usize,
    frequencies: Vec<f64>,
    /// `[theta, phi]` pairs in radians.
    directions: Vec<[f64; 2]>,
    array_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speed_of_sound: Option<f64>,
}

/// Free-field omnidirectional steering: `V[m,q] = e^{i k r_m·û_q}`.
pub fn free_field_steering(
    array: &ArrayGeometry,
    grid: &DirectionGrid,
    freqs: &FrequencyGrid,
) -> SteeringMatrix {
    // path-length projections r_m·û_q are frequency independent
    let proj = Array2::from_shape_fn((array.len(), grid.len()), |(m, q)| {
        array.mics()[m].dot(&grid.directions()[q].unit_vector())
    });
    let matrices = (0..freqs.len())
        .into_par_iter()
        .map(|i| {
            let k = freqs.wavenumber(i);
            proj.mapv(|d| Complex64::from_polar(1.0, k * d))
        })
        .collect();
    SteeringMatrix {
        array_name: array.name().to_string(),
        array: Some(array.clone()),
        grid: grid.clone(),
        freqs: freqs.clone(),
        matrices,
    }
}

pub fn import_measured_steering(path: &Path) -> Result<SteeringMatrix> {
    SteeringMatrix::from_bytes(&container::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{builtin_array, CartesianPoint};
    use proptest::prelude::*;

    fn single(p: CartesianPoint) -> ArrayGeometry {
        ArrayGeometry::new("one", vec![p], 0).unwrap()
    }

    #[test]
    fn origin_mic_and_dc_are_all_ones() {
        let grid = DirectionGrid::horizontal(12);
        let freqs = FrequencyGrid::new(vec![0.0, 500.0, 4000.0], 343.0).unwrap();
        let v = free_field_steering(&single(CartesianPoint::ORIGIN), &grid, &freqs);
        assert!(v.matrices().iter().flat_map(|m| m.iter()).all(|z| *z == Complex64::new(1.0, 0.0)));

        let arr = builtin_array("random2").unwrap();
        let v = free_field_steering(&arr, &grid, &freqs);
        assert!(v.at(0).iter().all(|z| *z == Complex64::new(1.0, 0.0)));
        assert!(v.at(2).iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn on_axis_phase() {
        let grid = DirectionGrid::new(vec![SphericalDirection::horizontal(0.0)], None).unwrap();
        let freqs = FrequencyGrid::new(vec![343.0], 343.0).unwrap();
        let v = free_field_steering(&single(CartesianPoint::new(0.1, 0.0, 0.0)), &grid, &freqs);
        let z = v.at(0)[[0, 0]];
        assert!((z.arg() - 0.628_318_530_717_958_6).abs() < 1e-12);
    }

    #[test]
    fn doubling_position_squares_phase() {
        let grid = DirectionGrid::gauss_sphere(5, 8);
        let freqs = FrequencyGrid::new(vec![250.0, 1700.0], 343.0).unwrap();
        let p = CartesianPoint::new(0.031, -0.047, 0.012);
        let a = free_field_steering(&single(p), &grid, &freqs);
        let b = free_field_steering(&single(p.scale(2.0)), &grid, &freqs);
        for (x, y) in a.matrices().iter().zip(b.matrices()) {
            for (u, w) in x.iter().zip(y.iter()) {
                assert!((u * u - w).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_through_container() {
        let arr = builtin_array("x_shape").unwrap();
        let grid = DirectionGrid::horizontal(72);
        let freqs = FrequencyGrid::dft_bins(512, 16000.0, 343.0).unwrap();
        let v = free_field_steering(&arr, &grid, &freqs);
        let bytes = v.to_bytes();
        let back = SteeringMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.mic_count(), 5);
        assert_eq!(back.grid().len(), 72);
        assert_eq!(back.freqs().len(), 257);
        for (x, y) in v.matrices().iter().zip(back.matrices()) {
            for (u, w) in x.iter().zip(y.iter()) {
                assert_eq!(f64::from(u.re as f32), w.re);
                assert_eq!(f64::from(u.im as f32), w.im);
            }
        }
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            SteeringMatrix::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn resample_is_identity_on_same_grid() {
        let arr = builtin_array("random4").unwrap();
        let grid = DirectionGrid::horizontal(24);
        let freqs = FrequencyGrid::new(vec![0.0, 100.0, 200.0], 343.0).unwrap();
        let v = free_field_steering(&arr, &grid, &freqs);
        assert_eq!(v.resample(&freqs).unwrap(), v);
        let mid = FrequencyGrid::new(vec![50.0], 343.0).unwrap();
        let r = v.resample(&mid).unwrap();
        let want = (v.at(0)[[1, 3]] + v.at(1)[[1, 3]]) * 0.5;
        assert!((r.at(0)[[1, 3]] - want).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn invariant_to_orthogonal_offsets(
            x in -0.1f64..0.1, y in -0.1f64..0.1, z in -0.1f64..0.1,
            phi in 0.0f64..TAU, shift in -0.2f64..0.2, f in 0.0f64..8000.0,
        ) {
            let dir = SphericalDirection::horizontal(phi);
            let u = dir.unit_vector();
            // any vector in the plane orthogonal to û: vertical axis is one
            let ortho = CartesianPoint::new(-u.y, u.x, 0.0).scale(shift).add(&CartesianPoint::new(0.0, 0.0, shift));
            let grid = DirectionGrid::new(vec![dir], None).unwrap();
            let freqs = FrequencyGrid::new(vec![f], 343.0).unwrap();
            let p = CartesianPoint::new(x, y, z);
            let a = free_field_steering(&single(p), &grid, &freqs);
            let b = free_field_steering(&single(p.add(&ortho)), &grid, &freqs);
            prop_assert!((a.at(0)[[0, 0]] - b.at(0)[[0, 0]]).norm() < 1e-12);
        }
    }
}
