//! Coordinate conventions, harmonic index sets and the built-in planar array catalog.
//!
//! Angles follow the physics convention: `theta` is the *inclination* measured
//! from the +z axis (colatitude, `0..=π`) and `phi` is the azimuth measured
//! counter-clockwise from +x (`0..2π`). Horizontal directions therefore have
//! `theta = π/2`. Some Ambisonics literature calls `theta` "elevation"; it is
//! not an elevation angle above the horizon here.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum allowed spacing between two microphones, in meters.
pub const MIN_MIC_SPACING: f64 = 1e-6;

/// Grid unit of the catalog figures: 1.0 on the drawing equals 0.10 m.
const CATALOG_UNIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalDirection {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalDirection {
    /// Builds a direction, normalizing `phi` into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() || !(0.0..=PI).contains(&theta) {
            return Err(Error::Domain(format!(
                "inclination {theta} outside [0, π] or non-finite azimuth {phi}"
            )));
        }
        Ok(Self {
            theta,
            phi: normalize_azimuth(phi),
        })
    }

    /// Direction on the horizontal plane (`theta = π/2`).
    pub fn horizontal(phi: f64) -> Self {
        Self {
            theta: PI / 2.0,
            phi: normalize_azimuth(phi),
        }
    }

    /// Unit vector pointing from the origin toward this direction.
    pub fn unit_vector(&self) -> CartesianPoint {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        CartesianPoint::new(st * cp, st * sp, ct)
    }
}

fn normalize_azimuth(phi: f64) -> f64 {
    let p = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if p >= TAU {
        0.0
    } else {
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub const ORIGIN: CartesianPoint = CartesianPoint {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_spherical(radius: f64, dir: SphericalDirection) -> Self {
        dir.unit_vector().scale(radius)
    }

    /// Returns `(radius, direction)`. The origin maps to radius 0 pointing at +z.
    pub fn to_spherical(&self) -> (f64, SphericalDirection) {
        let r = self.norm();
        if r == 0.0 {
            return (0.0, SphericalDirection { theta: 0.0, phi: 0.0 });
        }
        let theta = (self.z / r).clamp(-1.0, 1.0).acos();
        let phi = normalize_azimuth(self.y.atan2(self.x));
        (r, SphericalDirection { theta, phi })
    }

    pub fn dot(&self, other: &CartesianPoint) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn add(&self, o: &CartesianPoint) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &CartesianPoint) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn distance(&self, o: &CartesianPoint) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for CartesianPoint {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<CartesianPoint> for [f64; 3] {
    fn from(p: CartesianPoint) -> Self {
        p.to_array()
    }
}

/// Named microphone layout. Positions are relative to the array center, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArrayGeometryDoc", into = "ArrayGeometryDoc")]
pub struct ArrayGeometry {
    name: String,
    mics: Vec<CartesianPoint>,
    reference_index: usize,
}

#[derive(Serialize, Deserialize)]
struct ArrayGeometryDoc {
    name: String,
    mics: Vec<[f64; 3]>,
    #[serde(default)]
    reference_index: usize,
}

impl TryFrom<ArrayGeometryDoc> for ArrayGeometry {
    type Error = Error;

    fn try_from(doc: ArrayGeometryDoc) -> Result<Self> {
        ArrayGeometry::new(
            doc.name,
            doc.mics.into_iter().map(CartesianPoint::from).collect(),
            doc.reference_index,
        )
    }
}

impl From<ArrayGeometry> for ArrayGeometryDoc {
    fn from(a: ArrayGeometry) -> Self {
        Self {
            name: a.name,
            mics: a.mics.into_iter().map(CartesianPoint::to_array).collect(),
            reference_index: a.reference_index,
        }
    }
}

impl ArrayGeometry {
    pub fn new(
        name: impl Into<String>,
        mics: Vec<CartesianPoint>,
        reference_index: usize,
    ) -> Result<Self> {
        let name = name.into();
        if mics.is_empty() {
            return Err(Error::Geometry(format!("array `{name}` has no microphones")));
        }
        if reference_index >= mics.len() {
            return Err(Error::Geometry(format!(
                "reference index {reference_index} out of range for {} mics",
                mics.len()
            )));
        }
        if let Some(p) = mics.iter().find(|p| !p.is_finite()) {
            return Err(Error::Geometry(format!("non-finite mic position {p:?}")));
        }
        for i in 0..mics.len() {
            for j in i + 1..mics.len() {
                if mics[i].distance(&mics[j]) < MIN_MIC_SPACING {
                    return Err(Error::Geometry(format!(
                        "mics {i} and {j} of `{name}` coincide"
                    )));
                }
            }
        }
        Ok(Self {
            name,
            mics,
            reference_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mics(&self) -> &[CartesianPoint] {
        &self.mics
    }

    pub fn len(&self) -> usize {
        self.mics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mics.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn with_reference(mut self, index: usize) -> Result<Self> {
        if index >= self.mics.len() {
            return Err(Error::Geometry(format!("reference index {index} out of range")));
        }
        self.reference_index = index;
        Ok(self)
    }

    /// Largest distance of any microphone from the array center.
    pub fn aperture_radius(&self) -> f64 {
        self.mics.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Rotates the layout about +z by `azimuth` radians.
    pub fn rotated(&self, azimuth: f64) -> Self {
        let (s, c) = azimuth.sin_cos();
        let mics = self
            .mics
            .iter()
            .map(|p| CartesianPoint::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z))
            .collect();
        Self {
            name: self.name.clone(),
            mics,
            reference_index: self.reference_index,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }
}

/// Identifiers of the twelve built-in arrays: six training layouts then six test layouts.
pub const CATALOG: [&str; 12] = [
    "full_circle_r10",
    "semi_circle_r5",
    "ula_y",
    "x_shape",
    "random1",
    "random2",
    "full_circle_r5",
    "semi_circle_r10",
    "ula_x",
    "plus_shape",
    "random3",
    "random4",
];

pub fn training_arrays() -> &'static [&'static str] {
    &CATALOG[..6]
}

pub fn test_arrays() -> &'static [&'static str] {
    &CATALOG[6..]
}

fn polar(deg: f64, radius: f64) -> (f64, f64) {
    let a = deg.to_radians();
    (radius * a.cos(), radius * a.sin())
}

/// Looks up a built-in planar 5-mic array. Coordinates are given on the
/// figure grid and scaled by 0.10 m per unit; `z` is exactly zero.
pub fn builtin_array(name: &str) -> Result<ArrayGeometry> {
    let grid: Vec<(f64, f64)> = match name {
        "full_circle_r10" => [0.0, 72.0, 144.0, 216.0, 288.0]
            .iter()
            .map(|&d| polar(d, 1.0))
            .collect(),
        "semi_circle_r5" => vec![
            (0.0, -0.5),
            (0.354, -0.354),
            (0.5, 0.0),
            (0.354, 0.354),
            (0.0, 0.5),
        ],
        "ula_y" => vec![(0.0, -1.0), (0.0, -0.5), (0.0, 0.0), (0.0, 0.5), (0.0, 1.0)],
        "x_shape" => std::iter::once((0.0, 0.0))
            .chain([45.0, 135.0, 225.0, 315.0].iter().map(|&d| polar(d, 1.0)))
            .collect(),
        "random1" => vec![
            (0.454, -0.096),
            (-0.363, -0.354),
            (-0.167, 0.299),
            (0.452, 0.478),
            (0.740, 0.362),
        ],
        "random2" => vec![
            (0.093, 0.805),
            (0.726, -0.539),
            (-0.4, 0.793),
            (0.496, 0.402),
            (-0.187, 0.327),
        ],
        "full_circle_r5" => [0.0, 72.0, 144.0, 216.0, 288.0]
            .iter()
            .map(|&d| polar(d, 0.5))
            .collect(),
        "semi_circle_r10" => vec![
            (0.0, -1.0),
            (0.707, -0.707),
            (1.0, 0.0),
            (0.707, 0.707),
            (0.0, 1.0),
        ],
        "ula_x" => vec![(-1.0, 0.0), (-0.5, 0.0), (0.0, 0.0), (0.5, 0.0), (1.0, 0.0)],
        "plus_shape" => vec![(0.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0)],
        "random3" => vec![
            (0.222, 0.542),
            (-0.916, 0.012),
            (-0.329, 0.023),
            (-0.082, 0.411),
            (0.610, -0.247),
        ],
        "random4" => vec![
            (0.906, -0.037),
            (0.757, -0.342),
            (-0.825, -0.061),
            (-0.609, -0.635),
            (0.398, 0.087),
        ],
        other => return Err(Error::UnknownArray(other.to_string())),
    };
    let mics = grid
        .into_iter()
        .map(|(x, y)| CartesianPoint::new(x * CATALOG_UNIT, y * CATALOG_UNIT, 0.0))
        .collect();
    ArrayGeometry::new(name, mics, 0)
}

/// Spherical-harmonic order `n` and degree `m`, `|m| <= n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HarmonicIndex {
    pub n: u32,
    pub m: i32,
}

impl HarmonicIndex {
    pub fn new(n: u32, m: i32) -> Result<Self> {
        if m.unsigned_abs() > n {
            return Err(Error::Domain(format!("|m| = {} exceeds n = {n}", m.abs())));
        }
        Ok(Self { n, m })
    }

    /// Ambisonics channel number `n² + n + m`.
    pub fn acn(&self) -> usize {
        (i64::from(self.n * self.n + self.n) + i64::from(self.m)) as usize
    }

    pub fn mirrored(&self) -> Self {
        Self { n: self.n, m: -self.m }
    }
}

impl fmt::Display for HarmonicIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.n, self.m)
    }
}

/// Ordered subset of harmonics, sorted by `n` then `m` ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<HarmonicIndex>", into = "Vec<HarmonicIndex>")]
pub struct HarmonicSet {
    indices: Vec<HarmonicIndex>,
    max_order: u32,
}

impl TryFrom<Vec<HarmonicIndex>> for HarmonicSet {
    type Error = Error;

    fn try_from(v: Vec<HarmonicIndex>) -> Result<Self> {
        HarmonicSet::from_indices(v)
    }
}

impl From<HarmonicSet> for Vec<HarmonicIndex> {
    fn from(s: HarmonicSet) -> Self {
        s.indices
    }
}

impl HarmonicSet {
    pub fn from_indices(mut indices: Vec<HarmonicIndex>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Domain("empty harmonic set".into()));
        }
        for h in &indices {
            HarmonicIndex::new(h.n, h.m)?;
        }
        indices.sort();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("duplicate harmonic in set".into()));
        }
        let max_order = indices.iter().map(|h| h.n).max().unwrap_or(0);
        Ok(Self { indices, max_order })
    }

    pub fn indices(&self) -> &[HarmonicIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn position(&self, h: HarmonicIndex) -> Option<usize> {
        self.indices.iter().position(|&x| x == h)
    }

    /// Channel index of the omnidirectional harmonic `(0,0)`, if present.
    pub fn omni_channel(&self) -> Option<usize> {
        self.position(HarmonicIndex { n: 0, m: 0 })
    }

    /// True when every `(n,m)` has its mirror `(n,-m)` in the set.
    pub fn is_mirror_closed(&self) -> bool {
        self.indices
            .iter()
            .all(|h| self.position(h.mirrored()).is_some())
    }

    pub fn is_subset_of(&self, other: &HarmonicSet) -> bool {
        self.indices.iter().all(|h| other.position(*h).is_some())
    }
}

/// The `m = ±n` harmonics up to `order`: `2·order + 1` channels.
pub fn horizontal_subset(order: u32) -> HarmonicSet {
    let mut v = vec![HarmonicIndex { n: 0, m: 0 }];
    for n in 1..=order {
        v.push(HarmonicIndex { n, m: -(n as i32) });
        v.push(HarmonicIndex { n, m: n as i32 });
    }
    HarmonicSet {
        indices: v,
        max_order: order,
    }
}

/// All harmonics up to `order` in ACN order: `(order+1)²` channels.
pub fn full_set(order: u32) -> HarmonicSet {
    let indices = (0..=order)
        .flat_map(|n| (-(n as i32)..=n as i32).map(move |m| HarmonicIndex { n, m }))
        .collect();
    HarmonicSet {
        indices,
        max_order: order,
    }
}
