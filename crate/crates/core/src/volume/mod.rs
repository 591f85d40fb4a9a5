//! Core data types shared by every stage of the pipeline.
//!
//! Memory order is x-fastest everywhere: a voxel `(x, y, z)` of a volume with
//! dims `(nx, ny, nz)` lives at `x + nx * (y + ny * z)`, and a time-series
//! sample `(x, y, z, t)` at `x + nx * (y + ny * (z + nz * t))`.

mod io;

pub use io::{
    read_curve_csv, read_map, read_map_set, read_mask, read_u8_volume, read_volume,
    write_curve_csv, write_map, write_map_set, write_mask, write_u8_volume, write_volume, U8Volume,
    FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel spacing in millimetres, `(sx, sy, sz)`.
pub type Spacing = [f64; 3];

fn check_spacing(spacing: &Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "spacing components must be positive, got {spacing:?}"
        )))
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// A 4-D contrast-enhancement record in HU.
///
/// Construction checks shape and sampling; finiteness is enforced at the file
/// boundary (see [`TimeSeriesVolume::check_finite`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesVolume {
    dims: [usize; 4],
    spacing: Spacing,
    dt: f64,
    t0: f64,
    values: Vec<f32>,
}

impl TimeSeriesVolume {
    pub fn new(
        dims: [usize; 4],
        spacing: Spacing,
        dt: f64,
        t0: f64,
        values: Vec<f32>,
    ) -> Result<Self> {
        if dims[..3].iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "spatial dims must be positive, got {dims:?}"
            )));
        }
        if dims[3] < 2 {
            return Err(Error::InvalidArgument(format!(
                "a time series needs at least 2 frames, got {}",
                dims[3]
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::InvalidArgument("t0 must be finite".into()));
        }
        check_spacing(&spacing)?;
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} need {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            dt,
            t0,
            values,
        })
    }

    /// Builds a volume by evaluating `f(x, y, z, t)` in storage order.
    pub fn from_fn(
        dims: [usize; 4],
        spacing: Spacing,
        dt: f64,
        t0: f64,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [nx, ny, nz, nt] = dims;
        let mut values = Vec::with_capacity(nx * ny * nz * nt);
        for t in 0..nt {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        values.push(f(x, y, z, t));
                    }
                }
            }
        }
        Self::new(dims, spacing, dt, t0, values)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.values)
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn nt(&self) -> usize {
        self.dims[3]
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, t: usize) -> f32 {
        let [nx, ny, nz, _] = self.dims;
        self.values[x + nx * (y + ny * (z + nz * t))]
    }

    /// Time series of the voxel with linear spatial index `voxel`.
    pub fn series(&self, voxel: usize) -> Vec<f64> {
        let stride = self.n_voxels();
        (0..self.nt())
            .map(|t| self.values[voxel + stride * t] as f64)
            .collect()
    }

    pub fn series_curve(&self, voxel: usize) -> Curve {
        Curve {
            dt: self.dt,
            t0: self.t0,
            samples: self.series(voxel),
        }
    }

    /// One axial frame (slice `z` at time index `t`).
    pub fn frame(&self, z: usize, t: usize) -> Frame {
        let [nx, ny, nz, _] = self.dims;
        let start = nx * ny * (z + nz * t);
        Frame {
            nx,
            ny,
            data: self.values[start..start + nx * ny]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        }
    }

    /// Returns a copy with every frame replaced by `f(z, t, frame)`.
    pub fn map_frames(&self, mut f: impl FnMut(usize, usize, Frame) -> Frame) -> Result<Self> {
        let [nx, ny, nz, nt] = self.dims;
        let mut values = Vec::with_capacity(self.values.len());
        for t in 0..nt {
            for z in 0..nz {
                let out = f(z, t, self.frame(z, t));
                if out.nx != nx || out.ny != ny {
                    return Err(Error::Shape("frame callback changed frame dims".into()));
                }
                values.extend(out.data.iter().map(|&v| v as f32));
            }
        }
        Self::new(self.dims, self.spacing, self.dt, self.t0, values)
    }

    /// Sample times `t0 + i * dt`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.nt())
            .map(|i| self.t0 + i as f64 * self.dt)
            .collect()
    }
}

/// A 2-D image used by the per-frame operations.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(Error::Shape(format!(
                "frame {nx}x{ny} needs {} values, got {}",
                nx * ny,
                data.len()
            )));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn filled(nx: usize, ny: usize, value: f64) -> Self {
        Self {
            nx,
            ny,
            data: vec![value; nx * ny],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[x + self.nx * y]
    }

    /// Translates content by `(dx, dy)`: `out(x, y) = in(x - dx, y - dy)`,
    /// zero outside the source frame.
    pub fn translate(&self, dx: i64, dy: i64) -> Frame {
        let (nx, ny) = (self.nx as i64, self.ny as i64);
        let mut out = vec![0.0; self.data.len()];
        for y in 0..ny {
            let sy = y - dy;
            if !(0..ny).contains(&sy) {
                continue;
            }
            for x in 0..nx {
                let sx = x - dx;
                if (0..nx).contains(&sx) {
                    out[(x + nx * y) as usize] = self.data[(sx + nx * sy) as usize];
                }
            }
        }
        Frame {
            nx: self.nx,
            ny: self.ny,
            data: out,
        }
    }
}

/// A uniformly sampled 1-D signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub dt: f64,
    pub t0: f64,
    pub samples: Vec<f64>,
}

impl Curve {
    pub fn new(dt: f64, t0: f64, samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a curve needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        Ok(Self { dt, t0, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Two curves share a grid when length, step and origin agree.
    pub fn same_grid(&self, other: &Curve) -> bool {
        self.samples.len() == other.samples.len()
            && (self.dt - other.dt).abs() <= 1e-9 * self.dt
            && (self.t0 - other.t0).abs() <= 1e-9 * self.dt.max(1.0)
    }

    pub fn check_same_grid(&self, other: &Curve) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "curve grids differ: ({} samples, dt {}, t0 {}) vs ({} samples, dt {}, t0 {})",
                self.len(),
                self.dt,
                self.t0,
                other.len(),
                other.dt,
                other.t0
            )))
        }
    }

    pub fn scaled(&self, factor: f64) -> Curve {
        Curve {
            dt: self.dt,
            t0: self.t0,
            samples: self.samples.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Which perfusion parameter a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MapKind {
    #[serde(rename = "CBV")]
    Cbv,
    #[serde(rename = "CBF")]
    Cbf,
    #[serde(rename = "MTT")]
    Mtt,
    #[serde(rename = "TTP")]
    Ttp,
    #[serde(rename = "DELAY")]
    Delay,
}

impl MapKind {
    pub const ALL: [MapKind; 5] = [
        MapKind::Cbv,
        MapKind::Cbf,
        MapKind::Mtt,
        MapKind::Ttp,
        MapKind::Delay,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MapKind::Cbv => "CBV",
            MapKind::Cbf => "CBF",
            MapKind::Mtt => "MTT",
            MapKind::Ttp => "TTP",
            MapKind::Delay => "DELAY",
        }
    }

    /// Lower-case file stem used for map files (`cbv`, `cbf`, ...).
    pub fn stem(self) -> &'static str {
        match self {
            MapKind::Cbv => "cbv",
            MapKind::Cbf => "cbf",
            MapKind::Mtt => "mtt",
            MapKind::Ttp => "ttp",
            MapKind::Delay => "delay",
        }
    }

    pub fn from_tag(tag: &str) -> Option<MapKind> {
        MapKind::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn units(self) -> &'static str {
        match self {
            MapKind::Cbv => "ml/100g",
            MapKind::Cbf => "ml/100g/min",
            MapKind::Mtt | MapKind::Ttp | MapKind::Delay => "s",
        }
    }

    /// Fixed normalization range used when a map is stored in `[0, 1]`.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            MapKind::Cbv => (0.0, 8.0),
            MapKind::Cbf => (0.0, 100.0),
            MapKind::Mtt => (0.0, 20.0),
            MapKind::Ttp => (0.0, 40.0),
            MapKind::Delay => (0.0, 10.0),
        }
    }
}

/// One scalar perfusion map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMap {
    kind: MapKind,
    dims: [usize; 3],
    spacing: Spacing,
    values: Vec<f32>,
    norm_range: Option<(f64, f64)>,
}

impl ParametricMap {
    pub fn new(
        kind: MapKind,
        dims: [usize; 3],
        spacing: Spacing,
        values: Vec<f32>,
    ) -> Result<Self> {
        Self::with_norm_range(kind, dims, spacing, values, None)
    }

    pub fn with_norm_range(
        kind: MapKind,
        dims: [usize; 3],
        spacing: Spacing,
        values: Vec<f32>,
        norm_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        check_spacing(&spacing)?;
        let expected: usize = dims.iter().product();
        if values.len() != expected || expected == 0 {
            return Err(Error::Shape(format!(
                "map dims {dims:?} need {expected} values, got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{} map has negative value {} at index {i}",
                kind.tag(),
                values[i]
            )));
        }
        if let Some((lo, hi)) = norm_range {
            if !(hi > lo) {
                return Err(Error::InvalidArgument(format!(
                    "normalization range ({lo}, {hi}) is empty"
                )));
            }
            if values.iter().any(|&v| v > 1.0) {
                return Err(Error::InvalidArgument(
                    "normalized map has values above 1".into(),
                ));
            }
        }
        Ok(Self {
            kind,
            dims,
            spacing,
            values,
            norm_range,
        })
    }

    pub fn zeros(kind: MapKind, dims: [usize; 3], spacing: Spacing) -> Result<Self> {
        Self::new(kind, dims, spacing, vec![0.0; dims.iter().product()])
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm_range(&self) -> Option<(f64, f64)> {
        self.norm_range
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The same values re-tagged as another kind.
    pub fn relabeled(&self, kind: MapKind) -> ParametricMap {
        ParametricMap {
            kind,
            ..self.clone()
        }
    }
}

/// Maps `v` to `clamp((v - lo) / (hi - lo), 0, 1)` and records the range.
pub fn normalize_map(map: &ParametricMap, range: (f64, f64)) -> Result<ParametricMap> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "normalization needs hi > lo, got ({lo}, {hi})"
        )));
    }
    if let Some(existing) = map.norm_range {
        if existing == range {
            return Ok(map.clone());
        }
        return Err(Error::InvalidArgument(format!(
            "map is already normalized with range {existing:?}"
        )));
    }
    let span = hi - lo;
    let values = map
        .values
        .iter()
        .map(|&v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32)
        .collect();
    ParametricMap::with_norm_range(map.kind, map.dims, map.spacing, values, Some(range))
}

/// Inverse of [`normalize_map`]; fails for maps that carry no range.
pub fn denormalize_map(map: &ParametricMap) -> Result<ParametricMap> {
    let (lo, hi) = map.norm_range.ok_or_else(|| {
        Error::InvalidArgument(format!("{} map is not normalized", map.kind.tag()))
    })?;
    let values = map
        .values
        .iter()
        .map(|&v| (v as f64 * (hi - lo) + lo).max(0.0) as f32)
        .collect();
    ParametricMap::new(map.kind, map.dims, map.spacing, values)
}

/// A binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    spacing: Spacing,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], spacing: Spacing, values: Vec<u8>) -> Result<Self> {
        check_spacing(&spacing)?;
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask dims {dims:?} do not match {} values",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn from_bools(
        dims: [usize; 3],
        spacing: Spacing,
        bits: impl IntoIterator<Item = bool>,
    ) -> Result<Self> {
        Self::new(dims, spacing, bits.into_iter().map(u8::from).collect())
    }

    pub fn empty(dims: [usize; 3], spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            values: vec![0; dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 3], spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            values: vec![1; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.values[index] != 0
    }

    #[inline]
    pub fn set(&mut self, index: usize, on: bool) {
        self.values[index] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Linear indices of set voxels in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
            .collect()
    }
}

/// Maps of distinct kinds sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    maps: Vec<ParametricMap>,
}

impl MapSet {
    pub fn new(maps: Vec<ParametricMap>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::InvalidArgument(
                "a map set needs at least one map".into(),
            ));
        };
        for (i, m) in maps.iter().enumerate() {
            if m.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "{} map dims {:?} differ from {:?}",
                    m.kind().tag(),
                    m.dims(),
                    first.dims()
                )));
            }
            if maps[..i].iter().any(|o| o.kind() == m.kind()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate {} map",
                    m.kind().tag()
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn get(&self, kind: MapKind) -> Option<&ParametricMap> {
        self.maps.iter().find(|m| m.kind() == kind)
    }

    /// Like [`MapSet::get`] but a missing kind is an error.
    pub fn require(&self, kind: MapKind) -> Result<&ParametricMap> {
        self.get(kind)
            .ok_or_else(|| Error::InvalidArgument(format!("missing {} map", kind.tag())))
    }

    pub fn maps(&self) -> &[ParametricMap] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<ParametricMap> {
        self.maps
    }

    pub fn kinds(&self) -> Vec<MapKind> {
        self.maps.iter().map(|m| m.kind()).collect()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.maps[0].dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.maps[0].spacing()
    }
}
