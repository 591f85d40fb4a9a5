//! Raw little-endian payload + JSON sidecar files.
//!
//! A record `<stem>` is stored as `<stem>.f32raw` (or `<stem>.u8raw`) holding
//! the samples in x-fastest order, and `<stem>.json` describing them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, Curve, MapKind, MapSet, ParametricMap, Spacing, TimeSeriesVolume};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

const VOLUME_KIND: &str = "CTP";
const MASK_KIND: &str = "MASK";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    format_version: String,
    kind: String,
    dims: Vec<usize>,
    spacing_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dt_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t0_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_range: Option<[f64; 2]>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_sidecar(stem: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = with_ext(stem, "json");
    let mut text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read_sidecar(stem: &Path) -> Result<Sidecar> {
    let path = with_ext(stem, "json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::MalformedSidecar {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(sidecar.format_version));
    }
    Ok(sidecar)
}

fn malformed(stem: &Path, msg: impl Into<String>) -> Error {
    Error::MalformedSidecar {
        path: with_ext(stem, "json"),
        msg: msg.into(),
    }
}

fn write_f32_payload(stem: &Path, values: &[f32]) -> Result<()> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let path = with_ext(stem, "f32raw");
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_payload(stem: &Path, count: usize) -> Result<Vec<f32>> {
    let path = with_ext(stem, "f32raw");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != count * 4 {
        return Err(Error::LengthMismatch {
            path,
            expected: count * 4,
            actual: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(values)
}

fn create_parent(stem: &Path) -> Result<()> {
    match stem.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub fn write_volume(vol: &TimeSeriesVolume, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    vol.check_finite()?;
    create_parent(stem)?;
    write_f32_payload(stem, vol.values())?;
    write_sidecar(
        stem,
        &Sidecar {
            format_version: FORMAT_VERSION.into(),
            kind: VOLUME_KIND.into(),
            dims: vol.dims().to_vec(),
            spacing_mm: vol.spacing(),
            dt_s: Some(vol.dt()),
            t0_s: Some(vol.t0()),
            units: Some("HU".into()),
            norm_range: None,
        },
    )
}

pub fn read_volume(stem: impl AsRef<Path>) -> Result<TimeSeriesVolume> {
    let stem = stem.as_ref();
    let sc = read_sidecar(stem)?;
    if sc.kind != VOLUME_KIND {
        return Err(malformed(
            stem,
            format!("expected kind {VOLUME_KIND}, found {}", sc.kind),
        ));
    }
    let dims: [usize; 4] = sc
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| malformed(stem, "volume dims must have 4 entries"))?;
    let dt = sc.dt_s.ok_or_else(|| malformed(stem, "missing dt_s"))?;
    let t0 = sc.t0_s.unwrap_or(0.0);
    let values = read_f32_payload(stem, dims.iter().product())?;
    TimeSeriesVolume::new(dims, sc.spacing_mm, dt, t0, values)
}

pub fn write_map(map: &ParametricMap, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    create_parent(stem)?;
    write_f32_payload(stem, map.values())?;
    write_sidecar(
        stem,
        &Sidecar {
            format_version: FORMAT_VERSION.into(),
            kind: map.kind().tag().into(),
            dims: map.dims().to_vec(),
            spacing_mm: map.spacing(),
            dt_s: None,
            t0_s: None,
            units: Some(if map.norm_range().is_some() {
                "normalized".into()
            } else {
                map.kind().units().into()
            }),
            norm_range: map.norm_range().map(|(lo, hi)| [lo, hi]),
        },
    )
}

pub fn read_map(stem: impl AsRef<Path>) -> Result<ParametricMap> {
    let stem = stem.as_ref();
    let sc = read_sidecar(stem)?;
    let kind = MapKind::from_tag(&sc.kind)
        .ok_or_else(|| malformed(stem, format!("unknown map kind {}", sc.kind)))?;
    let dims: [usize; 3] = sc
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| malformed(stem, "map dims must have 3 entries"))?;
    let values = read_f32_payload(stem, dims.iter().product())?;
    ParametricMap::with_norm_range(
        kind,
        dims,
        sc.spacing_mm,
        values,
        sc.norm_range.map(|[lo, hi]| (lo, hi)),
    )
}

/// Writes each map of `set` as `<dir>/<stem><suffix>` (e.g. `cbv_svd`).
pub fn write_map_set(set: &MapSet, dir: impl AsRef<Path>, suffix: &str) -> Result<()> {
    let dir = dir.as_ref();
    for m in set.maps() {
        write_map(m, dir.join(format!("{}{suffix}", m.kind().stem())))?;
    }
    Ok(())
}

/// Reads the listed kinds written by [`write_map_set`].
pub fn read_map_set(dir: impl AsRef<Path>, kinds: &[MapKind], suffix: &str) -> Result<MapSet> {
    let dir = dir.as_ref();
    let maps = kinds
        .iter()
        .map(|k| {
            let stem = dir.join(format!("{}{suffix}", k.stem()));
            let m = read_map(&stem)?;
            if m.kind() != *k {
                return Err(malformed(
                    &stem,
                    format!("expected {} map, found {}", k.tag(), m.kind().tag()),
                ));
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    MapSet::new(maps)
}

/// A raw byte volume (masks, label maps).
#[derive(Debug, Clone, PartialEq)]
pub struct U8Volume {
    pub kind: String,
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub values: Vec<u8>,
}

pub fn write_u8_volume(vol: &U8Volume, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    if vol.values.len() != vol.dims.iter().product::<usize>() {
        return Err(Error::Shape("u8 volume length does not match dims".into()));
    }
    create_parent(stem)?;
    let path = with_ext(stem, "u8raw");
    fs::write(&path, &vol.values).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        stem,
        &Sidecar {
            format_version: FORMAT_VERSION.into(),
            kind: vol.kind.clone(),
            dims: vol.dims.to_vec(),
            spacing_mm: vol.spacing,
            dt_s: None,
            t0_s: None,
            units: None,
            norm_range: None,
        },
    )
}

pub fn read_u8_volume(stem: impl AsRef<Path>) -> Result<U8Volume> {
    let stem = stem.as_ref();
    let sc = read_sidecar(stem)?;
    let dims: [usize; 3] = sc
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| malformed(stem, "dims must have 3 entries"))?;
    let path = with_ext(stem, "u8raw");
    let values = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = dims.iter().product();
    if values.len() != expected {
        return Err(Error::LengthMismatch {
            path,
            expected,
            actual: values.len(),
        });
    }
    Ok(U8Volume {
        kind: sc.kind,
        dims,
        spacing: sc.spacing_mm,
        values,
    })
}

pub fn write_mask(mask: &BinaryMask, stem: impl AsRef<Path>) -> Result<()> {
    write_u8_volume(
        &U8Volume {
            kind: MASK_KIND.into(),
            dims: mask.dims(),
            spacing: mask.spacing(),
            values: mask.values().to_vec(),
        },
        stem,
    )
}

pub fn read_mask(stem: impl AsRef<Path>) -> Result<BinaryMask> {
    let stem = stem.as_ref();
    let v = read_u8_volume(stem)?;
    if v.kind != MASK_KIND {
        return Err(malformed(
            stem,
            format!("expected kind {MASK_KIND}, found {}", v.kind),
        ));
    }
    BinaryMask::new(v.dims, v.spacing, v.values)
}

/// Writes a curve as CSV with header `t_s,value`.
pub fn write_curve_csv(curve: &Curve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("t_s,value\n");
    for (i, v) in curve.samples.iter().enumerate() {
        out.push_str(&format!("{},{}\n", curve.time(i), v));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Curve> {
    let path = path.as_ref();
    let csv_err = |msg: String| Error::Csv {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("t_s,value") {
        return Err(csv_err("expected header t_s,value".into()));
    }
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| csv_err(format!("line {}: expected two fields", n + 2)))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| csv_err(format!("line {}: {e}", n + 2)))
        };
        times.push(parse(t)?);
        samples.push(parse(v)?);
    }
    if times.len() < 2 {
        return Err(csv_err("a curve needs at least 2 samples".into()));
    }
    let dt = times[1] - times[0];
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.abs().max(1e-12) {
            return Err(csv_err(format!("non-uniform sampling at row {}", i + 3)));
        }
    }
    Curve::new(dt, times[0], samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tmp();
        let stem = dir.path().join("v");
        let vol =
            TimeSeriesVolume::new([4, 4, 1, 5], [1.0, 1.0, 2.0], 0.5, 0.0, vec![0.0; 80]).unwrap();
        write_volume(&vol, &stem).unwrap();
        assert_eq!(read_volume(&stem).unwrap(), vol);
    }

    #[test]
    fn nan_volume_is_refused() {
        let dir = tmp();
        let mut values = vec![0.0; 8];
        values[3] = f32::NAN;
        let vol = TimeSeriesVolume::new([2, 2, 1, 2], [1.0; 3], 1.0, 0.0, values).unwrap();
        assert!(matches!(
            write_volume(&vol, dir.path().join("v")),
            Err(Error::NonFinite { index: 3 })
        ));
    }

    #[test]
    fn payload_is_32_bytes_for_eight_samples() {
        let dir = tmp();
        let stem = dir.path().join("v");
        let values: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let vol = TimeSeriesVolume::new([2, 2, 1, 2], [1.0; 3], 1.0, 0.0, values).unwrap();
        write_volume(&vol, &stem).unwrap();
        let bytes = fs::read(dir.path().join("v.f32raw")).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[4..8], &1.0f32.to_le_bytes());
        assert_eq!(read_volume(&stem).unwrap().values()[7], 7.0);
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let dir = tmp();
        let stem = dir.path().join("v");
        let vol = TimeSeriesVolume::new([2, 2, 1, 2], [1.0; 3], 1.0, 0.0, vec![1.0; 8]).unwrap();
        write_volume(&vol, &stem).unwrap();
        let raw = dir.path().join("v.f32raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..30]).unwrap();
        assert!(matches!(
            read_volume(&stem),
            Err(Error::LengthMismatch {
                expected: 32,
                actual: 30,
                ..
            })
        ));
    }

    #[test]
    fn version_and_json_errors_are_distinct() {
        let dir = tmp();
        let stem = dir.path().join("v");
        let vol = TimeSeriesVolume::new([2, 2, 1, 2], [1.0; 3], 1.0, 0.0, vec![1.0; 8]).unwrap();
        write_volume(&vol, &stem).unwrap();
        let json = dir.path().join("v.json");
        let text = fs::read_to_string(&json).unwrap();
        fs::write(&json, text.replace("\"1\"", "\"2\"")).unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::UnknownVersion(v)) if v == "2"));
        fs::write(&json, "{ not json").unwrap();
        assert!(matches!(
            read_volume(&stem),
            Err(Error::MalformedSidecar { .. })
        ));
    }

    #[test]
    fn map_with_norm_range_round_trips() {
        let dir = tmp();
        let stem = dir.path().join("cbv");
        let map = ParametricMap::with_norm_range(
            MapKind::Cbv,
            [2, 1, 1],
            [1.0; 3],
            vec![0.25, 1.0],
            Some((0.0, 8.0)),
        )
        .unwrap();
        write_map(&map, &stem).unwrap();
        assert_eq!(read_map(&stem).unwrap(), map);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tmp();
        let stem = dir.path().join("m");
        let mask = BinaryMask::new([3, 1, 1], [1.0; 3], vec![1, 0, 1]).unwrap();
        write_mask(&mask, &stem).unwrap();
        assert_eq!(read_mask(&stem).unwrap(), mask);
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tmp();
        let path = dir.path().join("aif.csv");
        let curve = Curve::new(0.5, 0.0, vec![0.0, 1.5, 3.25, 0.125]).unwrap();
        write_curve_csv(&curve, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t_s,value\n0,0\n0.5,1.5\n"));
        assert_eq!(read_curve_csv(&path).unwrap(), curve);
    }
}
