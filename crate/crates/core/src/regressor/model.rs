use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::Tensor;
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::fit::baseline_subtract;
use crate::volume::{denormalize_map, MapKind, MapSet, ParametricMap, TimeSeriesVolume};

/// Maps predicted by the network, in output-channel order.
pub const OUTPUT_KINDS: [MapKind; 3] = [MapKind::Cbv, MapKind::Cbf, MapKind::Ttp];

const MODEL_FORMAT: &str = "ctperf-unet";
const MODEL_VERSION: &str = "1";

/// Enhancement window mapped onto [0, 1] for the network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub window_lo_hu: f64,
    pub window_hi_hu: f64,
}

impl Default for InputNormalization {
    fn default() -> Self {
        Self {
            window_lo_hu: 0.0,
            window_hi_hu: 60.0,
        }
    }
}

impl InputNormalization {
    fn apply(&self, enhancement: f64) -> f32 {
        ((enhancement - self.window_lo_hu) / (self.window_hi_hu - self.window_lo_hu))
            .clamp(0.0, 1.0) as f32
    }
}

/// A network together with the normalization constants it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub net: UNet<f32>,
    pub input: InputNormalization,
    /// Physical range of each output channel (see [`OUTPUT_KINDS`]).
    pub output_ranges: [(f64, f64); 3],
}

impl Regressor {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net: UNet::new(config, seed)?,
            input: InputNormalization::default(),
            output_ranges: OUTPUT_KINDS.map(MapKind::default_range),
        })
    }

    /// Normalized network input for slice `z`: baseline-subtracted
    /// enhancement per voxel, windowed and clamped to [0, 1].
    pub fn slice_input(&self, vol: &TimeSeriesVolume, z: usize) -> Result<Tensor<f32>> {
        let [nx, ny, nz] = vol.spatial_dims();
        if z >= nz {
            return Err(Error::InvalidArgument(format!(
                "slice {z} out of range (nz = {nz})"
            )));
        }
        let nt = vol.nt();
        let mut t = Tensor::zeros(nt, ny, nx);
        for y in 0..ny {
            for x in 0..nx {
                let v = (z * ny + y) * nx + x;
                let e = baseline_subtract(&vol.series(v));
                for (i, &s) in e.iter().enumerate() {
                    t.data[(i * ny + y) * nx + x] = self.input.apply(s);
                }
            }
        }
        Ok(t)
    }

    /// Normalized 3-channel target for slice `z` of a map set holding at
    /// least CBV, CBF and TTP.
    pub fn slice_target(&self, maps: &MapSet, z: usize) -> Result<Tensor<f32>> {
        let [nx, ny, nz] = maps.dims();
        if z >= nz {
            return Err(Error::InvalidArgument(format!(
                "slice {z} out of range (nz = {nz})"
            )));
        }
        let mut t = Tensor::zeros(3, ny, nx);
        for (c, (&kind, &(lo, hi))) in OUTPUT_KINDS.iter().zip(&self.output_ranges).enumerate() {
            let m = maps.require(kind)?;
            let vals = &m.values()[z * nx * ny..(z + 1) * nx * ny];
            for (dst, &v) in t.data[c * nx * ny..(c + 1) * nx * ny].iter_mut().zip(vals) {
                *dst = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(t)
    }

    /// Network output for one normalized slice.
    pub fn predict_slice(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.forward(input)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            format_version: MODEL_VERSION.into(),
            config: self.net.config,
            input: self.input,
            output_ranges: OUTPUT_KINDS
                .iter()
                .zip(&self.output_ranges)
                .map(|(k, &(lo, hi))| OutputRange {
                    kind: k.tag().into(),
                    lo,
                    hi,
                })
                .collect(),
            n_params: self.net.n_params(),
            weights: blob
                .file_name()
                .expect("blob has a file name")
                .to_string_lossy()
                .into_owned(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model descriptor serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let params = self.net.flat_params();
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let malformed = |msg: String| Error::MalformedSidecar {
            path: path.to_path_buf(),
            msg,
        };
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(malformed(format!("unexpected format {:?}", file.format)));
        }
        if file.format_version != MODEL_VERSION {
            return Err(Error::UnknownVersion(file.format_version));
        }
        if file.output_ranges.len() != 3 {
            return Err(malformed("expected three output ranges".into()));
        }
        let mut output_ranges = [(0.0, 1.0); 3];
        for ((slot, r), kind) in output_ranges
            .iter_mut()
            .zip(&file.output_ranges)
            .zip(OUTPUT_KINDS)
        {
            if r.kind != kind.tag() || !(r.hi > r.lo) {
                return Err(malformed(format!("bad output range for {}", r.kind)));
            }
            *slot = (r.lo, r.hi);
        }
        if !(file.input.window_hi_hu > file.input.window_lo_hu) {
            return Err(malformed("empty input window".into()));
        }
        let mut net = UNet::<f32>::new(file.config, 0)?;
        if net.n_params() != file.n_params {
            return Err(malformed(format!(
                "descriptor declares {} parameters, architecture has {}",
                file.n_params,
                net.n_params()
            )));
        }
        let blob = path.with_file_name(&file.weights);
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        if bytes.len() != 4 * file.n_params {
            return Err(Error::LengthMismatch {
                path: blob,
                expected: 4 * file.n_params,
                actual: bytes.len(),
            });
        }
        let params: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        net.set_flat_params(&params)?;
        Ok(Self {
            net,
            input: file.input,
            output_ranges,
        })
    }
}

fn blob_path(json: &Path) -> PathBuf {
    json.with_extension("weights")
}

#[derive(Serialize, Deserialize)]
struct OutputRange {
    kind: String,
    lo: f64,
    hi: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    format_version: String,
    config: UNetConfig,
    input: InputNormalization,
    output_ranges: Vec<OutputRange>,
    n_params: usize,
    weights: String,
}

/// One training pair: a normalized slice and its normalized target maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    /// Optional pixel mask for the loss (length h·w).
    pub mask: Option<Vec<bool>>,
}

/// One sample per slice of `vol`, targets taken from `maps`.
pub fn slice_samples(
    model: &Regressor,
    vol: &TimeSeriesVolume,
    maps: &MapSet,
) -> Result<Vec<Sample<f32>>> {
    if maps.dims() != vol.spatial_dims() {
        return Err(Error::Shape("maps and volume dims differ".into()));
    }
    (0..vol.spatial_dims()[2])
        .map(|z| {
            Ok(Sample {
                input: model.slice_input(vol, z)?,
                target: model.slice_target(maps, z)?,
                mask: None,
            })
        })
        .collect()
}

/// CBV, CBF and TTP maps predicted from the volume alone.
pub fn infer(model: &Regressor, vol: &TimeSeriesVolume) -> Result<MapSet> {
    let cfg = model.net.config;
    if vol.nt() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} time frames, volume has {}",
            cfg.in_channels,
            vol.nt()
        )));
    }
    let [nx, ny, nz] = vol.spatial_dims();
    let slices: Vec<Tensor<f32>> = (0..nz)
        .into_par_iter()
        .map(|z| model.predict_slice(&model.slice_input(vol, z)?))
        .collect::<Result<_>>()?;
    let plane = nx * ny;
    let maps = OUTPUT_KINDS
        .iter()
        .enumerate()
        .map(|(c, &kind)| {
            let values: Vec<f32> = slices
                .iter()
                .flat_map(|s| s.data[c * plane..(c + 1) * plane].iter().copied())
                .collect();
            let normalized = ParametricMap::with_norm_range(
                kind,
                [nx, ny, nz],
                vol.spacing(),
                values,
                Some(model.output_ranges[c]),
            )?;
            denormalize_map(&normalized)
        })
        .collect::<Result<Vec<_>>>()?;
    MapSet::new(maps)
}
