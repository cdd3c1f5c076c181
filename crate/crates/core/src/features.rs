//! Per-scene gradient features and the `SSTF1` feature file.
//!
//! A scene's feature is `g = ∇_E L ⊙ E`: the loss gradient at the predictor
//! output, pulled back through the linear decoder to the latent `E`, times
//! `E` element-wise. Trajectory and logit pathways are summed into one
//! latent gradient before the product.
//!
//! `SSTF1` layout, little-endian:
//!
//! ```text
//! b"SSTF1" | dim: u32 | count: u64 | count × (id_len: u16, id: utf-8, density: u32, dim × f32)
//! ```
//!
//! The file stores `f32`; everything in memory is `f64`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::predictor::{self, ToyPredictorParams};
use crate::scene::Dataset;

const FEATURE_MAGIC: &[u8; 5] = b"SSTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub scene_id: String,
    pub density: usize,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub records: Vec<FeatureRecord>,
    pub dim: usize,
}

impl FeatureSet {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.g.len() != dim {
                return Err(Error::Dimension {
                    what: "feature vector",
                    expected: dim,
                    actual: r.g.len(),
                });
            }
            if r.g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature of scene `{}`", r.scene_id)));
            }
            if r.density == 0 {
                return Err(Error::InvalidScene {
                    id: r.scene_id.clone(),
                    msg: "density must be positive".into(),
                });
            }
            if !seen.insert(r.scene_id.as_str()) {
                return Err(Error::DuplicateId(r.scene_id.clone()));
            }
        }
        Ok(Self { records, dim })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.scene_id.as_str())
    }

    /// Rounds every component to `f32`, as the file stores it.
    pub fn quantized(&self) -> FeatureSet {
        FeatureSet {
            records: self
                .records
                .iter()
                .map(|r| FeatureRecord {
                    g: r.g.iter().map(|&v| v as f32 as f64).collect(),
                    ..r.clone()
                })
                .collect(),
            dim: self.dim,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(17 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&u32::try_from(self.dim).map_err(|_| Error::Format("dim exceeds u32".into()))?.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            let id_len = u16::try_from(r.scene_id.len())
                .map_err(|_| Error::Format(format!("scene id `{}` longer than 65535 bytes", r.scene_id)))?;
            let density =
                u32::try_from(r.density).map_err(|_| Error::Format(format!("density of `{}` exceeds u32", r.scene_id)))?;
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(r.scene_id.as_bytes());
            out.extend_from_slice(&density.to_le_bytes());
            for &v in &r.g {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(5, "magic")? != FEATURE_MAGIC {
            return Err(Error::Format("feature file has wrong magic".into()));
        }
        let dim = u32::from_le_bytes(cur.array("dim")?) as usize;
        let count = u64::from_le_bytes(cur.array("count")?);
        // Each record needs at least 6 + 4*dim bytes; reject absurd counts before allocating.
        let min_record = 6 + 4 * dim as u64;
        if count.saturating_mul(min_record) > (bytes.len() - cur.pos) as u64 {
            return Err(Error::Format(format!(
                "feature file truncated: header promises {count} records of dim {dim}"
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count {
            let id_len = u16::from_le_bytes(cur.array("id length")?) as usize;
            let id = std::str::from_utf8(cur.take(id_len, "scene id")?)
                .map_err(|_| Error::Format(format!("record {i} has a non-UTF-8 scene id")))?
                .to_owned();
            let density = u32::from_le_bytes(cur.array("density")?) as usize;
            let raw = cur.take(4 * dim, "feature vector")?;
            let g = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect();
            records.push(FeatureRecord {
                scene_id: id,
                density,
                g,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "feature file has {} trailing bytes after {count} records of dim {dim}",
                bytes.len() - cur.pos
            )));
        }
        FeatureSet::new(dim, records)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("feature file truncated in {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

pub fn write_features(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSet::from_bytes(&bytes)
}

/// Latent gradient `∇_E L` and latent `E` for one scene.
pub fn latent_gradient(
    params: &ToyPredictorParams,
    scene: &crate::scene::Scene,
) -> Result<(ndarray::Array1<f64>, ndarray::Array1<f64>)> {
    let out = predictor::predict(params, scene)?;
    let grad = predictor::grad_wrt_output(&out, &scene.focal().future)?;
    let h = predictor::decoder_pullback(params, &grad);
    Ok((h, out.latent))
}

/// Gradient feature of every scene, in dataset order.
pub fn extract_features(params: &ToyPredictorParams, dataset: &Dataset) -> Result<FeatureSet> {
    params.check_horizons(dataset.t_obs, dataset.t_pred)?;
    let records = dataset
        .scenes
        .par_iter()
        .map(|scene| {
            let (h, e) = latent_gradient(params, scene)?;
            let g: Vec<f64> = h.iter().zip(e.iter()).map(|(a, b)| a * b).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient feature of scene `{}`", scene.scene_id)));
            }
            Ok(FeatureRecord {
                scene_id: scene.scene_id.clone(),
                density: scene.density(),
                g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(params.latent_dim(), records)
}

/// Encoded predictor inputs as features, for baselines that cluster in input
/// space instead of gradient space.
pub fn input_features(dataset: &Dataset) -> Result<FeatureSet> {
    let records = dataset
        .scenes
        .iter()
        .map(|s| {
            Ok(FeatureRecord {
                scene_id: s.scene_id.clone(),
                density: s.density(),
                g: predictor::encode_input(s, dataset.t_obs)?.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(predictor::input_dim(dataset.t_obs), records)
}
