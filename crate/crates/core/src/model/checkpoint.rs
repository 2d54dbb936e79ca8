//! Per-epoch checkpoint container.
//!
//! Layout: the magic `CPLM1`, a little-endian `u64` header length, a JSON
//! header, then every parameter as little-endian `f32` in manifest order.
//! Manifest offsets are byte offsets into that trailing data section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamLayout, Transformer};
use crate::attention_bias::{effective_slopes, head_slopes, ScheduleSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CPLM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    epoch: u32,
    config: ModelConfig,
    schedule: ScheduleSpec,
    /// Slope the schedule holds after advancing past this epoch; used for
    /// inference on this checkpoint.
    schedule_slope_at_save: f64,
    /// Slope that was active while this epoch trained.
    train_slope: f64,
    rng_state: String,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u32,
    pub schedule: ScheduleSpec,
    pub schedule_slope_at_save: f64,
    pub train_slope: f64,
    pub rng_state: String,
    pub model: Transformer<f32>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Per-head slopes the stored weights were trained under.
    pub fn inference_slopes(&self) -> Vec<f32> {
        if !self.schedule.kind.has_bias() {
            return Vec::new();
        }
        let base = head_slopes(self.config().n_heads).expect("validated config");
        let mut spec = self.schedule;
        spec.kind = crate::attention_bias::ScheduleKind::Static;
        spec.m0 = self.train_slope;
        spec.snap_final_to_zero = false;
        effective_slopes(&spec, &base, 0).into_iter().map(|s| s as f32).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self.model.layout();
        let params = layout
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset: e.offset * 4,
                len: e.len,
            })
            .collect();
        let header = Header {
            format: "CPLM1".into(),
            epoch: self.epoch,
            config: self.model.config().clone(),
            schedule: self.schedule,
            schedule_slope_at_save: self.schedule_slope_at_save,
            train_slope: self.train_slope,
            rng_state: self.rng_state.clone(),
            params,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + json.len() + layout.total() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint("missing CPLM1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let data_start = 13usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[13..data_start])?;
        let data = &bytes[data_start..];
        let layout = ParamLayout::new(&header.config);
        header.config.validate()?;

        let mut params = vec![0f32; layout.total()];
        let mut seen = vec![false; layout.entries().len()];
        for m in &header.params {
            let (idx, e) = layout
                .entries()
                .iter()
                .enumerate()
                .find(|(_, e)| e.name == m.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", m.name)))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", m.name)));
            }
            if e.shape != m.shape || e.len != m.len {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", m.name)));
            }
            let raw = data
                .get(m.offset..m.offset + m.len * 4)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", m.name)))?;
            for (k, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Checkpoint(format!("non-finite value in {}", m.name)));
                }
                params[e.offset + k] = v;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing parameter {}",
                layout.entries()[i].name
            )));
        }
        Ok(Self {
            epoch: header.epoch,
            schedule: header.schedule,
            schedule_slope_at_save: header.schedule_slope_at_save,
            train_slope: header.train_slope,
            rng_state: header.rng_state,
            model: Transformer::from_params(header.config, params)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
