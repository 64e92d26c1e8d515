//! Plain-text JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "gemfi-checkpoint",
//!   "version": 1,
//!   "config": { ...GemConfig... },
//!   "params": [ { "name": "backbone.0.weight", "rows": 2, "cols": 64, "values": [...] }, ... ],
//!   "sn_state": [ { "layer": "backbone.0", "u": [...], "v": [...] }, ... ],
//!   "density": null | { "gmm": {...}, "log_p_calib": {...}, "classes": {...} },
//!   "energy_calib": null | { "learned": {...}, "logit": {...} }
//! }
//! ```
//!
//! Weights are row-major with shape `in × out`; biases are `1 × out`.
//! `u` spans a layer's output space and `v` its input space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::density::EnergyCalibration;
use crate::error::{GemError, Result};
use crate::model::{DensityState, GemConfig, GemModel};
use crate::networks::SpectralState;

pub const FORMAT: &str = "gemfi-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnRecord {
    pub layer: String,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: GemConfig,
    pub params: Vec<ParamRecord>,
    pub sn_state: Vec<SnRecord>,
    pub density: Option<DensityState>,
    pub energy_calib: Option<EnergyCalibration>,
}

fn bad(msg: impl Into<String>) -> GemError {
    GemError::Format { offset: 0, msg: msg.into() }
}

impl Checkpoint {
    pub fn from_model(model: &GemModel) -> Self {
        let params = model
            .nets
            .store
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                values: p.value.data().to_vec(),
            })
            .collect();
        let sn_state = model
            .nets
            .backbone
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.sn.as_ref().map(|s| SnRecord {
                    layer: format!("backbone.{i}"),
                    u: s.u.clone(),
                    v: s.v.clone(),
                })
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            params,
            sn_state,
            density: model.density.clone(),
            energy_calib: model.energy_calib,
        }
    }

    pub fn into_model(self) -> Result<GemModel> {
        if self.format != FORMAT {
            return Err(bad(format!("expected format `{FORMAT}`, found `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = GemModel::new(self.config, 0)?;
        if self.params.len() != model.nets.store.len() {
            return Err(bad(format!(
                "checkpoint lists {} parameters, model has {}",
                self.params.len(),
                model.nets.store.len()
            )));
        }
        for (slot, rec) in model.nets.store.iter_mut().zip(self.params) {
            if slot.name != rec.name || slot.value.shape() != (rec.rows, rec.cols) {
                return Err(bad(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    rec.name,
                    (rec.rows, rec.cols),
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = Tensor::new(rec.rows, rec.cols, rec.values)?;
        }
        let sn_layers: Vec<usize> = (0..model.nets.backbone.layers.len())
            .filter(|i| model.nets.backbone.layers[*i].sn.is_some())
            .collect();
        if sn_layers.len() != self.sn_state.len() {
            return Err(bad("spectral state does not match the configured layers"));
        }
        for (i, rec) in sn_layers.into_iter().zip(self.sn_state) {
            let layer = &mut model.nets.backbone.layers[i];
            if rec.layer != format!("backbone.{i}") || rec.u.len() != layer.out_dim || rec.v.len() != layer.in_dim {
                return Err(bad(format!("spectral state `{}` does not fit backbone.{i}", rec.layer)));
            }
            layer.sn = Some(SpectralState { u: rec.u, v: rec.v });
        }
        model.density = self.density;
        model.energy_calib = self.energy_calib;
        Ok(model)
    }

    pub fn save(model: &GemModel, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Self::from_model(model))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GemModel> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| GemError::Format {
            offset: byte_offset(&text, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        ck.into_model()
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}
