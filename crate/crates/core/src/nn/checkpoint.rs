//! Versioned JSON container for model parameters.
//!
//! The document is a flat list of named arrays (`layer0.weight`,
//! `layer0.bias`, `head.a.weight`, ...) each carrying its shape and
//! row-major values.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{Activation, Dense, MlpModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sflguard-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Layer input/output widths, trunk first.
    pub trunk: Vec<LayerDesc>,
    pub heads: Vec<LayerDesc>,
    pub params: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

fn push_layer(prefix: &str, layer: &Dense, descs: &mut Vec<LayerDesc>, params: &mut Vec<NamedArray>) {
    descs.push(LayerDesc {
        name: prefix.to_string(),
        inputs: layer.inputs(),
        outputs: layer.outputs(),
        activation: layer.activation,
    });
    params.push(NamedArray {
        name: format!("{prefix}.weight"),
        shape: vec![layer.outputs(), layer.inputs()],
        values: layer.weight.iter().copied().collect(),
    });
    params.push(NamedArray {
        name: format!("{prefix}.bias"),
        shape: vec![layer.outputs()],
        values: layer.bias.to_vec(),
    });
}

impl Checkpoint {
    pub fn from_model(model: &MlpModel) -> Self {
        let mut trunk = Vec::new();
        let mut heads = Vec::new();
        let mut params = Vec::new();
        for (i, layer) in model.layers().iter().enumerate() {
            push_layer(&format!("layer{i}"), layer, &mut trunk, &mut params);
        }
        for (name, layer) in model.heads() {
            push_layer(&format!("head.{name}"), layer, &mut heads, &mut params);
        }
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            trunk,
            heads,
            params,
        }
    }

    pub fn to_model(&self) -> Result<MlpModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                    self.format, self.version
                ),
            });
        }
        let by_name: BTreeMap<&str, &NamedArray> =
            self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let build = |desc: &LayerDesc| -> Result<Dense> {
            let fetch = |suffix: &str, len: usize| -> Result<&NamedArray> {
                let key = format!("{}.{suffix}", desc.name);
                let arr = by_name
                    .get(key.as_str())
                    .ok_or_else(|| Error::Shape(format!("missing array `{key}`")))?;
                if arr.values.len() != len {
                    return Err(Error::Shape(format!(
                        "array `{key}` has {} values, expected {len}",
                        arr.values.len()
                    )));
                }
                Ok(arr)
            };
            let w = fetch("weight", desc.inputs * desc.outputs)?;
            let b = fetch("bias", desc.outputs)?;
            let weight = Array2::from_shape_vec((desc.outputs, desc.inputs), w.values.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            Dense::new(weight, Array1::from(b.values.clone()), desc.activation)
        };
        let layers = self.trunk.iter().map(build).collect::<Result<Vec<_>>>()?;
        let heads = self
            .heads
            .iter()
            .map(|d| {
                let name = d.name.strip_prefix("head.").unwrap_or(&d.name).to_string();
                Ok((name, build(d)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        MlpModel::with_heads(layers, heads)
    }
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_and_load_preserves_parameters_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model =
            MlpModel::multi_head(&[5, 7, 3], Activation::Relu, &[("a", 2), ("c", 4)], &mut rng)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.flat_params(), model.flat_params());
        assert!(back.same_layout(&model));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model =
            MlpModel::from_widths(&[2, 2], Activation::Relu, Activation::Identity, &mut rng)
                .unwrap();
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.version = 99;
        assert!(matches!(ckpt.to_model(), Err(Error::Format { .. })));
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.params[0].values.pop();
        assert!(matches!(ckpt.to_model(), Err(Error::Shape(_))));
    }
}
