//! JSON parameter checkpoints: `{ "<layer>": { "shape": [...], "values": [...] } }`.
//!
//! Values are written with shortest round-trip formatting and parsed with
//! exact float parsing, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierParams, DiscriminatorParams, ExtractorParams, ScdaModel, Stage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub type Checkpoint = BTreeMap<String, LayerRecord>;

pub fn to_checkpoint(model: &ScdaModel) -> Checkpoint {
    model
        .named_params()
        .into_iter()
        .map(|(name, _, t)| {
            (
                name,
                LayerRecord {
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                },
            )
        })
        .collect()
}

fn take(ck: &mut Checkpoint, name: &str) -> Result<Tensor> {
    let rec = ck
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing layer {name:?}")))?;
    Tensor::new(rec.shape, rec.values)
}

pub fn from_checkpoint(mut ck: Checkpoint) -> Result<ScdaModel> {
    let mut stages = Vec::new();
    for i in 0.. {
        let key = format!("extractor.{i}.weight");
        if !ck.contains_key(&key) {
            break;
        }
        let weight = take(&mut ck, &key)?;
        let bias = take(&mut ck, &format!("extractor.{i}.bias"))?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || bias.shape() != [ws[0]] {
            return Err(Error::Format(format!("bad shapes for extractor stage {i}")));
        }
        if let Some(prev) = stages.last().map(Stage::out_channels) {
            if prev != ws[1] {
                return Err(Error::Format(format!("stage {i} expects {} inputs, previous stage gives {prev}", ws[1])));
            }
        }
        stages.push(Stage { weight, bias });
    }
    if stages.is_empty() {
        return Err(Error::Format("checkpoint has no extractor stages".into()));
    }
    let weight = take(&mut ck, "classifier.weight")?;
    let feat = stages.last().map(Stage::out_channels).unwrap_or(0);
    if weight.rank() != 2 || weight.shape()[1] != feat {
        return Err(Error::Format("classifier width does not match extractor".into()));
    }
    let discriminator = if ck.contains_key("discriminator.0.weight") {
        Some(DiscriminatorParams {
            hidden_weight: take(&mut ck, "discriminator.0.weight")?,
            hidden_bias: take(&mut ck, "discriminator.0.bias")?,
            out_weight: take(&mut ck, "discriminator.1.weight")?,
            out_bias: take(&mut ck, "discriminator.1.bias")?,
        })
    } else {
        None
    };
    if let Some(extra) = ck.keys().next() {
        return Err(Error::Format(format!("unknown layer {extra:?}")));
    }
    Ok(ScdaModel {
        extractor: ExtractorParams { stages },
        classifier: ClassifierParams { weight },
        discriminator,
    })
}

pub fn to_json(model: &ScdaModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_checkpoint(model))?)
}

pub fn from_json(s: &str) -> Result<ScdaModel> {
    from_checkpoint(serde_json::from_str(s)?)
}

pub fn save(model: &ScdaModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ScdaModel> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&s)
}
