//! JSON checkpoints. Floats are written in shortest round-trip form and
//! parsed exactly, so save followed by load reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{MtlNetwork, NetworkConfig};
use crate::rng::Rng;

pub const FORMAT: &str = "mtlsar-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnStats {
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: NetworkConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub class_names: Vec<String>,
    pub params: Vec<TensorRecord>,
    pub batch_norm: Vec<BnStats>,
}

impl Checkpoint {
    pub fn capture(net: &MtlNetwork, epoch: usize, class_names: &[String]) -> Result<Self> {
        let params: Vec<TensorRecord> = net
            .params()
            .into_iter()
            .map(|(name, p)| TensorRecord {
                name,
                shape: p.shape.clone(),
                values: p.value.clone(),
            })
            .collect();
        let batch_norm: Vec<BnStats> = net
            .batch_norms()
            .iter()
            .map(|bn| BnStats {
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            })
            .collect();
        let finite = params.iter().flat_map(|p| p.values.iter()).all(|v| v.is_finite())
            && batch_norm
                .iter()
                .flat_map(|b| b.running_mean.iter().chain(b.running_var.iter()).flatten())
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            config: net.config.clone(),
            epoch,
            class_names: class_names.to_vec(),
            params,
            batch_norm,
        })
    }

    /// Rebuilds the network, checking every tensor's name and shape.
    pub fn restore(&self) -> Result<MtlNetwork> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag '{}'", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                self.version
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.config.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for a {}-class network",
                self.class_names.len(),
                self.config.num_classes
            )));
        }
        self.config.validate()?;
        // Cheap size check before allocating the network.
        let supplied: usize = self.params.iter().map(|p| p.values.len()).sum();
        if supplied != self.config.parameter_count() {
            return Err(Error::Checkpoint(format!(
                "config needs {} parameters, checkpoint holds {supplied}",
                self.config.parameter_count()
            )));
        }
        let mut net = MtlNetwork::build(&self.config, &mut Rng::new(0))?;
        let mut slots = net.params_mut();
        if slots.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                self.params.len()
            )));
        }
        for ((name, slot), rec) in slots.iter_mut().zip(&self.params) {
            if *name != rec.name {
                return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{}'", rec.name)));
            }
            if slot.shape != rec.shape || slot.value.len() != rec.values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': expected shape {:?}, found {:?} with {} values",
                    slot.shape,
                    rec.shape,
                    rec.values.len()
                )));
            }
            slot.value.copy_from_slice(&rec.values);
        }
        drop(slots);
        let bns = net.batch_norms_mut();
        if bns.len() != self.batch_norm.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} batch-norm records, found {}",
                bns.len(),
                self.batch_norm.len()
            )));
        }
        for (i, (bn, rec)) in bns.into_iter().zip(&self.batch_norm).enumerate() {
            let c = bn.channels();
            for stats in [&rec.running_mean, &rec.running_var].into_iter().flatten() {
                if stats.len() != c {
                    return Err(Error::Checkpoint(format!(
                        "batch norm {i}: {} running statistics for {c} channels",
                        stats.len()
                    )));
                }
            }
            if rec.running_mean.is_some() != rec.running_var.is_some() {
                return Err(Error::Checkpoint(format!(
                    "batch norm {i}: running mean and variance must both be present or absent"
                )));
            }
            if rec.running_var.iter().flatten().any(|&v| v < 0.0) {
                return Err(Error::Checkpoint(format!("batch norm {i}: negative running variance")));
            }
            bn.running_mean = rec.running_mean.clone();
            bn.running_var = rec.running_var.clone();
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Parses and restores in one step; any malformed input is an error.
pub fn network_from_json(text: &str) -> Result<(Checkpoint, MtlNetwork)> {
    let ckpt = Checkpoint::from_json(text)?;
    let net = ckpt.restore()?;
    Ok((ckpt, net))
}
