//! Per-network checkpoint blobs with a JSON index.
//!
//! Layout: `<dir>/index.json` plus one `<network>.ot` file per network
//! (`G`, `F`, `A_y.fwd`, `A_y.bwd`, `A_x.fwd`, `A_x.bwd`, `D_y`, `D_x`).

use std::{
    collections::BTreeMap,
    fs,
    path::{Path, PathBuf},
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn::VarStore, Device, Tensor};

use crate::{
    networks::{DaGanModel, ModelConfig, ALIGNER_X, ALIGNER_Y},
    Error, Result,
};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub file: String,
    /// Variable name to shape.
    pub tensors: BTreeMap<String, Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub model: ModelConfig,
    pub networks: BTreeMap<String, NetworkEntry>,
}

/// Network a variable belongs to: its first path component, or the first two
/// for aligner regressors.
pub fn network_of(variable: &str) -> String {
    let mut parts = variable.split('.');
    let head = parts.next().unwrap_or_default();
    if head == ALIGNER_Y || head == ALIGNER_X {
        format!("{head}.{}", parts.next().unwrap_or_default())
    } else {
        head.to_string()
    }
}

fn grouped(vs: &VarStore) -> BTreeMap<String, Vec<(String, Tensor)>> {
    let mut groups: BTreeMap<String, Vec<(String, Tensor)>> = BTreeMap::new();
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, t) in vars {
        groups.entry(network_of(&name)).or_default().push((name, t));
    }
    groups
}

/// SHA-256 over variable names and raw values of every network, keyed by network.
pub fn network_digests(model: &DaGanModel) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for vs in [&model.gen_vs, &model.disc_vs] {
        for (network, vars) in grouped(vs) {
            let mut hasher = Sha256::new();
            for (name, t) in vars {
                hasher.update(name.as_bytes());
                let values = Vec::<f32>::try_from(&t.detach().to_kind(tch::Kind::Float).contiguous().view([-1]))
                    .expect("float parameters");
                for v in values {
                    hasher.update(v.to_le_bytes());
                }
            }
            let digest = hasher.finalize();
            out.insert(network, digest.iter().map(|b| format!("{b:02x}")).collect());
        }
    }
    out
}

pub fn save_checkpoint(model: &DaGanModel, dir: &Path, step: usize, epoch: usize, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut networks = BTreeMap::new();
    for vs in [&model.gen_vs, &model.disc_vs] {
        for (network, vars) in grouped(vs) {
            let file = format!("{network}.ot");
            let tensors = vars.iter().map(|(n, t)| (n.clone(), t.size())).collect();
            let named: Vec<(String, Tensor)> = vars.into_iter().map(|(n, t)| (n, t.detach())).collect();
            Tensor::save_multi(&named, dir.join(&file))
                .map_err(|e| Error::Checkpoint(format!("writing {file}: {e}")))?;
            networks.insert(network, NetworkEntry { file, tensors });
        }
    }
    let index = CheckpointIndex {
        step,
        epoch,
        config_hash: config_hash.to_string(),
        model: model.config.clone(),
        networks,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join(INDEX_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn restore(vs: &mut VarStore, dir: &Path, index: &CheckpointIndex) -> Result<()> {
    for (network, vars) in grouped(vs) {
        let entry = index
            .networks
            .get(&network)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no network `{network}`")))?;
        let loaded: BTreeMap<String, Tensor> = Tensor::load_multi(dir.join(&entry.file))
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", entry.file)))?
            .into_iter()
            .collect();
        if loaded.len() != vars.len() {
            return Err(Error::Checkpoint(format!(
                "network `{network}` has {} tensors in the checkpoint but {} in the model",
                loaded.len(),
                vars.len()
            )));
        }
        for (name, mut var) in vars {
            let src = loaded
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            if src.size() != var.size() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    src.size(),
                    var.size()
                )));
            }
            tch::no_grad(|| var.copy_(src));
        }
    }
    Ok(())
}

/// Loads parameters into an existing model, checking names and shapes.
pub fn load_into(model: &mut DaGanModel, dir: &Path) -> Result<CheckpointIndex> {
    let index = read_index(dir)?;
    restore(&mut model.gen_vs, dir, &index)?;
    restore(&mut model.disc_vs, dir, &index)?;
    Ok(index)
}

/// Builds a model from the architecture recorded in the checkpoint and loads it.
pub fn load_model(dir: &Path, device: Device) -> Result<(DaGanModel, CheckpointIndex)> {
    let index = read_index(dir)?;
    let mut model = DaGanModel::new(&index.model, device)?;
    load_into(&mut model, dir)?;
    Ok((model, index))
}

pub fn epoch_dir(checkpoints: &Path, epoch: usize) -> PathBuf {
    checkpoints.join(format!("epoch_{epoch:03}"))
}

/// Existing checkpoint directories under `checkpoints`, oldest first.
pub fn list_checkpoints(checkpoints: &Path) -> Result<Vec<PathBuf>> {
    if !checkpoints.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(checkpoints)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(INDEX_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn latest_checkpoint(checkpoints: &Path) -> Result<Option<PathBuf>> {
    Ok(list_checkpoints(checkpoints)?.pop())
}
