//! Single-file checkpoints: parameters, optimizer moments, training state, resolved config.
//!
//! The file is a safetensors archive. Tensors are stored as `param/<name>`, `adam.m/<name>`
//! and `adam.v/<name>`; the header metadata holds the TOML config, its architecture hash, the
//! JSON training state, and the word vocabulary when one was built from the corpus.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::training::{Adam, TrainState};

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub arch_hash: String,
    pub state: TrainState,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub adam_step: u64,
    pub vocab: Option<String>,
}

pub fn save(
    path: &Path,
    model: &SegModel,
    adam: Option<&Adam>,
    state: &TrainState,
    vocab: Option<&str>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .params()
        .vars()
        .into_iter()
        .map(|(n, v)| (format!("{PARAM}{n}"), v.as_tensor().clone()))
        .collect();
    let mut metadata = HashMap::new();
    if let Some(adam) = adam {
        for (n, (m, v)) in adam.moments() {
            tensors.push((format!("{ADAM_M}{n}"), m.clone()));
            tensors.push((format!("{ADAM_V}{n}"), v.clone()));
        }
        metadata.insert("adam_step".to_string(), adam.step_count().to_string());
    }
    metadata.insert("config".to_string(), model.config().to_toml_string()?);
    metadata.insert("arch_hash".to_string(), model.config().architecture_hash());
    metadata.insert(
        "train_state".to_string(),
        serde_json::to_string(state).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    if let Some(v) = vocab {
        metadata.insert("vocab".to_string(), v.to_string());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    safetensors::serialize_to_file(tensors, Some(metadata), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata {k:?}")));
    let config = RunConfig::from_toml_str(&field("config")?)?;
    let arch_hash = field("arch_hash")?;
    if arch_hash != config.architecture_hash() {
        return Err(bad("stored config does not match its architecture hash".into()));
    }
    let state: TrainState = serde_json::from_str(&field("train_state")?).map_err(|e| bad(e.to_string()))?;
    let adam_step = meta.get("adam_step").map(|s| s.parse::<u64>()).transpose().map_err(|e| bad(e.to_string()))?;

    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let (mut params, mut adam_m, mut adam_v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (k, t) in tensors {
        if let Some(n) = k.strip_prefix(PARAM) {
            params.insert(n.to_string(), t);
        } else if let Some(n) = k.strip_prefix(ADAM_M) {
            adam_m.insert(n.to_string(), t);
        } else if let Some(n) = k.strip_prefix(ADAM_V) {
            adam_v.insert(n.to_string(), t);
        }
    }
    Ok(Checkpoint {
        config,
        arch_hash,
        state,
        params,
        adam_m,
        adam_v,
        adam_step: adam_step.unwrap_or(0),
        vocab: meta.get("vocab").cloned(),
    })
}

impl Checkpoint {
    /// Rejects checkpoints whose architecture differs from `config`.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        if self.arch_hash != config.architecture_hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {} does not match configuration {}",
                &self.arch_hash[..12],
                &config.architecture_hash()[..12]
            )));
        }
        Ok(())
    }

    /// Copies every stored parameter into `model`; all model parameters must be present.
    pub fn restore(&self, model: &SegModel) -> Result<()> {
        self.check_compatible(model.config())?;
        for (name, _) in model.params().vars() {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
            model.params().assign(&name, &t.to_dtype(model.dtype())?)?;
        }
        Ok(())
    }

    /// Builds a model from the stored config and parameters.
    pub fn build_model(&self, device: &Device) -> Result<SegModel> {
        let model = SegModel::new(&self.config, device)?;
        self.restore(&model)?;
        Ok(model)
    }

    pub fn restore_adam(&self, adam: &mut Adam) -> Result<()> {
        adam.load_moments(&self.adam_m, &self.adam_v, self.adam_step)
    }
}
