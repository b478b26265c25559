//! A trainable single-step model of either kind, plus checkpoint files:
//! `model.json` (config, array manifest, metadata) and `weights.bin`
//! (little-endian f64 arrays in manifest order).

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fusion::{LateFusionModel, LibrarySpec};
use crate::operator::{arch_preset, BaselineModel, Fno, ModelError, Result};
use crate::pde::{Family, Preset};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LateFusion,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LateFusion => "late_fusion",
            ModelKind::Baseline => "baseline",
        }
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late_fusion" => Ok(ModelKind::LateFusion),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(ModelError::Config(format!(
                "unknown model kind '{other}' (late_fusion|baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub family: Family,
    pub modes: Vec<usize>,
    pub width: usize,
    /// Library text for late fusion; ignored by the baseline.
    #[serde(default)]
    pub library: Option<String>,
    pub activation: String,
    pub init: String,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(kind: ModelKind, family: Family, preset: Preset, seed: u64) -> Self {
        let (modes, width) = arch_preset(family.spatial_dims(), preset);
        Self {
            kind,
            family,
            modes,
            width,
            library: (kind == ModelKind::LateFusion).then(|| family.default_library().to_string()),
            activation: "gelu".into(),
            init: "spectral U[0,1)/(in*out); pointwise U(+-1/sqrt(fan_in)); coefficients zero".into(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    LateFusion(LateFusionModel),
    Baseline(BaselineModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Net,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
    metadata: serde_json::Value,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.activation != "gelu" {
            return Err(ModelError::Config(format!(
                "unsupported activation '{}'",
                config.activation
            )));
        }
        let family = config.family;
        if config.modes.len() != family.spatial_dims() {
            return Err(ModelError::Config(format!(
                "{} needs {} mode counts, got {:?}",
                family,
                family.spatial_dims(),
                config.modes
            )));
        }
        let net = match config.kind {
            ModelKind::LateFusion => {
                let text = config
                    .library
                    .as_deref()
                    .ok_or_else(|| ModelError::Config("late fusion model needs a library".into()))?;
                let library = LibrarySpec::parse(text, family.param_names(), None)?;
                Net::LateFusion(LateFusionModel::new(
                    library,
                    family.n_vars(),
                    config.modes.clone(),
                    config.width,
                    config.seed,
                )?)
            }
            ModelKind::Baseline => Net::Baseline(BaselineModel::new(
                family.n_vars(),
                family.n_params(),
                config.modes.clone(),
                config.width,
                config.seed,
            )?),
        };
        Ok(Self { config, net })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn backbone(&self) -> &Fno {
        match &self.net {
            Net::LateFusion(m) => &m.backbone,
            Net::Baseline(m) => &m.backbone,
        }
    }

    pub fn as_late_fusion(&self) -> Option<&LateFusionModel> {
        match &self.net {
            Net::LateFusion(m) => Some(m),
            Net::Baseline(_) => None,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.backbone().config.param_names();
        if matches!(self.net, Net::LateFusion(_)) {
            names.push("xi".into());
        }
        names
    }

    /// Trainable arrays in storage order.
    pub fn params(&self) -> Vec<&Tensor> {
        match &self.net {
            Net::LateFusion(m) => m.backbone.params.iter().chain(std::iter::once(&m.xi)).collect(),
            Net::Baseline(m) => m.backbone.params.iter().collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.net {
            Net::LateFusion(m) => m.backbone.params.iter_mut().chain(std::iter::once(&mut m.xi)).collect(),
            Net::Baseline(m) => m.backbone.params.iter_mut().collect(),
        }
    }

    /// Replaces all trainable arrays; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() || slots.iter().zip(&values).any(|(s, v)| s.shape() != v.shape()) {
            return Err(ModelError::Shape("parameter list does not match the model".into()));
        }
        for (s, v) in slots.iter_mut().zip(values) {
            **s = v;
        }
        Ok(())
    }

    /// Coefficient matrix of a late-fusion model.
    pub fn xi(&self) -> Option<&Tensor> {
        self.as_late_fusion().map(|m| &m.xi)
    }

    /// Next state inside a graph: `u [B, V, S..]`, `beta [B, P]`.
    pub fn step_graph(&self, g: &Graph, vars: &[Var], u: Var, beta: &Tensor) -> Result<Var> {
        match &self.net {
            Net::LateFusion(m) => Ok(m.step_graph(g, vars, u, beta)?.next),
            Net::Baseline(m) => m.step_graph(g, vars, u, beta),
        }
    }

    /// Next state for a batch, outside any training graph. Non-finite
    /// intermediate values are reported as errors.
    pub fn predict(&self, u: &Tensor, beta: &Tensor) -> Result<Tensor> {
        self.predict_checked(u, beta, true)
    }

    /// Like [`Model::predict`]; with `checked = false` non-finite values
    /// propagate into the output instead.
    pub fn predict_checked(&self, u: &Tensor, beta: &Tensor, checked: bool) -> Result<Tensor> {
        let g = Graph::with_checks(checked);
        let vars: Vec<Var> = self.params().into_iter().map(|p| g.constant(p.clone())).collect();
        let uv = g.constant(u.clone());
        let next = self.step_graph(&g, &vars, uv, beta)?;
        let out = g.value(next).clone();
        Ok(out)
    }

    /// Writes `model.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let names = self.param_names();
        let params = self.params();
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            arrays: names
                .iter()
                .zip(&params)
                .map(|(n, p)| ArrayEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
            metadata,
        };
        let mut bytes = Vec::new();
        for p in &params {
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("model.json"), json + "\n")?;
        fs::write(dir.join("weights.bin"), bytes)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the model and its stored metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let text = fs::read_to_string(dir.join("model.json"))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                file.format_version
            )));
        }
        let mut model = Model::new(file.config)?;
        let bytes = fs::read(dir.join("weights.bin"))?;
        let expected_names = model.param_names();
        let names: Vec<String> = file.arrays.iter().map(|a| a.name.clone()).collect();
        if names != expected_names {
            return Err(ModelError::Checkpoint(
                "array names do not match the architecture".into(),
            ));
        }
        let total: usize = file.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * 8 {
            return Err(ModelError::Checkpoint(format!(
                "weights.bin holds {} bytes, manifest needs {}",
                bytes.len(),
                total * 8
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut tensors = Vec::with_capacity(file.arrays.len());
        for a in &file.arrays {
            let n: usize = a.shape.iter().product();
            tensors.push(Tensor::new(a.shape.clone(), values.by_ref().take(n).collect())?);
        }
        model.set_params(tensors)?;
        Ok((model, file.metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = ModelConfig::preset(ModelKind::LateFusion, Family::Advection, Preset::Desk, 4);
        cfg.width = 4;
        cfg.modes = vec![3];
        let mut m = Model::new(cfg).unwrap();
        m.params_mut().last_mut().unwrap().data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), serde_json::json!({"note": 1})).unwrap();
        let (back, meta) = Model::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["note"], 1);
    }

    #[test]
    fn baseline_has_no_coefficients() {
        let cfg = ModelConfig::preset(ModelKind::Baseline, Family::ReactionDiffusion1d, Preset::Desk, 0);
        let m = Model::new(cfg).unwrap();
        assert!(m.xi().is_none());
        assert_eq!(m.backbone().config.in_channels, 3);
        assert_eq!(m.params().len(), m.param_names().len());
    }

    #[test]
    fn mode_count_must_match_dimension() {
        let mut cfg = ModelConfig::preset(ModelKind::Baseline, Family::Advection, Preset::Desk, 0);
        cfg.modes = vec![4, 4];
        assert!(Model::new(cfg).is_err());
    }
}
