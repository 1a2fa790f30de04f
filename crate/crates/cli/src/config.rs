//! Flat TOML experiment document. Task, model and schedule keys share one
//! table; absent optional keys take the small-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tformer_core::model::{ModelConfig, ModelKind};
use tformer_core::synthgen::{TaskKind, TaskSpec};
use tformer_core::tformer::QueryInit;
use tformer_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `planted` or `order`.
    pub task: String,
    pub seed: u64,
    pub n: usize,
    pub t_f: usize,
    pub d: usize,
    pub num_options: usize,
    #[serde(default = "defaults::event_types")]
    pub num_event_types: usize,
    #[serde(default = "defaults::noise")]
    pub noise_sigma: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,

    /// `tformer`, `single`, `concat`, `meanpool`, `spatiotemporal` or `blind`.
    pub model: String,
    /// `uniform`, `random`, `kmeans`, `kmedoids` or `learnable`.
    #[serde(default = "defaults::query_init")]
    pub query_init: String,
    pub k: usize,
    #[serde(default = "defaults::two")]
    pub layers: usize,
    #[serde(default = "defaults::four")]
    pub heads: usize,
    #[serde(default = "defaults::ffn")]
    pub ffn_dim: usize,
    #[serde(default = "defaults::yes")]
    pub use_question_guidance: bool,
    #[serde(default = "defaults::yes")]
    pub use_timestamps: bool,
    #[serde(default)]
    pub tied_qkv: bool,
    #[serde(default = "defaults::two")]
    pub reasoner_layers: usize,
    #[serde(default = "defaults::four")]
    pub reasoner_heads: usize,

    #[serde(default = "defaults::batch")]
    pub batch_size: usize,
    pub epochs: u64,
    pub iters_per_epoch: u64,
    #[serde(default = "defaults::one")]
    pub warmup_epochs: u64,
    #[serde(default = "defaults::one")]
    pub cooldown_epochs: u64,
    #[serde(default = "defaults::init_lr")]
    pub init_lr: f64,
    #[serde(default = "defaults::warmup_lr")]
    pub warmup_lr: f64,
    #[serde(default = "defaults::min_lr")]
    pub min_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,

    #[serde(default)]
    pub out: Option<PathBuf>,
}

mod defaults {
    use tformer_core::synthgen::DEFAULT_NOISE_SIGMA;
    use tformer_core::trainer::TrainConfig;

    pub fn event_types() -> usize {
        8
    }
    pub fn noise() -> f64 {
        DEFAULT_NOISE_SIGMA
    }
    pub fn query_init() -> String {
        "kmedoids".into()
    }
    pub fn one() -> u64 {
        1
    }
    pub fn two() -> usize {
        2
    }
    pub fn four() -> usize {
        4
    }
    pub fn ffn() -> usize {
        64
    }
    pub fn yes() -> bool {
        true
    }
    pub fn batch() -> usize {
        TrainConfig::desk().batch_size
    }
    pub fn init_lr() -> f64 {
        TrainConfig::desk().init_lr
    }
    pub fn warmup_lr() -> f64 {
        TrainConfig::desk().warmup_lr
    }
    pub fn min_lr() -> f64 {
        TrainConfig::desk().min_lr
    }
    pub fn weight_decay() -> f64 {
        TrainConfig::desk().weight_decay
    }
}

/// Validated core configurations derived from one document.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub spec: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: set `out` or pass --out".into()))
    }

    pub fn task_spec(&self) -> CliResult<TaskSpec> {
        let spec = TaskSpec {
            kind: self.task.parse::<TaskKind>()?,
            n: self.n,
            t_f: self.t_f,
            d: self.d,
            num_event_types: self.num_event_types,
            num_options: self.num_options,
            noise_sigma: self.noise_sigma,
            train_size: self.train_size,
            val_size: self.val_size,
            test_size: self.test_size,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_config(&self, spec: &TaskSpec) -> CliResult<ModelConfig> {
        let mut m = ModelConfig::desk(self.model.parse::<ModelKind>()?, spec, self.k);
        m.query_init = self.query_init.parse::<QueryInit>()?;
        m.tformer.layers = self.layers;
        m.tformer.heads = self.heads;
        m.tformer.ffn_dim = self.ffn_dim;
        m.tformer.use_question_guidance = self.use_question_guidance;
        m.tformer.use_timestamps = self.use_timestamps;
        m.tformer.tied_qkv = self.tied_qkv;
        m.reasoner.layers = self.reasoner_layers;
        m.reasoner.heads = self.reasoner_heads;
        m.validate()?;
        if self.k > spec.n {
            return Err(CliError::Config(format!("k = {} exceeds n = {}", self.k, spec.n)));
        }
        Ok(m)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            iters_per_epoch: self.iters_per_epoch,
            warmup_epochs: self.warmup_epochs,
            cooldown_epochs: self.cooldown_epochs,
            init_lr: self.init_lr,
            warmup_lr: self.warmup_lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn resolve(&self) -> CliResult<Resolved> {
        let spec = self.task_spec()?;
        let model = self.model_config(&spec)?;
        let train = self.train_config()?;
        Ok(Resolved { spec, model, train })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "planted"
seed = 3
n = 8
t_f = 2
d = 16
num_options = 4
train_size = 16
val_size = 8
test_size = 8
model = "tformer"
k = 2
epochs = 3
iters_per_epoch = 2
"#;

    #[test]
    fn defaults_fill_optional_keys() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.layers, 2);
        assert_eq!(c.query_init, "kmedoids");
        let r = c.resolve().unwrap();
        assert_eq!(r.model.tformer.k, 2);
        assert_eq!(r.train.seed, 3);
        assert_eq!(r.spec.seed, 3);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.out = Some("runs/x".into());
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}\nlearning_rate = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::parse(&MINIMAL.replace("k = 2\n", "")).unwrap_err();
        assert!(err.to_string().contains("`k`"), "{err}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        for (from, to) in [
            ("model = \"tformer\"", "model = \"lstm\""),
            ("task = \"planted\"", "task = \"count\""),
            ("k = 2", "k = 9"),
            ("epochs = 3", "epochs = 2"),
        ] {
            let c = ExperimentConfig::parse(&MINIMAL.replace(from, to)).unwrap();
            assert_eq!(c.resolve().unwrap_err().exit_code(), 2, "{to}");
        }
    }
}
