use serde::{Deserialize, Serialize};

use influence_core::corpus::{Template, TrainConfig};
use influence_core::transformer::ModelConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Model shape; vocabulary size and maximum length come from the template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_width: usize,
    pub seed: u64,
    pub tied_output: bool,
    pub init_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::experiment(1, 1, 0);
        Self {
            layers: c.layers,
            heads: c.heads,
            hidden: c.hidden,
            ffn_width: c.ffn_width,
            seed: c.seed,
            tied_output: c.tied_output,
            init_scale: c.init_scale,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, template: &Template) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            max_len: template.len(),
            vocab: template.vocab().len(),
            ffn_width: self.ffn_width,
            seed: self.seed,
            tied_output: self.tied_output,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub template: String,
    pub n_train: usize,
    pub n_held_out: usize,
    pub train_seed: u64,
    pub held_out_seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            template: "sva_obj".into(),
            n_train: 2000,
            n_held_out: 500,
            train_seed: 0,
            held_out_seed: 1,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn template(&self) -> anyhow::Result<Template> {
        match self.template.as_str() {
            "sva_obj" => Ok(Template::sva_obj()),
            other => anyhow::bail!("unknown template `{other}` (available: sva_obj)"),
        }
    }
}
