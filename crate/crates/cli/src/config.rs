//! TOML configuration files. Every section is optional and unknown keys are
//! rejected; command-line flags override whatever a file sets.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use qrrank_core::data::Alphabet;
use qrrank_core::eval::{BenchOptions, RecallDefinition};
use qrrank_core::prompt::PromptTemplate;
use qrrank_core::score::RerankOptions;

use crate::CliError;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let msg = e.to_string().lines().filter(|l| !l.trim().is_empty()).collect::<Vec<_>>().join(" ");
        CliError::config(format!("{}: {msg}", path.display()))
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Random,
    ZeroAttention,
}

/// Architecture and vocabulary of a freshly initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: Option<usize>,
    pub max_seq_len: usize,
    pub rope_base: Option<f64>,
    pub init: InitKind,
    pub seed: u64,
    /// Largest candidate list the vocabulary has index markers for.
    pub max_candidates: usize,
    pub alphabet: Alphabet,
    pub template: PromptTemplate,
    pub gate: Option<GateSpec>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_ff: None,
            max_seq_len: 1024,
            rope_base: None,
            init: InitKind::Random,
            seed: 0,
            max_candidates: 50,
            alphabet: Alphabet::default(),
            template: PromptTemplate::default(),
            gate: None,
        }
    }
}

/// Gates on the half-open layer range `[l_start, l_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub l_start: usize,
    pub l_end: usize,
    pub k_total: usize,
    /// Seed for small random weights; all-zero weights when absent.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

/// Settings shared by the inference-side subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub probe: ProbeSection,
    pub scoring: RerankOptions,
    pub eval: EvalSection,
    pub bench: BenchOptions,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub top_k: Option<usize>,
    /// `[start, end)` layers to select from, `k_total / (end - start)` heads each.
    pub layer_range: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: Vec<usize>,
    pub recall: RecallDefinition,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: vec![1, 3, 5, 10], recall: RecallDefinition::Coverage }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: Option<String>,
    pub workers: Option<usize>,
    pub queue: Option<usize>,
}
