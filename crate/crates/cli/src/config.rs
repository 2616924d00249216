//! TOML run configuration. Every table is optional and only overrides the
//! keys it names; unknown keys are rejected.
//!
//! ```toml
//! [extract]      # patch, dim, seed, bandwidth, dataset_name
//! [toy_task]     # corpus rendered by `extract --toy`
//! [discover]     # parts, splits, seed, [discover.kmeans]
//! [train]        # recipe, plus any training key (lr, lambda_attn, ...)
//! [denoiser]     # toy denoiser shape
//! [sample]       # steps
//! [sweep]        # desk-scale experiment settings
//! [serve]        # host, port, max_jobs, sampler_steps, probe_t, ...
//! [backend]      # url, token
//! ```

use std::path::Path;

use partsmith_core::denoiser::ToyConfig;
use partsmith_core::experiment::ToyExperimentConfig;
use partsmith_core::kmeans::KMeansOptions;
use partsmith_core::toy_task::ToyTaskConfig;
use partsmith_core::training::TrainConfig;
use partsmith_core::{Error, Result};
use partsmith_service::ServiceConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SECTIONS: [&str; 9] = [
    "extract", "toy_task", "discover", "train", "denoiser", "sample", "sweep", "serve", "backend",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
    pub bandwidth: f64,
    pub dataset_name: String,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        let toy = ToyTaskConfig::default();
        Self {
            patch: toy.patch,
            dim: toy.feature_dim,
            seed: toy.extractor_seed,
            bandwidth: toy.bandwidth,
            dataset_name: "images".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverConfig {
    pub parts: usize,
    pub splits: usize,
    pub seed: u64,
    pub kmeans: KMeansOptions,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        Self {
            parts: 5,
            splits: 256,
            seed: 0,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// Full-scale fine-tuning settings.
    Full,
    /// Settings for the synthetic desk-scale corpus.
    Toy,
}

impl Recipe {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Recipe::Full => TrainConfig::default(),
            Recipe::Toy => TrainConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: partsmith_core::denoiser::schedule::DEFAULT_SAMPLING_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    #[serde(flatten)]
    pub service: ServiceConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub url: Option<String>,
    pub token: Option<String>,
}

/// A parsed config file; empty when none was given.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    table: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if let Some(key) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::Validation(format!("unknown config section [{key}]")));
        }
        Ok(Self { table })
    }

    /// `base` with the keys of table `name` laid over it.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let mut value = serde_json::to_value(base)?;
        if let Some(over) = self.table.get(name) {
            let over = serde_json::to_value(over)?;
            overlay(&mut value, over, name)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Validation(format!("config [{name}]: {e}")))
    }

    pub fn train(&self, recipe: Option<Recipe>) -> Result<TrainConfig> {
        let recipe = match recipe {
            Some(r) => r,
            None => match self.table.get("train").and_then(|t| t.get("recipe")) {
                Some(v) => serde_json::from_value(serde_json::to_value(v)?)
                    .map_err(|e| Error::Validation(format!("config [train] recipe: {e}")))?,
                None => Recipe::Full,
            },
        };
        let mut table = self.table.get("train").cloned().unwrap_or(toml::Value::Table(Default::default()));
        if let toml::Value::Table(t) = &mut table {
            t.remove("recipe");
        }
        let mut value = serde_json::to_value(recipe.train_config())?;
        overlay(&mut value, serde_json::to_value(table)?, "train")?;
        serde_json::from_value(value).map_err(|e| Error::Validation(format!("config [train]: {e}")))
    }

    pub fn extract(&self) -> Result<ExtractConfig> {
        self.section("extract", ExtractConfig::default())
    }

    pub fn toy_task(&self) -> Result<ToyTaskConfig> {
        self.section("toy_task", ToyTaskConfig::default())
    }

    pub fn discover(&self) -> Result<DiscoverConfig> {
        self.section("discover", DiscoverConfig::default())
    }

    pub fn denoiser(&self) -> Result<ToyConfig> {
        self.section("denoiser", ToyConfig::default())
    }

    pub fn sample(&self) -> Result<SampleConfig> {
        self.section("sample", SampleConfig::default())
    }

    pub fn sweep(&self) -> Result<ToyExperimentConfig> {
        self.section("sweep", ToyExperimentConfig::default())
    }

    pub fn serve(&self) -> Result<ServeConfig> {
        self.section("serve", ServeConfig::default())
    }

    pub fn backend(&self) -> Result<BackendConfig> {
        self.section("backend", BackendConfig::default())
    }
}

/// Replace keys of `base` with those of `over`, descending into tables.
fn overlay(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = format!("{path}.{k}");
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Validation(format!("unknown config key {key}"))),
                }
            }
            Ok(())
        }
        (_, _) => Err(Error::Validation(format!("config {path} must be a table"))),
    }
}
