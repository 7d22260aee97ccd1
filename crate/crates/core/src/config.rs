//! Experiment configuration: JSON parsing, validation and seed derivation.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{Architecture, SgdConfig};
use crate::data::{BlobsSpec, PartitionScheme};
use crate::engine::{Algorithm, EngineConfig, EngineSeeds, LocalConfig, SynthesisEvent};
use crate::error::{Error, Result};
use crate::hfmds::SynthesisConfig;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Widths of the hidden dense+relu layers before the feature layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![32, 32, 32],
            feature_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    /// Clients trained per round; `None` means all of them.
    pub active_clients: Option<usize>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mu: f64,
    pub lambda: f64,
    pub syn_size: usize,
    pub syn_steps: usize,
    pub syn_interval: usize,
    pub syn_lr: f64,
    pub kl_eps: f64,
    pub dataset: BlobsSpec,
    pub partition: PartitionScheme,
    pub model: ModelSpec,
    pub output_dir: String,
    pub dump_synthetic: bool,
    pub export_features: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::HfmdsFl,
            seed: 0,
            rounds: 60,
            clients: 10,
            active_clients: None,
            local_epochs: 1,
            batch_size: 10,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 0.1,
            mu: 0.5,
            lambda: 0.5,
            syn_size: 100,
            syn_steps: 500,
            syn_interval: 20,
            syn_lr: 0.02,
            kl_eps: 1e-8,
            dataset: BlobsSpec::default(),
            partition: PartitionScheme::default(),
            model: ModelSpec::default(),
            output_dir: "runs/default".into(),
            dump_synthetic: true,
            export_features: true,
        }
    }
}

fn field<T: DeserializeOwned>(key: &str, value: &Value) -> Result<T> {
    T::deserialize(value).map_err(|e| Error::config(key, e.to_string()))
}

fn object<'a>(key: &str, value: &'a Value) -> Result<&'a Map<String, Value>> {
    value.as_object().ok_or_else(|| Error::config(key, "expected an object"))
}

fn parse_dataset(value: &Value, spec: &mut BlobsSpec) -> Result<()> {
    for (k, v) in object("dataset", value)? {
        let key = format!("dataset.{k}");
        match k.as_str() {
            "classes" => spec.classes = field(&key, v)?,
            "dim" => spec.dim = field(&key, v)?,
            "per_class" => spec.per_class = field(&key, v)?,
            "spread" => spec.spread = field(&key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
    }
    Ok(())
}

fn parse_model(value: &Value, spec: &mut ModelSpec) -> Result<()> {
    for (k, v) in object("model", value)? {
        let key = format!("model.{k}");
        match k.as_str() {
            "hidden" => spec.hidden = field(&key, v)?,
            "feature_dim" => spec.feature_dim = field(&key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
    }
    Ok(())
}

fn parse_partition(value: &Value) -> Result<PartitionScheme> {
    let obj = object("partition", value)?;
    let scheme: String = field(
        "partition.scheme",
        obj.get("scheme").ok_or_else(|| Error::config("partition.scheme", "missing"))?,
    )?;
    let param = match scheme.as_str() {
        "dirichlet" => "concentration",
        "label_skew" => "classes_per_client",
        other => return Err(Error::config("partition.scheme", format!("unknown scheme `{other}`"))),
    };
    for k in obj.keys() {
        if k != "scheme" && k != param {
            return Err(Error::config(format!("partition.{k}"), format!("not a field of scheme `{scheme}`")));
        }
    }
    let key = format!("partition.{param}");
    let v = obj.get(param).ok_or_else(|| Error::config(key.as_str(), "missing"))?;
    Ok(match param {
        "concentration" => PartitionScheme::Dirichlet {
            concentration: field(&key, v)?,
        },
        _ => PartitionScheme::LabelSkew {
            classes_per_client: field(&key, v)?,
        },
    })
}

/// Parses JSON config text. Missing keys take their defaults, unknown keys
/// are rejected, and the result is validated.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let obj = object("<document>", &root)?;
    let mut c = ExperimentConfig::default();
    for (k, v) in obj {
        let key = k.as_str();
        match key {
            "algorithm" => c.algorithm = field(key, v)?,
            "seed" => c.seed = field(key, v)?,
            "rounds" => c.rounds = field(key, v)?,
            "clients" => c.clients = field(key, v)?,
            "active_clients" => c.active_clients = field(key, v)?,
            "local_epochs" => c.local_epochs = field(key, v)?,
            "batch_size" => c.batch_size = field(key, v)?,
            "lr" => c.lr = field(key, v)?,
            "momentum" => c.momentum = field(key, v)?,
            "weight_decay" => c.weight_decay = field(key, v)?,
            "alpha" => c.alpha = field(key, v)?,
            "mu" => c.mu = field(key, v)?,
            "lambda" => c.lambda = field(key, v)?,
            "syn_size" => c.syn_size = field(key, v)?,
            "syn_steps" => c.syn_steps = field(key, v)?,
            "syn_interval" => c.syn_interval = field(key, v)?,
            "syn_lr" => c.syn_lr = field(key, v)?,
            "kl_eps" => c.kl_eps = field(key, v)?,
            "dataset" => parse_dataset(v, &mut c.dataset)?,
            "partition" => c.partition = parse_partition(v)?,
            "model" => parse_model(v, &mut c.model)?,
            "output_dir" => c.output_dir = field(key, v)?,
            "dump_synthetic" => c.dump_synthetic = field(key, v)?,
            "export_features" => c.export_features = field(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
    }
    if c.algorithm == Algorithm::FmdsFl && c.mu != 0.0 {
        log::info!("fmds_fl forces mu = 0 (configured {})", c.mu);
        c.mu = 0.0;
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn check(ok: bool, key: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, reason))
    }
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn active(&self) -> usize {
        self.active_clients.unwrap_or(self.clients)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::mlp(self.dataset.dim, &self.model.hidden, self.model.feature_dim, self.dataset.classes)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.clients >= 2, "clients", "need at least 2 clients")?;
        check((1..=self.clients).contains(&self.active()), "active_clients", "must lie in 1..=clients")?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", "must be >= 0")?;
        check((0.0..=1.0).contains(&self.alpha), "alpha", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.lambda), "lambda", "must lie in [0, 1]")?;
        check(self.mu >= -1.0 && self.mu.is_finite(), "mu", "must be >= -1")?;
        check(self.syn_interval >= 1, "syn_interval", "must be at least 1")?;
        self.synthesis().validate()?;
        let d = &self.dataset;
        check(d.classes >= 2, "dataset.classes", "need at least 2 classes")?;
        check(d.dim >= 1, "dataset.dim", "must be at least 1")?;
        check(d.per_class >= 2, "dataset.per_class", "must be at least 2")?;
        check(d.spread >= 0.0 && d.spread.is_finite(), "dataset.spread", "must be >= 0")?;
        check(
            d.classes * d.per_class >= self.clients,
            "clients",
            "dataset smaller than the client count",
        )?;
        match self.partition {
            PartitionScheme::Dirichlet { concentration } => check(
                concentration > 0.0 && concentration.is_finite(),
                "partition.concentration",
                "must be positive",
            )?,
            PartitionScheme::LabelSkew { classes_per_client } => {
                check(
                    (1..=d.classes).contains(&classes_per_client),
                    "partition.classes_per_client",
                    "must lie in 1..=dataset.classes",
                )?;
                check(
                    self.clients * classes_per_client >= d.classes,
                    "partition.classes_per_client",
                    "clients * classes_per_client must cover every class",
                )?;
            }
        }
        check(self.model.hidden.iter().all(|&w| w > 0), "model.hidden", "widths must be positive")?;
        check(self.model.feature_dim >= 1, "model.feature_dim", "must be at least 1")?;
        check(!self.output_dir.is_empty(), "output_dir", "must not be empty")?;
        Ok(())
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            size: self.syn_size,
            steps: self.syn_steps,
            lr: self.syn_lr,
            mu: self.mu,
            kl_eps: self.kl_eps,
        }
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            algorithm: self.algorithm,
            rounds: self.rounds,
            active_clients: self.active(),
            local: LocalConfig {
                alpha: self.alpha,
                epochs: self.local_epochs,
                batch_size: self.batch_size,
                sgd: SgdConfig {
                    lr: self.lr,
                    momentum: self.momentum,
                    weight_decay: self.weight_decay,
                },
                lambda: self.lambda,
            },
            synthesis: self.synthesis(),
            syn_interval: self.syn_interval,
        }
    }
}

/// Every stream seed used by a run, derived from the master seed by role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub dataset: u64,
    pub partition: u64,
    pub model_init: u64,
    pub engine: EngineSeeds,
}

impl RunSeeds {
    pub fn derive(master: u64, clients: usize) -> Self {
        RunSeeds {
            master,
            dataset: derive_seed(master, "dataset", 0),
            partition: derive_seed(master, "partition", 0),
            model_init: derive_seed(master, "model_init", 0),
            engine: EngineSeeds::derive(master, clients),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: RunSeeds,
    pub artifacts: Vec<String>,
    pub synthesis_events: Vec<SynthesisEvent>,
    pub final_accuracy: f64,
    pub final_alignment: Option<f64>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.batch_size, 10);
        assert_eq!(c.syn_size, 100);
        assert_eq!(c.local_epochs, 1);
        assert_eq!(c.lr, 0.005);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.syn_steps, 500);
        assert_eq!(c.syn_interval, 20);
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.mu, 0.5);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.syn_lr, 0.02);
    }

    #[test]
    fn out_of_range_names_key() {
        assert_eq!(key_of(parse_config(r#"{"alpha": 1.5}"#).unwrap_err()), "alpha");
        assert_eq!(key_of(parse_config(r#"{"lambda": -0.1}"#).unwrap_err()), "lambda");
        assert_eq!(key_of(parse_config(r#"{"mu": -1.5}"#).unwrap_err()), "mu");
        assert_eq!(key_of(parse_config(r#"{"kl_eps": 0}"#).unwrap_err()), "kl_eps");
        assert_eq!(key_of(parse_config(r#"{"dataset": {"per_class": 1}}"#).unwrap_err()), "dataset.per_class");
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert_eq!(key_of(parse_config(r#"{"alpah": 0.5}"#).unwrap_err()), "alpah");
        assert_eq!(key_of(parse_config(r#"{"model": {"depth": 2}}"#).unwrap_err()), "model.depth");
        assert_eq!(key_of(parse_config(r#"{"rounds": "ten"}"#).unwrap_err()), "rounds");
        assert_eq!(key_of(parse_config("{\"rounds\": ").unwrap_err()), "<document>");
        assert_eq!(key_of(parse_config("[]").unwrap_err()), "<document>");
    }

    #[test]
    fn partition_fields_follow_scheme() {
        let c = parse_config(r#"{"partition": {"scheme": "dirichlet", "concentration": 0.5}}"#).unwrap();
        assert_eq!(c.partition, PartitionScheme::Dirichlet { concentration: 0.5 });
        let e = parse_config(r#"{"partition": {"scheme": "dirichlet", "classes_per_client": 2}}"#);
        assert_eq!(key_of(e.unwrap_err()), "partition.classes_per_client");
        let e = parse_config(r#"{"partition": {"scheme": "label_skew"}}"#);
        assert_eq!(key_of(e.unwrap_err()), "partition.classes_per_client");
        let e = parse_config(r#"{"partition": {"scheme": "dirichlet", "concentration": 0}}"#);
        assert_eq!(key_of(e.unwrap_err()), "partition.concentration");
    }

    #[test]
    fn fmds_forces_mu_zero() {
        let c = parse_config(r#"{"algorithm":"fmds_fl","mu":0.7}"#).unwrap();
        assert_eq!(c.algorithm, Algorithm::FmdsFl);
        assert_eq!(c.mu, 0.0);
    }

    #[test]
    fn active_clients_bounds() {
        assert_eq!(key_of(parse_config(r#"{"clients": 4, "active_clients": 5}"#).unwrap_err()), "active_clients");
        assert_eq!(parse_config(r#"{"active_clients": null}"#).unwrap().active(), 10);
    }

    #[test]
    fn seeds_ignore_output_dir() {
        let a = RunSeeds::derive(3, 4);
        assert_eq!(a, RunSeeds::derive(3, 4));
        let b = RunSeeds::derive(4, 4);
        assert_ne!(a.dataset, b.dataset);
        assert_ne!(a.partition, b.partition);
        assert_ne!(a.model_init, b.model_init);
        assert_ne!(a.engine.synthesis, b.engine.synthesis);
        assert!(a.engine.clients.iter().zip(&b.engine.clients).all(|(x, y)| x != y));
    }
}
