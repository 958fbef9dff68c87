//! Flat `key=value` run configuration: a config file merged with `--set`
//! overrides, checked against a per-command key table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use awae::baselines::VaeConfig;
use awae::checkpoint::ModelKind;
use awae::data::{IngestConfig, SplitConfig, SynthConfig};
use awae::objective::{CostKind, ObjectiveConfig};
use awae::sparse::AdmmConfig;
use awae::trainer::{EarlyStopMetric, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Data,
    Train,
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub scope: Scope,
}

const fn key(name: &'static str, default: &'static str, help: &'static str, scope: Scope) -> Key {
    Key {
        name,
        default,
        help,
        scope,
    }
}

pub const KEYS: &[Key] = &[
    key("seed", "0", "split and generator seed", Scope::Data),
    key("min_value", "0", "drop records with value below this", Scope::Data),
    key("min_user_clicks", "0", "drop users with fewer clicks", Scope::Data),
    key("min_item_audience", "0", "drop items with fewer distinct users", Scope::Data),
    key("split_ratios", "0.8,0.1,0.1", "train,val,test user fractions", Scope::Data),
    key("foldin_fraction", "0.8", "share of a held-out user's clicks fed to the model", Scope::Data),
    key("synthetic_users", "200", "synthetic dataset: users", Scope::Data),
    key("synthetic_items", "100", "synthetic dataset: items", Scope::Data),
    key("synthetic_clusters", "4", "synthetic dataset: user clusters", Scope::Data),
    key("synthetic_clicks", "20", "synthetic dataset: clicks per user", Scope::Data),
    key("model", "awae", "awae | dae | vae", Scope::Train),
    key("seed", "0", "initialization, shuffling and sampling seed", Scope::Train),
    key("batch_size", "500", "users per step", Scope::Train),
    key("max_epochs", "200", "upper bound on passes over the training users", Scope::Train),
    key("early_stop", "ndcg@10", "validation metric, ndcg@R or recall@R", Scope::Train),
    key("patience", "10", "epochs without improvement before stopping", Scope::Train),
    key("latent_dim", "200", "latent width h", Scope::Train),
    key("hidden_dim", "600", "hidden layer width", Scope::Train),
    key("normalize_input", "true", "L2-normalize input rows", Scope::Train),
    key("input_dropout", "0.5", "input dropout probability (training only)", Scope::Train),
    key("noise_std", "0", "Gaussian noise added to latent codes (training only)", Scope::Train),
    key("lr", "0.001", "Adam learning rate", Scope::Train),
    key("beta1", "0.9", "Adam first-moment decay", Scope::Train),
    key("beta2", "0.999", "Adam second-moment decay", Scope::Train),
    key("adam_eps", "1e-8", "Adam denominator epsilon", Scope::Train),
    key("cost", "multinomial", "multinomial | multinomial_nonclick | mil", Scope::Train),
    key("beta", "1", "SMV divergence weight", Scope::Train),
    key("alpha", "0.05", "mutual-information (MMD) weight", Scope::Train),
    key("delta", "0.1", "sparse-coding penalty weight", Scope::Train),
    key("lambda1", "1", "sparse reconstruction weight", Scope::Train),
    key("lambda2", "0.1", "L1 weight on sparse codes", Scope::Train),
    key("gamma", "0.1", "non-click weight for multinomial_nonclick", Scope::Train),
    key("nonclick_complement", "false", "use log(1 - p) for non-clicks", Scope::Train),
    key("gamma_plus", "1", "MIL click exponent", Scope::Train),
    key("a_mi", "1e6", "MIL non-click scale", Scope::Train),
    key("gamma_mi", "12", "MIL non-click exponent (integer)", Scope::Train),
    key("mmd_bandwidth", "1", "kernel bandwidth of the MMD estimate", Scope::Train),
    key("k_atoms", "auto", "dictionary atoms; auto = latent_dim / 2", Scope::Train),
    key("admm_every", "1", "steps between dictionary updates", Scope::Train),
    key("admm_rho", "1", "ADMM penalty", Scope::Train),
    key("admm_max_iters", "100", "ADMM iteration cap", Scope::Train),
    key("admm_tol", "1e-6", "ADMM primal/dual tolerance", Scope::Train),
    key("kl_anneal_cap", "0.2", "vae: final KL weight", Scope::Train),
    key("anneal_steps", "20000", "vae: steps to reach the KL cap", Scope::Train),
];

/// The `--help` epilogue listing every configuration key.
pub fn keys_help() -> String {
    let mut out = String::from(
        "Configuration keys (config file lines or --set key=value; flags override the file):\n",
    );
    for (scope, title) in [
        (Scope::Data, "prepare / synthesize"),
        (Scope::Train, "train / sweep"),
    ] {
        let _ = writeln!(out, "\n  {title}:");
        for k in KEYS.iter().filter(|k| k.scope == scope) {
            let _ = writeln!(out, "    {:<20} {:<12} {}", k.name, k.default, k.help);
        }
    }
    out.push_str("\nEnvironment: AWAE_RUN_ROOT sets the root for run directories (default: runs).\n");
    out
}

/// Resolved configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    scope: Scope,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` overrides.
    pub fn load(scope: Scope, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self {
            scope,
            values: KEYS
                .iter()
                .filter(|k| k.scope == scope)
                .map(|k| (k.name.to_string(), k.default.to_string()))
                .collect(),
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let pairs = awae::data::parse_key_values(&text, path)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            for (k, v) in pairs {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!(
                "unknown config key `{key}` for this command (see --help)"
            ))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` is not in the {:?} table", self.scope))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value `{raw}` for `{key}`")))
    }

    /// `key=value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn model(&self) -> Result<ModelKind, CliError> {
        self.raw("model").parse().map_err(usage)
    }

    pub fn ingest(&self) -> Result<IngestConfig, CliError> {
        Ok(IngestConfig {
            min_value: self.get("min_value")?,
            min_user_clicks: self.get("min_user_clicks")?,
            min_item_audience: self.get("min_item_audience")?,
        })
    }

    pub fn split(&self) -> Result<SplitConfig, CliError> {
        let parts: Vec<&str> = self.raw("split_ratios").split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
        let ratios = match parsed {
            Ok(v) if v.len() == 3 => [v[0], v[1], v[2]],
            _ => {
                return Err(CliError::Usage(format!(
                    "split_ratios must be three comma-separated numbers, got `{}`",
                    self.raw("split_ratios")
                )))
            }
        };
        Ok(SplitConfig {
            ratios,
            foldin_fraction: self.get("foldin_fraction")?,
            seed: self.get("seed")?,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            n_users: self.get("synthetic_users")?,
            n_items: self.get("synthetic_items")?,
            n_clusters: self.get("synthetic_clusters")?,
            clicks_per_user: self.get("synthetic_clicks")?,
            seed: self.get("seed")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let k_atoms = match self.raw("k_atoms") {
            "auto" => None,
            _ => Some(self.get("k_atoms")?),
        };
        let objective = ObjectiveConfig {
            cost_kind: self.raw("cost").parse::<CostKind>().map_err(usage)?,
            beta: self.get("beta")?,
            alpha: self.get("alpha")?,
            delta: self.get("delta")?,
            lambda1: self.get("lambda1")?,
            lambda2: self.get("lambda2")?,
            gamma: self.get("gamma")?,
            nonclick_complement: self.get("nonclick_complement")?,
            gamma_plus: self.get("gamma_plus")?,
            a_mi: self.get("a_mi")?,
            gamma_mi: self.get("gamma_mi")?,
            mmd_bandwidth: self.get("mmd_bandwidth")?,
        };
        Ok(TrainConfig {
            batch_size: self.get("batch_size")?,
            max_epochs: self.get("max_epochs")?,
            objective,
            latent_dim: self.get("latent_dim")?,
            hidden_dim: self.get("hidden_dim")?,
            k_atoms,
            lr: self.get("lr")?,
            betas: (self.get("beta1")?, self.get("beta2")?),
            eps: self.get("adam_eps")?,
            input_dropout: self.get("input_dropout")?,
            noise_std: self.get("noise_std")?,
            normalize_input: self.get("normalize_input")?,
            admm: AdmmConfig {
                rho: self.get("admm_rho")?,
                max_iters: self.get("admm_max_iters")?,
                tol: self.get("admm_tol")?,
            },
            admm_every: self.get("admm_every")?,
            seed: self.get("seed")?,
            early_stop: EarlyStopMetric::parse(self.raw("early_stop")).map_err(usage)?,
            patience: self.get("patience")?,
        })
    }

    pub fn vae(&self) -> Result<VaeConfig, CliError> {
        Ok(VaeConfig {
            train: self.train()?,
            kl_anneal_cap: self.get("kl_anneal_cap")?,
            anneal_steps: self.get("anneal_steps")?,
        })
    }
}

fn usage(e: awae::Error) -> CliError {
    CliError::Usage(e.to_string())
}
