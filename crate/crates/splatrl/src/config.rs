//! Run configuration: a TOML file with dotted sections, overridable by
//! `section.key=value` pairs from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use splatrl_core::adam::{AdamConfig, LearningRates};
use splatrl_core::density::HeuristicThresholds;
use splatrl_core::metrics::LossConfig;
use splatrl_core::ppo::PpoConfig;
use splatrl_core::trainer::{Controller, HeuristicOptions, LearnedOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub rates: RatesSection,
    pub adam: AdamSection,
    pub heuristic: HeuristicSection,
    pub ppo: PpoSection,
    pub learned: LearnedSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen`.
    pub dir: PathBuf,
    /// Initial scene, relative to `dir`.
    pub init: PathBuf,
    pub cameras: PathBuf,
    pub targets: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub sensitivity_views: usize,
    /// `learned`, `heuristic` or `maintain-only`.
    pub controller: String,
    pub max_gaussians: usize,
    pub eval_interval: usize,
    pub tile_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesSection {
    pub position: f64,
    pub position_final_ratio: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicSection {
    pub grad: f64,
    pub scale: f64,
    pub opacity: f64,
    /// World-space size fraction above which Gaussians are pruned; 0 disables.
    pub prune_oversized: f64,
    /// Opacity reset period in iterations; 0 disables.
    pub opacity_reset_interval: usize,
    pub opacity_reset_value: f64,
    /// Gaussian count to reach after each density step; empty disables.
    pub count_targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub horizon: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub minibatch: usize,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedSection {
    pub frozen: bool,
    pub greedy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let h = HeuristicThresholds::default();
        let p = PpoConfig::default();
        let r = LearningRates::default();
        let a = AdamConfig::default();
        Self {
            data: DataSection::default(),
            train: TrainSection {
                iterations: t.iterations,
                densify_from: t.densify_from,
                densify_until: t.densify_until,
                densify_interval: t.densify_interval,
                sensitivity_views: t.sensitivity_views,
                controller: "learned".into(),
                max_gaussians: t.max_gaussians,
                eval_interval: t.eval_interval,
                tile_size: t.tile_size,
                seed: t.seed,
            },
            loss: LossSection { lambda: LossConfig::default().lambda },
            rates: RatesSection {
                position: r.position,
                position_final_ratio: r.position_final_ratio,
                rotation: r.rotation,
                scale: r.scale,
                opacity: r.opacity,
                color: r.color,
            },
            adam: AdamSection { beta1: a.beta1, beta2: a.beta2, eps: a.eps },
            heuristic: HeuristicSection {
                grad: h.grad,
                scale: h.scale,
                opacity: h.opacity,
                prune_oversized: 0.0,
                opacity_reset_interval: 0,
                opacity_reset_value: 0.01,
                count_targets: Vec::new(),
            },
            ppo: PpoSection {
                gamma: p.gamma,
                lambda: p.lambda,
                clip: p.clip,
                epochs: p.epochs,
                horizon: p.horizon,
                lr_start: p.lr_start,
                lr_end: p.lr_end,
                minibatch: p.minibatch,
                entropy_coef: p.entropy_coef,
            },
            learned: LearnedSection::default(),
            output: OutputSection::default(),
        }
    }
}

macro_rules! section_default {
    ($t:ident, $field:ident) => {
        impl Default for $t {
            fn default() -> Self {
                RunConfig::default().$field
            }
        }
    };
}

section_default!(TrainSection, train);
section_default!(LossSection, loss);
section_default!(RatesSection, rates);
section_default!(AdamSection, adam);
section_default!(HeuristicSection, heuristic);
section_default!(PpoSection, ppo);

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("."), init: "init.json".into(), cameras: "cameras.json".into(), targets: "targets".into() }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides to a TOML table.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (path, value) = o.split_once('=').with_context(|| format!("override `{o}` is not of the form key=value"))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            bail!("override `{o}` has an empty key");
        }
        let mut node = &mut *table;
        for k in &keys[..keys.len() - 1] {
            let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry.as_table_mut().with_context(|| format!("`{k}` in `{path}` is not a section"))?;
        }
        node.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.train_config()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults when `None`) and applies
    /// the overrides. Relative data and output paths stay relative to the
    /// working directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn controller(&self) -> Result<Controller> {
        let h = &self.heuristic;
        Ok(match self.train.controller.as_str() {
            "learned" => Controller::Learned(LearnedOptions {
                ppo: PpoConfig {
                    gamma: self.ppo.gamma,
                    lambda: self.ppo.lambda,
                    clip: self.ppo.clip,
                    epochs: self.ppo.epochs,
                    horizon: self.ppo.horizon,
                    lr_start: self.ppo.lr_start,
                    lr_end: self.ppo.lr_end,
                    minibatch: self.ppo.minibatch,
                    entropy_coef: self.ppo.entropy_coef,
                },
                frozen: self.learned.frozen,
                greedy: self.learned.greedy,
            }),
            "heuristic" => Controller::Heuristic(HeuristicOptions {
                thresholds: HeuristicThresholds { grad: h.grad, scale: h.scale, opacity: h.opacity },
                prune_oversized: (h.prune_oversized > 0.0).then_some(h.prune_oversized),
                opacity_reset: (h.opacity_reset_interval > 0).then_some((h.opacity_reset_interval, h.opacity_reset_value)),
                count_targets: (!h.count_targets.is_empty()).then(|| h.count_targets.clone()),
            }),
            "maintain-only" => Controller::MaintainOnly,
            other => bail!(splatrl_core::Error::Validation(format!(
                "unknown controller `{other}` (expected learned, heuristic or maintain-only)"
            ))),
        })
    }

    /// The core training configuration, validated.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            iterations: t.iterations,
            densify_from: t.densify_from,
            densify_until: t.densify_until,
            densify_interval: t.densify_interval,
            sensitivity_views: t.sensitivity_views,
            loss: LossConfig { lambda: self.loss.lambda },
            rates: LearningRates {
                position: self.rates.position,
                position_final_ratio: self.rates.position_final_ratio,
                rotation: self.rates.rotation,
                scale: self.rates.scale,
                opacity: self.rates.opacity,
                color: self.rates.color,
            },
            adam: AdamConfig { beta1: self.adam.beta1, beta2: self.adam.beta2, eps: self.adam.eps },
            controller: self.controller()?,
            max_gaussians: t.max_gaussians,
            eval_interval: t.eval_interval,
            tile_size: t.tile_size,
            seed: t.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
