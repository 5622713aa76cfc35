//! Plain-text run configuration: dotted keys, one `key = value` per line.
//!
//! `#` starts a comment (full line or trailing), blank lines are skipped,
//! later assignments win, and `--set key=value` overrides from the command
//! line win over the file. Lists are comma-separated. Unknown keys are
//! rejected so typos fail loudly instead of silently running defaults.

use std::path::{Path, PathBuf};

use crate::data::{self, MixtureDistribution};
use crate::denoiser::{GuidanceConfig, GuidanceMode};
use crate::error::{LabError, Result};
use crate::metrics::Bandwidth;

pub const KNOWN_KEYS: &[&str] = &[
    "schedule.total_steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "sampler.kind",
    "sampler.steps",
    "sampler.eta",
    "sampler.chains",
    "sampler.seed",
    "sampler.record_trajectory",
    "kernel.scheme",
    "kernel.components",
    "kernel.scale",
    "kernel.share_across_steps",
    "kernel.priors",
    "guidance.mode",
    "guidance.scale",
    "guidance.label",
    "metrics.mmd_bandwidth",
    "metrics.swd_projections",
    "metrics.eval_samples",
    "data.name",
    "data.table",
    "sweep.methods",
    "sweep.steps",
    "sweep.eta",
    "sweep.scales",
    "sweep.components",
    "sweep.share",
    "sweep.guidance_scales",
];

pub const METHOD_NAMES: &[&str] = &[
    "ddpm",
    "ddim",
    "gaussian",
    "gmm_rand",
    "gmm_ortho",
    "gmm_ortho_vub",
];

/// Raw key-value view of a config file plus overrides; last write wins.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: Vec<(String, String)>,
}

fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(config_err(format!("line {}: empty key", lineno + 1)));
            }
            entries.push((key.to_string(), unquote(value.trim()).to_string()));
        }
        Ok(ConfigMap { entries })
    }

    pub fn from_file(path: &Path) -> Result<ConfigMap> {
        let text = std::fs::read_to_string(path)?;
        ConfigMap::parse(&text)
    }

    /// Applies `key=value` override strings, after any file contents.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set {s:?}: expected key=value")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(config_err(format!("--set {s:?}: empty key")));
            }
            self.entries
                .push((key.to_string(), unquote(value.trim()).to_string()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }
}

fn unquote(v: &str) -> &str {
    let b = v.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' && b[b.len() - 1] == b'"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(config_err(format!("{key}: empty list")));
    }
    items.into_iter().map(|s| f(key, s)).collect()
}

/// Fully-resolved experiment settings: scalar settings for a single cell
/// plus the sweep axes (which default to singletons of the scalars).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub kind: String,
    pub steps: usize,
    pub eta: f64,
    pub chains: usize,
    pub seed: u64,
    pub record_trajectory: bool,

    pub scheme: String,
    pub components: usize,
    pub scale: f64,
    pub share_across_steps: bool,
    pub priors: Option<Vec<f64>>,

    pub guidance_mode: String,
    pub guidance_scale: f64,
    pub guidance_label: usize,

    pub mmd_bandwidth: Bandwidth,
    pub swd_projections: usize,
    pub eval_samples: usize,

    pub data_name: String,
    pub data_table: Option<PathBuf>,

    pub sweep_methods: Vec<String>,
    pub sweep_steps: Vec<usize>,
    pub sweep_eta: Vec<f64>,
    pub sweep_scales: Vec<f64>,
    pub sweep_components: Vec<usize>,
    pub sweep_share: Vec<bool>,
    pub sweep_guidance_scales: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: "ddim".into(),
            steps: 50,
            eta: 0.0,
            chains: 1000,
            seed: 0,
            record_trajectory: false,
            scheme: "gmm_ortho_vub".into(),
            // The orthonormal-frame schemes need K <= D; the builtin
            // targets are two-dimensional, so the usable default is 2.
            components: 2,
            scale: 0.1,
            share_across_steps: false,
            priors: None,
            guidance_mode: "none".into(),
            guidance_scale: 0.0,
            guidance_label: 0,
            mmd_bandwidth: Bandwidth::Median,
            swd_projections: 128,
            eval_samples: 2000,
            data_name: "ring8".into(),
            data_table: None,
            sweep_methods: vec!["ddim".into()],
            sweep_steps: vec![50],
            sweep_eta: vec![0.0],
            sweep_scales: vec![0.1],
            sweep_components: vec![2],
            sweep_share: vec![false],
            sweep_guidance_scales: vec![0.0],
        }
    }
}

impl ExperimentConfig {
    /// Reads the optional file, applies `--set` overrides, then an optional
    /// `--seed` override (strongest).
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut map = match path {
            Some(p) => ConfigMap::from_file(p)?,
            None => ConfigMap::default(),
        };
        map.apply_overrides(sets)?;
        if let Some(s) = seed {
            map.set("sampler.seed", &s.to_string());
        }
        ExperimentConfig::from_map(&map)
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let unknown: Vec<&str> = map
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(config_err(format!("unknown keys: {}", unknown.join(", "))));
        }
        let mut cfg = ExperimentConfig::default();
        if let Some(v) = map.get("schedule.total_steps") {
            cfg.total_steps = parse_scalar("schedule.total_steps", v)?;
        }
        if let Some(v) = map.get("schedule.beta_start") {
            cfg.beta_start = parse_scalar("schedule.beta_start", v)?;
        }
        if let Some(v) = map.get("schedule.beta_end") {
            cfg.beta_end = parse_scalar("schedule.beta_end", v)?;
        }
        if let Some(v) = map.get("sampler.kind") {
            if !["ddpm", "ddim", "ddim_gmm"].contains(&v) {
                return Err(config_err(format!(
                    "sampler.kind: {v:?} is not ddpm, ddim, or ddim_gmm"
                )));
            }
            cfg.kind = v.into();
        }
        if let Some(v) = map.get("sampler.steps") {
            cfg.steps = parse_scalar("sampler.steps", v)?;
        }
        if let Some(v) = map.get("sampler.eta") {
            cfg.eta = parse_scalar("sampler.eta", v)?;
        }
        if let Some(v) = map.get("sampler.chains") {
            cfg.chains = parse_scalar("sampler.chains", v)?;
        }
        if let Some(v) = map.get("sampler.seed") {
            cfg.seed = parse_scalar("sampler.seed", v)?;
        }
        if let Some(v) = map.get("sampler.record_trajectory") {
            cfg.record_trajectory = parse_bool("sampler.record_trajectory", v)?;
        }
        if let Some(v) = map.get("kernel.scheme") {
            if !["gaussian", "gmm_rand", "gmm_ortho", "gmm_ortho_vub"].contains(&v) {
                return Err(config_err(format!(
                    "kernel.scheme: {v:?} is not gaussian, gmm_rand, gmm_ortho, or gmm_ortho_vub"
                )));
            }
            cfg.scheme = v.into();
        }
        if let Some(v) = map.get("kernel.components") {
            cfg.components = parse_scalar("kernel.components", v)?;
        }
        if let Some(v) = map.get("kernel.scale") {
            cfg.scale = parse_scalar("kernel.scale", v)?;
        }
        if let Some(v) = map.get("kernel.share_across_steps") {
            cfg.share_across_steps = parse_bool("kernel.share_across_steps", v)?;
        }
        if let Some(v) = map.get("kernel.priors") {
            cfg.priors = Some(parse_list("kernel.priors", v, parse_scalar::<f64>)?);
        }
        if let Some(v) = map.get("guidance.mode") {
            if !["none", "classifier", "classifier_free"].contains(&v) {
                return Err(config_err(format!(
                    "guidance.mode: {v:?} is not none, classifier, or classifier_free"
                )));
            }
            cfg.guidance_mode = v.into();
        }
        if let Some(v) = map.get("guidance.scale") {
            cfg.guidance_scale = parse_scalar("guidance.scale", v)?;
        }
        if let Some(v) = map.get("guidance.label") {
            cfg.guidance_label = parse_scalar("guidance.label", v)?;
        }
        if let Some(v) = map.get("metrics.mmd_bandwidth") {
            cfg.mmd_bandwidth = if v == "median" {
                Bandwidth::Median
            } else {
                Bandwidth::Fixed(parse_scalar("metrics.mmd_bandwidth", v)?)
            };
        }
        if let Some(v) = map.get("metrics.swd_projections") {
            cfg.swd_projections = parse_scalar("metrics.swd_projections", v)?;
        }
        if let Some(v) = map.get("metrics.eval_samples") {
            cfg.eval_samples = parse_scalar("metrics.eval_samples", v)?;
        }
        if let Some(v) = map.get("data.name") {
            cfg.data_name = v.into();
        }
        if let Some(v) = map.get("data.table") {
            cfg.data_table = Some(PathBuf::from(v));
        }

        cfg.sweep_methods = match map.get("sweep.methods") {
            Some(v) => parse_list("sweep.methods", v, |key, s| {
                if METHOD_NAMES.contains(&s) {
                    Ok(s.to_string())
                } else {
                    Err(config_err(format!(
                        "{key}: {s:?} is not one of {}",
                        METHOD_NAMES.join(", ")
                    )))
                }
            })?,
            None => vec![default_method(&cfg.kind, &cfg.scheme)],
        };
        cfg.sweep_steps = match map.get("sweep.steps") {
            Some(v) => parse_list("sweep.steps", v, parse_scalar::<usize>)?,
            None => vec![cfg.steps],
        };
        cfg.sweep_eta = match map.get("sweep.eta") {
            Some(v) => parse_list("sweep.eta", v, parse_scalar::<f64>)?,
            None => vec![cfg.eta],
        };
        cfg.sweep_scales = match map.get("sweep.scales") {
            Some(v) => parse_list("sweep.scales", v, parse_scalar::<f64>)?,
            None => vec![cfg.scale],
        };
        cfg.sweep_components = match map.get("sweep.components") {
            Some(v) => parse_list("sweep.components", v, parse_scalar::<usize>)?,
            None => vec![cfg.components],
        };
        cfg.sweep_share = match map.get("sweep.share") {
            Some(v) => parse_list("sweep.share", v, parse_bool)?,
            None => vec![cfg.share_across_steps],
        };
        cfg.sweep_guidance_scales = match map.get("sweep.guidance_scales") {
            Some(v) => parse_list("sweep.guidance_scales", v, parse_scalar::<f64>)?,
            None => vec![cfg.guidance_scale],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(config_err("schedule.total_steps: must be at least 1"));
        }
        if self.steps == 0 || self.sweep_steps.iter().any(|&s| s == 0) {
            return Err(config_err("sampler.steps: must be at least 1"));
        }
        if self.chains == 0 {
            return Err(config_err("sampler.chains: must be at least 1"));
        }
        if self.eval_samples < 2 {
            return Err(config_err("metrics.eval_samples: need at least 2"));
        }
        if self.swd_projections == 0 {
            return Err(config_err("metrics.swd_projections: must be at least 1"));
        }
        if self.components == 0 || self.sweep_components.iter().any(|&k| k == 0) {
            return Err(config_err("kernel.components: must be at least 1"));
        }
        Ok(())
    }

    /// Materializes the target distribution: explicit component table if
    /// set, else a named builtin.
    pub fn data(&self) -> Result<MixtureDistribution> {
        if let Some(table) = &self.data_table {
            return data::load_component_table(table);
        }
        data::builtin(&self.data_name)
            .ok_or_else(|| config_err(format!("data.name: no builtin named {:?}", self.data_name)))
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        let mode = match self.guidance_mode.as_str() {
            "none" => GuidanceMode::None,
            "classifier" => GuidanceMode::Classifier,
            "classifier_free" => GuidanceMode::ClassifierFree,
            other => return Err(config_err(format!("guidance.mode: unknown mode {other:?}"))),
        };
        let cfg = GuidanceConfig {
            mode,
            scale: self.guidance_scale,
            target_label: (mode != GuidanceMode::None).then_some(self.guidance_label),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The sweep-method name equivalent to the scalar (kind, scheme) settings.
pub fn default_method(kind: &str, scheme: &str) -> String {
    match kind {
        "ddim_gmm" => match scheme {
            "gaussian" => "ddim".into(),
            other => other.into(),
        },
        other => other.into(),
    }
}
