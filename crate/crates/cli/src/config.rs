//! Flat `key = value` run configuration.
//!
//! Every key has an explicit default and is written back out in full next to
//! the metrics of each run. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::PathBuf;

use mvpl_core::model::ModelConfig;
use mvpl_core::ssl_core::{InstantiationConfig, Method, Strategy};
use mvpl_core::trainer::{BnGroups, EvalProtocol, TrainConfig};
use mvpl_core::views::{FlowParams, ViewKind};
use mvpl_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyName {
    Own,
    Random,
    Cross,
    AggregatedAll,
    AggregatedExclusion,
}

impl StrategyName {
    pub const ALL: [StrategyName; 5] = [
        StrategyName::Own,
        StrategyName::Random,
        StrategyName::Cross,
        StrategyName::AggregatedAll,
        StrategyName::AggregatedExclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyName::Own => "own",
            StrategyName::Random => "random",
            StrategyName::Cross => "cross",
            StrategyName::AggregatedAll => "aggregated_all",
            StrategyName::AggregatedExclusion => "aggregated_exclusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub method: Method,
    pub views: Vec<ViewKind>,
    pub strategy: StrategyName,
    /// Shift of the cyclic derangement used by `cross`.
    pub cross_shift: usize,
    pub tau: f64,
    pub temperature: f64,
    pub mu: usize,
    pub lambda_u: f64,
    pub eta: f64,
    pub lr_ramp_epochs: f64,
    pub epochs: usize,
    pub w: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_labeled: usize,
    pub crop: usize,
    pub frames: usize,
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub flip_prob: f64,
    pub weak_branch_mode: String,
    /// `view` gives each view its own batch statistics; `batch` pools them.
    pub bn_groups: String,
    pub eval_clips: usize,
    pub eval_crops: usize,
    pub eval_scale: f64,
    pub eval_every: usize,
    /// Relabels the dataset split when set; otherwise the stored split is used.
    pub labeled_fraction: Option<f64>,
    pub flow_alpha: f64,
    pub flow_iterations: usize,
    pub flow_levels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let flow = FlowParams::default();
        RunConfig {
            dataset: PathBuf::from("data.mvpl"),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            method: Method::FixMatch,
            views: ViewKind::ALL.to_vec(),
            strategy: StrategyName::AggregatedAll,
            cross_shift: 1,
            tau: 0.3,
            temperature: 0.5,
            mu: 2,
            lambda_u: 1.0,
            eta: 0.1,
            lr_ramp_epochs: 3.4,
            epochs: 60,
            w: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_labeled: 8,
            crop: 16,
            frames: 8,
            widths: vec![8, 16, 32],
            dropout: 0.5,
            flip_prob: 0.0,
            weak_branch_mode: "eval".into(),
            bn_groups: "view".into(),
            eval_clips: 2,
            eval_crops: 1,
            eval_scale: 256.0 / 224.0,
            eval_every: 10,
            labeled_fraction: None,
            flow_alpha: flow.alpha,
            flow_iterations: flow.iterations,
            flow_levels: flow.levels,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Keys in the order they are written.
    pub const KEYS: [&'static str; 33] = [
        "dataset",
        "out_dir",
        "seed",
        "method",
        "views",
        "strategy",
        "cross_shift",
        "tau",
        "temperature",
        "mu",
        "lambda_u",
        "eta",
        "lr_ramp_epochs",
        "epochs",
        "W",
        "momentum",
        "weight_decay",
        "batch_labeled",
        "crop",
        "frames",
        "widths",
        "dropout",
        "flip_prob",
        "weak_branch_mode",
        "bn_groups",
        "eval_clips",
        "eval_crops",
        "eval_scale",
        "eval_every",
        "labeled_fraction",
        "flow_alpha",
        "flow_iterations",
        "flow_levels",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse_num(key, v)?,
            "method" => self.method = Method::parse(v)?,
            "views" => {
                self.views = v
                    .split(',')
                    .map(|s| ViewKind::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            "strategy" => self.strategy = StrategyName::parse(v)?,
            "cross_shift" => self.cross_shift = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "lambda_u" => self.lambda_u = parse_num(key, v)?,
            "eta" => self.eta = parse_num(key, v)?,
            "lr_ramp_epochs" => self.lr_ramp_epochs = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "W" => self.w = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "batch_labeled" => self.batch_labeled = parse_num(key, v)?,
            "crop" => self.crop = parse_num(key, v)?,
            "frames" => self.frames = parse_num(key, v)?,
            "widths" => self.widths = parse_list(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "flip_prob" => self.flip_prob = parse_num(key, v)?,
            "weak_branch_mode" => {
                if v != "eval" && v != "train" {
                    return Err(Error::Config(format!("weak_branch_mode must be eval or train, got `{v}`")));
                }
                self.weak_branch_mode = v.to_string();
            }
            "bn_groups" => {
                if v != "view" && v != "batch" {
                    return Err(Error::Config(format!("bn_groups must be view or batch, got `{v}`")));
                }
                self.bn_groups = v.to_string();
            }
            "eval_clips" => self.eval_clips = parse_num(key, v)?,
            "eval_crops" => self.eval_crops = parse_num(key, v)?,
            "eval_scale" => self.eval_scale = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "labeled_fraction" => {
                self.labeled_fraction = if v.is_empty() || v == "stored" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "flow_alpha" => self.flow_alpha = parse_num(key, v)?,
            "flow_iterations" => self.flow_iterations = parse_num(key, v)?,
            "flow_levels" => self.flow_levels = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`) assignments.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let value = match key {
                "dataset" => self.dataset.display().to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "seed" => self.seed.to_string(),
                "method" => self.method.name().to_string(),
                "views" => self.views.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
                "strategy" => self.strategy.name().to_string(),
                "cross_shift" => self.cross_shift.to_string(),
                "tau" => self.tau.to_string(),
                "temperature" => self.temperature.to_string(),
                "mu" => self.mu.to_string(),
                "lambda_u" => self.lambda_u.to_string(),
                "eta" => self.eta.to_string(),
                "lr_ramp_epochs" => self.lr_ramp_epochs.to_string(),
                "epochs" => self.epochs.to_string(),
                "W" => self.w.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "batch_labeled" => self.batch_labeled.to_string(),
                "crop" => self.crop.to_string(),
                "frames" => self.frames.to_string(),
                "widths" => join(&self.widths),
                "dropout" => self.dropout.to_string(),
                "flip_prob" => self.flip_prob.to_string(),
                "weak_branch_mode" => self.weak_branch_mode.clone(),
                "bn_groups" => self.bn_groups.clone(),
                "eval_clips" => self.eval_clips.to_string(),
                "eval_crops" => self.eval_crops.to_string(),
                "eval_scale" => self.eval_scale.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "labeled_fraction" => self.labeled_fraction.map_or("stored".into(), |p| p.to_string()),
                "flow_alpha" => self.flow_alpha.to_string(),
                "flow_iterations" => self.flow_iterations.to_string(),
                "flow_levels" => self.flow_levels.to_string(),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn strategy(&self) -> Strategy {
        let m = self.views.len();
        match self.strategy {
            StrategyName::Own => Strategy::Own,
            StrategyName::Random => Strategy::Random {
                seed: mvpl_core::rng::derive_seed(self.seed, "strategy-random", &[]),
            },
            StrategyName::Cross => Strategy::cross_shift(m, self.cross_shift),
            StrategyName::AggregatedAll => Strategy::aggregated(m, false),
            StrategyName::AggregatedExclusion => Strategy::aggregated(m, true),
        }
    }

    pub fn flow_params(&self) -> FlowParams {
        FlowParams {
            alpha: self.flow_alpha,
            iterations: self.flow_iterations,
            levels: self.flow_levels,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: ModelConfig {
                frames: self.frames,
                height: self.crop,
                width: self.crop,
                widths: self.widths.clone(),
                dropout: self.dropout,
                ..ModelConfig::default()
            },
            views: self.views.clone(),
            instantiation: InstantiationConfig {
                method: self.method,
                tau: self.tau,
                temperature: self.temperature,
            },
            strategy: self.strategy(),
            mu: self.mu,
            lambda_u: self.lambda_u,
            epochs: self.epochs,
            warmup_epochs: self.w,
            lr_base: self.eta,
            lr_ramp_epochs: self.lr_ramp_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_labeled: self.batch_labeled,
            seed: self.seed,
            crop: self.crop,
            flip_prob: self.flip_prob,
            eval: EvalProtocol {
                clips: self.eval_clips,
                crops: self.eval_crops,
                scale: self.eval_scale,
            },
            eval_every: self.eval_every,
            weak_branch_train_mode: self.weak_branch_mode == "train",
            bn_groups: if self.bn_groups == "batch" { BnGroups::Batch } else { BnGroups::View },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
