//! The verbs behind the binary, usable without it.

use std::fs;
use std::path::{Path, PathBuf};

use mvpl_core::data::{self, Dataset, MotionShapesSpec};
use mvpl_core::gradsuite::{self, SuiteCase};
use mvpl_core::model::ModelState;
use mvpl_core::trainer::{self, EpochMetrics, EvalProtocol, TrainData};
use mvpl_core::views::{VideoClip, ViewKind, ViewSet};
use mvpl_core::{Error, Result};

use crate::config::{RunConfig, StrategyName};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mvpl";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Writes `bytes` to `path` through a sibling temporary file, so a failed
/// write never leaves a half-written target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to replace it", path.display())));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub spec: MotionShapesSpec,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            spec: MotionShapesSpec {
                height: 20,
                width: 20,
                ..MotionShapesSpec::default()
            },
            train_per_class: 100,
            eval_per_class: 25,
            labeled_fraction: 0.1,
            seed: 0,
        }
    }
}

pub fn generate(opts: &GenOptions) -> Result<Dataset> {
    data::generate(&opts.spec, opts.train_per_class, opts.eval_per_class, opts.seed)?
        .with_splits(opts.labeled_fraction, mvpl_core::rng::derive_seed(opts.seed, "split", &[]))
}

pub fn gen_data(out: &Path, opts: &GenOptions, force: bool) -> Result<Dataset> {
    refuse_existing(out, force)?;
    let ds = generate(opts)?;
    write_atomic(out, &ds.to_bytes()?)?;
    Ok(ds)
}

pub fn extract_views(input: &Path, out: &Path, params: &mvpl_core::views::FlowParams, force: bool) -> Result<Dataset> {
    if input != out {
        refuse_existing(out, force)?;
    } else if !force {
        return Err(Error::Config(format!("rewriting {} in place needs --force", input.display())));
    }
    let mut ds = Dataset::read(input)?;
    ds.extract_views(params)?;
    write_atomic(out, &ds.to_bytes()?)?;
    Ok(ds)
}

/// A dataset with its split applied and every view set materialized.
pub struct Prepared {
    pub dataset: Dataset,
    pub viewsets: Vec<ViewSet>,
    /// Set when views had to be computed because the container lacked them.
    pub computed_views: bool,
}

impl Prepared {
    pub fn new(mut dataset: Dataset, cfg: &RunConfig) -> Result<Self> {
        if let Some(p) = cfg.labeled_fraction {
            dataset = dataset.with_splits(p, mvpl_core::rng::derive_seed(cfg.seed, "split", &[]))?;
        } else if dataset.manifest.labeled_fraction.is_none() {
            return Err(Error::Config("dataset has no labeled split; set labeled_fraction".into()));
        }
        let params = cfg.flow_params();
        let stored_params = dataset.manifest.flow_params;
        let needs_views = cfg.views.iter().any(|v| *v != ViewKind::Rgb);
        let computed_views = needs_views && (!dataset.has_views() || stored_params != Some(params));
        let viewsets = if computed_views {
            dataset.clips.iter().map(|c| mvpl_core::views::build_viewset(c, &params)).collect::<Result<_>>()?
        } else if needs_views {
            dataset.viewsets(&params)?
        } else {
            // RGB-only runs never read the other views
            dataset
                .clips
                .iter()
                .map(|c| ViewSet::new(c.clone(), c.clone(), c.clone()))
                .collect::<Result<_>>()?
        };
        Ok(Prepared {
            dataset,
            viewsets,
            computed_views,
        })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData::from_dataset(&self.dataset, &self.viewsets)
    }

    pub fn eval_set(&self) -> Vec<(&VideoClip, usize)> {
        self.dataset
            .manifest
            .eval_indices()
            .into_iter()
            .map(|i| (&self.dataset.clips[i], self.dataset.label(i)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ModelState,
    pub history: Vec<EpochMetrics>,
    pub csv: String,
}

impl RunOutcome {
    pub fn top1(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|m| m.top1)
    }
}

/// Trains on an already prepared dataset without touching the filesystem.
pub fn train_prepared(prep: &Prepared, cfg: &RunConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    let tc = cfg.train_config()?;
    let eval = prep.eval_set();
    let (state, history) = trainer::train(&tc, &prep.train_data(), &eval, on_epoch)?;
    let csv = trainer::metrics_csv(&tc.views, &history);
    Ok(RunOutcome {
        model: state.model,
        history,
        csv,
    })
}

/// Trains and writes config, metrics and checkpoint into `cfg.out_dir`.
/// Files are written to a staging directory and moved into place at the end.
pub fn train_to_dir(prep: &Prepared, cfg: &RunConfig, force: bool, on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    let out = &cfg.out_dir;
    refuse_existing(out, force)?;
    cfg.train_config()?;
    let outcome = train_prepared(prep, cfg, on_epoch)?;
    let staging = staging_dir(out)?;
    write_run_files(&staging, cfg, &outcome)?;
    replace_dir(&staging, out)?;
    Ok(outcome)
}

fn write_run_files(dir: &Path, cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(dir.join(METRICS_FILE), &outcome.csv)?;
    data::save_checkpoint(&outcome.model, &dir.join(CHECKPOINT_FILE))
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a directory name", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{}.staging", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    Ok(staging)
}

fn replace_dir(staging: &Path, out: &Path) -> Result<()> {
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    fs::rename(staging, out)?;
    Ok(())
}

pub fn evaluate_checkpoint(checkpoint: &Path, dataset: &Path, protocol: &EvalProtocol) -> Result<f64> {
    let model = data::load_checkpoint(checkpoint)?;
    let ds = Dataset::read(dataset)?;
    let eval: Vec<(&VideoClip, usize)> = ds
        .manifest
        .eval_indices()
        .into_iter()
        .map(|i| (&ds.clips[i], ds.label(i)))
        .collect();
    trainer::evaluate(&model, &eval, model.config.frames, model.config.height, protocol)
}

pub fn gradcheck() -> Result<Vec<SuiteCase>> {
    gradsuite::run(gradsuite::EPS, gradsuite::TOLERANCE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    /// Method x {single view, all views}.
    Methods,
    /// View subsets.
    Views,
    /// Pseudo-label strategies.
    Strategies,
    /// Warm-up lengths.
    Warmup,
}

impl Table {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1a" => Ok(Table::Methods),
            "1b" => Ok(Table::Views),
            "1c" => Ok(Table::Strategies),
            "a1" => Ok(Table::Warmup),
            other => Err(Error::Config(format!("unknown table `{other}` (1a, 1b, 1c, a1)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Table::Methods => "1a",
            Table::Views => "1b",
            Table::Strategies => "1c",
            Table::Warmup => "a1",
        }
    }
}

/// Epoch count the warm-up sweep values are expressed in.
pub const WARMUP_REFERENCE_EPOCHS: usize = 600;

/// Maps warm-up lengths given against a `reference`-epoch schedule onto
/// `epochs`, keeping at least one epoch with the unlabeled loss.
pub fn scale_warmup(w: usize, reference: usize, epochs: usize) -> usize {
    let scaled = (w as f64 * epochs as f64 / reference as f64).round() as usize;
    scaled.min(epochs.saturating_sub(1))
}

/// Variant name and its config, derived from `base`.
pub fn variants(table: Table, base: &RunConfig, warmups: &[usize]) -> Result<Vec<(String, RunConfig)>> {
    use mvpl_core::ssl_core::Method;
    let single = |cfg: &mut RunConfig| {
        cfg.views = vec![ViewKind::Rgb];
        cfg.strategy = StrategyName::Own;
    };
    let all = |cfg: &mut RunConfig| cfg.views = ViewKind::ALL.to_vec();
    let mut out = Vec::new();
    match table {
        Table::Methods => {
            for method in Method::ALL {
                for mvpl in [false, true] {
                    let mut c = base.clone();
                    c.method = method;
                    if mvpl {
                        all(&mut c);
                    } else {
                        single(&mut c);
                    }
                    out.push((format!("{}/{}", method.name(), if mvpl { "mvpl" } else { "base" }), c));
                }
            }
        }
        Table::Views => {
            let subsets: [&[ViewKind]; 4] = [
                &[ViewKind::Rgb],
                &[ViewKind::Rgb, ViewKind::Flow],
                &[ViewKind::Rgb, ViewKind::TemporalGradient],
                &ViewKind::ALL,
            ];
            for views in subsets {
                let mut c = base.clone();
                c.views = views.to_vec();
                if views.len() == 1 {
                    c.strategy = StrategyName::Own;
                }
                let name = views.iter().map(|v| v.name()).collect::<Vec<_>>().join("+");
                out.push((name, c));
            }
        }
        Table::Strategies => {
            for s in [
                StrategyName::Own,
                StrategyName::Random,
                StrategyName::Cross,
                StrategyName::AggregatedExclusion,
                StrategyName::AggregatedAll,
            ] {
                let mut c = base.clone();
                all(&mut c);
                c.strategy = s;
                out.push((s.name().to_string(), c));
            }
        }
        Table::Warmup => {
            if warmups.is_empty() {
                return Err(Error::Config("--warmups needs at least one value".into()));
            }
            for &w in warmups {
                let mut c = base.clone();
                c.w = scale_warmup(w, WARMUP_REFERENCE_EPOCHS, base.epochs);
                out.push((format!("W{w}"), c));
            }
        }
    }
    for (_, c) in &out {
        c.train_config()?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub top1: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.top1.iter().sum::<f64>() / self.top1.len() as f64
    }
}

pub fn summary_csv(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut out = String::from("variant,top1");
    for s in seeds {
        out.push_str(&format!(",top1_seed{s}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.variant, r.mean()));
        for v in &r.top1 {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Runs every variant for every seed. Each run goes to
/// `out_dir/<variant>/seed<s>`, the table to `out_dir/summary.csv`.
pub fn ablate(
    prep: &Prepared,
    table: Table,
    base: &RunConfig,
    seeds: &[u64],
    warmups: &[usize],
    force: bool,
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let root = &base.out_dir;
    refuse_existing(root, force)?;
    let runs = variants(table, base, warmups)?;
    let staging = staging_dir(root)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (name, cfg) in runs {
        let mut top1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let rel = PathBuf::from(name.replace('/', "-")).join(format!("seed{seed}"));
            let mut c = cfg.clone();
            c.seed = seed;
            c.out_dir = root.join(&rel);
            let outcome = train_prepared(prep, &c, |_| {})?;
            write_run_files(&staging.join(&rel), &c, &outcome)?;
            let acc = outcome
                .top1()
                .ok_or_else(|| Error::Config("the dataset has no evaluation clips".into()))?;
            progress(&name, seed, acc);
            top1.push(acc);
        }
        rows.push(AblationRow { variant: name, top1 });
    }
    fs::write(staging.join(CONFIG_FILE), base.to_text())?;
    fs::write(staging.join(SUMMARY_FILE), summary_csv(&rows, seeds))?;
    replace_dir(&staging, root)?;
    Ok(rows)
}
