//! Pseudo-label generation across views and the three ways of turning
//! pseudo-labels into unlabeled targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentKind;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensorlab::Target;

/// Tolerance on row sums of incoming predictions.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Where each view's pseudo-label comes from. Views are indexed `0..M` in
/// the order the trainer enables them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Each view labels itself.
    Own,
    /// Each view takes the prediction of another view drawn uniformly.
    Random { seed: u64 },
    /// View `m` takes the prediction of view `bijection[m]`.
    Cross { bijection: Vec<usize> },
    /// Weighted mean of the predictions. With `exclusion`, view `m` leaves
    /// itself out of its own mean.
    Aggregated { weights: Vec<f64>, exclusion: bool },
}

impl Strategy {
    /// Equal-weight aggregation over `m` views.
    pub fn aggregated(m: usize, exclusion: bool) -> Self {
        Strategy::Aggregated {
            weights: vec![1.0; m],
            exclusion,
        }
    }

    /// The cyclic derangement `v -> (v + shift) mod m`.
    pub fn cross_shift(m: usize, shift: usize) -> Self {
        Strategy::Cross {
            bijection: (0..m).map(|v| (v + shift) % m.max(1)).collect(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Strategy::Own => "self".into(),
            Strategy::Random { .. } => "random".into(),
            Strategy::Cross { bijection } => {
                let maps: Vec<String> = bijection.iter().map(|b| b.to_string()).collect();
                format!("cross[{}]", maps.join(","))
            }
            Strategy::Aggregated { exclusion: false, .. } => "aggregated-all".into(),
            Strategy::Aggregated { exclusion: true, .. } => "aggregated-exclusion".into(),
        }
    }

    /// Checks the strategy against `m` views.
    pub fn validate(&self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::invalid("no views"));
        }
        match self {
            Strategy::Own => Ok(()),
            Strategy::Random { .. } => {
                if m < 2 {
                    Err(Error::invalid("random strategy needs at least 2 views"))
                } else {
                    Ok(())
                }
            }
            Strategy::Cross { bijection } => {
                if bijection.len() != m {
                    return Err(Error::invalid(format!("bijection over {} views for {m} views", bijection.len())));
                }
                let mut seen = vec![false; m];
                for (v, &b) in bijection.iter().enumerate() {
                    if b >= m || seen[b] {
                        return Err(Error::invalid(format!("{bijection:?} is not a permutation")));
                    }
                    if b == v {
                        return Err(Error::invalid(format!("{bijection:?} maps view {v} to itself")));
                    }
                    seen[b] = true;
                }
                Ok(())
            }
            Strategy::Aggregated { weights, exclusion } => {
                if weights.len() != m {
                    return Err(Error::invalid(format!("{} weights for {m} views", weights.len())));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::invalid("aggregation weights must be finite and non-negative"));
                }
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return Err(Error::invalid("aggregation weights sum to zero"));
                }
                if *exclusion {
                    for v in 0..m {
                        if total - weights[v] <= 0.0 {
                            return Err(Error::invalid(format!("exclusion leaves view {v} with no weight")));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPseudoLabel {
    pub distribution: Vec<f64>,
    pub label: usize,
    pub confident: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelOutcome {
    pub views: Vec<ViewPseudoLabel>,
}

impl PseudoLabelOutcome {
    pub fn mask_count(&self) -> usize {
        self.views.iter().filter(|v| v.confident).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    PseudoLabel,
    Uda,
    FixMatch,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PseudoLabel, Method::Uda, Method::FixMatch];

    pub fn name(self) -> &'static str {
        match self {
            Method::PseudoLabel => "pseudo_label",
            Method::Uda => "uda",
            Method::FixMatch => "fixmatch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "pseudo_label" | "pseudo-label" => Ok(Method::PseudoLabel),
            "uda" => Ok(Method::Uda),
            "fixmatch" => Ok(Method::FixMatch),
            other => Err(Error::Config(format!("unknown method `{other}` (pseudo_label, uda, fixmatch)"))),
        }
    }

    /// Augmentation family of the branch that learns from the pseudo-labels.
    pub fn learner_augmentation(self) -> AugmentKind {
        match self {
            Method::PseudoLabel => AugmentKind::Weak,
            Method::Uda | Method::FixMatch => AugmentKind::Strong,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstantiationConfig {
    pub method: Method,
    pub tau: f64,
    /// Sharpening temperature, used by UDA only.
    pub temperature: f64,
}

impl InstantiationConfig {
    pub fn new(method: Method) -> Self {
        InstantiationConfig {
            method,
            tau: 0.3,
            temperature: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Config(format!("temperature {} outside (0, 1]", self.temperature)));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what}: empty distribution")));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("{what}: entries must be finite and non-negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("{what}: sums to {s}")));
    }
    Ok(())
}

fn weighted_mean(q: &[Vec<f64>], weights: &[f64], skip: Option<usize>) -> Vec<f64> {
    let c = q[0].len();
    let mut total = 0.0;
    let mut out = vec![0.0; c];
    for (k, (row, &w)) in q.iter().zip(weights).enumerate() {
        if Some(k) == skip {
            continue;
        }
        total += w;
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Pseudo-labels for the `M` views of one clip.
///
/// `q[m]` is the prediction on view `m`, `tau` the confidence threshold and
/// `draw` keys the random strategy's choices (the trainer passes the clip and
/// step).
pub fn generate_pseudolabels(q: &[Vec<f64>], strategy: &Strategy, tau: f64, draw: u64) -> Result<PseudoLabelOutcome> {
    let m = q.len();
    strategy.validate(m)?;
    let c = q[0].len();
    for (v, row) in q.iter().enumerate() {
        if row.len() != c {
            return Err(Error::invalid(format!("view {v} has {} classes, view 0 has {c}", row.len())));
        }
        check_distribution(row, &format!("prediction of view {v}"))?;
    }
    let sources: Vec<Vec<f64>> = match strategy {
        Strategy::Own => q.to_vec(),
        Strategy::Random { seed } => (0..m)
            .map(|v| {
                let mut rng = rng::stream(*seed, "random-view", &[draw, v as u64]);
                let mut n = rng.gen_range(0..m - 1);
                if n >= v {
                    n += 1;
                }
                q[n].clone()
            })
            .collect(),
        Strategy::Cross { bijection } => bijection.iter().map(|&b| q[b].clone()).collect(),
        Strategy::Aggregated { weights, exclusion } => {
            if *exclusion {
                (0..m).map(|v| weighted_mean(q, weights, Some(v))).collect()
            } else {
                vec![weighted_mean(q, weights, None); m]
            }
        }
    };
    let views = sources
        .into_iter()
        .map(|s| {
            let label = argmax(&s);
            ViewPseudoLabel {
                confident: s[label] >= tau,
                label,
                distribution: s,
            }
        })
        .collect();
    Ok(PseudoLabelOutcome { views })
}

/// `p^(1/T)`, renormalized.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature <= 1.0) {
        return Err(Error::invalid(format!("sharpening temperature {temperature} outside (0, 1]")));
    }
    check_distribution(p, "sharpen input")?;
    // work relative to the peak so tiny temperatures do not underflow
    let peak = p[argmax(p)];
    let powered: Vec<f64> = p.iter().map(|&v| (v / peak).powf(1.0 / temperature)).collect();
    let total: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledTarget {
    pub target: Target,
    pub include: bool,
}

/// Hard or sharpened soft targets per view, gated by the confidence mask.
pub fn unlabeled_targets(outcome: &PseudoLabelOutcome, inst: &InstantiationConfig) -> Result<Vec<UnlabeledTarget>> {
    inst.validate()?;
    outcome
        .views
        .iter()
        .map(|v| {
            let target = match inst.method {
                Method::PseudoLabel | Method::FixMatch => Target::Class(v.label),
                Method::Uda => Target::Soft(sharpen(&v.distribution, inst.temperature)?),
            };
            Ok(UnlabeledTarget {
                target,
                include: v.confident,
            })
        })
        .collect()
}
