//! Synthetic dataset generation, labeled splits, and on-disk storage for
//! datasets and model checkpoints.

pub mod container;
mod motion;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use motion::{
    draw_motion, ground_truth_flow, render, MotionClass, MotionParams, MotionShapesSpec, ShapeKind, ShapeParams,
};

use crate::error::{ContainerError, Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::rng;
use crate::tensorlab::Tensor;
use crate::views::{build_viewset, FlowField, FlowParams, VideoClip, ViewKind, ViewSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: u64,
    pub label: usize,
    pub split: Split,
    /// Member of the labeled training subset. Every train clip is also in the
    /// unlabeled pool.
    pub labeled: bool,
    pub shape: [usize; 4],
    pub motion: MotionParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: MotionShapesSpec,
    pub seed: u64,
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub labeled_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub clips: Vec<ClipRecord>,
    /// Views stored alongside the clips, with the flow parameters used.
    pub stored_views: Vec<ViewKind>,
    pub flow_params: Option<FlowParams>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn indices(&self, pred: impl Fn(&ClipRecord) -> bool) -> Vec<usize> {
        self.clips.iter().enumerate().filter(|(_, c)| pred(c)).map(|(i, _)| i).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(|c| c.split == Split::Train)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.indices(|c| c.split == Split::Train && c.labeled)
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        self.indices(|c| c.split == Split::Eval)
    }
}

/// Clips, ground-truth flow (translation classes only) and any stored views,
/// index-aligned with `manifest.clips`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<VideoClip>,
    pub ground_truth: Vec<Option<FlowField>>,
    pub views: BTreeMap<ViewKind, Vec<VideoClip>>,
}

/// Generates `train_per_class` training and `eval_per_class` evaluation clips
/// per class. Ids are assigned train first, classes interleaved.
pub fn generate(spec: &MotionShapesSpec, train_per_class: usize, eval_per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if train_per_class == 0 {
        return Err(Error::Config("need at least one training clip per class".into()));
    }
    let n_classes = MotionClass::ALL.len();
    let mut records = Vec::new();
    let mut clips = Vec::new();
    let mut ground_truth = Vec::new();
    for (split, per_class) in [(Split::Train, train_per_class), (Split::Eval, eval_per_class)] {
        for k in 0..per_class * n_classes {
            let id = records.len() as u64;
            let class = MotionClass::ALL[k % n_classes];
            let motion = draw_motion(spec, class, seed, id);
            let clip = render(spec, &motion, seed, id)?;
            ground_truth.push(ground_truth_flow(spec, &motion));
            records.push(ClipRecord {
                id,
                label: class.index(),
                split,
                labeled: false,
                shape: clip.shape(),
                motion,
            });
            clips.push(clip);
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            generator: spec.clone(),
            seed,
            classes: MotionClass::ALL.iter().map(|c| c.name().to_string()).collect(),
            train_per_class,
            eval_per_class,
            labeled_fraction: None,
            split_seed: None,
            clips: records,
            stored_views: Vec::new(),
            flow_params: None,
        },
        clips,
        ground_truth,
        views: BTreeMap::new(),
    })
}

/// Marks a class-balanced labeled subset of `ceil(p * n)` training clips per
/// class. Evaluation clips are left alone.
pub fn make_splits(manifest: &DatasetManifest, p: f64, seed: u64) -> Result<DatasetManifest> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("labeled fraction {p} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in manifest.clips.iter().enumerate() {
        if c.split == Split::Train {
            by_class.entry(c.label).or_default().push(i);
        }
    }
    let mut out = manifest.clone();
    for c in &mut out.clips {
        c.labeled = false;
    }
    for (class, mut members) in by_class {
        let take = (p * members.len() as f64).ceil() as usize;
        if take == 0 {
            return Err(Error::Config(format!("fraction {p} labels no clip of class {class}")));
        }
        members.shuffle(&mut rng::stream(seed, "split", &[class as u64]));
        for &i in &members[..take] {
            out.clips[i].labeled = true;
        }
    }
    out.labeled_fraction = Some(p);
    out.split_seed = Some(seed);
    Ok(out)
}

const DATASET_KIND: &str = "dataset";
const CHECKPOINT_KIND: &str = "checkpoint";

fn clip_blob(id: u64) -> String {
    format!("clip/{id}")
}

fn gt_blob(id: u64) -> String {
    format!("gtflow/{id}")
}

fn view_blob(kind: ViewKind, id: u64) -> String {
    format!("view/{}/{id}", kind.name())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.clips[i].label
    }

    pub fn with_splits(mut self, p: f64, seed: u64) -> Result<Self> {
        self.manifest = make_splits(&self.manifest, p, seed)?;
        Ok(self)
    }

    pub fn has_views(&self) -> bool {
        self.views.contains_key(&ViewKind::Flow) && self.views.contains_key(&ViewKind::TemporalGradient)
    }

    /// Computes and stores flow and temporal-gradient views for every clip.
    pub fn extract_views(&mut self, params: &FlowParams) -> Result<()> {
        let mut flow = Vec::with_capacity(self.clips.len());
        let mut tg = Vec::with_capacity(self.clips.len());
        for clip in &self.clips {
            let vs = build_viewset(clip, params)?;
            flow.push(vs.flow);
            tg.push(vs.tg);
        }
        self.views.insert(ViewKind::Flow, flow);
        self.views.insert(ViewKind::TemporalGradient, tg);
        self.manifest.stored_views = vec![ViewKind::Flow, ViewKind::TemporalGradient];
        self.manifest.flow_params = Some(*params);
        Ok(())
    }

    /// The three views of clip `i`, from storage when present.
    pub fn viewset(&self, i: usize, params: &FlowParams) -> Result<ViewSet> {
        match (self.views.get(&ViewKind::Flow), self.views.get(&ViewKind::TemporalGradient)) {
            (Some(f), Some(t)) => ViewSet::new(self.clips[i].clone(), f[i].clone(), t[i].clone()),
            _ => build_viewset(&self.clips[i], params),
        }
    }

    /// Every view set, computing missing views on the fly.
    pub fn viewsets(&self, params: &FlowParams) -> Result<Vec<ViewSet>> {
        (0..self.len()).map(|i| self.viewset(i, params)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, &[f64])> = Vec::new();
        for c in &self.clips {
            blobs.push((clip_blob(c.id), c.data()));
        }
        for (c, gt) in self.clips.iter().zip(&self.ground_truth) {
            if let Some(f) = gt {
                blobs.push((gt_blob(c.id), &f.data));
            }
        }
        for kind in &self.manifest.stored_views {
            let views = self
                .views
                .get(kind)
                .ok_or_else(|| Error::invalid(format!("manifest lists {} views that are absent", kind.name())))?;
            for v in views {
                blobs.push((view_blob(*kind, v.id), v.data()));
            }
        }
        container::encode(DATASET_KIND, &self.manifest, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(bytes)?;
        c.expect_kind(DATASET_KIND)?;
        let manifest: DatasetManifest = c.meta()?;
        let read = |name: String, rec: &ClipRecord| -> Result<VideoClip> {
            VideoClip::new(rec.id, rec.shape, c.blob(&name)?)
                .map_err(|e| ContainerError::Manifest(format!("{name}: {e}")).into())
        };
        let clips = manifest
            .clips
            .iter()
            .map(|r| read(clip_blob(r.id), r))
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = manifest
            .clips
            .iter()
            .map(|r| {
                if r.motion.class.direction().is_none() {
                    return Ok(None);
                }
                let [t, h, w, _] = r.shape;
                let data = c.blob(&gt_blob(r.id))?;
                if data.len() != (t - 1) * h * w * 2 {
                    return Err(ContainerError::Manifest(format!("ground truth of clip {} has {} values", r.id, data.len())).into());
                }
                Ok(Some(FlowField {
                    frames: t - 1,
                    height: h,
                    width: w,
                    data,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut views = BTreeMap::new();
        for kind in &manifest.stored_views {
            let v = manifest
                .clips
                .iter()
                .map(|r| read(view_blob(*kind, r.id), r))
                .collect::<Result<Vec<_>>>()?;
            views.insert(*kind, v);
        }
        Ok(Dataset {
            manifest,
            clips,
            ground_truth,
            views,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    step: u64,
    shapes: Vec<Vec<usize>>,
}

pub fn checkpoint_to_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let params = state.parameters();
    let meta = CheckpointMeta {
        config: state.config.clone(),
        step: state.step,
        shapes: params.iter().map(|(t, _)| t.shape().to_vec()).collect(),
    };
    let mut blobs: Vec<(String, &[f64])> = Vec::new();
    for (i, (t, _)) in params.iter().enumerate() {
        blobs.push((format!("param/{i}"), t.data()));
    }
    for (i, (m, v)) in state.running_mean.iter().zip(&state.running_var).enumerate() {
        blobs.push((format!("running_mean/{i}"), m));
        blobs.push((format!("running_var/{i}"), v));
    }
    container::encode(CHECKPOINT_KIND, &meta, &blobs)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let c = container::decode(bytes)?;
    c.expect_kind(CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = c.meta()?;
    let mut state = crate::model::init_parameters(&meta.config, 0)?;
    state.step = meta.step;
    let n = state.parameters().len();
    if meta.shapes.len() != n {
        return Err(ContainerError::Manifest(format!("{} parameter tensors, config needs {n}", meta.shapes.len())).into());
    }
    for (i, (slot, shape)) in state.parameters_mut().into_iter().zip(&meta.shapes).enumerate() {
        if slot.shape() != shape.as_slice() {
            return Err(ContainerError::Manifest(format!("parameter {i} has shape {shape:?}")).into());
        }
        *slot = Tensor::new(shape.clone(), c.blob(&format!("param/{i}"))?)?;
    }
    for i in 0..state.running_mean.len() {
        state.running_mean[i] = c.blob(&format!("running_mean/{i}"))?;
        state.running_var[i] = c.blob(&format!("running_var/{i}"))?;
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests;
