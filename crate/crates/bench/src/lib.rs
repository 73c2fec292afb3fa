//! Fixtures shared by the benchmarks.

use mvpl_core::data::{self, Dataset, MotionShapesSpec};
use mvpl_core::model::ModelConfig;
use mvpl_core::ssl_core::{InstantiationConfig, Method, Strategy};
use mvpl_core::tensorlab::Tensor;
use mvpl_core::trainer::TrainConfig;
use mvpl_core::views::{FlowParams, VideoClip, ViewKind, ViewSet};
use mvpl_core::Result;

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut s = seed | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// A texture translated one pixel per frame.
pub fn translating_clip(frames: usize, side: usize) -> VideoClip {
    let mut data = Vec::with_capacity(frames * side * side * 3);
    for t in 0..frames {
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 - t as f64) * 0.5;
                let v = 127.5 + 60.0 * u.sin() * (y as f64 * 0.4).cos();
                data.extend([v, v, v]);
            }
        }
    }
    VideoClip::new(0, [frames, side, side, 3], data).expect("in range")
}

/// The desk-scale configuration at a given frame side.
pub fn desk_config(crop: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            frames: 8,
            height: crop,
            width: crop,
            widths: vec![8, 16, 32],
            ..Default::default()
        },
        crop,
        views: ViewKind::ALL.to_vec(),
        instantiation: InstantiationConfig::new(Method::FixMatch),
        strategy: Strategy::aggregated(3, false),
        mu: 2,
        lr_base: 0.1,
        lr_ramp_epochs: 3.4,
        batch_labeled: 8,
        flip_prob: 0.0,
        ..Default::default()
    }
}

/// A small MotionShapes dataset with views extracted.
pub fn dataset(side: usize, per_class: usize) -> Result<(Dataset, Vec<ViewSet>)> {
    let spec = MotionShapesSpec {
        height: side,
        width: side,
        ..Default::default()
    };
    let ds = data::generate(&spec, per_class, 0, 1)?.with_splits(0.5, 1)?;
    let vs = ds.viewsets(&FlowParams::default())?;
    Ok((ds, vs))
}
