//! Temporally consistent clip augmentation.
//!
//! All random draws for a clip happen once, up front, into a plan; the plan is
//! then applied frame by frame. Pairing a plan with several views of the same
//! clip keeps them pixel-aligned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::views::{VideoClip, ViewKind, ViewSet};

/// Value written wherever geometry uncovers pixels, and inside the cutout.
pub const FILL: f64 = 127.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    None,
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub seed: u64,
    /// Side of the square output crop.
    pub crop: usize,
    /// The shorter side is resized to `crop` times a factor drawn from this range.
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub ops_per_sample: usize,
    pub max_magnitude: u32,
    /// Cutout side as a fraction of the crop side.
    pub cutout_ratio: f64,
}

impl AugmentationPolicy {
    pub fn weak(crop: usize, seed: u64) -> Self {
        AugmentationPolicy {
            kind: AugmentKind::Weak,
            seed,
            crop,
            scale_range: (256.0 / 224.0, 320.0 / 224.0),
            flip_prob: 0.5,
            ops_per_sample: 2,
            max_magnitude: 10,
            cutout_ratio: 128.0 / 224.0,
        }
    }

    pub fn strong(crop: usize, seed: u64) -> Self {
        AugmentationPolicy {
            kind: AugmentKind::Strong,
            ..Self::weak(crop, seed)
        }
    }

    pub fn none(crop: usize) -> Self {
        AugmentationPolicy {
            kind: AugmentKind::None,
            ..Self::weak(crop, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.crop == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) must satisfy 1 <= lo <= hi")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if self.max_magnitude == 0 {
            return Err(Error::Config("max magnitude must be at least 1".into()));
        }
        if !(self.cutout_ratio > 0.0 && self.cutout_ratio <= 1.0) {
            return Err(Error::Config(format!("cutout ratio {} outside (0, 1]", self.cutout_ratio)));
        }
        Ok(())
    }

    fn label(&self) -> &'static str {
        match self.kind {
            AugmentKind::None => "augment-none",
            AugmentKind::Weak => "augment-weak",
            AugmentKind::Strong => "augment-strong",
        }
    }
}

/// Keys one augmentation draw together with the policy seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugmentKey {
    pub clip: u64,
    pub step: u64,
}

/// Flip, then resize to `resized`, then crop `crop x crop` at `origin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub flip: bool,
    pub resized: [usize; 2],
    pub origin: [usize; 2],
    pub crop: usize,
}

impl Geometry {
    /// Resize the shorter side of an `h x w` input to `short`.
    pub fn resize_shorter(h: usize, w: usize, short: usize) -> [usize; 2] {
        if h <= w {
            [short, ((w as f64 * short as f64 / h as f64).round() as usize).max(short)]
        } else {
            [((h as f64 * short as f64 / w as f64).round() as usize).max(short), short]
        }
    }

    /// Center crop after scaling the shorter side to `scale * crop`.
    pub fn centered(h: usize, w: usize, crop: usize, scale: f64) -> Geometry {
        let resized = Self::resize_shorter(h, w, ((scale * crop as f64).round() as usize).max(crop));
        Geometry {
            flip: false,
            resized,
            origin: [(resized[0] - crop) / 2, (resized[1] - crop) / 2],
            crop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Contrast,
    Brightness,
    Sharpness,
    Posterize,
    Solarize,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Rotate,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::Contrast,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::Posterize,
        OpKind::Solarize,
    ];

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            OpKind::Rotate | OpKind::TranslateX | OpKind::TranslateY | OpKind::ShearX | OpKind::ShearY
        )
    }

    /// Op parameter at `magnitude` out of `max`. `negative` flips the sign of
    /// geometric offsets and moves enhancement factors below 1.
    pub fn value(self, magnitude: u32, max: u32, negative: bool, side: usize) -> f64 {
        let level = magnitude as f64 / max as f64;
        let sign = if negative { -1.0 } else { 1.0 };
        match self {
            OpKind::Rotate => sign * 30.0 * level,
            OpKind::TranslateX | OpKind::TranslateY => sign * 0.3 * side as f64 * level,
            OpKind::ShearX | OpKind::ShearY => sign * 0.3 * level,
            OpKind::Contrast | OpKind::Brightness | OpKind::Sharpness => 1.0 + sign * 0.9 * level,
            OpKind::Posterize => (8.0 - 4.0 * level).round(),
            OpKind::Solarize => 255.0 * (1.0 - level),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub kind: OpKind,
    pub magnitude: u32,
    /// Degrees, pixels, shear, enhancement factor, bits, or threshold.
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutout {
    pub origin: [usize; 2],
    pub side: usize,
}

/// Everything drawn for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub geometry: Option<Geometry>,
    pub ops: Vec<AppliedOp>,
    pub cutout: Option<Cutout>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            geometry: None,
            ops: Vec::new(),
            cutout: None,
        }
    }
}

/// The transform each output frame actually received.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub frames: Vec<AugmentPlan>,
}

impl AugmentTrace {
    pub fn is_temporally_consistent(&self) -> bool {
        self.frames.windows(2).all(|w| w[0] == w[1])
    }
}

fn draw_geometry(policy: &AugmentationPolicy, h: usize, w: usize, rng: &mut impl Rng) -> Result<Geometry> {
    if policy.crop > h.min(w) {
        return Err(Error::invalid(format!(
            "crop {} larger than {h}x{w} input",
            policy.crop
        )));
    }
    let flip = rng.gen::<f64>() < policy.flip_prob;
    let (lo, hi) = policy.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let short = ((scale * policy.crop as f64).round() as usize).max(policy.crop);
    let resized = Geometry::resize_shorter(h, w, short);
    let origin = [
        rng.gen_range(0..=resized[0] - policy.crop),
        rng.gen_range(0..=resized[1] - policy.crop),
    ];
    Ok(Geometry {
        flip,
        resized,
        origin,
        crop: policy.crop,
    })
}

/// Draws the plan for a clip of spatial size `h x w`.
pub fn draw_plan(policy: &AugmentationPolicy, h: usize, w: usize, key: AugmentKey) -> Result<AugmentPlan> {
    policy.validate()?;
    if policy.kind == AugmentKind::None {
        return Ok(AugmentPlan::identity());
    }
    let mut rng = rng::stream(policy.seed, policy.label(), &[key.clip, key.step]);
    let geometry = draw_geometry(policy, h, w, &mut rng)?;
    if policy.kind == AugmentKind::Weak {
        return Ok(AugmentPlan {
            geometry: Some(geometry),
            ops: Vec::new(),
            cutout: None,
        });
    }
    let side = policy.crop;
    let ops = (0..policy.ops_per_sample)
        .map(|_| {
            let kind = OpKind::ALL[rng.gen_range(0..OpKind::ALL.len())];
            let magnitude = rng.gen_range(1..=policy.max_magnitude);
            let negative = rng.gen::<bool>();
            AppliedOp {
                kind,
                magnitude,
                value: kind.value(magnitude, policy.max_magnitude, negative, side),
            }
        })
        .collect();
    let cut = ((policy.cutout_ratio * side as f64).ceil() as usize).min(side);
    let cutout = Cutout {
        origin: [rng.gen_range(0..=side - cut), rng.gen_range(0..=side - cut)],
        side: cut,
    };
    Ok(AugmentPlan {
        geometry: Some(geometry),
        ops,
        cutout: Some(cutout),
    })
}

/// Frame buffer helpers over `h x w x c` slices.
struct FrameDims {
    h: usize,
    w: usize,
    c: usize,
}

impl FrameDims {
    fn texel(&self, frame: &[f64], y: usize, x: usize, ch: usize) -> f64 {
        frame[(y * self.w + x) * self.c + ch]
    }

    /// Bilinear sample with clamp-to-edge, all channels into `out`.
    fn sample(&self, frame: &[f64], y: f64, x: f64, out: &mut [f64]) {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        for (ch, o) in out.iter_mut().enumerate() {
            let top = self.texel(frame, y0, x0, ch) * (1.0 - fx) + self.texel(frame, y0, x1, ch) * fx;
            let bottom = self.texel(frame, y1, x0, ch) * (1.0 - fx) + self.texel(frame, y1, x1, ch) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
    }

    fn inside(&self, y: f64, x: f64) -> bool {
        y >= -0.5 && y <= self.h as f64 - 0.5 && x >= -0.5 && x <= self.w as f64 - 0.5
    }
}

fn apply_geometry(frame: &[f64], dims: &FrameDims, g: &Geometry, out: &mut Vec<f64>) {
    let sy = dims.h as f64 / g.resized[0] as f64;
    let sx = dims.w as f64 / g.resized[1] as f64;
    let mut px = vec![0.0; dims.c];
    for y in 0..g.crop {
        let src_y = ((g.origin[0] + y) as f64 + 0.5) * sy - 0.5;
        for x in 0..g.crop {
            let mut src_x = ((g.origin[1] + x) as f64 + 0.5) * sx - 0.5;
            if g.flip {
                src_x = (dims.w - 1) as f64 - src_x;
            }
            dims.sample(frame, src_y, src_x, &mut px);
            out.extend_from_slice(&px);
        }
    }
}

/// Inverse map `[a, b, c; d, e, f]` from output to source coordinates, about
/// the frame center.
fn inverse_affine(op: &AppliedOp, dims: &FrameDims) -> [f64; 6] {
    let cy = (dims.h as f64 - 1.0) / 2.0;
    let cx = (dims.w as f64 - 1.0) / 2.0;
    // source = M (p - c) + c + t, written out per op
    let (m, t) = match op.kind {
        OpKind::Rotate => {
            let (s, c) = op.value.to_radians().sin_cos();
            ([c, -s, s, c], [0.0, 0.0])
        }
        OpKind::TranslateX => ([1.0, 0.0, 0.0, 1.0], [-op.value, 0.0]),
        OpKind::TranslateY => ([1.0, 0.0, 0.0, 1.0], [0.0, -op.value]),
        OpKind::ShearX => ([1.0, -op.value, 0.0, 1.0], [0.0, 0.0]),
        OpKind::ShearY => ([1.0, 0.0, -op.value, 1.0], [0.0, 0.0]),
        _ => unreachable!("not a geometric op"),
    };
    // rows act on (x, y)
    [
        m[0],
        m[1],
        cx - m[0] * cx - m[1] * cy + t[0],
        m[2],
        m[3],
        cy - m[2] * cx - m[3] * cy + t[1],
    ]
}

fn apply_affine(frame: &mut [f64], dims: &FrameDims, op: &AppliedOp) {
    let a = inverse_affine(op, dims);
    let src = frame.to_vec();
    let mut px = vec![0.0; dims.c];
    for y in 0..dims.h {
        for x in 0..dims.w {
            let (xf, yf) = (x as f64, y as f64);
            let sx = a[0] * xf + a[1] * yf + a[2];
            let sy = a[3] * xf + a[4] * yf + a[5];
            let at = (y * dims.w + x) * dims.c;
            if dims.inside(sy, sx) {
                dims.sample(&src, sy, sx, &mut px);
                frame[at..at + dims.c].copy_from_slice(&px);
            } else {
                frame[at..at + dims.c].fill(FILL);
            }
        }
    }
}

/// Blends each pixel with a 3x3 smoothed copy; the one-pixel border is left alone.
fn apply_sharpness(frame: &mut [f64], dims: &FrameDims, factor: f64) {
    if dims.h < 3 || dims.w < 3 {
        return;
    }
    let src = frame.to_vec();
    for y in 1..dims.h - 1 {
        for x in 1..dims.w - 1 {
            for ch in 0..dims.c {
                let mut blur = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        blur += wgt * dims.texel(&src, y + dy - 1, x + dx - 1, ch);
                    }
                }
                blur /= 13.0;
                let i = (y * dims.w + x) * dims.c + ch;
                frame[i] = blur + factor * (src[i] - blur);
            }
        }
    }
}

fn mean_luma(data: &[f64], c: usize) -> f64 {
    if c < 3 {
        return data.iter().sum::<f64>() / data.len() as f64;
    }
    let n = data.len() / c;
    data.chunks(c)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .sum::<f64>()
        / n as f64
}

/// Applies one op to every frame of `data`. Contrast pivots on the clip-wide
/// mean luma so that every frame sees the same mapping.
fn apply_op(data: &mut [f64], frames: usize, dims: &FrameDims, op: &AppliedOp) {
    let n = dims.h * dims.w * dims.c;
    let pivot = if op.kind == OpKind::Contrast {
        mean_luma(data, dims.c)
    } else {
        0.0
    };
    for t in 0..frames {
        let frame = &mut data[t * n..(t + 1) * n];
        match op.kind {
            k if k.is_geometric() => apply_affine(frame, dims, op),
            OpKind::Contrast => frame.iter_mut().for_each(|v| *v = pivot + op.value * (*v - pivot)),
            OpKind::Brightness => frame.iter_mut().for_each(|v| *v *= op.value),
            OpKind::Sharpness => apply_sharpness(frame, dims, op.value),
            OpKind::Posterize => {
                let q = 2f64.powf(8.0 - op.value);
                frame.iter_mut().for_each(|v| *v = (*v / q).floor() * q);
            }
            OpKind::Solarize => frame.iter_mut().for_each(|v| {
                if *v >= op.value {
                    *v = 255.0 - *v;
                }
            }),
            _ => unreachable!(),
        }
        frame.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }
}

/// Applies `plan` to every frame of `clip`.
pub fn apply_plan(clip: &VideoClip, plan: &AugmentPlan) -> Result<(VideoClip, AugmentTrace)> {
    let [t, h, w, c] = clip.shape();
    let trace = AugmentTrace {
        frames: vec![plan.clone(); t],
    };
    let Some(g) = plan.geometry else {
        if !plan.ops.is_empty() || plan.cutout.is_some() {
            return Err(Error::invalid("augment plan with ops needs a geometry"));
        }
        return Ok((clip.clone(), trace));
    };
    if g.crop > g.resized[0].min(g.resized[1])
        || g.origin[0] + g.crop > g.resized[0]
        || g.origin[1] + g.crop > g.resized[1]
    {
        return Err(Error::invalid(format!("crop {g:?} does not fit the resized frame")));
    }
    let src_dims = FrameDims { h, w, c };
    let mut data = Vec::with_capacity(t * g.crop * g.crop * c);
    for ti in 0..t {
        apply_geometry(clip.frame(ti), &src_dims, &g, &mut data);
    }
    let dims = FrameDims {
        h: g.crop,
        w: g.crop,
        c,
    };
    for op in &plan.ops {
        apply_op(&mut data, t, &dims, op);
    }
    if let Some(cut) = plan.cutout {
        let n = g.crop * g.crop * c;
        for ti in 0..t {
            for y in cut.origin[0]..(cut.origin[0] + cut.side).min(g.crop) {
                for x in cut.origin[1]..(cut.origin[1] + cut.side).min(g.crop) {
                    let i = ti * n + (y * g.crop + x) * c;
                    data[i..i + c].fill(FILL);
                }
            }
        }
    }
    let mut out = VideoClip::from_clamped(clip.id, [t, g.crop, g.crop, c], data);
    out.stride = clip.stride;
    Ok((out, trace))
}

fn augment(view: &VideoClip, policy: &AugmentationPolicy, key: AugmentKey, expect: AugmentKind) -> Result<(VideoClip, AugmentTrace)> {
    if policy.kind != expect && policy.kind != AugmentKind::None {
        return Err(Error::invalid(format!("expected a {expect:?} policy, got {:?}", policy.kind)));
    }
    let plan = draw_plan(policy, view.height(), view.width(), key)?;
    apply_plan(view, &plan)
}

/// Flip with `policy.flip_prob`, random resized crop.
pub fn weak_augment(view: &VideoClip, policy: &AugmentationPolicy, key: AugmentKey) -> Result<(VideoClip, AugmentTrace)> {
    augment(view, policy, key, AugmentKind::Weak)
}

/// Weak geometry, `ops_per_sample` random ops, then one cutout.
pub fn strong_augment(view: &VideoClip, policy: &AugmentationPolicy, key: AugmentKey) -> Result<(VideoClip, AugmentTrace)> {
    augment(view, policy, key, AugmentKind::Strong)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedViews {
    pub weak: ViewSet,
    pub strong: ViewSet,
}

/// Draws one plan per family and applies it to all three views.
pub fn paired_augment(
    viewset: &ViewSet,
    weak: &AugmentationPolicy,
    strong: &AugmentationPolicy,
    key: AugmentKey,
) -> Result<PairedViews> {
    let (h, w) = (viewset.rgb.height(), viewset.rgb.width());
    let weak_plan = draw_plan(weak, h, w, key)?;
    let strong_plan = draw_plan(strong, h, w, key)?;
    Ok(PairedViews {
        weak: viewset.map(|_, v| apply_plan(v, &weak_plan).map(|r| r.0))?,
        strong: viewset.map(|_, v| apply_plan(v, &strong_plan).map(|r| r.0))?,
    })
}

/// Applies one plan to the listed views of a set.
pub fn augment_views(viewset: &ViewSet, kinds: &[ViewKind], plan: &AugmentPlan) -> Result<Vec<VideoClip>> {
    kinds.iter().map(|&k| apply_plan(viewset.get(k), plan).map(|r| r.0)).collect()
}

/// `count` deterministic crops for evaluation: shorter side scaled to
/// `scale * crop`, crops spread evenly along the longer axis (the width for
/// square inputs).
pub fn eval_crops(clip: &VideoClip, crop: usize, count: usize, scale: f64) -> Result<Vec<VideoClip>> {
    if count == 0 {
        return Err(Error::invalid("need at least one evaluation crop"));
    }
    let (h, w) = (clip.height(), clip.width());
    if crop > h.min(w) {
        return Err(Error::invalid(format!("crop {crop} larger than {h}x{w} input")));
    }
    let center = Geometry::centered(h, w, crop, scale);
    let along_width = center.resized[1] >= center.resized[0];
    let span = if along_width {
        center.resized[1] - crop
    } else {
        center.resized[0] - crop
    };
    (0..count)
        .map(|i| {
            let mut g = center;
            if count > 1 {
                let offset = (i as f64 * span as f64 / (count - 1) as f64).round() as usize;
                if along_width {
                    g.origin[1] = offset;
                } else {
                    g.origin[0] = offset;
                }
            }
            let plan = AugmentPlan {
                geometry: Some(g),
                ops: Vec::new(),
                cutout: None,
            };
            apply_plan(clip, &plan).map(|r| r.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_clip(t: usize, h: usize, w: usize) -> VideoClip {
        let mut data = Vec::new();
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let v = ((x * 7 + y * 3 + ti * 11) % 256) as f64;
                    data.extend([v, 255.0 - v, (v * 0.5).floor()]);
                }
            }
        }
        VideoClip::new(9, [t, h, w, 3], data).unwrap()
    }

    fn key() -> AugmentKey {
        AugmentKey { clip: 9, step: 4 }
    }

    fn single(plan_op: AppliedOp, side: usize) -> AugmentPlan {
        AugmentPlan {
            geometry: Some(Geometry {
                flip: false,
                resized: [side, side],
                origin: [0, 0],
                crop: side,
            }),
            ops: vec![plan_op],
            cutout: None,
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let clip = ramp_clip(2, 6, 6);
        let g = Geometry {
            flip: true,
            resized: [6, 6],
            origin: [0, 0],
            crop: 6,
        };
        let plan = AugmentPlan {
            geometry: Some(g),
            ops: vec![],
            cutout: None,
        };
        let once = apply_plan(&clip, &plan).unwrap().0;
        assert_ne!(once, clip);
        let twice = apply_plan(&once, &plan).unwrap().0;
        assert_eq!(twice.data(), clip.data());
    }

    #[test]
    fn centered_crop_at_lower_scale_has_target_shape() {
        let clip = ramp_clip(3, 32, 40);
        let g = Geometry::centered(32, 40, 16, 256.0 / 224.0);
        assert_eq!(g.resized[0], 18);
        let out = apply_plan(
            &clip,
            &AugmentPlan {
                geometry: Some(g),
                ops: vec![],
                cutout: None,
            },
        )
        .unwrap()
        .0;
        assert_eq!(out.shape(), [3, 16, 16, 3]);
    }

    #[test]
    fn constant_clip_survives_weak_geometry() {
        let clip = VideoClip::filled(0, [2, 20, 24, 3], 42.0).unwrap();
        for step in 0..10 {
            let (out, _) = weak_augment(&clip, &AugmentationPolicy::weak(16, 3), AugmentKey { clip: 0, step }).unwrap();
            assert!(out.data().iter().all(|&v| (v - 42.0).abs() < 1e-12));
        }
    }

    #[test]
    fn crop_larger_than_input_is_rejected() {
        let clip = ramp_clip(2, 8, 8);
        assert!(weak_augment(&clip, &AugmentationPolicy::weak(9, 0), key()).is_err());
        assert!(strong_augment(&clip, &AugmentationPolicy::strong(9, 0), key()).is_err());
        assert!(eval_crops(&clip, 9, 1, 1.0).is_err());
    }

    #[test]
    fn magnitude_ten_rotation_is_thirty_degrees_on_every_frame() {
        assert_eq!(OpKind::Rotate.value(10, 10, false, 16).abs(), 30.0);
        let clip = ramp_clip(3, 9, 9);
        let op = AppliedOp {
            kind: OpKind::Rotate,
            magnitude: 10,
            value: 30.0,
        };
        let (out, trace) = apply_plan(&clip, &single(op, 9)).unwrap();
        assert!(trace.is_temporally_consistent());
        // each frame equals rotating that frame alone
        for t in 0..3 {
            let lone = clip.window(t, 1).unwrap();
            let rotated = apply_plan(&lone, &single(op, 9)).unwrap().0;
            assert_eq!(out.frame(t), rotated.frame(0));
        }
        // the center pixel is a fixed point of a rotation about the center
        assert_eq!(out.at(0, 4, 4, 0), clip.at(0, 4, 4, 0));
        // a quarter turn checked by hand: 90 degrees maps (y, x) onto the rotated lattice exactly
        let quarter = AppliedOp {
            kind: OpKind::Rotate,
            magnitude: 10,
            value: 90.0,
        };
        let q = apply_plan(&clip, &single(quarter, 9)).unwrap().0;
        for y in 0..9 {
            for x in 0..9 {
                // source of output (x, y) is (cx + c(x-cx) - s(y-cy), cy + s(x-cx) + c(y-cy))
                let (sx, sy) = (4.0 - (y as f64 - 4.0), 4.0 + (x as f64 - 4.0));
                let want = clip.at(0, sy as usize, sx as usize, 1);
                assert!((q.at(0, y, x, 1) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_uncovers_fill() {
        let clip = ramp_clip(1, 8, 8);
        let op = AppliedOp {
            kind: OpKind::TranslateX,
            magnitude: 10,
            value: 3.0,
        };
        let out = apply_plan(&clip, &single(op, 8)).unwrap().0;
        for y in 0..8 {
            for x in 0..3 {
                assert_eq!(out.at(0, y, x, 0), FILL);
            }
            for x in 3..8 {
                assert_eq!(out.at(0, y, x, 2), clip.at(0, y, x - 3, 2));
            }
        }
    }

    #[test]
    fn solarize_above_range_is_identity_and_zero_inverts() {
        let clip = ramp_clip(2, 5, 5);
        let mut op = AppliedOp {
            kind: OpKind::Solarize,
            magnitude: 0,
            value: 255.5,
        };
        assert_eq!(apply_plan(&clip, &single(op, 5)).unwrap().0.data(), clip.data());
        op.value = OpKind::Solarize.value(10, 10, false, 5);
        assert_eq!(op.value, 0.0);
        let inv = apply_plan(&clip, &single(op, 5)).unwrap().0;
        for (a, b) in inv.data().iter().zip(clip.data()) {
            assert_eq!(*a, 255.0 - b);
        }
    }

    #[test]
    fn photometric_magnitude_maps() {
        for k in [OpKind::Contrast, OpKind::Brightness, OpKind::Sharpness] {
            assert!((k.value(10, 10, true, 16) - 0.1).abs() < 1e-12);
            assert!((k.value(10, 10, false, 16) - 1.9).abs() < 1e-12);
        }
        assert_eq!(OpKind::Posterize.value(10, 10, false, 16), 4.0);
        assert_eq!(OpKind::TranslateY.value(10, 10, false, 20), 6.0);
        assert!((OpKind::ShearX.value(5, 10, true, 20) + 0.15).abs() < 1e-12);
    }

    #[test]
    fn posterize_keeps_top_bits() {
        let mut data = vec![0.0, 15.9, 16.0, 200.0, 255.0, 31.0];
        let op = AppliedOp {
            kind: OpKind::Posterize,
            magnitude: 10,
            value: 4.0,
        };
        apply_op(&mut data, 1, &FrameDims { h: 1, w: 2, c: 3 }, &op);
        assert_eq!(data, [0.0, 0.0, 16.0, 192.0, 240.0, 16.0]);
    }

    #[test]
    fn strong_cutout_region_is_uniform_fill_on_every_frame() {
        let clip = ramp_clip(4, 24, 24);
        let policy = AugmentationPolicy::strong(16, 11);
        for step in 0..20 {
            let k = AugmentKey { clip: 2, step };
            let (out, trace) = strong_augment(&clip, &policy, k).unwrap();
            assert!(trace.is_temporally_consistent());
            let cut = trace.frames[0].cutout.unwrap();
            assert_eq!(cut.side, 10);
            // brute-force scan: every pixel inside the square on every frame is the fill
            for t in 0..4 {
                for y in 0..16 {
                    for x in 0..16 {
                        let inside = (cut.origin[0]..cut.origin[0] + cut.side).contains(&y)
                            && (cut.origin[1]..cut.origin[1] + cut.side).contains(&x);
                        if inside {
                            for c in 0..3 {
                                assert_eq!(out.at(t, y, x, c), FILL);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn paired_views_share_geometry() {
        let rgb = ramp_clip(3, 20, 20);
        let flow = VideoClip::new(9, rgb.shape(), rgb.data().iter().map(|v| 255.0 - v).collect()).unwrap();
        let tg = VideoClip::new(9, rgb.shape(), rgb.data().iter().map(|v| (v * 0.5).floor()).collect()).unwrap();
        let vs = ViewSet::new(rgb.clone(), flow.clone(), tg).unwrap();
        let weak = AugmentationPolicy::weak(16, 5);
        let strong = AugmentationPolicy::strong(16, 5);
        let pair = paired_augment(&vs, &weak, &strong, key()).unwrap();
        // geometry is linear, so the flow view stays the pointwise complement of rgb
        for (a, b) in pair.weak.rgb.data().iter().zip(pair.weak.flow.data()) {
            assert!((a + b - 255.0).abs() < 1e-9);
        }
        assert_eq!(pair.weak.rgb, weak_augment(&rgb, &weak, key()).unwrap().0);
        assert_eq!(pair.strong.flow, strong_augment(&flow, &strong, key()).unwrap().0);
        let again = paired_augment(&vs, &weak, &strong, key()).unwrap();
        assert_eq!(pair, again);
    }

    #[test]
    fn none_policy_is_identity() {
        let rgb = ramp_clip(2, 8, 8);
        let vs = ViewSet::new(rgb.clone(), rgb.clone(), rgb).unwrap();
        let none = AugmentationPolicy::none(8);
        let pair = paired_augment(&vs, &none, &none, key()).unwrap();
        assert_eq!(pair.weak, vs);
        assert_eq!(pair.strong, vs);
    }

    #[test]
    fn eval_crops_cover_both_ends() {
        let clip = ramp_clip(1, 16, 16);
        let crops = eval_crops(&clip, 16, 3, 1.0).unwrap();
        assert_eq!(crops.len(), 3);
        assert!(crops.iter().all(|c| c.data() == clip.data()));
        let crops = eval_crops(&clip, 8, 3, 1.5).unwrap();
        assert_ne!(crops[0], crops[2]);
        let center = AugmentPlan {
            geometry: Some(Geometry::centered(16, 16, 8, 1.5)),
            ops: vec![],
            cutout: None,
        };
        assert_eq!(crops[1], apply_plan(&clip, &center).unwrap().0);
    }

    #[test]
    fn different_steps_draw_different_plans() {
        let weak = AugmentationPolicy::strong(16, 1);
        let a = draw_plan(&weak, 24, 24, AugmentKey { clip: 1, step: 0 }).unwrap();
        let b = draw_plan(&weak, 24, 24, AugmentKey { clip: 1, step: 1 }).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn strong_outputs_stay_in_range_and_consistent(seed in any::<u64>(), step in 0u64..1000, side in 16usize..24) {
            let clip = ramp_clip(2, side, side + 3);
            let policy = AugmentationPolicy::strong(16, seed);
            let (out, trace) = strong_augment(&clip, &policy, AugmentKey { clip: 1, step }).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
            prop_assert!(trace.is_temporally_consistent());
            prop_assert_eq!(trace.frames[0].ops.len(), 2);
            for op in &trace.frames[0].ops {
                prop_assert!((1..=10).contains(&op.magnitude));
            }
        }
    }
}
