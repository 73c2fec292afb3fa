//! The three aligned views of a clip (RGB, optical flow, temporal gradients)
//! and their conversion into RGB-range clips the shared model can consume.

mod clip;
mod flow;

use serde::{Deserialize, Serialize};

pub use clip::{batch_tensor, VideoClip};
pub use flow::{brightness_residual, estimate_flow, FlowField, FlowParams};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewKind {
    Rgb,
    Flow,
    TemporalGradient,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Rgb, ViewKind::Flow, ViewKind::TemporalGradient];

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Rgb => "rgb",
            ViewKind::Flow => "flow",
            ViewKind::TemporalGradient => "tg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rgb" => Ok(ViewKind::Rgb),
            "flow" => Ok(ViewKind::Flow),
            "tg" => Ok(ViewKind::TemporalGradient),
            other => Err(Error::Config(format!("unknown view `{other}` (rgb, flow, tg)"))),
        }
    }
}

/// Raw frame differences `V_{t+1} - V_t`, in [-255, 255]. The last frame is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGradientClip {
    pub id: u64,
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

/// Three views of one clip with identical `T x H x W x 3` shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub rgb: VideoClip,
    pub flow: VideoClip,
    pub tg: VideoClip,
}

impl ViewSet {
    pub fn new(rgb: VideoClip, flow: VideoClip, tg: VideoClip) -> Result<Self> {
        if rgb.shape() != flow.shape() || rgb.shape() != tg.shape() {
            return Err(Error::shape(
                "viewset",
                format!("rgb {:?}, flow {:?}, tg {:?}", rgb.shape(), flow.shape(), tg.shape()),
            ));
        }
        Ok(ViewSet { rgb, flow, tg })
    }

    pub fn get(&self, kind: ViewKind) -> &VideoClip {
        match kind {
            ViewKind::Rgb => &self.rgb,
            ViewKind::Flow => &self.flow,
            ViewKind::TemporalGradient => &self.tg,
        }
    }

    pub fn get_mut(&mut self, kind: ViewKind) -> &mut VideoClip {
        match kind {
            ViewKind::Rgb => &mut self.rgb,
            ViewKind::Flow => &mut self.flow,
            ViewKind::TemporalGradient => &mut self.tg,
        }
    }

    /// Applies `f` to every view, keeping them aligned.
    pub fn map(&self, mut f: impl FnMut(ViewKind, &VideoClip) -> Result<VideoClip>) -> Result<ViewSet> {
        ViewSet::new(
            f(ViewKind::Rgb, &self.rgb)?,
            f(ViewKind::Flow, &self.flow)?,
            f(ViewKind::TemporalGradient, &self.tg)?,
        )
    }
}

/// Encodes flow as a 3-channel clip: horizontal and vertical components via
/// `(d / D + 1) * 127.5` with `D` the clip-wide max |component|, and the
/// magnitude via `m / M * 255` with `M` the clip-wide max magnitude. The last
/// flow frame is repeated so the view has `T = flow frames + 1`.
pub fn flow_to_view(id: u64, flow: &FlowField) -> Result<VideoClip> {
    if flow.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow_to_view"));
    }
    let d_max = flow.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    let m_max = flow.max_magnitude().max(1e-6);
    let (h, w) = (flow.height, flow.width);
    let frames = flow.frames + 1;
    let mut data = Vec::with_capacity(frames * h * w * 3);
    for t in 0..frames {
        let src = t.min(flow.frames - 1);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(src, y, x);
                data.push((u / d_max + 1.0) * 127.5);
                data.push((v / d_max + 1.0) * 127.5);
                data.push(u.hypot(v) / m_max * 255.0);
            }
        }
    }
    Ok(VideoClip::from_clamped(id, [frames, h, w, 3], data))
}

pub fn temporal_gradients(clip: &VideoClip) -> Result<TemporalGradientClip> {
    if clip.frames() < 2 {
        return Err(Error::invalid("temporal gradients need at least 2 frames"));
    }
    let n = clip.frame_len();
    let mut data = vec![0.0; clip.data().len()];
    for t in 0..clip.frames() - 1 {
        let (a, b) = (clip.frame(t), clip.frame(t + 1));
        for i in 0..n {
            data[t * n + i] = b[i] - a[i];
        }
    }
    Ok(TemporalGradientClip {
        id: clip.id,
        shape: clip.shape(),
        data,
    })
}

/// `(g + 255) / 2`, which lies in [0, 255] for any g in [-255, 255].
pub fn tg_to_view(tg: &TemporalGradientClip) -> Result<VideoClip> {
    VideoClip::new(tg.id, tg.shape, tg.data.iter().map(|g| (g + 255.0) / 2.0).collect())
}

/// Inverse of [`tg_to_view`].
pub fn tg_from_view(view: &VideoClip) -> Vec<f64> {
    view.data().iter().map(|v| 2.0 * v - 255.0).collect()
}

pub fn build_viewset(clip: &VideoClip, params: &FlowParams) -> Result<ViewSet> {
    let flow = estimate_flow(clip, params)?;
    let mut flow_view = flow_to_view(clip.id, &flow)?;
    let mut tg_view = tg_to_view(&temporal_gradients(clip)?)?;
    flow_view.stride = clip.stride;
    tg_view.stride = clip.stride;
    ViewSet::new(clip.clone(), flow_view, tg_view)
}
