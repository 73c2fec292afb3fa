use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorlab::Tensor;

/// A clip of `frames x height x width x channels` values in [0, 255].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub id: u64,
    /// Nominal raw-frame stride between consecutive frames.
    pub stride: u32,
    shape: [usize; 4],
    data: Vec<f64>,
}

impl VideoClip {
    pub fn new(id: u64, shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("video clip", format!("zero extent in {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "video clip",
                format!("{shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::invalid(format!("clip value {v} outside [0, 255]")));
        }
        Ok(VideoClip {
            id,
            stride: 1,
            shape,
            data,
        })
    }

    /// Clamps into range instead of rejecting; used after resampling ops.
    pub(crate) fn from_clamped(id: u64, shape: [usize; 4], mut data: Vec<f64>) -> Self {
        for v in &mut data {
            *v = v.clamp(0.0, 255.0);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        VideoClip {
            id,
            stride: 1,
            shape,
            data,
        }
    }

    pub fn filled(id: u64, shape: [usize; 4], value: f64) -> Result<Self> {
        Self::new(id, shape, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        let [_, h, w, ch] = self.shape;
        self.data[((t * h + y) * w + x) * ch + c]
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<VideoClip> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::invalid(format!(
                "window {start}..{} outside {} frames",
                start + len,
                self.frames()
            )));
        }
        let n = self.frame_len();
        Ok(VideoClip {
            id: self.id,
            stride: self.stride,
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Luma planes (0.299 R + 0.587 G + 0.114 B), one per frame.
    pub fn luma(&self) -> Vec<Vec<f64>> {
        let [t, h, w, c] = self.shape;
        (0..t)
            .map(|ti| {
                let f = self.frame(ti);
                (0..h * w)
                    .map(|p| {
                        if c >= 3 {
                            0.299 * f[p * c] + 0.587 * f[p * c + 1] + 0.114 * f[p * c + 2]
                        } else {
                            f[p * c]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Stacks equally shaped clips into a model batch `[N, T, H, W, C]`.
pub fn batch_tensor(clips: &[&VideoClip]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::invalid("empty clip batch"))?
        .shape();
    let mut data = Vec::with_capacity(clips.len() * first.iter().product::<usize>());
    for c in clips {
        if c.shape() != first {
            return Err(Error::shape(
                "batch",
                format!("clip {} has shape {:?}, expected {first:?}", c.id, c.shape()),
            ));
        }
        data.extend_from_slice(c.data());
    }
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(&first);
    Tensor::new(shape, data)
}
