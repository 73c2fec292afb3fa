//! Coarse-to-fine Horn–Schunck optical flow on luma planes.
//!
//! Each level linearizes brightness constancy around the flow carried up from
//! the coarser level (by warping the second frame), then runs Jacobi sweeps on
//! the quadratic data + smoothness energy.

use serde::{Deserialize, Serialize};

use super::clip::VideoClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Smoothness weight; the energy uses `alpha^2 |grad F|^2`.
    pub alpha: f64,
    /// Jacobi sweeps per pyramid level.
    pub iterations: usize,
    pub levels: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            alpha: 15.0,
            iterations: 100,
            levels: 3,
        }
    }
}

/// Smallest side a pyramid level may have.
const MIN_LEVEL_SIDE: usize = 8;

/// Per frame-pair displacement in pixels per frame step, `(T-1) x H x W x 2`
/// with channels (horizontal, vertical).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        FlowField {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * 2],
        }
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> (f64, f64) {
        let i = ((t * self.height + y) * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, d: (f64, f64)) {
        let i = ((t * self.height + y) * self.width + x) * 2;
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks(2)
            .map(|d| d[0].hypot(d[1]))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn get(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Bilinear sample with clamp-to-edge.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x0 + 1) * fx;
        let bottom = self.get(y0 + 1, x0) * (1.0 - fx) + self.get(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// 2x2 box decimation.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (2 * y, 2 * x);
                data[y * w + x] = 0.25
                    * (self.data[sy * self.w + sx]
                        + self.data[sy * self.w + sx + 1]
                        + self.data[(sy + 1) * self.w + sx]
                        + self.data[(sy + 1) * self.w + sx + 1]);
            }
        }
        Plane { h, w, data }
    }

    /// Bilinear resize to `h x w` (pixel-center aligned), values scaled by `gain`.
    fn resize(&self, h: usize, w: usize, gain: f64) -> Plane {
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                data.push(gain * self.sample(src_y, src_x));
            }
        }
        Plane { h, w, data }
    }

    /// Central differences, one-sided at the border via clamping.
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; self.h * self.w];
        let mut gy = vec![0.0; self.h * self.w];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let i = y as usize * self.w + x as usize;
                gx[i] = 0.5 * (self.get(y, x + 1) - self.get(y, x - 1));
                gy[i] = 0.5 * (self.get(y + 1, x) - self.get(y - 1, x));
            }
        }
        (gx, gy)
    }

    /// Horn–Schunck neighbourhood average (1/6 edge, 1/12 corner neighbours).
    fn local_mean(&self, y: isize, x: isize) -> f64 {
        (self.get(y - 1, x) + self.get(y + 1, x) + self.get(y, x - 1) + self.get(y, x + 1)) / 6.0
            + (self.get(y - 1, x - 1)
                + self.get(y - 1, x + 1)
                + self.get(y + 1, x - 1)
                + self.get(y + 1, x + 1))
                / 12.0
    }
}

fn pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![base];
    while out.len() < levels {
        let last = out.last().unwrap();
        if last.h / 2 < MIN_LEVEL_SIDE || last.w / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let next = last.downsample();
        out.push(next);
    }
    out
}

/// Flow from `first` to `second`, both `h x w` luma planes.
fn solve_pair(first: Plane, second: Plane, params: &FlowParams) -> (Plane, Plane) {
    let p1 = pyramid(first, params.levels.max(1));
    let p2 = pyramid(second, p1.len());
    let alpha2 = params.alpha * params.alpha;
    let coarsest = p1.last().unwrap();
    let mut u = Plane {
        h: coarsest.h,
        w: coarsest.w,
        data: vec![0.0; coarsest.h * coarsest.w],
    };
    let mut v = u.clone();
    for level in (0..p1.len()).rev() {
        let (i1, i2) = (&p1[level], &p2[level]);
        let (h, w) = (i1.h, i1.w);
        if u.h != h || u.w != w {
            u = u.resize(h, w, w as f64 / u.w as f64);
            v = v.resize(h, w, h as f64 / v.h as f64);
        }
        let mut warped = Plane {
            h,
            w,
            data: vec![0.0; h * w],
        };
        // pixels whose match leaves the frame get no data term
        let mut inside = vec![true; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sy, sx) = (y as f64 + v.data[i], x as f64 + u.data[i]);
                inside[i] = (0.0..=(h - 1) as f64).contains(&sy) && (0.0..=(w - 1) as f64).contains(&sx);
                warped.data[i] = i2.sample(sy, sx);
            }
        }
        let (gx1, gy1) = i1.gradients();
        let (gx2, gy2) = warped.gradients();
        let gate = |i: usize, g: f64| if inside[i] { g } else { 0.0 };
        let ix: Vec<f64> = (0..h * w).map(|i| gate(i, 0.5 * (gx1[i] + gx2[i]))).collect();
        let iy: Vec<f64> = (0..h * w).map(|i| gate(i, 0.5 * (gy1[i] + gy2[i]))).collect();
        let it: Vec<f64> = (0..h * w).map(|i| gate(i, warped.data[i] - i1.data[i])).collect();
        let (u0, v0) = (u.data.clone(), v.data.clone());
        let mut next_u = u.clone();
        let mut next_v = v.clone();
        for _ in 0..params.iterations {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let i = y as usize * w + x as usize;
                    let ub = u.local_mean(y, x);
                    let vb = v.local_mean(y, x);
                    let r = ix[i] * (ub - u0[i]) + iy[i] * (vb - v0[i]) + it[i];
                    let k = r / (alpha2 + ix[i] * ix[i] + iy[i] * iy[i]);
                    next_u.data[i] = ub - ix[i] * k;
                    next_v.data[i] = vb - iy[i] * k;
                }
            }
            std::mem::swap(&mut u, &mut next_u);
            std::mem::swap(&mut v, &mut next_v);
        }
    }
    (u, v)
}

/// Dense flow between every consecutive frame pair of `clip`.
pub fn estimate_flow(clip: &VideoClip, params: &FlowParams) -> Result<FlowField> {
    if clip.frames() < 2 {
        return Err(Error::invalid("optical flow needs at least 2 frames"));
    }
    if clip.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimate_flow input"));
    }
    if params.alpha <= 0.0 || params.levels == 0 {
        return Err(Error::invalid("flow needs alpha > 0 and at least one level"));
    }
    let (h, w) = (clip.height(), clip.width());
    let luma = clip.luma();
    let mut field = FlowField::zeros(clip.frames() - 1, h, w);
    for t in 0..clip.frames() - 1 {
        let plane = |d: &Vec<f64>| Plane {
            h,
            w,
            data: d.clone(),
        };
        let (u, v) = solve_pair(plane(&luma[t]), plane(&luma[t + 1]), params);
        let bound = h.max(w) as f64;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                field.set(t, y, x, (u.data[i].clamp(-bound, bound), v.data[i].clamp(-bound, bound)));
            }
        }
    }
    Ok(field)
}

/// Mean absolute linearized brightness-constancy residual
/// `|V_x u + V_y v + V_t|` over interior pixels, with central spatial
/// differences taken on the first frame of each pair.
pub fn brightness_residual(clip: &VideoClip, flow: &FlowField) -> f64 {
    let luma = clip.luma();
    let (h, w) = (clip.height(), clip.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..flow.frames {
        let (a, b) = (&luma[t], &luma[t + 1]);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let vx = 0.5 * (a[y * w + x + 1] - a[y * w + x - 1]);
                let vy = 0.5 * (a[(y + 1) * w + x] - a[(y - 1) * w + x]);
                let vt = b[y * w + x] - a[y * w + x];
                let (u, v) = flow.at(t, y, x);
                total += (vx * u + vy * v + vt).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
