//! MotionShapes: striped shapes on a noisy background whose only
//! class-dependent property is how they move.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::views::{FlowField, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MotionClass {
    Left,
    Right,
    Up,
    Down,
    Clockwise,
    CounterClockwise,
    Expand,
    Contract,
}

impl MotionClass {
    pub const ALL: [MotionClass; 8] = [
        MotionClass::Left,
        MotionClass::Right,
        MotionClass::Up,
        MotionClass::Down,
        MotionClass::Clockwise,
        MotionClass::CounterClockwise,
        MotionClass::Expand,
        MotionClass::Contract,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Left => "left",
            MotionClass::Right => "right",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
            MotionClass::Clockwise => "clockwise",
            MotionClass::CounterClockwise => "counterclockwise",
            MotionClass::Expand => "expand",
            MotionClass::Contract => "contract",
        }
    }

    /// Unit displacement direction for the translation classes.
    pub fn direction(self) -> Option<(f64, f64)> {
        match self {
            MotionClass::Left => Some((-1.0, 0.0)),
            MotionClass::Right => Some((1.0, 0.0)),
            MotionClass::Up => Some((0.0, -1.0)),
            MotionClass::Down => Some((0.0, 1.0)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionShapesSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-pixel Gaussian noise, gray levels.
    pub noise_sigma: f64,
    /// Translation speed, px/frame.
    pub speed: (f64, f64),
    /// Rotation speed, rad/frame.
    pub angular_speed: (f64, f64),
    /// Relative scale change per frame.
    pub scale_rate: (f64, f64),
    /// Shape half-extent range at frame 0, as a fraction of the shorter side.
    pub size: (f64, f64),
}

impl Default for MotionShapesSpec {
    fn default() -> Self {
        MotionShapesSpec {
            frames: 8,
            height: 32,
            width: 32,
            min_shapes: 1,
            max_shapes: 2,
            noise_sigma: 4.0,
            speed: (0.75, 1.5),
            angular_speed: (0.12, 0.25),
            scale_rate: (0.05, 0.08),
            size: (0.14, 0.24),
        }
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 >= lo && r.1 >= r.0) {
        return Err(Error::Config(format!("{name} range ({}, {}) is invalid", r.0, r.1)));
    }
    Ok(())
}

impl MotionShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "need at least 2 frames of 8x8, got {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        if self.min_shapes == 0 || self.max_shapes < self.min_shapes {
            return Err(Error::Config("shape count range is invalid".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        check_range("speed", self.speed, 0.0)?;
        check_range("angular speed", self.angular_speed, 0.0)?;
        check_range("scale rate", self.scale_rate, 0.0)?;
        check_range("size", self.size, 0.01)?;
        // contraction must keep shapes at positive scale
        if self.scale_rate.1 * (self.frames - 1) as f64 >= 0.9 {
            return Err(Error::Config("scale rate collapses shapes before the last frame".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Frame-0 center (x, y).
    pub center: (f64, f64),
    /// Half extents along the local axes.
    pub half: (f64, f64),
    pub angle: f64,
    pub color: [f64; 3],
    pub stripe_period: f64,
    pub stripe_phase: f64,
}

/// Ground-truth motion of one clip. `rate` is px/frame, rad/frame, or the
/// relative scale change per frame depending on the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub class: MotionClass,
    pub rate: f64,
    pub background: f64,
    pub shapes: Vec<ShapeParams>,
}

impl MotionParams {
    /// Pose of a shape at frame `t`: center, rotation, scale.
    fn pose(&self, s: &ShapeParams, t: f64) -> ((f64, f64), f64, f64) {
        let mut center = s.center;
        let mut angle = s.angle;
        let mut scale = 1.0;
        match self.class {
            MotionClass::Clockwise => angle += self.rate * t,
            MotionClass::CounterClockwise => angle -= self.rate * t,
            MotionClass::Expand => scale = 1.0 + self.rate * t,
            MotionClass::Contract => scale = 1.0 - self.rate * t,
            c => {
                let (dx, dy) = c.direction().expect("translation class");
                center = (center.0 + dx * self.rate * t, center.1 + dy * self.rate * t);
            }
        }
        (center, angle, scale)
    }

    /// Color of the shape covering `(x, y)` at frame `t`, topmost last.
    fn sample(&self, x: f64, y: f64, t: f64) -> Option<[f64; 3]> {
        let mut hit = None;
        for s in &self.shapes {
            let ((cx, cy), angle, scale) = self.pose(s, t);
            let (sin, cos) = angle.sin_cos();
            let (dx, dy) = ((x - cx) / scale, (y - cy) / scale);
            // into the shape's own frame
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            let (a, b) = s.half;
            let inside = match s.kind {
                ShapeKind::Rectangle => lx.abs() <= a && ly.abs() <= b,
                ShapeKind::Ellipse => (lx / a).powi(2) + (ly / b).powi(2) <= 1.0,
                ShapeKind::Triangle => lx >= -a && lx <= a && ly.abs() <= b * (a - lx) / (2.0 * a),
            };
            if inside {
                // stripes across the local x axis, plus a dark band on one side
                let stripe = ((lx + a) / s.stripe_period + s.stripe_phase).floor() as i64 % 2 == 0;
                let band = ly > 0.55 * b;
                let gain = if band {
                    0.35
                } else if stripe {
                    1.0
                } else {
                    0.6
                };
                hit = Some(s.color.map(|c| c * gain));
            }
        }
        hit
    }

    pub fn covers(&self, x: f64, y: f64, t: f64) -> bool {
        self.sample(x, y, t).is_some()
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Draws the motion of clip `id`. Everything visible at frame 0 is drawn
/// before, and independently of, the class.
pub fn draw_motion(spec: &MotionShapesSpec, class: MotionClass, seed: u64, id: u64) -> MotionParams {
    let mut rng = rng::stream(seed, "motion-shapes", &[id]);
    let side = spec.height.min(spec.width) as f64;
    let background = rng.gen_range(50.0..200.0);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle][rng.gen_range(0..3)];
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            if spec.size.1 > spec.size.0 {
                rng.gen_range(spec.size.0..spec.size.1) * side
            } else {
                spec.size.0 * side
            }
        };
        let half = (draw(&mut rng), draw(&mut rng));
        let margin = 0.25 * side;
        let center = (
            rng.gen_range(margin..spec.width as f64 - margin),
            rng.gen_range(margin..spec.height as f64 - margin),
        );
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut color = [0.0; 3];
        // keep the shape visible against the background
        for _ in 0..64 {
            color = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
            if (luma(color) - background).abs() >= 50.0 {
                break;
            }
        }
        shapes.push(ShapeParams {
            kind,
            center,
            half,
            angle,
            color,
            stripe_period: rng.gen_range(0.18..0.3) * 2.0 * half.0,
            stripe_phase: rng.gen_range(0.0..1.0),
        });
    }
    let range = match class {
        MotionClass::Clockwise | MotionClass::CounterClockwise => spec.angular_speed,
        MotionClass::Expand | MotionClass::Contract => spec.scale_rate,
        _ => spec.speed,
    };
    let rate = if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    };
    MotionParams {
        class,
        rate,
        background,
        shapes,
    }
}

/// Renders a clip with 2x2 supersampling and additive noise.
pub fn render(spec: &MotionShapesSpec, motion: &MotionParams, seed: u64, id: u64) -> Result<VideoClip> {
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::stream(seed, "motion-noise", &[id]);
    let mut data = Vec::with_capacity(t_len * h * w * 3);
    const SUB: [f64; 2] = [0.25, 0.75];
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let mut px = [0.0; 3];
                for sy in SUB {
                    for sx in SUB {
                        let c = motion
                            .sample(x as f64 + sx - 0.5, y as f64 + sy - 0.5, t as f64)
                            .unwrap_or([motion.background; 3]);
                        for k in 0..3 {
                            px[k] += 0.25 * c[k];
                        }
                    }
                }
                for v in px {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    // 8-bit frames, as decoded video would be; `+ 0.0` turns -0 into 0
                    data.push((v + n).round().clamp(0.0, 255.0) + 0.0);
                }
            }
        }
    }
    VideoClip::new(id, [t_len, h, w, 3], data)
}

/// Ground-truth displacement for translation classes: `(±rate, 0)` or
/// `(0, ±rate)` wherever a shape covers the pixel center at the earlier frame
/// of the pair, zero on the background. `None` for the other classes.
pub fn ground_truth_flow(spec: &MotionShapesSpec, motion: &MotionParams) -> Option<FlowField> {
    let (dx, dy) = motion.class.direction()?;
    let mut field = FlowField::zeros(spec.frames - 1, spec.height, spec.width);
    for t in 0..spec.frames - 1 {
        for y in 0..spec.height {
            for x in 0..spec.width {
                if motion.covers(x as f64, y as f64, t as f64) {
                    field.set(t, y, x, (dx * motion.rate, dy * motion.rate));
                }
            }
        }
    }
    Some(field)
}
