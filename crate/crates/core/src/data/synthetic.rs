//! Seeded synthetic "shapes" segmentation data: disks, rectangles and
//! triangles on a jittered background, labelled pixel-exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_rng, Sample};
use crate::error::{Error, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["background", "disk", "rectangle", "triangle"];

/// Base colour per class; the background entry is used for the canvas.
const PALETTE: [[f64; 3]; 4] = [
    [0.50, 0.50, 0.50],
    [0.80, 0.30, 0.30],
    [0.30, 0.75, 0.35],
    [0.30, 0.40, 0.80],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub samples: usize,
    /// Side of the square canvas.
    pub canvas: usize,
    /// Background plus up to three shape classes.
    pub class_count: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: [usize; 2],
    /// Inclusive range of shape radii (half extents) in pixels.
    pub size_range: [usize; 2],
    /// Per-channel uniform colour jitter amplitude.
    pub color_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            samples: 8,
            canvas: 64,
            class_count: 4,
            shapes_per_image: [1, 3],
            size_range: [10, 20],
            color_jitter: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("data.synthetic.{}", name);
        if self.canvas < 32 {
            return Err(Error::validation(f("canvas"), "must be >= 32"));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.class_count) {
            return Err(Error::validation(f("class_count"), "must be in 2..=4"));
        }
        if self.samples == 0 {
            return Err(Error::validation(f("samples"), "must be >= 1"));
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::validation(f("shapes_per_image"), "needs 1 <= min <= max"));
        }
        let [lo, hi] = self.size_range;
        if lo < 2 || lo > hi || 2 * hi >= self.canvas {
            return Err(Error::validation(f("size_range"), "needs 2 <= min <= max < canvas / 2"));
        }
        if !(0.0..=0.5).contains(&self.color_jitter) {
            return Err(Error::validation(f("color_jitter"), "must be in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    /// Vertices in `(y, x)` order.
    Triangle { a: [f64; 2], b: [f64; 2], c: [f64; 2] },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match self {
            Shape::Disk { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Triangle { .. } => 3,
        }
    }

    /// Whether the pixel centre `(y + 0.5, x + 0.5)` lies inside the shape.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Rect { top, left, bottom, right } => py >= top && py < bottom && px >= left && px < right,
            Shape::Triangle { a, b, c } => {
                let edge = |p: [f64; 2], q: [f64; 2]| (q[1] - p[1]) * (py - p[0]) - (q[0] - p[0]) * (px - p[1]);
                let (e0, e1, e2) = (edge(a, b), edge(b, c), edge(c, a));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

/// A shape with its fill colour.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: Shape,
    pub color: [f64; 3],
}

fn jittered(base: [f64; 3], amp: f64, rng: &mut impl Rng) -> [f64; 3] {
    base.map(|v| {
        let j = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
        // Snap to 8-bit levels so images survive a PPM round trip exactly.
        ((v + j).clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}

/// Paints `shapes` in order (later shapes occlude earlier ones).
pub fn render(id: impl Into<String>, canvas: usize, background: [f64; 3], shapes: &[PlacedShape]) -> Sample {
    let plane = canvas * canvas;
    let mut data = vec![0.0; 3 * plane];
    let mut labels = LabelMap::filled(canvas, canvas, 0);
    for y in 0..canvas {
        for x in 0..canvas {
            let mut color = background;
            for s in shapes {
                if s.shape.covers(y, x) {
                    color = s.color;
                    labels.set(y, x, s.shape.class());
                }
            }
            for c in 0..3 {
                data[c * plane + y * canvas + x] = color[c];
            }
        }
    }
    Sample {
        id: id.into(),
        image: Tensor::new(vec![1, 3, canvas, canvas], data).expect("canvas shape"),
        labels,
    }
}

fn random_shape(class: u8, spec: &SyntheticSpec, rng: &mut impl Rng) -> Shape {
    let n = spec.canvas as f64;
    let r = rng.gen_range(spec.size_range[0]..=spec.size_range[1]) as f64;
    let cy = rng.gen_range(r..=n - r);
    let cx = rng.gen_range(r..=n - r);
    match class {
        1 => Shape::Disk { cy, cx, r },
        2 => {
            let hh = r * rng.gen_range(0.6..=1.0);
            let hw = r * rng.gen_range(0.6..=1.0);
            Shape::Rect {
                top: cy - hh,
                left: cx - hw,
                bottom: cy + hh,
                right: cx + hw,
            }
        }
        _ => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertex = |k: f64| {
                let t = theta + k * std::f64::consts::TAU / 3.0;
                [cy + r * t.sin(), cx + r * t.cos()]
            };
            Shape::Triangle {
                a: vertex(0.0),
                b: vertex(1.0),
                c: vertex(2.0),
            }
        }
    }
}

/// Generates one sample from its own seeded stream. The last shape, drawn on
/// top of the others, has class `1 + index mod (C - 1)`, so every shape class
/// appears once there are at least `C - 1` samples.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = sample_rng(spec.seed, index as u64);
    let shape_classes = spec.class_count - 1;
    let background = jittered(PALETTE[0], spec.color_jitter, &mut rng);
    let count = rng.gen_range(spec.shapes_per_image[0]..=spec.shapes_per_image[1]);
    let shapes: Vec<PlacedShape> = (0..count)
        .map(|k| {
            let class = if k + 1 == count {
                1 + (index % shape_classes) as u8
            } else {
                rng.gen_range(1..=shape_classes as u8)
            };
            let shape = random_shape(class, spec, &mut rng);
            PlacedShape {
                shape,
                color: jittered(PALETTE[class as usize], spec.color_jitter, &mut rng),
            }
        })
        .collect();
    render(format!("{:04}", index), spec.canvas, background, &shapes)
}

pub fn generate_shapes_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.samples).map(|i| generate_sample(spec, i)).collect())
}
