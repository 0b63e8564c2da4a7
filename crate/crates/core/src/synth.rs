//! Synthetic detection scenes: a few anti-aliased shapes on a cluttered,
//! noisy background, so that nearly every anchor is an easy negative.

use serde::{Deserialize, Serialize};

use crate::cascade::{assign_labels, CascadeConfig, Label};
use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorGrid, BBox};
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Training images; image `i` uses seed `mix(seed, i)`.
    pub num_images: usize,
    /// Test images, indexed after the training images.
    pub test_images: usize,
    pub classes: Vec<ShapeKind>,
    /// Inclusive range.
    pub objects_per_image: [usize; 2],
    /// Inclusive side-length range in pixels.
    pub object_size: [f64; 2],
    /// Distractor blobs per 1000 px².
    pub clutter_density: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 96,
            num_images: 200,
            test_images: 50,
            classes: vec![ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle],
            objects_per_image: [1, 2],
            object_size: [16.0, 40.0],
            clutter_density: 2.0,
            noise_std: 0.03,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let [olo, ohi] = self.objects_per_image;
        let [slo, shi] = self.object_size;
        if self.image_size == 0 || self.classes.is_empty() {
            return fail("scene needs a positive image_size and at least one class".into());
        }
        if olo > ohi {
            return fail(format!("objects_per_image range {olo}..={ohi} is empty"));
        }
        if !(slo >= 2.0 && slo <= shi) {
            return fail(format!("object_size range {slo}..={shi} is empty or below 2 px"));
        }
        if shi >= self.image_size as f64 {
            return fail(format!(
                "object_size max {shi} must be below image_size {}",
                self.image_size
            ));
        }
        if !(self.clutter_density >= 0.0 && self.noise_std >= 0.0) {
            return fail("clutter_density and noise_std must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Boxes with 1-based class ids.
    pub gts: Vec<(BBox, usize)>,
}

/// Training split.
pub fn generate_dataset(spec: &SceneSpec) -> Result<Vec<SceneRecord>> {
    generate_range(spec, 0, spec.num_images)
}

/// Test split: the `test_images` scenes following the training scenes.
pub fn generate_test_set(spec: &SceneSpec) -> Result<Vec<SceneRecord>> {
    generate_range(spec, spec.num_images, spec.test_images)
}

pub fn generate_range(spec: &SceneSpec, start: usize, count: usize) -> Result<Vec<SceneRecord>> {
    spec.validate()?;
    Ok((start..start + count)
        .map(|i| render_scene(spec, &mut Rng::new(mix(spec.seed, i as u64))))
        .collect())
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    half: f64,
}

impl Shape {
    /// Signed distance in pixels, negative inside.
    fn sdf(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disc => (dx * dx + dy * dy).sqrt() - self.half,
            ShapeKind::Square => {
                let qx = dx.abs() - self.half;
                let qy = dy.abs() - self.half;
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0)
            }
            ShapeKind::Triangle => {
                // Apex up, base along the bottom of the bounding square.
                let h = self.half;
                let base = dy - h;
                let n = 2.0 / 5f64.sqrt();
                let m = 1.0 / 5f64.sqrt();
                let left = -n * (dx + h) - m * (dy - h);
                let right = n * (dx - h) - m * (dy - h);
                base.max(left).max(right)
            }
        }
    }

    fn bounds(&self) -> BBox {
        BBox::new(
            self.cx - self.half,
            self.cy - self.half,
            self.cx + self.half,
            self.cy + self.half,
        )
    }
}

fn render_scene(spec: &SceneSpec, rng: &mut Rng) -> SceneRecord {
    let n = spec.image_size;
    let nf = n as f64;
    let mut img = vec![0.0; 3 * n * n];

    let base: [f64; 3] = std::array::from_fn(|_| rng.range(0.35, 0.65));
    let (gx, gy) = (rng.range(-0.1, 0.1), rng.range(-0.1, 0.1));
    for y in 0..n {
        for x in 0..n {
            let g = gx * (x as f64 / nf - 0.5) + gy * (y as f64 / nf - 0.5);
            for c in 0..3 {
                img[(c * n + y) * n + x] = base[c] + g;
            }
        }
    }

    let blobs = (spec.clutter_density * nf * nf / 1000.0).round() as usize;
    for _ in 0..blobs {
        let (bx, by) = (rng.range(0.0, nf), rng.range(0.0, nf));
        let radius = rng.range(1.5, 6.0);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.range(-0.12, 0.12));
        let lo = |v: f64| ((v - 3.0 * radius).floor().max(0.0)) as usize;
        let hi = |v: f64| ((v + 3.0 * radius).ceil().min(nf)) as usize;
        for y in lo(by)..hi(by) {
            for x in lo(bx)..hi(bx) {
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                let w = (-d2 / (2.0 * radius * radius)).exp();
                for c in 0..3 {
                    img[(c * n + y) * n + x] += amp[c] * w;
                }
            }
        }
    }

    let [olo, ohi] = spec.objects_per_image;
    let count = rng.range_inclusive(olo, ohi);
    let mut gts: Vec<(BBox, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.below(spec.classes.len());
        let mut placed = None;
        for _ in 0..50 {
            let side = rng.range(spec.object_size[0], spec.object_size[1]);
            let half = side / 2.0;
            let s = Shape {
                kind: spec.classes[class],
                cx: rng.range(half, nf - half),
                cy: rng.range(half, nf - half),
                half,
            };
            let b = s.bounds();
            if gts.iter().all(|(g, _)| iou(g, &b) < 0.1) {
                placed = Some(s);
                break;
            }
        }
        let Some(shape) = placed else { continue };
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let offset = sign * rng.range(0.3, 0.45);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.range(-0.08, 0.08));
        let b = shape.bounds();
        let x0 = (b.x1 - 1.0).floor().max(0.0) as usize;
        let x1 = ((b.x2 + 1.0).ceil() as usize).min(n);
        let y0 = (b.y1 - 1.0).floor().max(0.0) as usize;
        let y1 = ((b.y2 + 1.0).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let cov = (0.5 - shape.sdf(x as f64 + 0.5, y as f64 + 0.5)).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for c in 0..3 {
                        let i = (c * n + y) * n + x;
                        let fill = base[c] + offset + tint[c];
                        img[i] += cov * (fill - img[i]);
                    }
                }
            }
        }
        gts.push((b, class + 1));
    }

    if spec.noise_std > 0.0 {
        for v in &mut img {
            *v += spec.noise_std * rng.normal();
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    SceneRecord {
        image: Tensor::new([3, n, n], img).expect("scene shape"),
        gts,
    }
}

/// Anchor label totals over a set of scenes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Imbalance {
    pub positives: usize,
    pub negatives: usize,
    pub ignored: usize,
}

impl Imbalance {
    /// Negatives per positive; infinite without positives.
    pub fn ratio(&self) -> f64 {
        self.negatives as f64 / self.positives as f64
    }
}

pub fn imbalance(records: &[SceneRecord], anchors: &AnchorGrid, cfg: &CascadeConfig) -> Imbalance {
    let mut out = Imbalance::default();
    for r in records {
        let s = r.image.shape();
        let boxes: Vec<BBox> = r.gts.iter().map(|g| g.0).collect();
        let a = assign_labels(anchors, &boxes, cfg, s[2] as f64, s[1] as f64);
        out.positives += a.count(Label::Object);
        out.negatives += a.count(Label::Background);
        out.ignored += a.count(Label::Ignore);
    }
    out
}

#[cfg(test)]
mod tests;
