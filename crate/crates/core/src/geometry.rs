//! Box algebra for the proposal network: anchors, IoU, delta coding, NMS.
//!
//! Boxes use corner coordinates with `width = x2 - x1` (no `+1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "inverted box ({x1}, {y1}, {x2}, {y2})");
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_inside(&self, img_w: f64, img_h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= img_w && self.y2 <= img_h
    }
}

/// Regression offsets of a box relative to a reference box: center shift
/// normalized by the reference size, and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub fmap_h: usize,
    pub fmap_w: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Anchors fully inside a `img_w × img_h` image.
    pub fn inside_mask(&self, img_w: f64, img_h: f64) -> Vec<bool> {
        self.boxes.iter().map(|b| b.is_inside(img_w, img_h)).collect()
    }
}

/// Tiles anchors over a feature map. `ratio` is height / width; each anchor
/// has area `(scale · stride)²` and is centered on its cell.
pub fn generate_anchors(
    fmap_h: usize,
    fmap_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidArgument(
            "anchor scales and ratios must be nonempty".into(),
        ));
    }
    if stride == 0 || scales.iter().chain(ratios).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(
            "anchor stride, scales and ratios must be positive".into(),
        ));
    }
    let s = stride as f64;
    let mut boxes = Vec::with_capacity(fmap_h * fmap_w * scales.len() * ratios.len());
    for i in 0..fmap_h {
        for j in 0..fmap_w {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            for &scale in scales {
                let area = (scale * s).powi(2);
                for &ratio in ratios {
                    let w = (area / ratio).sqrt();
                    boxes.push(BBox::from_center(cx, cy, w, w * ratio));
                }
            }
        }
    }
    Ok(AnchorGrid {
        fmap_h,
        fmap_w,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        boxes,
    })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_positive(b: &BBox, what: &str) -> Result<()> {
    if b.width() > 0.0 && b.height() > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} must have positive size, got {b:?}"
        )))
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    check_positive(anchor, "anchor")?;
    check_positive(gt, "target box")?;
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        dx: (gcx - acx) / anchor.width(),
        dy: (gcy - acy) / anchor.height(),
        dw: (gt.width() / anchor.width()).ln(),
        dh: (gt.height() / anchor.height()).ln(),
    })
}

/// Size deltas are clamped at `ln(1000/16)` so a wild prediction cannot
/// overflow `exp`.
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356;

pub fn decode(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    check_positive(anchor, "anchor")?;
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.min(MAX_LOG_RATIO).exp();
    let h = ah * delta.dh.min(MAX_LOG_RATIO).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

pub fn clip_box(b: &BBox, img_w: f64, img_h: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, img_w),
        y1: b.y1.clamp(0.0, img_h),
        x2: b.x2.clamp(0.0, img_w),
        y2: b.y2.clamp(0.0, img_h),
    }
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order (ties: lower index first). A box is dropped when its IoU with an
/// already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "nms got {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let order = descending_order(scores);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending score, ties broken by lower index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}
