//! Axis-aligned box algebra.
//!
//! Boxes are stored in center form `(x, y, w, h)`. Corner form only appears at
//! file boundaries (annotation ingestion, proposal export).
//!
//! The offset transform maps a box `b` and offsets `(tx, ty, tw, th)` to
//!
//! ```text
//! x' = x + tx * w      w' = w * exp(tw)
//! y' = y + ty * h      h' = h * exp(th)
//! ```
//!
//! and [`encode_offsets`] is its exact inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle in center parameterization, in raster units.
///
/// Width and height are strictly positive and all fields are finite. The
/// fields are public for reading convenience; use [`BBox::new`] to build one
/// from untrusted values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(xmin, ymin, xmax, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// The four regression parameters relating two boxes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Offsets {
    pub const ZERO: Offsets = Offsets {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Offsets { tx, ty, tw, th }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Offsets::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn left(&self) -> f64 {
        self.x - 0.5 * self.w
    }

    pub fn right(&self) -> f64 {
        self.x + 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.y - 0.5 * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.y + 0.5 * self.h
    }

    pub fn to_corners(&self) -> Corners {
        Corners {
            xmin: self.left(),
            ymin: self.top(),
            xmax: self.right(),
            ymax: self.bottom(),
        }
    }

    /// Rejects zero-area and inverted corner boxes.
    pub fn from_corners(c: Corners) -> Result<Self> {
        if !(c.xmax > c.xmin && c.ymax > c.ymin) {
            return Err(Error::InvalidBox(format!("degenerate corners {c:?}")));
        }
        BBox::new(
            0.5 * (c.xmin + c.xmax),
            0.5 * (c.ymin + c.ymax),
            c.xmax - c.xmin,
            c.ymax - c.ymin,
        )
    }

    /// Clip to `[0, width] x [0, height]`, keeping each side at least `min_side`.
    pub fn clip(&self, width: f64, height: f64, min_side: f64) -> BBox {
        let (xmin, xmax) = clip_interval(self.left(), self.right(), width, min_side);
        let (ymin, ymax) = clip_interval(self.top(), self.bottom(), height, min_side);
        BBox {
            x: 0.5 * (xmin + xmax),
            y: 0.5 * (ymin + ymax),
            w: xmax - xmin,
            h: ymax - ymin,
        }
    }
}

fn clip_interval(lo: f64, hi: f64, extent: f64, min_side: f64) -> (f64, f64) {
    let min_side = min_side.min(extent);
    let mut lo = lo.clamp(0.0, extent);
    let mut hi = hi.clamp(0.0, extent);
    if hi - lo < min_side {
        let mid = (0.5 * (lo + hi)).clamp(0.5 * min_side, extent - 0.5 * min_side);
        lo = mid - 0.5 * min_side;
        hi = mid + 0.5 * min_side;
    }
    (lo, hi)
}

/// Intersection width and height, each clamped at zero.
pub(crate) fn intersection_extent(u: &BBox, v: &BBox) -> (f64, f64) {
    let iw = u.right().min(v.right()) - u.left().max(v.left());
    let ih = u.bottom().min(v.bottom()) - u.top().max(v.top());
    (iw.max(0.0), ih.max(0.0))
}

/// Intersection over union. Boxes that only share an edge have IoU 0.
pub fn iou(u: &BBox, v: &BBox) -> f64 {
    let (iw, ih) = intersection_extent(u, v);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from edge differences, so that iou(u, u) is exactly 1.
    let area = |b: &BBox| (b.right() - b.left()) * (b.bottom() - b.top());
    let union = area(u) + area(v) - inter;
    (inter / union).min(1.0)
}

/// Apply regression offsets to `b`.
pub fn apply_offsets(b: &BBox, d: &Offsets) -> Result<BBox> {
    let out = BBox {
        x: b.x + d.tx * b.w,
        y: b.y + d.ty * b.h,
        w: b.w * d.tw.exp(),
        h: b.h * d.th.exp(),
    };
    if out.is_valid() {
        Ok(out)
    } else {
        Err(Error::NumericRange(format!(
            "applying {d:?} to {b:?} gives {out:?}"
        )))
    }
}

/// The offsets that carry `b` onto `g`.
pub fn encode_offsets(b: &BBox, g: &BBox) -> Offsets {
    Offsets {
        tx: (g.x - b.x) / b.w,
        ty: (g.y - b.y) / b.h,
        tw: (g.w / b.w).ln(),
        th: (g.h / b.h).ln(),
    }
}

/// Index of the ground truth with the highest IoU against `b`; lowest index wins ties.
pub fn match_nearest_gt(b: &BBox, gts: &[BBox]) -> Result<usize> {
    if gts.is_empty() {
        return Err(Error::EmptyInput("ground-truth list"));
    }
    let mut best = 0;
    let mut best_iou = iou(b, &gts[0]);
    for (i, g) in gts.iter().enumerate().skip(1) {
        let v = iou(b, g);
        if v > best_iou {
            best = i;
            best_iou = v;
        }
    }
    Ok(best)
}
