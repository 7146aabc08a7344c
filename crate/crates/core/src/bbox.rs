//! Center-format boxes `[x, y, w, h]` in pixels.

use std::fmt;

/// Target state: center `(x, y)` and size `w×h`. A box with NaN fields is the
/// "absent" sentinel for frames without a prediction.
#[derive(Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_absent() {
            write!(f, "BBox(absent)")
        } else {
            write!(f, "BBox(x={}, y={}, w={}, h={})", self.x, self.y, self.w, self.h)
        }
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub const fn absent() -> Self {
        Self::new(f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// From the top-left convention used on disk.
    pub fn from_top_left(x_tl: f64, y_tl: f64, w: f64, h: f64) -> Self {
        Self::new(x_tl + w / 2.0, y_tl + h / 2.0, w, h)
    }

    pub fn is_absent(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().any(|v| v.is_nan())
    }

    /// Present, finite and with strictly positive extent.
    pub fn is_valid(&self) -> bool {
        !self.is_absent()
            && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Clips to `[0, width]×[0, height]`, keeping at least `min_size` of extent.
    pub fn clamp_to_frame(&self, width: f64, height: f64, min_size: f64) -> Self {
        let (x1, y1, x2, y2) = self.corners();
        let clip = |lo: f64, hi: f64, limit: f64| {
            let mut a = lo.clamp(0.0, limit);
            let mut b = hi.clamp(0.0, limit);
            if b - a < min_size {
                let c = ((a + b) / 2.0).clamp(min_size / 2.0, limit - min_size / 2.0);
                a = c - min_size / 2.0;
                b = c + min_size / 2.0;
            }
            (a, b)
        };
        let (x1, x2) = clip(x1, x2, width);
        let (y1, y2) = clip(y1, y2, height);
        Self::from_corners(x1, y1, x2, y2)
    }
}

/// Intersection over union of two center-format boxes; 0 when either is
/// absent or the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_absent() || b.is_absent() {
        return 0.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).min(1.0)
    } else {
        0.0
    }
}
