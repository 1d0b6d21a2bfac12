//! Oriented BEV boxes and their exact intersection-over-union.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oriented box on the ground plane. `length` runs along `yaw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub center_x: f64,
    pub center_y: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl ObjectBox {
    pub fn new(center_x: f64, center_y: f64, length: f64, width: f64, yaw: f64) -> Self {
        Self {
            center_x,
            center_y,
            length,
            width,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center_x + u * c - v * s, self.center_y + u * s + v * c])
    }

    /// The same box under a rigid motion (rotation `theta` about the origin, then translation).
    pub fn transformed(&self, theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(
            c * self.center_x - s * self.center_y + tx,
            s * self.center_x + c * self.center_y + ty,
            self.length,
            self.width,
            self.yaw + theta,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }

    pub fn is_valid(&self) -> bool {
        self.length > 0.0 && self.width > 0.0 && self.length.is_finite() && self.width.is_finite()
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Folds a yaw into `[-π/4, 3π/4)`. A box is unchanged by a half turn, so this
/// picks one representative and keeps the fold seam on the diagonals.
pub fn fold_half_turn(yaw: f64) -> f64 {
    (yaw + PI / 4.0).rem_euclid(PI) - PI / 4.0
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`
/// (Sutherland–Hodgman).
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn intersection_area(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let dx = a.center_x - b.center_x;
    let dy = a.center_y - b.center_y;
    let reach = 0.5 * (a.length.hypot(a.width) + b.length.hypot(b.width));
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0)
}

/// Exact IoU of two oriented boxes via convex polygon clipping.
pub fn rotated_iou(a: &ObjectBox, b: &ObjectBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::DegenerateBox);
    }
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
