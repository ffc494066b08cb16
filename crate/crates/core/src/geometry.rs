//! Planar geometry helpers: points, rigid transforms, polygons and
//! segment predicates used by graph construction.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

/// Tolerance used by the boundary-inclusive polygon test.
pub const GEOM_EPS: f64 = 1e-9;

/// A point or direction in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2 { x: v[0], y: v[1] }
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn dist_sq(self, o: Vec2) -> f64 {
        (self - o).norm_sq()
    }

    /// Unit vector in the same direction, or `None` for a (near) zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        if n < 1e-12 || !n.is_finite() {
            None
        } else {
            Some(Vec2::new(self.x / n, self.y / n))
        }
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A 2-D rigid motion, optionally composed with a mirror across the x-axis.
///
/// Applied to a point as `rotate(mirror(p)) + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: f64,
    pub translation: Vec2,
    #[serde(default)]
    pub mirror: bool,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: 0.0,
        translation: Vec2::ZERO,
        mirror: false,
    };

    pub fn new(rotation: f64, translation: Vec2) -> Self {
        RigidTransform {
            rotation,
            translation,
            mirror: false,
        }
    }

    pub fn apply_dir(&self, d: Vec2) -> Vec2 {
        let d = if self.mirror { Vec2::new(d.x, -d.y) } else { d };
        d.rotate(self.rotation)
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        self.apply_dir(p) + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        // p = R M q + t  =>  q = M^-1 R^-1 (p - t) = R' M (p - t')
        if self.mirror {
            // M R(-a) = R(a) M
            let t = self.translation.rotate(-self.rotation);
            RigidTransform {
                rotation: self.rotation,
                translation: Vec2::new(-t.x, t.y),
                mirror: true,
            }
        } else {
            RigidTransform {
                rotation: -self.rotation,
                translation: -(self.translation.rotate(-self.rotation)),
                mirror: false,
            }
        }
    }

    /// `self.then(other)` applies `self` first, then `other`.
    pub fn then(&self, other: &RigidTransform) -> RigidTransform {
        // other(self(p)) = R2 M2 (R1 M1 p + t1) + t2
        let translation = other.apply(self.translation);
        let (rotation, mirror) = if other.mirror {
            // M2 R1 = R(-a1) M2
            (other.rotation - self.rotation, !self.mirror)
        } else {
            (other.rotation + self.rotation, self.mirror)
        };
        RigidTransform {
            rotation: wrap_angle(rotation),
            translation,
            mirror,
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        !self.mirror
            && wrap_angle(self.rotation).abs() <= tol
            && self.translation.norm() <= tol
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r -= 2.0 * PI;
    }
    r
}

/// A simple polygon stored as an open ring (the closing vertex is implicit).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon {
    pub ring: Vec<Vec2>,
}

impl Polygon {
    pub fn new(ring: Vec<Vec2>) -> Self {
        Polygon { ring }
    }

    /// Axis-aligned rectangle from its min and max corners.
    pub fn rect(min: Vec2, max: Vec2) -> Self {
        Polygon::new(vec![
            min,
            Vec2::new(max.x, min.y),
            max,
            Vec2::new(min.x, max.y),
        ])
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.ring.len();
        (0..n).map(move |i| (self.ring[i], self.ring[(i + 1) % n]))
    }

    /// Boundary-inclusive containment test.
    pub fn contains(&self, p: Vec2) -> bool {
        if self.ring.len() < 3 {
            return false;
        }
        if self.on_boundary(p, GEOM_EPS) {
            return true;
        }
        point_in_ring(&self.ring, p)
    }

    /// Strict interior test (boundary points are outside).
    pub fn contains_strict(&self, p: Vec2) -> bool {
        self.ring.len() >= 3 && !self.on_boundary(p, GEOM_EPS) && point_in_ring(&self.ring, p)
    }

    pub fn on_boundary(&self, p: Vec2, tol: f64) -> bool {
        self.edges().any(|(a, b)| point_segment_dist(p, a, b) <= tol)
    }

    pub fn bbox(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.ring {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// Whether segment `a`-`b` touches the boundary or passes through the interior.
    pub fn blocks_segment(&self, a: Vec2, b: Vec2) -> bool {
        if self.ring.len() < 3 {
            return false;
        }
        self.edges().any(|(p, q)| segments_intersect(a, b, p, q))
            || self.contains(a.lerp(b, 0.5))
    }

    pub fn transformed(&self, t: &RigidTransform) -> Polygon {
        Polygon::new(self.ring.iter().map(|p| t.apply(*p)).collect())
    }
}

/// Even-odd ray casting.
fn point_in_ring(ring: &[Vec2], p: Vec2) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (ring[i], ring[j]);
        if (pi.y > p.y) != (pj.y > p.y) {
            let x_cross = pj.x + (p.y - pj.y) * (pi.x - pj.x) / (pi.y - pj.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn point_segment_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) - GEOM_EPS
        && p.x <= a.x.max(b.x) + GEOM_EPS
        && p.y >= a.y.min(b.y) - GEOM_EPS
        && p.y <= a.y.max(b.y) + GEOM_EPS
}

/// Closed-segment intersection test, including touching and collinear overlap.
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let scale = 1.0 + (b - a).norm() * (d - c).norm();
    let tol = GEOM_EPS * scale;
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    let sgn = |v: f64| {
        if v > tol {
            1
        } else if v < -tol {
            -1
        } else {
            0
        }
    };
    let (s1, s2, s3, s4) = (sgn(o1), sgn(o2), sgn(o3), sgn(o4));
    if s1 * s2 < 0 && s3 * s4 < 0 {
        return true;
    }
    (s1 == 0 && on_segment(a, b, c))
        || (s2 == 0 && on_segment(a, b, d))
        || (s3 == 0 && on_segment(c, d, a))
        || (s4 == 0 && on_segment(c, d, b))
}

/// Cumulative arc length at each vertex of a polyline.
pub fn cumulative_lengths(pts: &[Vec2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            acc += p.dist(pts[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// Point and unit tangent at arc length `s` along a polyline (clamped to its ends).
pub fn point_at_arclength(pts: &[Vec2], cum: &[f64], s: f64) -> (Vec2, Vec2) {
    debug_assert!(pts.len() >= 2);
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let mut seg = match cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(pts.len() - 2),
        Err(i) => i.saturating_sub(1).min(pts.len() - 2),
    };
    // skip zero-length pieces
    while seg + 1 < pts.len() - 1 && cum[seg + 1] - cum[seg] <= 0.0 {
        seg += 1;
    }
    let (a, b) = (pts[seg], pts[seg + 1]);
    let len = cum[seg + 1] - cum[seg];
    let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
    let dir = (b - a).normalized().unwrap_or(Vec2::new(1.0, 0.0));
    (a.lerp(b, t), dir)
}
