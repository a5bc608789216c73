//! Planar primitives: points, axis-aligned rectangles and segments.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + t * (o.x - self.x), self.y + t * (o.y - self.y))
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        debug_assert!(x1 > x0 && y1 > y0, "degenerate rectangle");
        Self { x0, y0, x1, y1 }
    }

    /// Square of side `side` centered at `c`.
    pub fn centered(c: Point2, side: f64) -> Self {
        let h = 0.5 * side;
        Self::new(c.x - h, c.y - h, c.x + h, c.y + h)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Characteristic size used for relative tolerances.
    pub fn size(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn inflate(&self, d: f64) -> Rect {
        Rect::new(self.x0 - d, self.y0 - d, self.x1 + d, self.y1 + d)
    }

    pub fn scaled(&self, s: f64) -> Rect {
        Rect::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Crossing {
    /// Single common point with parameters along each segment.
    Point { t: f64, u: f64, at: Point2 },
    /// Collinear with an overlap of positive length, expressed on the first segment.
    Overlap { t0: f64, t1: f64 },
}

impl Segment {
    pub const fn new(a: Point2, b: Point2) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    pub fn at(&self, t: f64) -> Point2 {
        self.a.lerp(self.b, t)
    }

    pub fn dir(&self) -> (f64, f64) {
        (self.b.x - self.a.x, self.b.y - self.a.y)
    }

    /// Liang–Barsky clip against `r`.
    pub fn clip(&self, r: &Rect) -> Option<Segment> {
        let (dx, dy) = self.dir();
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        let checks = [
            (-dx, self.a.x - r.x0),
            (dx, r.x1 - self.a.x),
            (-dy, self.a.y - r.y0),
            (dy, r.y1 - self.a.y),
        ];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let t = q / p;
                if p < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
            }
        }
        if t0 > t1 {
            return None;
        }
        let mut a = self.at(t0);
        let mut b = self.at(t1);
        // pin endpoints onto the rectangle so later boundary tests are exact
        for p in [&mut a, &mut b] {
            p.x = p.x.clamp(r.x0, r.x1);
            p.y = p.y.clamp(r.y0, r.y1);
        }
        Some(Segment::new(a, b))
    }

    /// Intersection with `o`. `tol` is an absolute distance tolerance.
    pub fn crossing(&self, o: &Segment, tol: f64) -> Option<Crossing> {
        let (rx, ry) = self.dir();
        let (sx, sy) = o.dir();
        let len_r = rx.hypot(ry);
        let len_s = sx.hypot(sy);
        if len_r == 0.0 || len_s == 0.0 {
            return None;
        }
        let qpx = o.a.x - self.a.x;
        let qpy = o.a.y - self.a.y;
        let denom = rx * sy - ry * sx;
        if denom.abs() <= 1e-12 * len_r * len_s {
            // parallel: overlap only if collinear
            let dist = (qpx * ry - qpy * rx).abs() / len_r;
            if dist > tol {
                return None;
            }
            let rr = len_r * len_r;
            let ta = (qpx * rx + qpy * ry) / rr;
            let tb = ((o.b.x - self.a.x) * rx + (o.b.y - self.a.y) * ry) / rr;
            let lo = ta.min(tb).max(0.0);
            let hi = ta.max(tb).min(1.0);
            if (hi - lo) * len_r > tol {
                return Some(Crossing::Overlap { t0: lo, t1: hi });
            }
            if (hi - lo) * len_r >= -tol {
                // touching end to end
                let t = 0.5 * (lo + hi);
                let at = self.at(t.clamp(0.0, 1.0));
                let u = ((at.x - o.a.x) * sx + (at.y - o.a.y) * sy) / (len_s * len_s);
                return Some(Crossing::Point { t: t.clamp(0.0, 1.0), u: u.clamp(0.0, 1.0), at });
            }
            return None;
        }
        let t = (qpx * sy - qpy * sx) / denom;
        let u = (qpx * ry - qpy * rx) / denom;
        let et = tol / len_r;
        let eu = tol / len_s;
        if t < -et || t > 1.0 + et || u < -eu || u > 1.0 + eu {
            return None;
        }
        let t = t.clamp(0.0, 1.0);
        let u = u.clamp(0.0, 1.0);
        Some(Crossing::Point { t, u, at: self.at(t) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_keeps_inner_part() {
        let r = Rect::new(0.0, 0.0, 1.0, 1.0);
        let s = Segment::new(Point2::new(-1.0, 0.5), Point2::new(2.0, 0.5));
        let c = s.clip(&r).unwrap();
        assert_eq!(c.a, Point2::new(0.0, 0.5));
        assert_eq!(c.b, Point2::new(1.0, 0.5));
        let out = Segment::new(Point2::new(2.0, 2.0), Point2::new(3.0, 3.0));
        assert!(out.clip(&r).is_none());
    }

    #[test]
    fn crossing_x_shape() {
        let s1 = Segment::new(Point2::new(0.0, 0.0), Point2::new(2.0, 2.0));
        let s2 = Segment::new(Point2::new(0.0, 2.0), Point2::new(2.0, 0.0));
        match s1.crossing(&s2, 1e-12).unwrap() {
            Crossing::Point { t, u, at } => {
                assert!((t - 0.5).abs() < 1e-15 && (u - 0.5).abs() < 1e-15);
                assert!(at.dist(Point2::new(1.0, 1.0)) < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crossing_collinear_overlap() {
        let s1 = Segment::new(Point2::new(0.0, 0.0), Point2::new(2.0, 0.0));
        let s2 = Segment::new(Point2::new(1.0, 0.0), Point2::new(3.0, 0.0));
        assert_eq!(
            s1.crossing(&s2, 1e-12),
            Some(Crossing::Overlap { t0: 0.5, t1: 1.0 })
        );
        let s3 = Segment::new(Point2::new(0.0, 1.0), Point2::new(2.0, 1.0));
        assert!(s1.crossing(&s3, 1e-12).is_none());
    }
}
