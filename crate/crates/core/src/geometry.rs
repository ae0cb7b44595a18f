//! Planar geometry for rotated rectangles: the [`ObjectBox`] type, convex
//! polygon clipping, convex hulls and minimum-area enclosing rectangles.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: width={width}, length={length}")]
    DegenerateBox { width: f64, length: f64 },
    #[error("non-finite box parameter")]
    NonFinite,
}

/// Wraps an angle into `[-π, π)`.
#[inline]
pub fn wrap_pi(angle: f64) -> f64 {
    let a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid may return 2π for tiny negative inputs
    if a >= PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Reduces a rectangle orientation modulo π into `[-π/2, π/2)`.
#[inline]
pub fn canonical_orientation(angle: f64) -> f64 {
    let a = (angle + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if a >= FRAC_PI_2 {
        a - PI
    } else {
        a
    }
}

/// Smallest signed difference between two rectangle orientations, in
/// `[-π/2, π/2)`. Orientations differing by π compare equal.
#[inline]
pub fn orientation_difference(a: f64, b: f64) -> f64 {
    canonical_orientation(a - b)
}

/// Rotated rectangle. `orientation` is the direction of the length axis,
/// counter-clockwise from east, kept canonical in `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub center_east: f64,
    pub center_north: f64,
    pub width: f64,
    pub length: f64,
    pub orientation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ObjectBox {
    pub fn new(
        center_east: f64,
        center_north: f64,
        width: f64,
        length: f64,
        orientation: f64,
    ) -> Result<Self, GeometryError> {
        let b = Self {
            center_east,
            center_north,
            width,
            length,
            orientation: canonical_orientation(orientation),
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let params = [
            self.center_east,
            self.center_north,
            self.width,
            self.length,
            self.orientation,
        ];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.width <= 0.0 || self.length <= 0.0 {
            return Err(GeometryError::DegenerateBox {
                width: self.width,
                length: self.length,
            });
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        [self.center_east, self.center_north]
    }

    pub fn area(&self) -> f64 {
        self.width * self.length
    }

    /// Unit vectors along the length and width axes.
    pub fn axes(&self) -> (Point, Point) {
        let (s, c) = self.orientation.sin_cos();
        ([c, s], [-s, c])
    }

    /// Same rectangle with `width <= length`, rotating the orientation by
    /// π/2 if the sides need to be swapped.
    pub fn length_major(self) -> Self {
        if self.width > self.length {
            Self {
                width: self.length,
                length: self.width,
                orientation: canonical_orientation(self.orientation + FRAC_PI_2),
                ..self
            }
        } else {
            self
        }
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Point; 4] {
        let (u, v) = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let c = self.center();
        let at = |a: f64, b: f64| [c[0] + a * u[0] + b * v[0], c[1] + a * u[1] + b * v[1]];
        [at(-hl, -hw), at(hl, -hw), at(hl, hw), at(-hl, hw)]
    }

    /// Coordinates of a world point in the box frame (along length, along width).
    pub fn to_local(&self, p: Point) -> Point {
        let (u, v) = self.axes();
        let d = [p[0] - self.center_east, p[1] - self.center_north];
        [d[0] * u[0] + d[1] * u[1], d[0] * v[0] + d[1] * v[1]]
    }

    pub fn contains(&self, p: Point) -> bool {
        self.contains_with_margin(p, 0.0)
    }

    /// Point-in-rectangle test with the rectangle grown by `margin` on every side.
    pub fn contains_with_margin(&self, p: Point, margin: f64) -> bool {
        let [a, b] = self.to_local(p);
        a.abs() <= self.length / 2.0 + margin && b.abs() <= self.width / 2.0 + margin
    }

    /// Radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.width.hypot(self.length)
    }

    fn sort_key(&self) -> [f64; 5] {
        [
            self.center_east,
            self.center_north,
            self.width,
            self.length,
            self.orientation,
        ]
    }
}

#[inline]
fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

/// Sutherland–Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection area of two rotated rectangles.
pub fn intersection_area(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let dc = (a.center_east - b.center_east).hypot(a.center_north - b.center_north);
    if dc > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    // Fixed operand order keeps the result exactly symmetric.
    let (s, c) = match a.sort_key().partial_cmp(&b.sort_key()) {
        Some(Ordering::Greater) => (b, a),
        _ => (a, b),
    };
    polygon_area(&clip_convex(&s.corners(), &c.corners())).max(0.0)
}

/// Jaccard index of two valid rotated rectangles. Callers must have
/// validated both boxes; see [`rotated_iou`] for the checked variant.
pub fn iou(a: &ObjectBox, b: &ObjectBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Jaccard index of two rotated rectangles via convex polygon clipping.
pub fn rotated_iou(a: &ObjectBox, b: &ObjectBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou(a, b))
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, without
/// collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Minimum-area enclosing rectangle of a point set, by rotating calipers
/// over the convex hull edges. The result has `width <= length`.
pub fn min_area_rect(points: &[Point]) -> Option<ObjectBox> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, ObjectBox)> = None;
    for i in 0..hull.len() {
        let (p, q) = (hull[i], hull[(i + 1) % hull.len()]);
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let norm = dx.hypot(dy);
        if norm == 0.0 {
            continue;
        }
        let u = [dx / norm, dy / norm];
        let v = [-u[1], u[0]];
        let (mut u_min, mut u_max, mut v_min, mut v_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for h in &hull {
            let a = h[0] * u[0] + h[1] * u[1];
            let b = h[0] * v[0] + h[1] * v[1];
            u_min = u_min.min(a);
            u_max = u_max.max(a);
            v_min = v_min.min(b);
            v_max = v_max.max(b);
        }
        let (du, dv) = (u_max - u_min, v_max - v_min);
        let area = du * dv;
        if best.as_ref().is_some_and(|(a, _)| area >= *a - 1e-12) {
            continue;
        }
        let (cu, cv) = ((u_min + u_max) / 2.0, (v_min + v_max) / 2.0);
        let center = [cu * u[0] + cv * v[0], cu * u[1] + cv * v[1]];
        let candidate = ObjectBox {
            center_east: center[0],
            center_north: center[1],
            width: dv,
            length: du,
            orientation: canonical_orientation(u[1].atan2(u[0])),
            score: None,
        }
        .length_major();
        best = Some((area, candidate));
    }
    best.map(|(_, b)| b).filter(|b| b.width > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(e: f64, n: f64, w: f64, l: f64, phi: f64) -> ObjectBox {
        ObjectBox::new(e, n, w, l, phi).unwrap()
    }

    #[test]
    fn wrapping_ranges() {
        assert_eq!(wrap_pi(PI), -PI);
        assert!((wrap_pi(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(canonical_orientation(FRAC_PI_2), -FRAC_PI_2);
        assert!((canonical_orientation(PI + 0.1) - 0.1).abs() < 1e-12);
        assert!(orientation_difference(0.1, 0.1 + PI).abs() < 1e-12);
    }

    #[test]
    fn corners_are_counter_clockwise() {
        let b = bx(1.0, 2.0, 2.0, 4.0, 0.3);
        assert!((polygon_area(&b.corners()) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = bx(0.0, 0.0, 1.8, 4.5, 0.7);
        assert!((rotated_iou(&b, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(5.0, 0.0, 1.0, 1.0, 0.4);
        assert_eq!(rotated_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn offset_squares_match_closed_form() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((rotated_iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let mut z = a;
        z.width = 0.0;
        assert!(matches!(
            rotated_iou(&a, &z),
            Err(GeometryError::DegenerateBox { .. })
        ));
    }

    #[test]
    fn square_rotated_forty_five_degrees() {
        // Octagon overlap of a unit square and its 45° rotation: 2(√2 − 1).
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn hull_drops_interior_and_collinear_points() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [1.0, 1.0]];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!((polygon_area(&hull) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn min_rect_of_rotated_rectangle_recovers_it() {
        let b = bx(3.0, -1.0, 1.0, 3.0, 0.5);
        let r = min_area_rect(&b.corners()).unwrap();
        assert!((r.width - 1.0).abs() < 1e-9);
        assert!((r.length - 3.0).abs() < 1e-9);
        assert!(orientation_difference(r.orientation, 0.5).abs() < 1e-9);
        assert!((r.center_east - 3.0).abs() < 1e-9 && (r.center_north + 1.0).abs() < 1e-9);
    }

    #[test]
    fn min_rect_needs_area() {
        assert!(min_area_rect(&[[0.0, 0.0], [1.0, 1.0]]).is_none());
        assert!(min_area_rect(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_none());
    }
}
