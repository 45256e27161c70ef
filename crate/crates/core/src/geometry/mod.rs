//! Planar rail cross-section geometry.
//!
//! All coordinates are millimetres, `x` horizontal and `y` vertical (up
//! positive). A [`Profile`] is an ordered polyline, optionally closed, tagged
//! with its [`ProfileKind`] and the side carrying the working edge.

mod index;
pub mod io;
pub(crate) mod wear;

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use index::SegmentIndex;
pub use wear::{compute_wear, horizontal_crossings, vertical_crossings, WearReport, SIDE_WEAR_DEPTH_MM};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }

    pub fn offset(self, d: Displacement) -> Point2 {
        Point2::new(self.x + d.dx, self.y + d.dy)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// A planar translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
}

impl Displacement {
    pub const ZERO: Displacement = Displacement { dx: 0.0, dy: 0.0 };

    pub const fn new(dx: f64, dy: f64) -> Self {
        Displacement { dx, dy }
    }

    /// Translation carrying `from` onto `to`.
    pub fn between(from: Point2, to: Point2) -> Self {
        Displacement::new(to.x - from.x, to.y - from.y)
    }

    pub fn is_finite(self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }

    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

impl Add for Displacement {
    type Output = Displacement;
    fn add(self, rhs: Displacement) -> Displacement {
        Displacement::new(self.dx + rhs.dx, self.dy + rhs.dy)
    }
}

impl Sub for Displacement {
    type Output = Displacement;
    fn sub(self, rhs: Displacement) -> Displacement {
        Displacement::new(self.dx - rhs.dx, self.dy - rhs.dy)
    }
}

impl Neg for Displacement {
    type Output = Displacement;
    fn neg(self) -> Displacement {
        Displacement::new(-self.dx, -self.dy)
    }
}

impl Mul<f64> for Displacement {
    type Output = Displacement;
    fn mul(self, rhs: f64) -> Displacement {
        Displacement::new(self.dx * rhs, self.dy * rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Typical,
    Switch,
    Frog,
    Combined,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 4] = [
        ProfileKind::Typical,
        ProfileKind::Switch,
        ProfileKind::Frog,
        ProfileKind::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileKind::Typical => "typical",
            ProfileKind::Switch => "switch",
            ProfileKind::Frog => "frog",
            ProfileKind::Combined => "combined",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "typical" => Ok(ProfileKind::Typical),
            "switch" => Ok(ProfileKind::Switch),
            "frog" => Ok(ProfileKind::Frog),
            "combined" => Ok(ProfileKind::Combined),
            other => Err(Error::Config(format!("unknown profile kind `{other}`"))),
        }
    }
}

/// Side of the profile (in its own frame) that carries the gauge face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkingEdge {
    #[default]
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    kind: ProfileKind,
    points: Vec<Point2>,
    closed: bool,
    working_edge: WorkingEdge,
}

impl Profile {
    /// Validates and builds a profile. Requires at least two finite points and
    /// no two consecutive identical points (including the closing pair when
    /// `closed`).
    pub fn new(kind: ProfileKind, points: Vec<Point2>, closed: bool) -> Result<Self> {
        Self::with_working_edge(kind, points, closed, WorkingEdge::Left)
    }

    pub fn with_working_edge(
        kind: ProfileKind,
        points: Vec<Point2>,
        closed: bool,
        working_edge: WorkingEdge,
    ) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidProfile(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidProfile(format!("point {i} is not finite")));
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::InvalidProfile(format!("points {i} and {} are identical", i + 1)));
        }
        if closed && points.first() == points.last() {
            return Err(Error::InvalidProfile(
                "closed profile repeats its first point at the end".into(),
            ));
        }
        Ok(Profile {
            kind,
            points,
            closed,
            working_edge,
        })
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn working_edge(&self) -> WorkingEdge {
        self.working_edge
    }

    pub fn set_working_edge(&mut self, edge: WorkingEdge) {
        self.working_edge = edge;
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    /// Same metadata, new point list. Re-validates.
    pub fn with_points(&self, points: Vec<Point2>, closed: bool) -> Result<Profile> {
        Profile::with_working_edge(self.kind, points, closed, self.working_edge)
    }

    pub fn segment_count(&self) -> usize {
        if self.closed {
            self.points.len()
        } else {
            self.points.len() - 1
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.points.len();
        (0..self.segment_count()).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| a.distance(b)).sum()
    }

    /// `(min, max)` corners of the axis-aligned bounding box.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Arc-length-weighted centroid: the integral of position along the
    /// polyline divided by its total length.
    pub fn centroid(&self) -> Result<Point2> {
        let mut total = 0.0;
        let mut acc = Point2::ORIGIN;
        for (a, b) in self.segments() {
            let len = a.distance(b);
            total += len;
            acc = acc + (a + b) * (0.5 * len);
        }
        if total <= 0.0 {
            return Err(Error::DegenerateProfile);
        }
        Ok(acc * (1.0 / total))
    }

    pub fn translate(&self, d: Displacement) -> Profile {
        Profile {
            kind: self.kind,
            points: self.points.iter().map(|p| p.offset(d)).collect(),
            closed: self.closed,
            working_edge: self.working_edge,
        }
    }

    /// Subdivides every segment into equal pieces no longer than `spacing`.
    /// Original vertices are kept.
    pub fn resample(&self, spacing: f64) -> Result<Profile> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::param("spacing", format!("must be positive, got {spacing}")));
        }
        let mut out = Vec::with_capacity(self.points.len());
        for (a, b) in self.segments() {
            let len = a.distance(b);
            let pieces = ((len / spacing).ceil() as usize).max(1);
            out.push(a);
            for k in 1..pieces {
                out.push(a.lerp(b, k as f64 / pieces as f64));
            }
        }
        if !self.closed {
            out.push(*self.points.last().expect("validated non-empty"));
        }
        self.with_points(out, self.closed)
    }

    /// Exact minimum distance from `p` to any segment, with the foot point.
    pub fn distance_to(&self, p: Point2) -> (f64, Point2) {
        let mut best = (f64::INFINITY, p);
        for (a, b) in self.segments() {
            let foot = closest_on_segment(p, a, b);
            let d2 = (p - foot).norm_sq();
            if d2 < best.0 {
                best = (d2, foot);
            }
        }
        (best.0.sqrt(), best.1)
    }

    /// Checks every pair of non-adjacent segments for intersection.
    pub fn is_simple(&self) -> bool {
        self.first_self_intersection().is_none()
    }

    /// Indices of the first pair of intersecting non-adjacent segments.
    pub fn first_self_intersection(&self) -> Option<(usize, usize)> {
        let segs: Vec<(Point2, Point2)> = self.segments().collect();
        let n = segs.len();
        // Cheap bounding-box sweep over x keeps this near n log n for rail shapes.
        let mut order: Vec<usize> = (0..n).collect();
        let min_x = |i: usize| segs[i].0.x.min(segs[i].1.x);
        order.sort_by(|&a, &b| min_x(a).total_cmp(&min_x(b)));
        for (oi, &i) in order.iter().enumerate() {
            let max_xi = segs[i].0.x.max(segs[i].1.x);
            for &j in &order[oi + 1..] {
                if min_x(j) > max_xi {
                    break;
                }
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                let adjacent = hi == lo + 1 || (self.closed && lo == 0 && hi == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(segs[lo].0, segs[lo].1, segs[hi].0, segs[hi].1) {
                    return Some((lo, hi));
                }
            }
        }
        None
    }
}

pub fn centroid(profile: &Profile) -> Result<Point2> {
    profile.centroid()
}

pub fn translate(profile: &Profile, d: Displacement) -> Profile {
    profile.translate(d)
}

pub fn resample(profile: &Profile, spacing: f64) -> Result<Profile> {
    profile.resample(spacing)
}

pub fn point_to_polyline_distance(p: Point2, profile: &Profile) -> (f64, Point2) {
    profile.distance_to(p)
}

pub fn closest_on_segment(p: Point2, a: Point2, b: Point2) -> Point2 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    a.lerp(b, t)
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching endpoints included.
pub fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Profile {
        Profile::new(
            ProfileKind::Typical,
            vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.0),
                Point2::new(1.0, 1.0),
                Point2::new(0.0, 1.0),
            ],
            true,
        )
        .unwrap()
    }

    fn segment(a: (f64, f64), b: (f64, f64)) -> Profile {
        Profile::new(
            ProfileKind::Typical,
            vec![Point2::new(a.0, a.1), Point2::new(b.0, b.1)],
            false,
        )
        .unwrap()
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let p = Point2::new(1.0, 1.0);
        assert!(Profile::new(ProfileKind::Typical, vec![p], false).is_err());
        assert!(Profile::new(ProfileKind::Typical, vec![p, p], false).is_err());
        assert!(Profile::new(ProfileKind::Typical, vec![p, Point2::new(f64::NAN, 0.0)], false).is_err());
        assert!(Profile::new(ProfileKind::Typical, vec![p, Point2::new(2.0, 2.0), p], true).is_err());
    }

    #[test]
    fn centroid_examples() {
        let c = square().centroid().unwrap();
        assert_eq!(c, Point2::new(0.5, 0.5));
        let c = segment((0.0, 0.0), (2.0, 0.0)).centroid().unwrap();
        assert_eq!(c, Point2::new(1.0, 0.0));
        let moved = square().translate(Displacement::new(3.0, -2.0)).centroid().unwrap();
        assert!((moved.x - 3.5).abs() < 1e-12 && (moved.y + 1.5).abs() < 1e-12);
    }

    #[test]
    fn centroid_weights_by_length_not_vertices() {
        // Dense vertices on one side must not pull the centroid.
        let mut pts: Vec<Point2> = (0..=10).map(|i| Point2::new(i as f64 * 0.1, 0.0)).collect();
        pts.push(Point2::new(1.0, 1.0));
        pts.push(Point2::new(0.0, 1.0));
        let dense = Profile::new(ProfileKind::Typical, pts, true).unwrap();
        let c = dense.centroid().unwrap();
        assert!((c.x - 0.5).abs() < 1e-12 && (c.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn translate_examples() {
        let p = square();
        assert_eq!(p.translate(Displacement::ZERO), p);
        let back = p
            .translate(Displacement::new(1.0, 2.0))
            .translate(Displacement::new(-1.0, -2.0));
        assert_eq!(back, p);
        let single = segment((5.0, 5.0), (6.0, 5.0)).translate(Displacement::new(3.0, -2.0));
        assert_eq!(single.points()[0], Point2::new(8.0, 3.0));
        assert!(!single.is_closed());
    }

    #[test]
    fn resample_examples() {
        let r = segment((0.0, 0.0), (1.0, 0.0)).resample(0.5).unwrap();
        let xs: Vec<f64> = r.points().iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);

        let p = square();
        assert_eq!(p.resample(10.0).unwrap(), p);

        // Length 2 at spacing 0.25: 8 pieces, 9 points.
        let r = segment((0.0, 0.0), (2.0, 0.0)).resample(0.25).unwrap();
        assert!(r.len() >= 9);

        assert!(p.resample(0.0).is_err());
        assert!(p.resample(-1.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let s = segment((0.0, 0.0), (1.0, 0.0));
        let (d, foot) = s.distance_to(Point2::new(0.5, 1.0));
        assert_eq!(d, 1.0);
        assert_eq!(foot, Point2::new(0.5, 0.0));
        assert_eq!(s.distance_to(Point2::new(0.25, 0.0)).0, 0.0);
        let (d, foot) = s.distance_to(Point2::new(2.0, 0.0));
        assert_eq!(d, 1.0);
        assert_eq!(foot, Point2::new(1.0, 0.0));
    }

    #[test]
    fn simplicity() {
        assert!(square().is_simple());
        let bowtie = Profile::new(
            ProfileKind::Typical,
            vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 1.0),
                Point2::new(1.0, 0.0),
                Point2::new(0.0, 1.0),
            ],
            true,
        )
        .unwrap();
        assert!(!bowtie.is_simple());
    }
}
