//! Parametric rail cross-sections built from line segments and tangent
//! circular arcs.
//!
//! The canonical frame puts the foot bottom on `y = 0` and the crown apex on
//! `x = 0, y = total_height`. Each profile is assembled from a right half
//! chain running from the foot centre to the apex and a left half chain
//! mirrored into `x < 0`; kinds differ only in how each half is shaped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Profile, ProfileKind, WorkingEdge};

/// Vertex spacing of the finished outline.
const OUTLINE_SPACING_MM: f64 = 1.0;
/// Maximum chord length used to discretize arcs.
const ARC_CHORD_MM: f64 = 0.5;

/// Dimensions of a designed rail section, millimetres.
///
/// Accepted ranges (checked by [`ShapeParams::validate`]):
/// head width 40..=90, head height 20..=50, web thickness 8..=30,
/// total height 60..=110, foot width up to twice the head width,
/// crown radius above the head width, corner radius below half the head width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub head_width: f64,
    pub head_height: f64,
    pub web_thickness: f64,
    pub total_height: f64,
    pub foot_width: f64,
    pub foot_edge_height: f64,
    pub foot_thickness: f64,
    pub crown_radius: f64,
    pub corner_radius: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            head_width: 64.0,
            head_height: 34.0,
            web_thickness: 15.0,
            total_height: 86.0,
            foot_width: 96.0,
            foot_edge_height: 8.0,
            foot_thickness: 20.0,
            crown_radius: 250.0,
            corner_radius: 12.0,
        }
    }
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        let check = |ok: bool, name: &'static str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::param(name, why.to_string()))
            }
        };
        let fields = [
            p.head_width,
            p.head_height,
            p.web_thickness,
            p.total_height,
            p.foot_width,
            p.foot_edge_height,
            p.foot_thickness,
            p.crown_radius,
            p.corner_radius,
        ];
        check(
            fields.iter().all(|v| v.is_finite() && *v > 0.0),
            "shape",
            "all dimensions must be positive",
        )?;
        check(
            (40.0..=90.0).contains(&p.head_width),
            "head_width",
            "outside 40..=90 mm",
        )?;
        check(
            (20.0..=50.0).contains(&p.head_height),
            "head_height",
            "outside 20..=50 mm",
        )?;
        check(
            (8.0..=30.0).contains(&p.web_thickness),
            "web_thickness",
            "outside 8..=30 mm",
        )?;
        check(
            (60.0..=110.0).contains(&p.total_height),
            "total_height",
            "outside 60..=110 mm",
        )?;
        check(
            p.web_thickness < 0.6 * p.head_width,
            "web_thickness",
            "must be below 0.6 x head width",
        )?;
        check(
            p.foot_width <= 2.0 * p.head_width,
            "foot_width",
            "must not exceed twice the head width",
        )?;
        check(
            p.foot_width > p.web_thickness + 4.0,
            "foot_width",
            "must exceed the web thickness",
        )?;
        check(
            p.foot_edge_height < p.foot_thickness,
            "foot_edge_height",
            "must be below the foot thickness",
        )?;
        check(
            p.foot_thickness + p.head_height + 10.0 <= p.total_height,
            "total_height",
            "leaves less than 10 mm of web",
        )?;
        check(
            p.crown_radius > p.head_width,
            "crown_radius",
            "must exceed the head width",
        )?;
        check(
            p.corner_radius < 0.5 * p.head_width - 2.0,
            "corner_radius",
            "must be below half the head width",
        )?;
        Ok(())
    }

    pub fn web_top_y(&self) -> f64 {
        self.total_height - self.head_height
    }

    /// Band of the web between foot and head, where a waist cut may fall.
    pub fn waist_range(&self) -> (f64, f64) {
        (self.foot_thickness + 2.0, self.web_top_y() - 2.0)
    }
}

/// Sampling ranges for [`ShapeParams`], each a closed `[lo, hi]` interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeRanges {
    pub head_width: [f64; 2],
    pub head_height: [f64; 2],
    pub web_thickness: [f64; 2],
    pub total_height: [f64; 2],
    pub foot_width: [f64; 2],
    pub foot_edge_height: [f64; 2],
    pub foot_thickness: [f64; 2],
    pub crown_radius: [f64; 2],
    pub corner_radius: [f64; 2],
}

impl Default for ShapeRanges {
    fn default() -> Self {
        ShapeRanges {
            head_width: [58.0, 70.0],
            head_height: [30.0, 38.0],
            web_thickness: [13.0, 18.0],
            total_height: [78.0, 90.0],
            foot_width: [84.0, 104.0],
            foot_edge_height: [6.0, 10.0],
            foot_thickness: [16.0, 22.0],
            crown_radius: [200.0, 300.0],
            corner_radius: [9.0, 14.0],
        }
    }
}

impl ShapeRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ShapeParams {
        let mut draw = |r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        ShapeParams {
            head_width: draw(self.head_width),
            head_height: draw(self.head_height),
            web_thickness: draw(self.web_thickness),
            total_height: draw(self.total_height),
            foot_width: draw(self.foot_width),
            foot_edge_height: draw(self.foot_edge_height),
            foot_thickness: draw(self.foot_thickness),
            crown_radius: draw(self.crown_radius),
            corner_radius: draw(self.corner_radius),
        }
    }
}

/// One side of the section, described in `x >= 0`.
struct HalfChain {
    /// Polyline corners after the foot centre, ending at the bottom of the
    /// head side.
    lower: Vec<Point2>,
    side_x: f64,
    corner_radius: f64,
}

impl HalfChain {
    /// Standard rail half: foot, sloped foot top, web, head underside, head side.
    fn standard(p: &ShapeParams, head_half: f64, foot_half: f64, web_half: f64, corner_radius: f64) -> Self {
        let rise = 0.15 * p.head_height;
        HalfChain {
            lower: vec![
                Point2::new(foot_half, 0.0),
                Point2::new(foot_half, p.foot_edge_height),
                Point2::new(web_half, p.foot_thickness),
                Point2::new(web_half, p.web_top_y()),
                Point2::new(head_half, p.web_top_y() + rise),
            ],
            side_x: head_half,
            corner_radius,
        }
    }

    /// Points from the foot centre `(0, 0)` to the apex `(0, top)`, both included.
    fn trace(&self, top: f64, crown_radius: f64) -> Result<Vec<Point2>> {
        let r = self.corner_radius;
        let big = crown_radius;
        let cx = self.side_x - r;
        if cx <= 0.0 {
            return Err(Error::param("corner_radius", "corner arc does not fit the head half"));
        }
        // Corner arc centre height such that it is internally tangent to the crown arc.
        let h = ((big - r).powi(2) - cx * cx).sqrt();
        let yc = top - big + h;
        let last = *self.lower.last().expect("lower chain is never empty");
        if !(yc > last.y + 1.0) {
            return Err(Error::param("head_height", "head side too short for the corner arc"));
        }
        let mut pts = Vec::with_capacity(256);
        pts.push(Point2::ORIGIN);
        pts.extend(self.lower.iter().copied());
        pts.push(Point2::new(self.side_x, yc));

        let crown_center = Point2::new(0.0, top - big);
        let corner_center = Point2::new(cx, yc);
        let tangent_angle = (corner_center.y - crown_center.y).atan2(corner_center.x - crown_center.x);
        push_arc(&mut pts, corner_center, r, 0.0, tangent_angle);
        push_arc(&mut pts, crown_center, big, tangent_angle, std::f64::consts::FRAC_PI_2);
        // Pin the apex exactly.
        *pts.last_mut().expect("arc pushed points") = Point2::new(0.0, top);
        Ok(pts)
    }
}

/// Appends points of an arc from `a0` to `a1` (radians), excluding the start.
fn push_arc(pts: &mut Vec<Point2>, center: Point2, radius: f64, a0: f64, a1: f64) {
    let sweep = a1 - a0;
    let steps = ((sweep.abs() * radius / ARC_CHORD_MM).ceil() as usize).max(1);
    for k in 1..=steps {
        let a = a0 + sweep * k as f64 / steps as f64;
        pts.push(Point2::new(center.x + radius * a.cos(), center.y + radius * a.sin()));
    }
}

fn jitter(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

/// Builds a closed designed outline for `kind`.
///
/// Typical sections are mirror-symmetric about `x = 0`. Switch sections have a
/// planed, narrower gauge-side head and a shortened gauge-side foot. Frog
/// sections carry a reduced nose on a widened body with a thicker web.
/// Combined sections add a lateral ledge beside the gauge-side web. The seed
/// only drives the kind-specific proportions; identical inputs give
/// identical point lists.
pub fn make_design_profile(kind: ProfileKind, params: &ShapeParams, seed: u64) -> Result<Profile> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params;
    let hw = p.head_width / 2.0;
    let fw = p.foot_width / 2.0;
    let wt = p.web_thickness / 2.0;
    let r = p.corner_radius;
    let rise = 0.15 * p.head_height;

    let (left, right) = match kind {
        ProfileKind::Typical => {
            let half = HalfChain::standard(p, hw, fw, wt, r);
            let other = HalfChain::standard(p, hw, fw, wt, r);
            (half, other)
        }
        ProfileKind::Switch => {
            let ratio = jitter(&mut rng, 0.5, 0.7);
            let head = (hw * ratio).max(wt + 3.0);
            let foot = fw * jitter(&mut rng, 0.6, 0.8);
            let corner = r.min(0.45 * head);
            let left = HalfChain::standard(p, head, foot.max(wt + 2.0), wt, corner);
            (left, HalfChain::standard(p, hw, fw, wt, r))
        }
        ProfileKind::Frog => {
            let body = hw * jitter(&mut rng, 1.08, 1.18);
            let nose = hw * jitter(&mut rng, 0.6, 0.75);
            let web = (wt * 1.5).min(0.8 * nose);
            let shoulder = p.total_height - jitter(&mut rng, 19.0, 22.0);
            let corner = r.min(0.45 * nose);
            let frog_half = |body: f64, nose: f64| HalfChain {
                lower: vec![
                    Point2::new(fw, 0.0),
                    Point2::new(fw, p.foot_edge_height),
                    Point2::new(web, p.foot_thickness),
                    Point2::new(web, p.web_top_y()),
                    Point2::new(body, p.web_top_y() + rise),
                    Point2::new(body, shoulder),
                    Point2::new(nose, shoulder + 3.0),
                ],
                side_x: nose,
                corner_radius: corner,
            };
            (frog_half(body, nose), frog_half(body, nose))
        }
        ProfileKind::Combined => {
            let ledge = hw * jitter(&mut rng, 1.25, 1.45);
            let under = p.web_top_y() - jitter(&mut rng, 8.0, 12.0);
            let ledge_top = p.web_top_y() + jitter(&mut rng, 3.0, 5.0);
            let left = HalfChain {
                lower: vec![
                    Point2::new(fw, 0.0),
                    Point2::new(fw, p.foot_edge_height),
                    Point2::new(wt, p.foot_thickness),
                    Point2::new(wt, under),
                    Point2::new(ledge, under + 2.0),
                    Point2::new(ledge, ledge_top),
                    Point2::new(hw, ledge_top + 2.0),
                ],
                side_x: hw,
                corner_radius: r,
            };
            (left, HalfChain::standard(p, hw, fw, wt, r))
        }
    };

    let right_pts = right.trace(p.total_height, p.crown_radius)?;
    let left_pts = left.trace(p.total_height, p.crown_radius)?;

    // Counter-clockwise: foot centre, right half up to the apex, mirrored left
    // half back down. Foot centre and apex appear once.
    let mut pts = right_pts;
    pts.extend(
        left_pts[1..left_pts.len() - 1]
            .iter()
            .rev()
            .map(|q| Point2::new(-q.x, q.y)),
    );
    let outline = Profile::with_working_edge(kind, pts, true, WorkingEdge::Left)?;
    let outline = outline.resample(OUTLINE_SPACING_MM)?;
    if let Some((i, j)) = outline.first_self_intersection() {
        return Err(Error::SelfIntersection(format!(
            "segments {i} and {j} of {kind} outline"
        )));
    }
    Ok(outline)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typical_is_symmetric() {
        let p = make_design_profile(ProfileKind::Typical, &ShapeParams::default(), 1).unwrap();
        let c = p.centroid().unwrap();
        assert!(c.x.abs() < 1e-6, "centroid x = {}", c.x);
    }

    #[test]
    fn every_kind_is_simple_and_bounded() {
        let params = ShapeParams::default();
        for kind in ProfileKind::ALL {
            for seed in 0..20 {
                let p = make_design_profile(kind, &params, seed).unwrap();
                assert!(p.is_closed());
                assert!(p.is_simple());
                let (lo, hi) = p.bounds();
                assert!(
                    lo.x >= -params.head_width && hi.x <= params.head_width,
                    "{kind} {lo:?} {hi:?}"
                );
                assert!(
                    lo.y >= 0.0 && hi.y <= params.total_height + 1e-12,
                    "{kind} {lo:?} {hi:?}"
                );
                assert_eq!(hi.y, params.total_height);
            }
        }
    }

    #[test]
    fn deterministic() {
        let params = ShapeParams::default();
        for kind in ProfileKind::ALL {
            let a = make_design_profile(kind, &params, 42).unwrap();
            let b = make_design_profile(kind, &params, 42).unwrap();
            assert_eq!(a.points(), b.points());
        }
    }

    #[test]
    fn sampled_params_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranges = ShapeRanges::default();
        for i in 0..500 {
            let params = ranges.sample(&mut rng);
            for kind in ProfileKind::ALL {
                make_design_profile(kind, &params, i).unwrap();
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = ShapeParams::default();
        p.corner_radius = 40.0;
        assert!(make_design_profile(ProfileKind::Typical, &p, 0).is_err());
        let mut p = ShapeParams::default();
        p.foot_width = 200.0;
        assert!(make_design_profile(ProfileKind::Typical, &p, 0).is_err());
    }
}
