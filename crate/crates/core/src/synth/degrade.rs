//! Field degradations of a designed outline: wear, partial scans below the
//! waist, and measurement-hardware noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{horizontal_crossings, Point2, Profile, WorkingEdge, SIDE_WEAR_DEPTH_MM};

/// Half-width of the flat top of each wear bump.
const BUMP_PLATEAU_MM: f64 = 2.0;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// 1 on `|u| <= plateau`, cosine-squared falloff to 0 over `falloff`.
fn bump(u: f64, plateau: f64, falloff: f64) -> f64 {
    let u = u.abs();
    if u <= plateau {
        1.0
    } else if u >= plateau + falloff {
        0.0
    } else {
        let c = (std::f64::consts::FRAC_PI_2 * (u - plateau) / falloff).cos();
        c * c
    }
}

/// Lowers the crown and recesses the working edge with smooth bumps.
///
/// The crown bump peaks at `vertical` on the vertical line through the apex;
/// the side bump peaks at `side` on the side-wear measurement line. Both are
/// monotone deformations of the plane (one moves only `y`, the other only
/// `x`), so a simple outline stays simple.
pub fn apply_wear(profile: &Profile, vertical: f64, side: f64, seed: u64) -> Result<Profile> {
    if !(vertical >= 0.0) || !vertical.is_finite() {
        return Err(Error::param("vertical", format!("must be >= 0, got {vertical}")));
    }
    if !(side >= 0.0) || !side.is_finite() {
        return Err(Error::param("side", format!("must be >= 0, got {side}")));
    }
    if vertical == 0.0 && side == 0.0 {
        return Ok(profile.clone());
    }

    let apex = crate::geometry::wear::apex(profile);
    let side_y = apex.y - SIDE_WEAR_DEPTH_MM;
    let xs = horizontal_crossings(profile, side_y);
    let (Some(x_left), Some(x_right)) = (xs.iter().copied().reduce(f64::min), xs.iter().copied().reduce(f64::max))
    else {
        return Err(Error::InvalidProfile(
            "no head material at the side-wear measurement height".into(),
        ));
    };
    let head_width = x_right - x_left;
    let edge_x = match profile.working_edge() {
        WorkingEdge::Left => x_left,
        WorkingEdge::Right => x_right,
    };
    let edge_reach = (apex.x - edge_x).abs();

    if vertical >= 0.5 * SIDE_WEAR_DEPTH_MM {
        return Err(Error::param(
            "vertical",
            format!(
                "{vertical} mm exceeds the crown region ({} mm)",
                0.5 * SIDE_WEAR_DEPTH_MM
            ),
        ));
    }
    if side > 0.0 && (edge_reach <= 0.0 || side >= 0.25 * head_width || side >= 0.5 * edge_reach) {
        return Err(Error::param(
            "side",
            format!("{side} mm exceeds the head (width {head_width:.2} mm)"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crown_falloff = (0.5 * head_width * rng.random_range(0.55..0.75) - BUMP_PLATEAU_MM).max(1.0);
    let side_falloff = rng.random_range(6.0..10.0);

    let pts: Vec<Point2> = profile
        .points()
        .iter()
        .map(|&q| {
            let mut q = q;
            if vertical > 0.0 {
                let b = bump(q.x - apex.x, BUMP_PLATEAU_MM, crown_falloff);
                let g = smoothstep((q.y - side_y) / (apex.y - side_y));
                q.y -= vertical * b * g;
            }
            if side > 0.0 {
                let b = bump(q.y - side_y, BUMP_PLATEAU_MM, side_falloff);
                if b > 0.0 {
                    let reach = match profile.working_edge() {
                        WorkingEdge::Left => (q.x - edge_x) / (apex.x - edge_x),
                        WorkingEdge::Right => (edge_x - q.x) / (edge_x - apex.x),
                    };
                    let h = 1.0 - smoothstep(reach);
                    let dir = match profile.working_edge() {
                        WorkingEdge::Left => 1.0,
                        WorkingEdge::Right => -1.0,
                    };
                    q.x += dir * side * b * h;
                }
            }
            q
        })
        .collect();
    let worn = profile.with_points(pts, profile.is_closed())?;
    if let Some((i, j)) = worn.first_self_intersection() {
        return Err(Error::SelfIntersection(format!(
            "wear ({vertical}, {side}) folds segments {i} and {j}"
        )));
    }
    Ok(worn)
}

/// Keeps only the points at or above `waist_y`, as an open polyline.
///
/// When the cut leaves several disconnected runs the longest run (by point
/// count, earliest on ties) is kept, so no spurious chord is introduced.
pub fn truncate_below_waist(profile: &Profile, waist_y: f64) -> Result<Profile> {
    let pts = profile.points();
    let n = pts.len();
    let keep: Vec<bool> = pts.iter().map(|p| p.y >= waist_y).collect();
    if keep.iter().all(|&k| k) {
        return profile.with_points(pts.to_vec(), false);
    }
    let Some(first_drop) = keep.iter().position(|&k| !k) else {
        unreachable!("some point is dropped");
    };

    // Walk from the first dropped point so a run that wraps past the end of a
    // closed outline is seen as one run.
    let order: Vec<usize> = if profile.is_closed() {
        (0..n).map(|k| (first_drop + k) % n).collect()
    } else {
        (0..n).collect()
    };
    let mut best: Option<(usize, usize)> = None; // (start in `order`, length)
    let mut consider = |s: usize, len: usize| {
        if best.is_none_or(|(_, l)| len > l) {
            best = Some((s, len));
        }
    };
    let mut run_start = None;
    for (k, &i) in order.iter().enumerate() {
        if keep[i] {
            run_start.get_or_insert(k);
        } else if let Some(s) = run_start.take() {
            consider(s, k - s);
        }
    }
    if let Some(s) = run_start {
        consider(s, n - s);
    }
    let Some((s, len)) = best.filter(|&(_, len)| len >= 2) else {
        return Err(Error::InvalidProfile(format!(
            "truncation at y = {waist_y} leaves fewer than 2 points"
        )));
    };
    let out = order[s..s + len].iter().map(|&i| pts[i]).collect();
    profile.with_points(out, false)
}

/// Gaussian jitter of every coordinate plus sparse gross outliers.
///
/// Each point consumes draws in a fixed order (x noise, y noise, outlier
/// coin, then radius and angle only for outliers), so output depends only on
/// the seed and the point count.
pub fn add_sensor_noise(
    profile: &Profile,
    sigma: f64,
    outlier_prob: f64,
    outlier_magnitude: f64,
    seed: u64,
) -> Result<Profile> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be >= 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&outlier_prob) {
        return Err(Error::param(
            "outlier_prob",
            format!("must lie in [0, 1], got {outlier_prob}"),
        ));
    }
    if !(outlier_magnitude >= 0.0) || !outlier_magnitude.is_finite() {
        return Err(Error::param(
            "outlier_magnitude",
            format!("must be >= 0, got {outlier_magnitude}"),
        ));
    }
    if sigma == 0.0 && (outlier_prob == 0.0 || outlier_magnitude == 0.0) {
        return Ok(profile.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out: Vec<Point2> = Vec::with_capacity(profile.len());
    for &p in profile.points() {
        let mut q = Point2::new(p.x + normal.sample(&mut rng), p.y + normal.sample(&mut rng));
        if rng.random::<f64>() < outlier_prob {
            let r = rng.random_range(0.0..=outlier_magnitude);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            q.x += r * theta.cos();
            q.y += r * theta.sin();
        }
        if out.last() != Some(&q) {
            out.push(q);
        }
    }
    if profile.is_closed() && out.len() > 2 && out.first() == out.last() {
        out.pop();
    }
    profile.with_points(out, profile.is_closed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_wear, ProfileKind};
    use crate::synth::shapes::{make_design_profile, ShapeParams};

    fn rail(kind: ProfileKind) -> Profile {
        make_design_profile(kind, &ShapeParams::default(), 5).unwrap()
    }

    #[test]
    fn zero_wear_is_identity() {
        let p = rail(ProfileKind::Typical);
        assert_eq!(apply_wear(&p, 0.0, 0.0, 9).unwrap(), p);
    }

    #[test]
    fn wear_closes_the_loop_with_compute_wear() {
        for kind in ProfileKind::ALL {
            let p = rail(kind);
            for seed in 0..10 {
                let v = compute_wear(&p, &apply_wear(&p, 2.0, 0.0, seed).unwrap());
                assert!((v.vertical_wear.unwrap() - 2.0).abs() < 0.05, "{kind}: {v:?}");
                let s = compute_wear(&p, &apply_wear(&p, 0.0, 1.5, seed).unwrap());
                assert!((s.side_wear.unwrap() - 1.5).abs() < 0.05, "{kind}: {s:?}");
                let both = compute_wear(&p, &apply_wear(&p, 2.0, 1.5, seed).unwrap());
                assert!((both.vertical_wear.unwrap() - 2.0).abs() < 0.05, "{kind}: {both:?}");
                assert!((both.side_wear.unwrap() - 1.5).abs() < 0.05, "{kind}: {both:?}");
            }
        }
    }

    #[test]
    fn heavy_wear_is_rejected() {
        let p = rail(ProfileKind::Typical);
        assert!(apply_wear(&p, 20.0, 0.0, 1).is_err());
        assert!(apply_wear(&p, 0.0, 30.0, 1).is_err());
        assert!(apply_wear(&p, -1.0, 0.0, 1).is_err());
    }

    #[test]
    fn truncation_examples() {
        let p = rail(ProfileKind::Typical);
        let all = truncate_below_waist(&p, -5.0).unwrap();
        assert_eq!(all.points(), p.points());
        assert!(!all.is_closed());

        let (lo, hi) = p.bounds();
        let mid = 0.5 * (lo.y + hi.y);
        let cut = truncate_below_waist(&p, mid).unwrap();
        assert!(!cut.is_closed());
        assert!(cut.points().iter().all(|q| q.y >= mid));
        assert!(cut.length() < p.length());
        // A single contiguous chain over the head: no chord longer than the
        // outline's vertex spacing.
        assert!(cut.segments().all(|(a, b)| a.distance(b) <= 1.0 + 1e-9));

        assert!(truncate_below_waist(&p, hi.y + 1.0).is_err());
    }

    #[test]
    fn truncation_of_open_polyline() {
        let pts = vec![
            Point2::new(0.0, 5.0),
            Point2::new(1.0, 5.0),
            Point2::new(2.0, 0.0),
            Point2::new(3.0, 5.0),
            Point2::new(4.0, 5.0),
            Point2::new(5.0, 6.0),
        ];
        let p = Profile::new(ProfileKind::Typical, pts, false).unwrap();
        let cut = truncate_below_waist(&p, 1.0).unwrap();
        assert_eq!(cut.len(), 3);
        assert_eq!(cut.points()[0], Point2::new(3.0, 5.0));
    }

    #[test]
    fn noise_identity_and_determinism() {
        let p = rail(ProfileKind::Switch);
        assert_eq!(add_sensor_noise(&p, 0.0, 0.0, 2.0, 1).unwrap(), p);
        let a = add_sensor_noise(&p, 0.05, 0.02, 2.0, 77).unwrap();
        let b = add_sensor_noise(&p, 0.05, 0.02, 2.0, 77).unwrap();
        assert_eq!(a, b);
        let c = add_sensor_noise(&p, 0.05, 0.02, 2.0, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_statistics() {
        // 10^4 points, sigma 0.05: per-coordinate sample std in [0.045, 0.055].
        let pts: Vec<Point2> = (0..10_000).map(|i| Point2::new(i as f64, 0.0)).collect();
        let p = Profile::new(ProfileKind::Typical, pts.clone(), false).unwrap();
        let noisy = add_sensor_noise(&p, 0.05, 0.0, 0.0, 2024).unwrap();
        let (ex, ey): (Vec<f64>, Vec<f64>) = noisy
            .points()
            .iter()
            .zip(&pts)
            .map(|(q, p)| (q.x - p.x, q.y - p.y))
            .unzip();
        for e in [ex, ey] {
            let mean = e.iter().sum::<f64>() / e.len() as f64;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
            let std = var.sqrt();
            assert!((0.045..=0.055).contains(&std), "std {std}");
        }
    }

    #[test]
    fn outliers_are_bounded() {
        let pts: Vec<Point2> = (0..2000).map(|i| Point2::new(i as f64, 0.0)).collect();
        let p = Profile::new(ProfileKind::Typical, pts.clone(), false).unwrap();
        let noisy = add_sensor_noise(&p, 0.0, 0.5, 2.0, 4).unwrap();
        let moved = noisy
            .points()
            .iter()
            .zip(&pts)
            .filter(|(q, p)| q.distance(**p) > 0.0)
            .inspect(|(q, p)| assert!(q.distance(**p) <= 2.0 + 1e-12))
            .count();
        assert!((800..1200).contains(&moved), "{moved}");
    }
}
