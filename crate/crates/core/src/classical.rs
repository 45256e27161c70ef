//! Translation-only classical matchers: trimmed ICP and RANSAC.
//!
//! Both return the translation to apply to the measured profile so that it
//! lies on the designed profile. Correspondences are point-to-segment against
//! the designed polyline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Displacement, Point2, Profile, SegmentIndex};

/// Grid cell used for the designed-polyline index, mm.
pub const INDEX_CELL_MM: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once a translation update is shorter than this, mm.
    pub convergence_eps: f64,
    /// Fraction of measured points (closest first) used in each update.
    pub trim_ratio: f64,
    /// Correspondences farther than this are ignored, mm.
    pub max_corr_dist: f64,
    pub resample_spacing: f64,
    /// Also start from the top-centre alignment of the bounding boxes and
    /// keep whichever run ends with the lower objective.
    pub multi_start: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 100,
            convergence_eps: 1e-6,
            trim_ratio: 0.8,
            max_corr_dist: 10.0,
            resample_spacing: 0.5,
            multi_start: true,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::param("convergence_eps", "must be positive"));
        }
        if !(self.trim_ratio > 0.0 && self.trim_ratio <= 1.0) {
            return Err(Error::param("trim_ratio", "must lie in (0, 1]"));
        }
        if !(self.max_corr_dist > 0.0) {
            return Err(Error::param("max_corr_dist", "must be positive"));
        }
        if !(self.resample_spacing > 0.0) {
            return Err(Error::param("resample_spacing", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
    /// Spacing of the designed points hypotheses are drawn from, mm.
    pub design_spacing: f64,
    /// Designed candidates must match the measured point's tangent within
    /// this angle, degrees. `None` draws designed points uniformly.
    pub tangent_tolerance_deg: Option<f64>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 500,
            inlier_threshold: 0.3,
            min_inlier_fraction: 0.3,
            seed: 0,
            design_spacing: 0.5,
            tangent_tolerance_deg: Some(10.0),
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::param("inlier_threshold", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return Err(Error::param("min_inlier_fraction", "must lie in [0, 1]"));
        }
        if !(self.design_spacing > 0.0) {
            return Err(Error::param("design_spacing", "must be positive"));
        }
        Ok(())
    }
}

/// Output shared by every matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Translation to apply to the measured profile, mm.
    pub displacement: Displacement,
    pub residual_rms: f64,
    pub iterations_used: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inlier_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MatchResult {
    pub fn prediction(displacement: Displacement) -> Self {
        MatchResult {
            displacement,
            residual_rms: 0.0,
            iterations_used: 0,
            converged: true,
            inlier_fraction: None,
            error: None,
        }
    }

    fn failed(displacement: Displacement, iterations_used: usize, error: String) -> Self {
        MatchResult {
            displacement,
            residual_rms: 0.0,
            iterations_used,
            converged: false,
            inlier_fraction: None,
            error: Some(error),
        }
    }
}

/// Trimmed squared-distance cost over a fixed measured point set.
struct TrimmedCost<'a> {
    index: &'a SegmentIndex,
    max_corr_dist: f64,
    keep: usize,
}

impl<'a> TrimmedCost<'a> {
    fn new(index: &'a SegmentIndex, n_points: usize, trim_ratio: f64, max_corr_dist: f64) -> Self {
        let keep = ((trim_ratio * n_points as f64).ceil() as usize).clamp(1, n_points.max(1));
        TrimmedCost {
            index,
            max_corr_dist,
            keep,
        }
    }

    /// `(capped squared distance, residual to the foot or None when out of range)`
    /// for each point shifted by `d`.
    fn correspond(&self, points: &[Point2], d: Displacement) -> Vec<(f64, Option<Point2>)> {
        let cap = self.max_corr_dist * self.max_corr_dist;
        points
            .iter()
            .map(|&p| {
                let q = p.offset(d);
                match self.index.nearest_within(q, self.max_corr_dist) {
                    Some((dist, foot)) => (dist * dist, Some(foot - q)),
                    None => (cap, None),
                }
            })
            .collect()
    }

    /// Indices of the `keep` smallest costs; ties broken by index.
    fn trimmed(&self, corr: &[(f64, Option<Point2>)]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..corr.len()).collect();
        if self.keep < order.len() {
            order.select_nth_unstable_by(self.keep - 1, |&a, &b| corr[a].0.total_cmp(&corr[b].0).then(a.cmp(&b)));
            order.truncate(self.keep);
        }
        order
    }

    fn value(&self, corr: &[(f64, Option<Point2>)]) -> Result<f64> {
        if corr.iter().all(|c| c.1.is_none()) {
            return Err(Error::NoCorrespondences {
                max_dist: self.max_corr_dist,
            });
        }
        let kept = self.trimmed(corr);
        Ok(kept.iter().map(|&i| corr[i].0).sum::<f64>() / kept.len() as f64)
    }
}

/// Mean of the `ceil(trim_ratio * n)` smallest squared point-to-polyline
/// distances from the vertices of `measured` shifted by `d` to `designed`.
/// Distances are capped at `max_corr_dist`; with no vertex in range this is
/// an error.
pub fn objective(
    measured: &Profile,
    designed: &Profile,
    d: Displacement,
    trim_ratio: f64,
    max_corr_dist: f64,
) -> Result<f64> {
    if !(trim_ratio > 0.0 && trim_ratio <= 1.0) {
        return Err(Error::param("trim_ratio", "must lie in (0, 1]"));
    }
    let index = SegmentIndex::new(designed, INDEX_CELL_MM);
    let cost = TrimmedCost::new(&index, measured.len(), trim_ratio, max_corr_dist);
    cost.value(&cost.correspond(measured.points(), d))
}

/// Translations visited by one ICP run, first entry the initial guess.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpTrace {
    pub result: MatchResult,
    pub translations: Vec<Displacement>,
    pub objectives: Vec<f64>,
}

fn run_icp(points: &[Point2], cost: &TrimmedCost<'_>, start: Displacement, config: &IcpConfig) -> IcpTrace {
    let mut d = start;
    let mut translations = vec![d];
    let mut objectives = Vec::new();
    for iter in 1..=config.max_iterations {
        let corr = cost.correspond(points, d);
        let value = match cost.value(&corr) {
            Ok(v) => v,
            Err(e) => {
                return IcpTrace {
                    result: MatchResult::failed(d, iter - 1, e.to_string()),
                    translations,
                    objectives,
                }
            }
        };
        objectives.push(value);
        let mut sum = Point2::ORIGIN;
        let mut n = 0usize;
        for i in cost.trimmed(&corr) {
            if let Some(r) = corr[i].1 {
                sum = sum + r;
                n += 1;
            }
        }
        let step = sum * (1.0 / n as f64);
        d = d + Displacement::new(step.x, step.y);
        translations.push(d);
        if step.norm() < config.convergence_eps {
            let final_value = cost.value(&cost.correspond(points, d)).unwrap_or(value);
            objectives.push(final_value);
            return IcpTrace {
                result: MatchResult {
                    displacement: d,
                    residual_rms: final_value.sqrt(),
                    iterations_used: iter,
                    converged: true,
                    inlier_fraction: None,
                    error: None,
                },
                translations,
                objectives,
            };
        }
    }
    let final_value = cost.value(&cost.correspond(points, d));
    if let Ok(v) = final_value {
        objectives.push(v);
    }
    IcpTrace {
        result: MatchResult {
            displacement: d,
            residual_rms: final_value.map(f64::sqrt).unwrap_or(f64::NAN),
            iterations_used: config.max_iterations,
            converged: false,
            inlier_fraction: None,
            error: None,
        },
        translations,
        objectives,
    }
}

/// Starting translations: centroid difference first, then (with
/// `multi_start`) alignment of the bounding-box top centres.
pub fn icp_starts(measured: &Profile, designed: &Profile, config: &IcpConfig) -> Result<Vec<Displacement>> {
    let mut starts = vec![Displacement::between(measured.centroid()?, designed.centroid()?)];
    if config.multi_start {
        let top_centre = |p: &Profile| {
            let (lo, hi) = p.bounds();
            Point2::new(0.5 * (lo.x + hi.x), hi.y)
        };
        starts.push(Displacement::between(top_centre(measured), top_centre(designed)));
    }
    Ok(starts)
}

/// Full ICP trace from each start; the winner is the run with the lowest
/// final objective (earliest start on ties).
pub fn icp_trace(measured: &Profile, designed: &Profile, config: &IcpConfig) -> Result<IcpTrace> {
    config.validate()?;
    let moving = measured.resample(config.resample_spacing)?;
    let index = SegmentIndex::new(designed, INDEX_CELL_MM);
    let cost = TrimmedCost::new(&index, moving.len(), config.trim_ratio, config.max_corr_dist);
    let mut best: Option<IcpTrace> = None;
    for start in icp_starts(measured, designed, config)? {
        let trace = run_icp(moving.points(), &cost, start, config);
        let score = |t: &IcpTrace| {
            if t.result.error.is_some() {
                f64::INFINITY
            } else {
                t.objectives.last().copied().unwrap_or(f64::INFINITY)
            }
        };
        if best.as_ref().is_none_or(|b| score(&trace) < score(b)) {
            best = Some(trace);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Translation-only trimmed ICP.
///
/// Each iteration corresponds every resampled measured point to its closest
/// point on the designed polyline, keeps the `trim_ratio` closest, and moves
/// by their mean residual vector. The capped trimmed objective never
/// increases from one iteration to the next.
pub fn icp_translate(measured: &Profile, designed: &Profile, config: &IcpConfig) -> Result<MatchResult> {
    Ok(icp_trace(measured, designed, config)?.result)
}

/// Undirected tangent angle at each vertex, radians in `[0, pi)`.
fn tangent_angles(points: &[Point2], closed: bool) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let prev = if i > 0 {
                points[i - 1]
            } else if closed {
                points[n - 1]
            } else {
                points[i]
            };
            let next = if i + 1 < n {
                points[i + 1]
            } else if closed {
                points[0]
            } else {
                points[i]
            };
            let t = next - prev;
            t.y.atan2(t.x).rem_euclid(std::f64::consts::PI)
        })
        .collect()
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % std::f64::consts::PI;
    d.min(std::f64::consts::PI - d)
}

/// Number of measured points within `threshold` of the designed polyline
/// after shifting by `d`.
pub fn count_inliers(measured: &[Point2], index: &SegmentIndex, d: Displacement, threshold: f64) -> usize {
    measured
        .iter()
        .filter(|&&p| {
            index
                .nearest_within(p.offset(d), threshold)
                .is_some_and(|(dist, _)| dist < threshold)
        })
        .count()
}

/// Translation RANSAC over single point-pair hypotheses.
///
/// Each iteration draws a measured vertex and a designed point (from the
/// designed polyline resampled at `design_spacing`, optionally restricted to
/// matching tangent direction) and scores the translation between them by
/// its inlier count, starting from the centroid-difference translation. The
/// best hypothesis is refined once by the mean residual over its inliers,
/// unless that loses inliers.
pub fn ransac_translate(measured: &Profile, designed: &Profile, config: &RansacConfig) -> Result<MatchResult> {
    config.validate()?;
    let index = SegmentIndex::new(designed, INDEX_CELL_MM);
    let dense = designed.resample(config.design_spacing)?;
    let m_pts = measured.points();
    let d_pts = dense.points();
    let m_angles = tangent_angles(m_pts, measured.is_closed());
    let d_angles = tangent_angles(d_pts, dense.is_closed());
    let tolerance = config.tangent_tolerance_deg.map(f64::to_radians);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // The centroid-difference translation is the baseline hypothesis.
    let mut best = Displacement::between(measured.centroid()?, designed.centroid()?);
    let mut best_count = count_inliers(m_pts, &index, best, config.inlier_threshold);
    let mut candidates: Vec<usize> = Vec::with_capacity(d_pts.len());
    for _ in 0..config.iterations {
        let mi = rng.random_range(0..m_pts.len());
        let di = match tolerance {
            Some(tol) => {
                candidates.clear();
                candidates.extend((0..d_pts.len()).filter(|&j| angle_gap(m_angles[mi], d_angles[j]) <= tol));
                if candidates.is_empty() {
                    rng.random_range(0..d_pts.len())
                } else {
                    candidates[rng.random_range(0..candidates.len())]
                }
            }
            None => rng.random_range(0..d_pts.len()),
        };
        let hypothesis = Displacement::between(m_pts[mi], d_pts[di]);
        let count = count_inliers(m_pts, &index, hypothesis, config.inlier_threshold);
        if count > best_count {
            best_count = count;
            best = hypothesis;
        }
    }

    // One least-squares refinement over the inliers of the best hypothesis.
    let mut sum = Point2::ORIGIN;
    let mut n = 0usize;
    for &p in m_pts {
        let q = p.offset(best);
        if let Some((dist, foot)) = index.nearest_within(q, config.inlier_threshold) {
            if dist < config.inlier_threshold {
                sum = sum + (foot - q);
                n += 1;
            }
        }
    }
    let mut refined = best;
    if n > 0 {
        let candidate = best + Displacement::new(sum.x / n as f64, sum.y / n as f64);
        if count_inliers(m_pts, &index, candidate, config.inlier_threshold) >= best_count {
            refined = candidate;
        }
    }

    let mut sq = 0.0;
    let mut inliers = 0usize;
    for &p in m_pts {
        let q = p.offset(refined);
        if let Some((dist, _)) = index.nearest_within(q, config.inlier_threshold) {
            if dist < config.inlier_threshold {
                sq += dist * dist;
                inliers += 1;
            }
        }
    }
    let fraction = inliers as f64 / m_pts.len() as f64;
    let converged = fraction >= config.min_inlier_fraction;
    Ok(MatchResult {
        displacement: refined,
        residual_rms: if inliers > 0 {
            (sq / inliers as f64).sqrt()
        } else {
            f64::NAN
        },
        iterations_used: config.iterations,
        converged,
        inlier_fraction: Some(fraction),
        error: (!converged).then(|| {
            format!(
                "inlier fraction {fraction:.3} below the required {:.3}",
                config.min_inlier_fraction
            )
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ProfileKind;
    use crate::synth::{make_design_profile, ShapeParams};

    fn rail() -> Profile {
        make_design_profile(ProfileKind::Typical, &ShapeParams::default(), 0).unwrap()
    }

    #[test]
    fn objective_examples() {
        let p = rail();
        assert_eq!(objective(&p, &p, Displacement::ZERO, 0.8, 10.0).unwrap(), 0.0);

        let single = Profile::new(
            ProfileKind::Typical,
            vec![Point2::new(0.0, 2.0), Point2::new(1.0, 2.0)],
            false,
        )
        .unwrap();
        let line = Profile::new(
            ProfileKind::Typical,
            vec![Point2::new(-5.0, 0.0), Point2::new(5.0, 0.0)],
            false,
        )
        .unwrap();
        assert_eq!(objective(&single, &line, Displacement::ZERO, 1.0, 10.0).unwrap(), 4.0);

        let m = p.translate(Displacement::new(1.0, -0.5));
        let a = Displacement::new(0.3, 0.7);
        let d = Displacement::new(-0.2, 0.1);
        let lhs = objective(&m, &p, d, 0.8, 10.0).unwrap();
        let rhs = objective(&m.translate(a), &p, d - a, 0.8, 10.0).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);

        let far = p.translate(Displacement::new(500.0, 0.0));
        assert!(objective(&far, &p, Displacement::ZERO, 0.8, 10.0).is_err());
    }

    #[test]
    fn icp_recovers_pure_translation() {
        let p = rail();
        let m = p.translate(Displacement::new(-3.0, 2.0));
        let r = icp_translate(&m, &p, &IcpConfig::default()).unwrap();
        assert!(r.converged);
        assert!((r.displacement.dx - 3.0).abs() < 1e-3 && (r.displacement.dy + 2.0).abs() < 1e-3);
    }

    #[test]
    fn icp_on_identical_profiles_stops_immediately() {
        let p = rail();
        let r = icp_translate(&p, &p, &IcpConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations_used <= 2);
        assert!(r.displacement.norm() < 1e-9);
    }

    #[test]
    fn icp_flags_empty_correspondences() {
        // A short stub lands on the design centroid, deep inside the rail.
        let p = rail();
        let stub = Profile::new(
            ProfileKind::Typical,
            vec![Point2::new(300.0, 0.0), Point2::new(301.0, 0.0)],
            false,
        )
        .unwrap();
        let config = IcpConfig {
            max_corr_dist: 1.0,
            multi_start: false,
            ..IcpConfig::default()
        };
        let r = icp_translate(&stub, &p, &config).unwrap();
        assert!(!r.converged);
        assert!(r.error.is_some());
    }

    #[test]
    fn ransac_recovers_pure_translation_deterministically() {
        let p = rail();
        let m = p.translate(Displacement::new(7.5, -12.25));
        let config = RansacConfig {
            seed: 3,
            ..RansacConfig::default()
        };
        let a = ransac_translate(&m, &p, &config).unwrap();
        let b = ransac_translate(&m, &p, &config).unwrap();
        assert_eq!(a, b);
        assert!(a.converged);
        assert!((a.displacement.dx + 7.5).abs() < config.inlier_threshold);
        assert!((a.displacement.dy - 12.25).abs() < config.inlier_threshold);
    }

    #[test]
    fn configs_validate() {
        assert!(IcpConfig {
            trim_ratio: 0.0,
            ..IcpConfig::default()
        }
        .validate()
        .is_err());
        assert!(RansacConfig {
            iterations: 0,
            ..RansacConfig::default()
        }
        .validate()
        .is_err());
    }
}
