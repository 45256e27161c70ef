use serde::{Deserialize, Serialize};

use super::{Point2, Profile, WorkingEdge};

/// Side wear is read this far below the designed crown apex.
pub const SIDE_WEAR_DEPTH_MM: f64 = 16.0;

/// Vertical and side wear of an aligned measured profile.
///
/// A value is `None` when its measurement line misses the measured profile
/// (for example a truncated or partial scan). Clamped values are never
/// negative; the signed raw values are kept alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WearReport {
    pub vertical_wear: Option<f64>,
    pub side_wear: Option<f64>,
    pub crown_x: f64,
    pub side_y: f64,
    pub raw_vertical: Option<f64>,
    pub raw_side: Option<f64>,
}

/// Index of the highest vertex. Ties go to the earliest vertex.
pub(crate) fn apex_index(profile: &Profile) -> usize {
    let mut best = 0;
    for (i, p) in profile.points().iter().enumerate() {
        if p.y > profile.points()[best].y {
            best = i;
        }
    }
    best
}

pub(crate) fn apex(profile: &Profile) -> Point2 {
    profile.points()[apex_index(profile)]
}

/// Abscissas where the polyline meets the horizontal line `y = level`.
/// Horizontal segments lying on the line contribute both endpoints.
pub fn horizontal_crossings(profile: &Profile, level: f64) -> Vec<f64> {
    let mut xs = Vec::new();
    for (a, b) in profile.segments() {
        let (da, db) = (a.y - level, b.y - level);
        if da == 0.0 && db == 0.0 {
            xs.push(a.x);
            xs.push(b.x);
        } else if (da <= 0.0 && db >= 0.0) || (da >= 0.0 && db <= 0.0) {
            let t = da / (da - db);
            xs.push(a.x + (b.x - a.x) * t);
        }
    }
    xs
}

/// Ordinates where the polyline meets the vertical line `x = abscissa`.
pub fn vertical_crossings(profile: &Profile, abscissa: f64) -> Vec<f64> {
    let mut ys = Vec::new();
    for (a, b) in profile.segments() {
        let (da, db) = (a.x - abscissa, b.x - abscissa);
        if da == 0.0 && db == 0.0 {
            ys.push(a.y);
            ys.push(b.y);
        } else if (da <= 0.0 && db >= 0.0) || (da >= 0.0 && db <= 0.0) {
            let t = da / (da - db);
            ys.push(a.y + (b.y - a.y) * t);
        }
    }
    ys
}

fn max_of(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::max)
}

fn min_of(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::min)
}

/// Wear of `measured_aligned` against `designed`, both in the designed frame.
///
/// Vertical wear is the drop of the topmost crossing on the vertical line
/// through the designed crown apex. Side wear is the recession of the
/// outermost working-edge crossing on the horizontal line
/// [`SIDE_WEAR_DEPTH_MM`] below the apex, measured toward the field side.
pub fn compute_wear(designed: &Profile, measured_aligned: &Profile) -> WearReport {
    let top = apex(designed);
    let side_y = top.y - SIDE_WEAR_DEPTH_MM;

    let designed_top = max_of(&vertical_crossings(designed, top.x));
    let measured_top = max_of(&vertical_crossings(measured_aligned, top.x));
    let raw_vertical = match (designed_top, measured_top) {
        (Some(d), Some(m)) => Some(d - m),
        _ => None,
    };

    let edge = designed.working_edge();
    let pick = |xs: Vec<f64>| match edge {
        WorkingEdge::Left => min_of(&xs),
        WorkingEdge::Right => max_of(&xs),
    };
    let designed_edge = pick(horizontal_crossings(designed, side_y));
    let measured_edge = pick(horizontal_crossings(measured_aligned, side_y));
    let raw_side = match (designed_edge, measured_edge) {
        (Some(d), Some(m)) => Some(match edge {
            WorkingEdge::Left => m - d,
            WorkingEdge::Right => d - m,
        }),
        _ => None,
    };

    WearReport {
        vertical_wear: raw_vertical.map(|v| v.max(0.0)),
        side_wear: raw_side.map(|v| v.max(0.0)),
        crown_x: top.x,
        side_y,
        raw_vertical,
        raw_side,
    }
}
