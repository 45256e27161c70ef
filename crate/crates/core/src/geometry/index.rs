use super::{closest_on_segment, Point2, Profile};

/// Uniform-grid bucket of polyline segments for nearest-segment queries.
///
/// Results are identical to a brute-force scan over all segments; the grid
/// only prunes candidates that cannot beat the current best.
#[derive(Debug, Clone)]
pub struct SegmentIndex {
    segments: Vec<(Point2, Point2)>,
    origin: Point2,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl SegmentIndex {
    pub fn new(profile: &Profile, cell: f64) -> Self {
        let segments: Vec<(Point2, Point2)> = profile.segments().collect();
        let (lo, hi) = profile.bounds();
        let cell = cell.max(1e-6);
        let cols = (((hi.x - lo.x) / cell).floor() as usize + 1).max(1);
        let rows = (((hi.y - lo.y) / cell).floor() as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        let clamp_col = |x: f64| (((x - lo.x) / cell).floor().max(0.0) as usize).min(cols - 1);
        let clamp_row = |y: f64| (((y - lo.y) / cell).floor().max(0.0) as usize).min(rows - 1);
        for (i, (a, b)) in segments.iter().enumerate() {
            let (c0, c1) = (clamp_col(a.x.min(b.x)), clamp_col(a.x.max(b.x)));
            let (r0, r1) = (clamp_row(a.y.min(b.y)), clamp_row(a.y.max(b.y)));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    buckets[r * cols + c].push(i as u32);
                }
            }
        }
        SegmentIndex {
            segments,
            origin: lo,
            cell,
            cols,
            rows,
            buckets,
        }
    }

    /// Distance from `p` to the box of grid cells, zero inside.
    fn grid_distance(&self, p: Point2) -> f64 {
        let w = self.cols as f64 * self.cell;
        let h = self.rows as f64 * self.cell;
        let dx = (self.origin.x - p.x).max(p.x - (self.origin.x + w)).max(0.0);
        let dy = (self.origin.y - p.y).max(p.y - (self.origin.y + h)).max(0.0);
        dx.hypot(dy)
    }

    /// Closest point on the indexed polyline, if one lies within `max_dist`.
    pub fn nearest_within(&self, p: Point2, max_dist: f64) -> Option<(f64, Point2)> {
        if self.grid_distance(p) > max_dist {
            return None;
        }
        let col = ((p.x - self.origin.x) / self.cell).floor() as i64;
        let row = ((p.y - self.origin.y) / self.cell).floor() as i64;
        let max_ring = (max_dist / self.cell).ceil() as i64 + 1;
        let mut best_d2 = max_dist * max_dist;
        let mut best: Option<Point2> = None;
        let mut found_exact = false;
        for ring in 0..=max_ring {
            // Everything in ring k is at least (k - 1) cells away.
            let ring_floor = (ring - 1).max(0) as f64 * self.cell;
            if ring_floor * ring_floor > best_d2 {
                break;
            }
            for r in (row - ring)..=(row + ring) {
                if r < 0 || r >= self.rows as i64 {
                    continue;
                }
                let on_edge_row = r == row - ring || r == row + ring;
                let step = if on_edge_row { 1 } else { (2 * ring).max(1) };
                let mut c = col - ring;
                while c <= col + ring {
                    if c >= 0 && c < self.cols as i64 {
                        for &s in &self.buckets[r as usize * self.cols + c as usize] {
                            let (a, b) = self.segments[s as usize];
                            let foot = closest_on_segment(p, a, b);
                            let d2 = (p - foot).norm_sq();
                            if d2 < best_d2 || (d2 == best_d2 && !found_exact) {
                                best_d2 = d2;
                                best = Some(foot);
                                found_exact = true;
                            }
                        }
                    }
                    c += step;
                }
            }
        }
        best.map(|foot| (best_d2.sqrt(), foot))
    }
}
