//! Profile files: a `x_mm,y_mm` CSV of ordered points plus a JSON sidecar
//! carrying `kind`, `closed` and `working_edge`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Point2, Profile, ProfileKind, WorkingEdge};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSidecar {
    pub kind: ProfileKind,
    pub closed: bool,
    #[serde(default)]
    pub working_edge: WorkingEdge,
}

/// `profile.csv` → `profile.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_profile(profile: &Profile, csv_path: &Path) -> Result<()> {
    let mut out = String::with_capacity(profile.len() * 24 + 16);
    out.push_str("x_mm,y_mm\n");
    for p in profile.points() {
        // `{}` on f64 is the shortest round-trip representation.
        out.push_str(&format!("{},{}\n", p.x, p.y));
    }
    fs::write(csv_path, out).map_err(|e| Error::io(csv_path, e))?;
    let sidecar = ProfileSidecar {
        kind: profile.kind(),
        closed: profile.is_closed(),
        working_edge: profile.working_edge(),
    };
    let json_path = sidecar_path(csv_path);
    let text = serde_json::to_string(&sidecar).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn read_points_csv(csv_path: &Path) -> Result<Vec<Point2>> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Parse {
        path: csv_path.into(),
        message: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: csv_path.into(),
        message: e.to_string(),
    })?;
    if headers.len() != 2 || &headers[0] != "x_mm" || &headers[1] != "y_mm" {
        return Err(Error::Parse {
            path: csv_path.into(),
            message: format!(
                "expected header `x_mm,y_mm`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut points = Vec::new();
    for (line, record) in reader.deserialize::<(f64, f64)>().enumerate() {
        let (x, y) = record.map_err(|e| Error::Parse {
            path: csv_path.into(),
            message: format!("row {}: {e}", line + 1),
        })?;
        points.push(Point2::new(x, y));
    }
    Ok(points)
}

/// Reads a profile CSV and its sidecar. A missing sidecar defaults to an
/// open typical profile with a left working edge.
pub fn read_profile(csv_path: &Path) -> Result<Profile> {
    let points = read_points_csv(csv_path)?;
    let json_path = sidecar_path(csv_path);
    let sidecar = if json_path.exists() {
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?
    } else {
        ProfileSidecar {
            kind: ProfileKind::Typical,
            closed: false,
            working_edge: WorkingEdge::Left,
        }
    };
    Profile::with_working_edge(sidecar.kind, points, sidecar.closed, sidecar.working_edge).map_err(|e| Error::Parse {
        path: csv_path.into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = Profile::with_working_edge(
            ProfileKind::Frog,
            vec![
                Point2::new(0.1, -3.3333333333333335),
                Point2::new(1e-17, 2.0),
                Point2::new(7.25, 1.0 / 3.0),
            ],
            true,
            WorkingEdge::Right,
        )
        .unwrap();
        write_profile(&p, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_mm,y_mm\n"));
        assert_eq!(read_profile(&path).unwrap(), p);
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "x,y\n0,0\n1,1\n").unwrap();
        assert!(read_profile(&path).is_err());
    }
}
