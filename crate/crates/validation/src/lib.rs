//! Pass/fail bookkeeping for the acceptance suite.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

/// Result of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "acceptance {:<28} {}  {} ({:.1}s)",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

/// Runs one check. A check returns whether it passed plus the measured
/// numbers; an error or panic counts as a failure.
pub fn check<E: std::fmt::Display>(name: &'static str, f: impl FnOnce() -> Result<(bool, String), E>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panic: {msg}"))
        }
    };
    Outcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Keeps the checks whose name contains any of `filters` (all when empty).
pub fn selected(name: &str, filters: &[String]) -> bool {
    filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_and_panics_fail() {
        assert!(check("ok", || Ok::<_, String>((true, String::new()))).passed);
        assert!(!check("err", || Err::<(bool, String), _>("bad")).passed);
        let o = check("panic", || -> Result<(bool, String), String> { panic!("boom") });
        assert!(!o.passed && o.detail.contains("boom"));
        assert!(o.line().contains("FAIL"));
    }

    #[test]
    fn filters_by_substring() {
        assert!(selected("icp-exactness", &[]));
        assert!(selected("icp-exactness", &["icp".into()]));
        assert!(!selected("overfit", &["icp".into()]));
    }
}
