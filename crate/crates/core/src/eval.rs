//! Success criterion, accuracy, ensembling and evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{icp_translate, ransac_translate, IcpConfig, MatchResult, RansacConfig};
use crate::error::{Error, Result};
use crate::geometry::{Displacement, Profile, ProfileKind};
use crate::regressor::Checkpoint;
use crate::synth::{DatasetManifest, Sample, Split};

/// A match succeeds when both axis errors are strictly below the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub tolerance_mm: f64,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        SuccessCriterion { tolerance_mm: 0.4 }
    }
}

impl SuccessCriterion {
    pub fn new(tolerance_mm: f64) -> Self {
        SuccessCriterion { tolerance_mm }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance_mm > 0.0) || !self.tolerance_mm.is_finite() {
            return Err(Error::param("tolerance_mm", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn is_success(&self, err_dx: f64, err_dy: f64) -> bool {
        err_dx.abs() < self.tolerance_mm && err_dy.abs() < self.tolerance_mm
    }
}

pub fn is_success(pred: Displacement, label: Displacement, c: &SuccessCriterion) -> bool {
    c.is_success(pred.dx - label.dx, pred.dy - label.dy)
}

pub fn accuracy(preds: &[Displacement], labels: &[Displacement], c: &SuccessCriterion) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Config("accuracy of an empty sample set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| is_success(**p, **l, c))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean squared error over both axes, mm^2.
pub fn mse_mm2(preds: &[Displacement], labels: &[Displacement]) -> f64 {
    let se: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| (p.dx - l.dx).powi(2) + (p.dy - l.dy).powi(2))
        .sum();
    se / (2 * preds.len()) as f64
}

/// Checkpoint references and their combination weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    pub fn uniform(members: Vec<String>) -> Self {
        let w = 1.0 / members.len().max(1) as f64;
        EnsembleSpec {
            weights: vec![w; members.len()],
            members,
        }
    }

    /// Plain mean of four members.
    pub fn mean4(members: [String; 4]) -> Self {
        EnsembleSpec::uniform(members.to_vec())
    }

    /// Three members weighted 0.5 / 0.25 / 0.25, the first being the
    /// strongest.
    pub fn weighted3(members: [String; 3]) -> Self {
        EnsembleSpec {
            members: members.to_vec(),
            weights: vec![0.5, 0.25, 0.25],
        }
    }

    /// Named preset over the given members.
    pub fn preset(name: &str, members: Vec<String>) -> Result<Self> {
        let count = |n: usize| {
            if members.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "preset `{name}` needs {n} members, got {}",
                    members.len()
                )))
            }
        };
        match name {
            "mean4" => {
                count(4)?;
                Ok(EnsembleSpec::uniform(members))
            }
            "weighted3" => {
                count(3)?;
                Ok(EnsembleSpec {
                    members,
                    weights: vec![0.5, 0.25, 0.25],
                })
            }
            other => Err(Error::Config(format!("unknown ensemble preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config("ensemble has no members".into()));
        }
        if self.members.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} members but {} weights",
                self.members.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("weights", "must be finite and non-negative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param("weights", format!("sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec: EnsembleSpec = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Componentwise weighted sum of member predictions.
pub fn combine(preds: &[Displacement], weights: &[f64]) -> Displacement {
    assert_eq!(preds.len(), weights.len(), "one weight per prediction");
    preds.iter().zip(weights).fold(Displacement::ZERO, |acc, (p, &w)| {
        Displacement::new(acc.dx + w * p.dx, acc.dy + w * p.dy)
    })
}

/// `(ensemble MSE, weighted mean of member MSEs)` on one batch; the first
/// never exceeds the second.
pub fn jensen_gap(member_preds: &[Vec<Displacement>], weights: &[f64], labels: &[Displacement]) -> (f64, f64) {
    let combined: Vec<Displacement> = (0..labels.len())
        .map(|i| {
            let row: Vec<Displacement> = member_preds.iter().map(|m| m[i]).collect();
            combine(&row, weights)
        })
        .collect();
    let member_mean: f64 = member_preds
        .iter()
        .zip(weights)
        .map(|(m, &w)| w * mse_mm2(m, labels))
        .sum();
    (mse_mm2(&combined, labels), member_mean)
}

/// Loaded ensemble members.
#[derive(Debug)]
pub struct Ensemble {
    pub spec: EnsembleSpec,
    pub members: Vec<Checkpoint>,
}

impl Ensemble {
    /// Loads every member; relative paths resolve against `base_dir`.
    pub fn load(spec: EnsembleSpec, base_dir: &Path) -> Result<Self> {
        spec.validate()?;
        let mut members = Vec::with_capacity(spec.members.len());
        for m in &spec.members {
            let path = base_dir.join(m);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "ensemble member `{m}` not found at {}",
                    path.display()
                )));
            }
            members.push(Checkpoint::load(&path)?);
        }
        let l0 = members[0].meta.l_norm_mm;
        if let Some((i, _)) = members.iter().enumerate().find(|(_, c)| c.meta.l_norm_mm != l0) {
            return Err(Error::Config(format!(
                "ensemble member `{}` uses L_norm {} but `{}` uses {l0}",
                spec.members[i], members[i].meta.l_norm_mm, spec.members[0]
            )));
        }
        Ok(Ensemble { spec, members })
    }

    /// Per-member predictions (outer index = member) for each pair.
    pub fn member_predictions(&mut self, pairs: &[(&Profile, &Profile)]) -> Vec<Vec<Result<Displacement>>> {
        self.members.iter_mut().map(|m| m.predict_each(pairs)).collect()
    }

    pub fn predict_each(&mut self, pairs: &[(&Profile, &Profile)]) -> Vec<Result<Displacement>> {
        let per_member = self.member_predictions(pairs);
        (0..pairs.len())
            .map(|i| {
                let mut row = Vec::with_capacity(per_member.len());
                for (k, m) in per_member.iter().enumerate() {
                    match &m[i] {
                        Ok(d) => row.push(*d),
                        Err(e) => {
                            return Err(Error::Config(format!("member `{}`: {e}", self.spec.members[k])));
                        }
                    }
                }
                Ok(combine(&row, &self.spec.weights))
            })
            .collect()
    }

    pub fn predict_mm(&mut self, designed: &Profile, measured: &Profile) -> Result<MatchResult> {
        let d = self.predict_each(&[(designed, measured)]).remove(0)?;
        Ok(MatchResult::prediction(d))
    }
}

pub fn ensemble_predict(ensemble: &mut Ensemble, designed: &Profile, measured: &Profile) -> Result<MatchResult> {
    ensemble.predict_mm(designed, measured)
}

/// Anything that maps a profile pair to a displacement.
#[derive(Debug)]
pub enum Matcher {
    Checkpoint(Box<Checkpoint>),
    Ensemble(Ensemble),
    Icp(IcpConfig),
    Ransac(RansacConfig),
}

impl Matcher {
    pub fn name(&self) -> &'static str {
        match self {
            Matcher::Checkpoint(_) => "checkpoint",
            Matcher::Ensemble(_) => "ensemble",
            Matcher::Icp(_) => "icp",
            Matcher::Ransac(_) => "ransac",
        }
    }

    pub fn predict_each(&mut self, pairs: &[(&Profile, &Profile)]) -> Vec<Result<Displacement>> {
        let classical = |f: &(dyn Fn(&Profile, &Profile) -> Result<MatchResult> + Sync)| {
            pairs
                .par_iter()
                .map(|(d, m)| {
                    let r = f(m, d)?;
                    match r.error {
                        Some(e) => Err(Error::Config(e)),
                        None => Ok(r.displacement),
                    }
                })
                .collect()
        };
        match self {
            Matcher::Checkpoint(c) => c.predict_each(pairs),
            Matcher::Ensemble(e) => e.predict_each(pairs),
            Matcher::Icp(cfg) => {
                let cfg = *cfg;
                classical(&move |m, d| icp_translate(m, d, &cfg))
            }
            Matcher::Ransac(cfg) => {
                let cfg = *cfg;
                classical(&move |m, d| ransac_translate(m, d, &cfg))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub kind: ProfileKind,
    pub pred_dx_mm: f64,
    pub pred_dy_mm: f64,
    pub label_dx_mm: f64,
    pub label_dy_mm: f64,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleOutcome {
    pub fn err(&self) -> (f64, f64) {
        (self.pred_dx_mm - self.label_dx_mm, self.pred_dy_mm - self.label_dy_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matcher: String,
    pub split: Split,
    pub tolerance_mm: f64,
    pub samples: usize,
    pub successes: usize,
    pub accuracy: f64,
    /// Over samples that produced a prediction.
    pub mse_mm2: f64,
    pub max_abs_err_dx_mm: f64,
    pub max_abs_err_dy_mm: f64,
    /// Samples the matcher could not handle; they count as failures.
    pub errored: usize,
    pub per_sample: Vec<SampleOutcome>,
}

/// Runs `matcher` over `samples`. Per-sample failures are recorded and do
/// not stop the evaluation. Rows are ordered by sample id.
pub fn evaluate(matcher: &mut Matcher, samples: &[&Sample], split: Split, c: &SuccessCriterion) -> Result<EvalReport> {
    c.validate()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split `{}` has no samples", split.as_str())));
    }
    let pairs: Vec<(&Profile, &Profile)> = samples.iter().map(|s| (&s.designed, &s.measured)).collect();
    let preds = matcher.predict_each(&pairs);
    build_report(matcher.name(), samples, preds, split, c)
}

/// Builds a report from per-sample predictions already computed, one per sample.
pub fn build_report(
    matcher: &str,
    samples: &[&Sample],
    preds: Vec<Result<Displacement>>,
    split: Split,
    c: &SuccessCriterion,
) -> Result<EvalReport> {
    c.validate()?;
    if samples.is_empty() || samples.len() != preds.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut per_sample: Vec<SampleOutcome> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let (pred, error) = match p {
                Ok(d) => (d, None),
                Err(e) => (Displacement::new(f64::NAN, f64::NAN), Some(e.to_string())),
            };
            SampleOutcome {
                id: s.id.clone(),
                kind: s.kind,
                pred_dx_mm: pred.dx,
                pred_dy_mm: pred.dy,
                label_dx_mm: s.label.dx,
                label_dy_mm: s.label.dy,
                success: error.is_none() && is_success(pred, s.label, c),
                error,
            }
        })
        .collect();
    per_sample.sort_by(|a, b| a.id.cmp(&b.id));

    let ok: Vec<&SampleOutcome> = per_sample.iter().filter(|o| o.error.is_none()).collect();
    let successes = per_sample.iter().filter(|o| o.success).count();
    let (mut se, mut mx, mut my) = (0.0, 0.0f64, 0.0f64);
    for o in &ok {
        let (ex, ey) = o.err();
        se += ex * ex + ey * ey;
        mx = mx.max(ex.abs());
        my = my.max(ey.abs());
    }
    Ok(EvalReport {
        matcher: matcher.to_string(),
        split,
        tolerance_mm: c.tolerance_mm,
        samples: per_sample.len(),
        successes,
        accuracy: successes as f64 / per_sample.len() as f64,
        mse_mm2: if ok.is_empty() {
            f64::NAN
        } else {
            se / (2 * ok.len()) as f64
        },
        max_abs_err_dx_mm: mx,
        max_abs_err_dy_mm: my,
        errored: per_sample.len() - ok.len(),
        per_sample,
    })
}

pub fn evaluate_manifest(
    matcher: &mut Matcher,
    manifest: &DatasetManifest,
    split: Split,
    c: &SuccessCriterion,
) -> Result<EvalReport> {
    let samples: Vec<Sample> = manifest
        .records
        .par_iter()
        .filter(|r| r.split == split)
        .map(|r| manifest.load_sample(r))
        .collect::<Result<_>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    evaluate(matcher, &refs, split, c)
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Scale used for the scatter plot.
pub const SCATTER_PX_PER_MM: f64 = 200.0;

/// Writes `<stem>.csv` (id, err_dx_mm, err_dy_mm, success) and
/// `<stem>.svg`, an error scatter with the tolerance box. Returns both paths.
pub fn error_scatter_export(report: &EvalReport, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if report.per_sample.is_empty() {
        return Err(Error::Config("empty report".into()));
    }
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Parse {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Parse {
        path: csv_path.clone(),
        message: e.to_string(),
    };
    w.write_record(["id", "err_dx_mm", "err_dy_mm", "success"])
        .map_err(wrap)?;
    for o in &report.per_sample {
        let (ex, ey) = o.err();
        w.write_record([o.id.clone(), ex.to_string(), ey.to_string(), o.success.to_string()])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let tol = report.tolerance_mm;
    let finite: Vec<(f64, f64, bool)> = report
        .per_sample
        .iter()
        .filter(|o| o.error.is_none())
        .map(|o| {
            let (ex, ey) = o.err();
            (ex, ey, o.success)
        })
        .collect();
    let reach = finite
        .iter()
        .fold(2.0 * tol, |m, &(x, y, _)| m.max(x.abs()).max(y.abs()))
        * 1.1;
    let k = SCATTER_PX_PER_MM;
    let half = reach * k;
    let size = 2.0 * half;
    let mut svg = String::new();
    // Centre of the plot is zero error; +y error points up.
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.1}" height="{size:.1}" viewBox="{:.1} {:.1} {size:.1} {size:.1}" data-px-per-mm="{k}">"#,
        -half, -half
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{:.1}" y="{:.1}" width="{size:.1}" height="{size:.1}" fill="white"/>"#,
        -half, -half
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{:.1}" y1="0" x2="{half:.1}" y2="0" stroke="#999" stroke-width="1"/><line x1="0" y1="{:.1}" x2="0" y2="{half:.1}" stroke="#999" stroke-width="1"/>"##,
        -half, -half
    );
    let _ = writeln!(
        svg,
        r##"<rect id="tolerance-box" x="{:.4}" y="{:.4}" width="{:.4}" height="{:.4}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        -tol * k,
        -tol * k,
        2.0 * tol * k,
        2.0 * tol * k
    );
    for (x, y, ok) in &finite {
        let colour = if *ok { "#2ca02c" } else { "#d62728" };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.4}" cy="{:.4}" r="3" fill="{colour}"/>"#,
            x * k,
            -y * k
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" font-family="sans-serif">n={} accuracy={:.4} tol={tol} mm</text>"#,
        -half + 6.0,
        -half + 18.0,
        report.samples,
        report.accuracy
    );
    svg.push_str("</svg>\n");
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(dx: f64, dy: f64) -> Displacement {
        Displacement::new(dx, dy)
    }

    #[test]
    fn success_is_strict_per_axis() {
        let c = SuccessCriterion::default();
        assert!(is_success(d(0.39, 0.39), d(0.0, 0.0), &c));
        assert!(!is_success(d(0.4, 0.0), d(0.0, 0.0), &c));
        assert!(is_success(d(5.0, -2.0), d(5.0, -2.0), &c));
        assert!(!is_success(d(0.0, -0.41), d(0.0, 0.0), &c));
        assert!(SuccessCriterion::new(0.0).validate().is_err());
    }

    #[test]
    fn accuracy_examples() {
        let c = SuccessCriterion::default();
        let labels = vec![d(0.0, 0.0); 4];
        assert_eq!(accuracy(&labels, &labels, &c).unwrap(), 1.0);
        let preds = vec![d(0.1, 0.0), d(0.0, 0.2), d(0.5, 0.0), d(-0.3, 0.3)];
        assert_eq!(accuracy(&preds, &labels, &c).unwrap(), 0.75);
        assert!(accuracy(&[], &[], &c).is_err());
    }

    #[test]
    fn weighted_combination() {
        let preds = [d(1.0, 0.0), d(0.0, 1.0), d(0.0, -1.0)];
        let c = combine(&preds, &[0.5, 0.25, 0.25]);
        assert_eq!((c.dx, c.dy), (0.5, 0.0));
        let same = [d(0.3, -0.7); 4];
        let m = combine(&same, &[0.25; 4]);
        assert!((m.dx - 0.3).abs() < 1e-15 && (m.dy + 0.7).abs() < 1e-15);
        let degenerate = combine(&preds, &[1.0, 0.0, 0.0]);
        assert_eq!(degenerate, preds[0]);
    }

    #[test]
    fn spec_validation_and_presets() {
        let names = |n: usize| (0..n).map(|i| format!("m{i}.json")).collect::<Vec<_>>();
        assert_eq!(
            EnsembleSpec::preset("weighted3", names(3)).unwrap().weights,
            vec![0.5, 0.25, 0.25]
        );
        assert_eq!(EnsembleSpec::preset("mean4", names(4)).unwrap().weights, vec![0.25; 4]);
        assert!(EnsembleSpec::preset("mean4", names(3)).is_err());
        assert!(EnsembleSpec::preset("median", names(3)).is_err());
        let bad = EnsembleSpec {
            members: names(2),
            weights: vec![0.6, 0.6],
        };
        assert!(bad.validate().is_err());
        let neg = EnsembleSpec {
            members: names(2),
            weights: vec![1.5, -0.5],
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn missing_member_is_named() {
        let spec = EnsembleSpec::uniform(vec!["nowhere/model.json".into()]);
        let err = Ensemble::load(spec, Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("nowhere/model.json"));
    }
}
