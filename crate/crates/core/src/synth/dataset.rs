//! Labelled pair generation and the on-disk dataset manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::degrade::{add_sensor_noise, apply_wear, truncate_below_waist};
use super::shapes::{make_design_profile, ShapeRanges};
use crate::error::{Error, Result};
use crate::geometry::io::{read_profile, write_profile};
use crate::geometry::{Displacement, Point2, Profile, ProfileKind};

/// Default label normalization constant, millimetres.
pub const DEFAULT_L_NORM_MM: f64 = 40.0;

const MAX_PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Fraction of samples of each profile kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindMix {
    pub typical: f64,
    pub switch: f64,
    pub frog: f64,
    pub combined: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        KindMix {
            typical: 0.4,
            switch: 0.25,
            frog: 0.2,
            combined: 0.15,
        }
    }
}

impl KindMix {
    pub fn only(kind: ProfileKind) -> Self {
        let mut mix = KindMix {
            typical: 0.0,
            switch: 0.0,
            frog: 0.0,
            combined: 0.0,
        };
        *mix.get_mut(kind) = 1.0;
        mix
    }

    pub fn get(&self, kind: ProfileKind) -> f64 {
        match kind {
            ProfileKind::Typical => self.typical,
            ProfileKind::Switch => self.switch,
            ProfileKind::Frog => self.frog,
            ProfileKind::Combined => self.combined,
        }
    }

    fn get_mut(&mut self, kind: ProfileKind) -> &mut f64 {
        match kind {
            ProfileKind::Typical => &mut self.typical,
            ProfileKind::Switch => &mut self.switch,
            ProfileKind::Frog => &mut self.frog,
            ProfileKind::Combined => &mut self.combined,
        }
    }

    fn as_array(&self) -> [f64; 4] {
        ProfileKind::ALL.map(|k| self.get(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub master_seed: u64,
    pub n_samples: usize,
    pub kind_mix: KindMix,
    /// Side of the centred square holding both centroid targets, mm.
    pub placement_side: f64,
    pub wear_vertical_range: [f64; 2],
    pub wear_side_range: [f64; 2],
    pub noise_sigma: f64,
    pub outlier_prob: f64,
    pub outlier_magnitude: f64,
    pub truncation_prob: f64,
    pub split_fractions: SplitFractions,
    /// Canvas side the placed profiles must fit in, mm.
    pub canvas_mm: f64,
    /// Clearance kept between any placed point and the canvas border, mm.
    pub canvas_margin_mm: f64,
    pub shape: ShapeRanges,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            master_seed: 0,
            n_samples: 1000,
            kind_mix: KindMix::default(),
            placement_side: 40.0,
            wear_vertical_range: [0.0, 3.0],
            wear_side_range: [0.0, 3.0],
            noise_sigma: 0.05,
            outlier_prob: 0.02,
            outlier_magnitude: 2.0,
            truncation_prob: 0.3,
            split_fractions: SplitFractions::default(),
            canvas_mm: 153.6,
            canvas_margin_mm: 2.0,
            shape: ShapeRanges::default(),
        }
    }
}

fn fractions_ok(values: &[f64]) -> bool {
    values.iter().all(|f| (0.0..=1.0).contains(f)) && (values.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

impl GenConfig {
    /// A configuration with every degradation switched off.
    pub fn clean(master_seed: u64, n_samples: usize) -> Self {
        GenConfig {
            master_seed,
            n_samples,
            wear_vertical_range: [0.0, 0.0],
            wear_side_range: [0.0, 0.0],
            noise_sigma: 0.0,
            outlier_prob: 0.0,
            outlier_magnitude: 0.0,
            truncation_prob: 0.0,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !fractions_ok(&self.kind_mix.as_array()) {
            return Err(Error::param("kind_mix", "fractions must lie in [0,1] and sum to 1"));
        }
        if !fractions_ok(&self.split_fractions.as_array()) {
            return Err(Error::param(
                "split_fractions",
                "fractions must lie in [0,1] and sum to 1",
            ));
        }
        if !(self.placement_side > 0.0) {
            return Err(Error::param("placement_side", "must be positive"));
        }
        for (name, r) in [
            ("wear_vertical_range", self.wear_vertical_range),
            ("wear_side_range", self.wear_side_range),
        ] {
            if !(r[0] >= 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return Err(Error::param(name, format!("need 0 <= lo <= hi, got {r:?}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.outlier_magnitude >= 0.0) {
            return Err(Error::param("noise_sigma", "noise parameters must be non-negative"));
        }
        for (name, p) in [
            ("outlier_prob", self.outlier_prob),
            ("truncation_prob", self.truncation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(name, format!("must lie in [0,1], got {p}")));
            }
        }
        if !(self.canvas_mm > 2.0 * self.canvas_margin_mm + self.placement_side) {
            return Err(Error::param("canvas_mm", "canvas too small for the placement square"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kind: ProfileKind,
    pub designed: Profile,
    pub measured: Profile,
    /// Translation that carries `measured` back onto its designed-frame pose.
    pub label: Displacement,
    pub split: Split,
}

/// A sample plus the generation ground truth not carried by [`Sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    /// The degraded profile at its designed-frame pose.
    pub reference: Profile,
    pub wear_vertical: f64,
    pub wear_side: f64,
    pub truncated: bool,
}

/// Centroid targets for one pair, both uniform on the centred square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub designed_target: Point2,
    pub measured_target: Point2,
}

impl Placement {
    /// Translation restoring the measured copy: the designed shape is moved so
    /// its centroid lands on `designed_target`, the degraded shape so its
    /// centroid lands on `measured_target`, and the label undoes the latter
    /// relative to the former.
    pub fn label(&self, design_shape: &Profile, degraded_shape: &Profile) -> Result<Displacement> {
        let to_design = Displacement::between(design_shape.centroid()?, self.designed_target);
        let to_measured = Displacement::between(degraded_shape.centroid()?, self.measured_target);
        Ok(to_design - to_measured)
    }
}

pub fn sample_placement<R: Rng + ?Sized>(rng: &mut R, side: f64) -> Placement {
    let h = side / 2.0;
    let mut draw = || Point2::new(rng.random_range(-h..h), rng.random_range(-h..h));
    let designed_target = draw();
    let measured_target = draw();
    Placement {
        designed_target,
        measured_target,
    }
}

/// Per-sample seed: the first 8 bytes of SHA-256 over a domain tag, the
/// master seed and the index, little-endian. Independent of generation order.
pub fn sample_seed(master_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"railmatch/sample/v1");
    h.update(master_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Largest-remainder apportionment of `n` over `fractions`.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Largest remainder first; ties to the earlier entry.
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    counts
}

/// Kind and split of every sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPlan {
    pub kinds: Vec<ProfileKind>,
    pub splits: Vec<Split>,
}

impl DatasetPlan {
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for s in &self.splits {
            *m.entry(*s).or_insert(0) += 1;
        }
        m
    }

    pub fn kind_split_counts(&self) -> BTreeMap<(ProfileKind, Split), usize> {
        let mut m = BTreeMap::new();
        for (k, s) in self.kinds.iter().zip(&self.splits) {
            *m.entry((*k, *s)).or_insert(0) += 1;
        }
        m
    }
}

/// Assigns kinds and splits.
///
/// Kinds are apportioned exactly and shuffled over indices. Splits are then
/// dealt kind by kind (samples of a kind in shuffled order), always to the
/// split furthest behind its running quota, so every kind is spread over the
/// splits in proportion and the split totals are exact apportionments.
pub fn plan_dataset(config: &GenConfig) -> Result<DatasetPlan> {
    config.validate()?;
    let n = config.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.master_seed, usize::MAX));

    let kind_counts = apportion(n, &config.kind_mix.as_array());
    let mut kinds: Vec<ProfileKind> = ProfileKind::ALL
        .iter()
        .zip(&kind_counts)
        .flat_map(|(k, &c)| std::iter::repeat_n(*k, c))
        .collect();
    kinds.shuffle(&mut rng);

    let fractions = config.split_fractions.as_array();
    let targets = apportion(n, &fractions);
    let mut assigned = [0usize; 3];
    let mut splits = vec![Split::Train; n];
    let mut dealt = 0usize;
    for kind in ProfileKind::ALL {
        let mut members: Vec<usize> = (0..n).filter(|&i| kinds[i] == kind).collect();
        members.shuffle(&mut rng);
        for i in members {
            dealt += 1;
            let mut best = None;
            let mut best_deficit = f64::NEG_INFINITY;
            for s in 0..3 {
                if assigned[s] >= targets[s] {
                    continue;
                }
                let deficit = targets[s] as f64 * dealt as f64 / n as f64 - assigned[s] as f64;
                if deficit > best_deficit {
                    best_deficit = deficit;
                    best = Some(s);
                }
            }
            let s = best.expect("targets sum to n");
            assigned[s] += 1;
            splits[i] = Split::ALL[s];
        }
    }
    Ok(DatasetPlan { kinds, splits })
}

fn fits_canvas(profile: &Profile, half_extent: f64) -> bool {
    let (lo, hi) = profile.bounds();
    lo.x > -half_extent && lo.y > -half_extent && hi.x < half_extent && hi.y < half_extent
}

/// Generates sample `index` of the dataset described by `config`.
pub fn generate_sample(config: &GenConfig, index: usize, kind: ProfileKind, split: Split) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.master_seed, index));
    let params = config.shape.sample(&mut rng);
    let design = make_design_profile(kind, &params, rng.next_u64())?;

    let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[1] > r[0] {
            rng.random_range(r[0]..=r[1])
        } else {
            r[0]
        }
    };
    let wear_vertical = draw(&mut rng, config.wear_vertical_range);
    let wear_side = draw(&mut rng, config.wear_side_range);
    let wear_seed = rng.next_u64();
    let truncate_coin: f64 = rng.random();
    let (waist_lo, waist_hi) = params.waist_range();
    let waist_y = rng.random_range(waist_lo..=waist_hi);
    let noise_seed = rng.next_u64();

    let worn = apply_wear(&design, wear_vertical, wear_side, wear_seed)?;
    let truncated = truncate_coin < config.truncation_prob;
    let cut = if truncated {
        truncate_below_waist(&worn, waist_y)?
    } else {
        worn
    };
    let degraded = add_sensor_noise(
        &cut,
        config.noise_sigma,
        config.outlier_prob,
        config.outlier_magnitude,
        noise_seed,
    )?;

    let design_centroid = design.centroid()?;
    let degraded_centroid = degraded.centroid()?;
    let half_extent = config.canvas_mm / 2.0 - config.canvas_margin_mm;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let placement = sample_placement(&mut rng, config.placement_side);
        let to_design = Displacement::between(design_centroid, placement.designed_target);
        let to_measured = Displacement::between(degraded_centroid, placement.measured_target);
        let label = to_design - to_measured;
        if label.dx.abs() >= config.placement_side || label.dy.abs() >= config.placement_side {
            continue;
        }
        let designed = design.translate(to_design);
        let measured = degraded.translate(to_measured);
        if !fits_canvas(&designed, half_extent) || !fits_canvas(&measured, half_extent) {
            continue;
        }
        let reference = degraded.translate(to_design);
        return Ok(GeneratedSample {
            sample: Sample {
                id: format!("s{index:06}"),
                kind,
                designed,
                measured,
                label,
                split,
            },
            reference,
            wear_vertical,
            wear_side,
            truncated,
        });
    }
    Err(Error::Config(format!(
        "sample {index}: no placement within the canvas after {MAX_PLACEMENT_TRIES} tries"
    )))
}

/// Generates every sample in memory, in index order.
pub fn generate_samples(config: &GenConfig) -> Result<Vec<GeneratedSample>> {
    let plan = plan_dataset(config)?;
    (0..config.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(config, i, plan.kinds[i], plan.splits[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    /// Always `"header"`.
    pub record: String,
    pub format_version: u32,
    pub l_norm_mm: f64,
    pub config: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub kind: ProfileKind,
    pub designed_path: String,
    pub measured_path: String,
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub split: Split,
    #[serde(default)]
    pub wear_vertical_mm: f64,
    #[serde(default)]
    pub wear_side_mm: f64,
    #[serde(default)]
    pub truncated: bool,
}

impl ManifestRecord {
    pub fn label(&self) -> Displacement {
        Displacement::new(self.dx_mm, self.dy_mm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory that relative sample paths resolve against.
    pub base_dir: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn config(&self) -> &GenConfig {
        &self.header.config
    }

    pub fn l_norm(&self) -> f64 {
        self.header.l_norm_mm
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let line = serde_json::to_string(&self.header).map_err(|e| Error::json(path, e))?;
        writeln!(out, "{line}").expect("write to Vec");
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::json(path, e))?;
            writeln!(out, "{line}").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; `path` may be the `.jsonl` file or its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: file_path.clone(),
                message: "empty manifest".into(),
            })?
            .map_err(|e| Error::io(&file_path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| Error::json(&file_path, e))?;
        if header.record != "header" {
            return Err(Error::Parse {
                path: file_path,
                message: "first line is not a header record".into(),
            });
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::json(&file_path, e))?);
        }
        let base_dir = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest {
            header,
            records,
            base_dir,
        })
    }

    pub fn load_sample(&self, record: &ManifestRecord) -> Result<Sample> {
        let designed = read_profile(&self.base_dir.join(&record.designed_path))?;
        let measured = read_profile(&self.base_dir.join(&record.measured_path))?;
        Ok(Sample {
            id: record.id.clone(),
            kind: record.kind,
            designed,
            measured,
            label: record.label(),
            split: record.split,
        })
    }

    /// Builds an in-memory manifest for generated samples (no files).
    pub fn from_generated(config: &GenConfig, samples: &[GeneratedSample]) -> Self {
        DatasetManifest {
            header: ManifestHeader {
                record: "header".into(),
                format_version: 1,
                l_norm_mm: DEFAULT_L_NORM_MM,
                config: config.clone(),
            },
            records: samples.iter().map(record_for).collect(),
            base_dir: PathBuf::new(),
        }
    }
}

fn record_for(g: &GeneratedSample) -> ManifestRecord {
    let s = &g.sample;
    ManifestRecord {
        id: s.id.clone(),
        kind: s.kind,
        designed_path: format!("profiles/{}_designed.csv", s.id),
        measured_path: format!("profiles/{}_measured.csv", s.id),
        dx_mm: s.label.dx,
        dy_mm: s.label.dy,
        split: s.split,
        wear_vertical_mm: g.wear_vertical,
        wear_side_mm: g.wear_side,
        truncated: g.truncated,
    }
}

/// Generates the dataset into `out_dir`: `manifest.jsonl` plus one CSV and
/// sidecar per profile under `profiles/`.
pub fn generate_dataset(config: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(config)?;
    let profiles = out_dir.join("profiles");
    fs::create_dir_all(&profiles).map_err(|e| Error::io(&profiles, e))?;
    let mut manifest = DatasetManifest::from_generated(config, &samples);
    manifest.base_dir = out_dir.to_path_buf();
    samples
        .par_iter()
        .zip(manifest.records.par_iter())
        .try_for_each(|(g, r)| -> Result<()> {
            write_profile(&g.sample.designed, &out_dir.join(&r.designed_path))?;
            write_profile(&g.sample.measured, &out_dir.join(&r.measured_path))
        })?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
