use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use railmatch::classical::{icp_translate, ransac_translate, IcpConfig, MatchResult, RansacConfig};
use railmatch::eval::{
    build_report, combine, error_scatter_export, evaluate, jensen_gap, Ensemble, EnsembleSpec, EvalReport, Matcher,
    SuccessCriterion,
};
use railmatch::geometry::compute_wear;
use railmatch::geometry::io::read_profile;
use railmatch::geometry::Displacement;
use railmatch::raster::{render_pair, ImageSpec, RenderMode};
use railmatch::regressor::{
    build_model, train, write_history_csv, Architecture, BackbonePreset, Checkpoint, Init, ModelConfig, TrainConfig,
    TrainHooks,
};
use railmatch::synth::{generate_dataset, DatasetManifest, GenConfig, Sample, Split};

#[derive(Parser)]
#[command(name = "railmatch", version, about = "Rail profile displacement estimation")]
struct Cli {
    /// Seed for every random process; overrides seeds in config files.
    #[arg(long, global = true, env = "RAILMATCH_SEED")]
    seed: Option<u64>,

    /// Log more (-v info, -vv debug). Logs go to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (profiles plus manifest).
    Gen {
        /// Generator config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of samples.
        #[arg(long = "n")]
        n_samples: Option<usize>,
    },
    /// Render dataset pairs to PNG and record their digests.
    #[command(group(ArgGroup::new("dest").required(true).multiple(true).args(["out", "check"])))]
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "single")]
        mode: RenderMode,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        split: Option<Split>,
        /// Render at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Compare against a digests file instead of only writing one.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Train a regressor on the train split, selecting on val.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for best.json, best.weights and history.csv.
        #[arg(long)]
        out: PathBuf,
        /// Model config (JSON).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Training config (JSON).
        #[arg(long = "train")]
        train_config: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        arch: Option<ArchArg>,
        #[arg(long)]
        preset: Option<BackbonePreset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a matcher on one split of a dataset.
    #[command(group(ArgGroup::new("matcher").required(true).args(["checkpoint", "ensemble", "method"])))]
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ensemble spec (JSON); member paths are relative to it.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        method: Option<ClassicalMethod>,
        /// ICP or RANSAC config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.4)]
        tolerance: f64,
        /// Write the full report here; stdout then gets the summary only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the displacement between two profile files.
    Match {
        #[arg(long)]
        designed: PathBuf,
        #[arg(long)]
        measured: PathBuf,
        #[arg(long, default_value = "icp")]
        method: MatchMethod,
        #[arg(long, required_if_eq("method", "nn"))]
        checkpoint: Option<PathBuf>,
        /// ICP or RANSAC config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also report wear after alignment.
        #[arg(long)]
        wear: bool,
    },
    /// Evaluate an ensemble and its members on one split.
    #[command(group(ArgGroup::new("which").required(true).args(["spec", "preset"])))]
    Ensemble {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_parser = ["mean4", "weighted3"], requires = "members")]
        preset: Option<String>,
        /// Member checkpoints, in weight order.
        #[arg(long, num_args = 1..)]
        members: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.4)]
        tolerance: f64,
        /// Write the full ensemble report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the error scatter (CSV and SVG) of an evaluation report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Output stem; `.csv` and `.svg` are appended.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct SpecArgs {
    /// Image spec (JSON).
    #[arg(long = "spec", conflicts_with = "desk")]
    spec: Option<PathBuf>,
    /// Use the 256 px / 0.6 mm spec.
    #[arg(long)]
    desk: bool,
}

impl SpecArgs {
    fn resolve(&self) -> anyhow::Result<ImageSpec> {
        let spec = match (&self.spec, self.desk) {
            (Some(p), _) => read_json(p)?,
            (None, true) => ImageSpec::desk(),
            (None, false) => ImageSpec::default(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    SingleBranch,
    DualBranch,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassicalMethod {
    Icp,
    Ransac,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MatchMethod {
    Icp,
    Ransac,
    Nn,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_split(manifest: &DatasetManifest, split: Split, limit: Option<usize>) -> anyhow::Result<Vec<Sample>> {
    manifest
        .split(split)
        .take(limit.unwrap_or(usize::MAX))
        .map(|r| manifest.load_sample(r).map_err(Into::into))
        .collect()
}

fn icp_config(path: Option<&Path>) -> anyhow::Result<IcpConfig> {
    let cfg: IcpConfig = path.map(read_json).transpose()?.unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}

fn ransac_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RansacConfig> {
    let mut cfg: RansacConfig = path.map(read_json).transpose()?.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn owned(p: &railmatch::Result<Displacement>) -> railmatch::Result<Displacement> {
    match p {
        Ok(d) => Ok(*d),
        Err(e) => Err(railmatch::Error::Config(e.to_string())),
    }
}

fn summary(report: &EvalReport) -> Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Value::Object(m) = &mut v {
        m.remove("per_sample");
    }
    v
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen { config, out, n_samples } => {
            let mut cfg: GenConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(n) = n_samples {
                cfg.n_samples = n;
            }
            let manifest = generate_dataset(&cfg, &out)?;
            let splits: BTreeMap<&str, usize> = Split::ALL.iter().map(|s| (s.as_str(), manifest.count(*s))).collect();
            print_json(&json!({
                "out": out,
                "samples": manifest.records.len(),
                "master_seed": cfg.master_seed,
                "splits": splits,
            }))
        }

        Command::Render {
            manifest,
            out,
            mode,
            spec,
            split,
            limit,
            check,
        } => {
            let spec = spec.resolve()?;
            let manifest = DatasetManifest::read(&manifest)?;
            let records: Vec<_> = manifest
                .records
                .iter()
                .filter(|r| split.is_none_or(|s| r.split == s))
                .take(limit.unwrap_or(usize::MAX))
                .collect();
            if let Some(dir) = &out {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let mut digests: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for r in &records {
                let s = manifest.load_sample(r)?;
                let rendered = render_pair(
                    &s.designed,
                    &s.measured,
                    Some(s.label),
                    &spec,
                    mode,
                    manifest.l_norm(),
                    &s.id,
                )?;
                if let Some(dir) = &out {
                    let names: Vec<String> = match mode {
                        RenderMode::Single => vec![format!("{}.png", s.id)],
                        RenderMode::Separate => {
                            vec![format!("{}_designed.png", s.id), format!("{}_measured.png", s.id)]
                        }
                    };
                    for (im, name) in rendered.images.iter().zip(names) {
                        im.write_png(&dir.join(name))?;
                    }
                }
                digests.insert(s.id.clone(), rendered.images.iter().map(|im| im.digest()).collect());
            }
            let mut result = json!({
                "rendered": records.len(),
                "mode": mode,
                "image_spec_digest": spec.digest(),
            });
            if let Some(dir) = &out {
                let path = dir.join("digests.json");
                fs::write(&path, serde_json::to_vec_pretty(&digests)?)?;
                result["digests"] = json!(path);
            }
            let mut mismatched = Vec::new();
            if let Some(path) = &check {
                let expected: BTreeMap<String, Vec<String>> = read_json(path)?;
                for (id, got) in &digests {
                    if expected.get(id) != Some(got) {
                        mismatched.push(id.clone());
                    }
                }
                result["checked"] = json!(digests.len());
                result["mismatched"] = json!(mismatched);
            }
            print_json(&result)?;
            if !mismatched.is_empty() {
                bail!(
                    "{} rendered sample(s) differ from {}",
                    mismatched.len(),
                    check.unwrap().display()
                );
            }
            Ok(())
        }

        Command::Train {
            manifest,
            out,
            model,
            train_config,
            spec,
            arch,
            preset,
            epochs,
            lr,
            batch_size,
        } => {
            let spec = spec.resolve()?;
            let manifest = DatasetManifest::read(&manifest)?;
            let mut mcfg: ModelConfig = model.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let mut tcfg: TrainConfig = train_config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            if let Some(a) = arch {
                mcfg.architecture = match a {
                    ArchArg::SingleBranch => Architecture::SingleBranch,
                    ArchArg::DualBranch => Architecture::DualBranch,
                };
            }
            if let Some(p) = preset {
                mcfg.backbone_preset = p;
            }
            mcfg.input_px = spec.output_px();
            if let Some(s) = seed {
                tcfg.seed = s;
                if let Init::Random { seed: init_seed } = &mut mcfg.init {
                    *init_seed = s;
                }
            }
            if let Some(e) = epochs {
                tcfg.epochs = e;
            }
            if let Some(l) = lr {
                tcfg.learning_rate = l;
            }
            if let Some(b) = batch_size {
                tcfg.batch_size = b;
            }
            tcfg.validate()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let net = build_model(&mcfg)?;
            let mut log_epoch = |s: &railmatch::regressor::EpochStats| {
                info!(
                    "epoch {} train_mse {:.5} val_mse {:.5} val_success {:.3} ({:.1}s)",
                    s.epoch, s.train_mse, s.val_mse, s.val_success_rate, s.seconds
                )
            };
            let hooks = TrainHooks {
                checkpoint_dir: (tcfg.checkpoint_every > 0).then(|| out.clone()),
                on_epoch: Some(&mut log_epoch),
            };
            let mut outcome = train(net, &manifest, &tcfg, &spec, hooks)?;
            let best = out.join("best.json");
            outcome.best.save(&best)?;
            let history = out.join("history.csv");
            write_history_csv(&outcome.history, &history)?;
            print_json(&json!({
                "checkpoint": best,
                "history": history,
                "best_epoch": outcome.best_epoch,
                "epochs": outcome.history,
            }))
        }

        Command::Eval {
            manifest,
            split,
            checkpoint,
            ensemble,
            method,
            config,
            tolerance,
            out,
        } => {
            let c = SuccessCriterion::new(tolerance);
            c.validate()?;
            let manifest = DatasetManifest::read(&manifest)?;
            let mut matcher = if let Some(p) = checkpoint {
                Matcher::Checkpoint(Box::new(Checkpoint::load(&p)?))
            } else if let Some(p) = ensemble {
                let spec = EnsembleSpec::read(&p)?;
                let base = p.parent().unwrap_or(Path::new("."));
                Matcher::Ensemble(Ensemble::load(spec, base)?)
            } else {
                match method.expect("clap requires one matcher") {
                    ClassicalMethod::Icp => Matcher::Icp(icp_config(config.as_deref())?),
                    ClassicalMethod::Ransac => Matcher::Ransac(ransac_config(config.as_deref(), seed)?),
                }
            };
            let samples = load_split(&manifest, split, None)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let report = evaluate(&mut matcher, &refs, split, &c)?;
            match out {
                Some(path) => {
                    report.write_json(&path)?;
                    print_json(&summary(&report))
                }
                None => print_json(&report),
            }
        }

        Command::Match {
            designed,
            measured,
            method,
            checkpoint,
            config,
            wear,
        } => {
            let d = read_profile(&designed)?;
            let m = read_profile(&measured)?;
            let result: MatchResult = match method {
                MatchMethod::Icp => icp_translate(&m, &d, &icp_config(config.as_deref())?)?,
                MatchMethod::Ransac => ransac_translate(&m, &d, &ransac_config(config.as_deref(), seed)?)?,
                MatchMethod::Nn => {
                    let path = checkpoint.expect("clap requires --checkpoint");
                    Checkpoint::load(&path)?.predict_mm(&d, &m)?
                }
            };
            let mut v = serde_json::to_value(&result)?;
            if wear {
                let aligned = m.translate(result.displacement);
                v["wear"] = serde_json::to_value(compute_wear(&d, &aligned))?;
            }
            print_json(&v)
        }

        Command::Ensemble {
            spec,
            preset,
            members,
            manifest,
            split,
            tolerance,
            out,
        } => {
            let c = SuccessCriterion::new(tolerance);
            c.validate()?;
            let (espec, base) = match (spec, preset) {
                (Some(p), _) => {
                    let base = p.parent().unwrap_or(Path::new(".")).to_path_buf();
                    (EnsembleSpec::read(&p)?, base)
                }
                (None, Some(name)) => {
                    let names = members.iter().map(|p| p.to_string_lossy().into_owned()).collect();
                    (EnsembleSpec::preset(&name, names)?, PathBuf::from("."))
                }
                (None, None) => unreachable!("clap requires --spec or --preset"),
            };
            let manifest = DatasetManifest::read(&manifest)?;
            let mut ens = Ensemble::load(espec.clone(), &base)?;
            let samples = load_split(&manifest, split, None)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let pairs: Vec<_> = samples.iter().map(|s| (&s.designed, &s.measured)).collect();
            let member_preds = ens.member_predictions(&pairs);

            let mut member_reports = Vec::new();
            for (name, preds) in espec.members.iter().zip(&member_preds) {
                let r = build_report(name, &refs, preds.iter().map(owned).collect(), split, &c)?;
                member_reports.push(json!({
                    "member": name,
                    "accuracy": r.accuracy,
                    "mse_mm2": r.mse_mm2,
                    "errored": r.errored,
                }));
            }

            // Jensen numbers only over samples every member handled.
            let ok: Vec<usize> = (0..samples.len())
                .filter(|&i| member_preds.iter().all(|m| m[i].is_ok()))
                .collect();
            let ok_preds: Vec<Vec<_>> = member_preds
                .iter()
                .map(|m| ok.iter().map(|&i| *m[i].as_ref().unwrap()).collect())
                .collect();
            let labels: Vec<_> = ok.iter().map(|&i| samples[i].label).collect();
            let combined = (0..samples.len())
                .map(|i| {
                    let row: railmatch::Result<Vec<_>> = member_preds.iter().map(|m| owned(&m[i])).collect();
                    row.map(|r| combine(&r, &espec.weights))
                })
                .collect();
            let report = build_report("ensemble", &refs, combined, split, &c)?;
            let jensen = if ok.is_empty() {
                Value::Null
            } else {
                let (ens_mse, member_mse) = jensen_gap(&ok_preds, &espec.weights, &labels);
                json!({
                    "samples": ok.len(),
                    "ensemble_mse_mm2": ens_mse,
                    "weighted_member_mse_mm2": member_mse,
                    "holds": ens_mse <= member_mse + 1e-9 * member_mse.max(1.0),
                })
            };
            if let Some(path) = &out {
                report.write_json(path)?;
            }
            print_json(&json!({
                "spec": espec,
                "ensemble": summary(&report),
                "members": member_reports,
                "jensen": jensen,
            }))
        }

        Command::Plot { report, out } => {
            let report: EvalReport = read_json(&report)?;
            let (csv, svg) = error_scatter_export(&report, &out)?;
            print_json(&json!({ "csv": csv, "svg": svg }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
