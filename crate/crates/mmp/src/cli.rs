//! Command-line front end: data generation, training, evaluation, the
//! ablation ladder, and report rendering.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{
    self, evaluate, format_sig, mean_std, run_ablation, train, AblationReport, EvalReport,
};
use crate::masking::enumerate_scenarios;
use crate::model::{MmpModel, SubstitutionMode};
use crate::params::ParameterStoreOf;
use crate::synthdata::{generate, Dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "mmp", version, about = "Masked modality projection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonOpts {
    /// Config document (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; defaults to config out.dir, then $MMP_OUT, then ./mmp-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override (data.seed for gen-data, train.seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train one model configuration.
    Train {
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a checkpoint over every missing-modality scenario.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the four-way ablation ladder over multiple seeds.
    Ablate {
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Render comparison tables from one or more report files.
    Report {
        /// report.json paths (scenario reports or an ablation report).
        paths: Vec<PathBuf>,
        /// Also write the merged flat CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Entry point used by both main and the CLI tests.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let (cfg, run_dir) = prepare(&common, SeedTarget::Data)?;
            let dataset = generate(&cfg.synth_config())?;
            let path = run_dir.join("dataset.mmpd");
            dataset.save(&path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train { data, common } => {
            let (cfg, run_dir) = prepare(&common, SeedTarget::Train)?;
            let dataset = load_dataset(&data)?;
            check_dataset(&cfg, &dataset)?;
            let mut store = ParameterStoreOf::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
            let model = MmpModel::init(
                &mut store,
                &cfg.modality_specs(),
                cfg.model_config(),
                &mut rng,
            )?;
            let history = train(&model, &mut store, &dataset, &cfg.train_config())?;
            store.save(&run_dir.join("checkpoint.mmpc"))?;
            std::fs::write(run_dir.join("history.csv"), history.to_csv())?;
            if let Some(last) = history.epochs.last() {
                println!(
                    "trained {} epochs, final val accuracy {}",
                    history.epochs.len(),
                    format_sig(last.val_accuracy)
                );
            } else {
                println!("trained 0 epochs");
            }
            println!("wrote {}", run_dir.join("checkpoint.mmpc").display());
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            common,
        } => {
            let (cfg, run_dir) = prepare(&common, SeedTarget::Train)?;
            let dataset = load_dataset(&data)?;
            check_dataset(&cfg, &dataset)?;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let scenarios = enumerate_scenarios(model.num_modalities());
            let modes = [
                SubstitutionMode::ZeroFill,
                SubstitutionMode::Mmp,
                SubstitutionMode::LinearProjection,
            ];
            let report = evaluate(&model, &store, &dataset, &scenarios, &modes, cfg.train_seed)?;
            std::fs::write(run_dir.join("report.json"), report.to_json())?;
            std::fs::write(run_dir.join("report.csv"), report.to_csv())?;
            print!("{}", render_eval_reports(&[report]));
            println!("wrote {}", run_dir.join("report.json").display());
            Ok(())
        }
        Command::Ablate { data, common } => {
            let (cfg, run_dir) = prepare(&common, SeedTarget::Train)?;
            let dataset = match data {
                Some(path) => {
                    let ds = load_dataset(&path)?;
                    check_dataset(&cfg, &ds)?;
                    ds
                }
                None => generate(&cfg.synth_config())?,
            };
            let report = run_ablation(
                &dataset,
                &cfg.modality_specs(),
                &cfg.model_config(),
                &cfg.train_config(),
                &cfg.eval_seeds,
            )?;
            std::fs::write(run_dir.join("report.json"), report.to_json())?;
            std::fs::write(run_dir.join("report.csv"), report.to_csv())?;
            print!("{}", render_ablation_report(&report));
            println!("wrote {}", run_dir.join("report.json").display());
            Ok(())
        }
        Command::Report { paths, csv } => {
            if paths.is_empty() {
                return Err(Error::Config("report needs at least one path".into()));
            }
            let mut evals = Vec::new();
            let mut ablations = Vec::new();
            for p in &paths {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
                if let Ok(r) = AblationReport::from_json(&text) {
                    ablations.push(r);
                } else {
                    match EvalReport::from_json(&text) {
                        Ok(r) => evals.push(r),
                        Err(_) => {
                            return Err(Error::Validation(format!(
                                "{}: not a recognizable report",
                                p.display()
                            )))
                        }
                    }
                }
            }
            let mut rendered = String::new();
            let mut merged_csv = String::from("scenario,mode,seed,metric,value\n");
            if !evals.is_empty() {
                rendered.push_str(&render_eval_reports(&evals));
                for r in &evals {
                    for line in r.to_csv().lines().skip(1) {
                        merged_csv.push_str(line);
                        merged_csv.push('\n');
                    }
                }
            }
            for r in &ablations {
                rendered.push_str(&render_ablation_report(r));
                for line in r.to_csv().lines().skip(1) {
                    merged_csv.push_str(line);
                    merged_csv.push('\n');
                }
            }
            print!("{rendered}");
            if let Some(path) = csv {
                std::fs::write(&path, merged_csv)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

enum SeedTarget {
    Data,
    Train,
}

fn prepare(common: &CommonOpts, seed_target: SeedTarget) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply_text(&text)?;
    }
    for item in &common.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        match seed_target {
            SeedTarget::Data => cfg.data_seed = seed,
            SeedTarget::Train => cfg.train_seed = seed,
        }
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;

    let root = if !cfg.out_dir.is_empty() {
        PathBuf::from(&cfg.out_dir)
    } else if let Ok(env) = std::env::var("MMP_OUT") {
        PathBuf::from(env)
    } else {
        PathBuf::from("mmp-out")
    };
    let run_dir = root.join(format!("run-{}", cfg.run_hash()));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.resolved"), cfg.resolved())?;
    Ok((cfg, run_dir))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Validation(format!(
            "dataset file not found: {}",
            path.display()
        )));
    }
    Dataset::load(path)
}

fn check_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.feature_lens() != cfg.data_feature_lens.as_slice()
        || dataset.classes() != cfg.data_classes
    {
        return Err(Error::Config(format!(
            "dataset ({:?} features, {} classes) does not match config ({:?}, {})",
            dataset.feature_lens(),
            dataset.classes(),
            cfg.data_feature_lens,
            cfg.data_classes
        )));
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(MmpModel, ParameterStoreOf<f64>)> {
    if !checkpoint.exists() {
        return Err(Error::Validation(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let loaded = ParameterStoreOf::<f64>::load(checkpoint)?;
    let mut store = ParameterStoreOf::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    let model = MmpModel::init(&mut store, &cfg.modality_specs(), cfg.model_config(), &mut rng)?;
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let value = loaded.get(name).map_err(|_| {
            Error::Validation(format!("checkpoint is missing parameter {name:?}"))
        })?;
        if value.shape() != store.get(name)?.shape() {
            return Err(Error::Validation(format!(
                "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                value.shape(),
                store.get(name)?.shape()
            )));
        }
        store.set_value(name, value.data())?;
    }
    if loaded.len() != store.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    Ok((model, store))
}

// ── rendering ──────────────────────────────────────────────────────────

fn pad(s: &str, w: usize) -> String {
    format!("{s:<w$}")
}

/// Scenario x mode table; multiple reports are merged by seed into mean+-std.
pub fn render_eval_reports(reports: &[EvalReport]) -> String {
    if reports.is_empty() {
        return String::new();
    }
    // scenario -> mode -> values across reports
    let mut rows: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut row_order = Vec::new();
    for r in reports {
        for sc in &r.scenarios {
            if !rows.contains_key(&sc.name) {
                row_order.push(sc.name.clone());
            }
            let modes = rows.entry(sc.name.clone()).or_default();
            for (mode, acc) in &sc.accuracy {
                modes.entry(mode.clone()).or_default().push(*acc);
            }
        }
    }
    let mut mode_order: Vec<String> = Vec::new();
    for modes in rows.values() {
        for m in modes.keys() {
            if !mode_order.contains(m) {
                mode_order.push(m.clone());
            }
        }
    }
    mode_order.sort();
    let name_w = row_order
        .iter()
        .map(|s| s.len())
        .chain(["scenario".len()])
        .max()
        .unwrap();
    let col_w = 22usize;
    let mut out = String::new();
    out.push_str(&format!(
        "accuracy by scenario ({} seed{})\n",
        reports.len(),
        if reports.len() == 1 { "" } else { "s" }
    ));
    out.push_str(&pad("scenario", name_w));
    for m in &mode_order {
        out.push_str("  ");
        out.push_str(&pad(m, col_w));
    }
    out.push('\n');
    for name in &row_order {
        out.push_str(&pad(name, name_w));
        for mode in &mode_order {
            let cell = match rows[name].get(mode) {
                Some(values) => {
                    let (mean, std) = mean_std(values);
                    if values.len() > 1 {
                        format!("{} ± {}", format_sig(mean), format_sig(std))
                    } else {
                        format_sig(mean)
                    }
                }
                None => "-".to_string(),
            };
            out.push_str("  ");
            out.push_str(&pad(&cell, col_w));
        }
        out.push('\n');
    }
    // Alignment diagnostics, when present.
    let mut diag = String::new();
    for r in reports {
        for sc in &r.scenarios {
            if let Some(c) = sc.logit_cosine {
                diag.push_str(&format!(
                    "{}  seed {}  logit_cosine {}",
                    pad(&sc.name, name_w),
                    r.seed,
                    format_sig(c)
                ));
                for d in &sc.diagnostics {
                    diag.push_str(&format!(
                        "  {}: smooth_l1 {} mse {}",
                        d.modality,
                        format_sig(d.smooth_l1),
                        format_sig(d.mse)
                    ));
                }
                diag.push('\n');
            }
        }
    }
    if !diag.is_empty() {
        out.push_str("alignment diagnostics (mmp)\n");
        out.push_str(&diag);
    }
    out
}

/// Scenario x tag table for the ablation ladder.
pub fn render_ablation_report(report: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "ablation ladder over seeds {:?}\n",
        report.seeds
    ));
    let scenario_names: Vec<String> = report
        .tags
        .first()
        .map(|t| t.scenarios.iter().map(|s| s.name.clone()).collect())
        .unwrap_or_default();
    let name_w = scenario_names
        .iter()
        .map(|s| s.len())
        .chain(["missing-scenario mean".len()])
        .max()
        .unwrap_or(8);
    let col_w = 24usize;
    out.push_str(&pad("scenario", name_w));
    for t in &report.tags {
        out.push_str("  ");
        out.push_str(&pad(&t.tag, col_w));
    }
    out.push('\n');
    for (i, name) in scenario_names.iter().enumerate() {
        out.push_str(&pad(name, name_w));
        for t in &report.tags {
            let sc = &t.scenarios[i];
            out.push_str("  ");
            out.push_str(&pad(
                &format!("{} ± {}", format_sig(sc.mean), format_sig(sc.std_dev)),
                col_w,
            ));
        }
        out.push('\n');
    }
    out.push_str(&pad("missing-scenario mean", name_w));
    for t in &report.tags {
        out.push_str("  ");
        out.push_str(&pad(
            &format!("{} ± {}", format_sig(t.missing_mean), format_sig(t.missing_std)),
            col_w,
        ));
    }
    out.push('\n');
    out.push_str(&report.ordering_detail);
    out.push('\n');
    out
}

pub use harness::round_sig;
