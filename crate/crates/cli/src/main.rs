//! `cfseq`: reproducible counterfactual-sequence experiments.
//!
//! simulate -> pretrain -> train -> evaluate, plus ablate (variant fan-out)
//! and report (SVG rendering of report CSVs). Every artifact embeds the
//! config fingerprint and downstream stages refuse mismatches.

mod config;
mod svg;

use cfseq_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use cfseq_core::data::prepare;
use cfseq_core::decoder::{train_decoder, DecoderModel};
use cfseq_core::encoder::{pretrain_encoder, EncoderModel};
use cfseq_core::evalkit::{
    build_queries, nrmse, nrmse_normalizer, predict_queries, read_report_csv, rmse_by_horizon,
    run_ablation, write_report_csv, EvalReport, HorizonStat, Strategy,
};
use cfseq_core::model::AblationVariant;
use cfseq_core::simkit::{
    file_content_hash, read_cohort, simulate_split, write_atomic, write_cohort, Cohort,
};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cfseq", version, about = "Counterfactual sequence regression lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test cohorts and their sidecars.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: contrastive encoder pretraining, one checkpoint per seed.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: decoder training on top of encoder checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual evaluation of trained models.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = ["sliding", "random", "factual"])]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate ablation variants with shared data and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-horizon error curves from report CSVs to a standalone SVG.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Sim(#[from] cfseq_core::simkit::SimError),
    #[error(transparent)]
    Diff(#[from] cfseq_core::DiffError),
    #[error(transparent)]
    Ckpt(#[from] cfseq_core::checkpoint::CkptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("missing artifact: expected {0}")]
    MissingArtifact(String),
    #[error("fingerprint mismatch: {what} carries {found}, config is {expected}")]
    FingerprintMismatch { what: String, found: String, expected: String },
    #[error("{0}")]
    Invalid(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate { config, seed, out } => cmd_simulate(&config, seed, &out),
        Command::Pretrain { config, data, out } => cmd_pretrain(&config, &data, &out),
        Command::Train { config, data, encoder, out } => cmd_train(&config, &data, &encoder, &out),
        Command::Evaluate { config, data, model, strategy, out } => {
            cmd_evaluate(&config, &data, &model, &strategy, &out)
        }
        Command::Ablate { config, variants, out } => cmd_ablate(&config, &variants, &out),
        Command::Report { input, out } => cmd_report(&input, &out),
    }
}

fn cmd_simulate(config: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::parse_file(config)?;
    let fp = cfg.fingerprint();
    let generator = cfg.generator_config();
    let (train, val, test) = simulate_split(
        &generator,
        cfg.generator.n_train,
        cfg.generator.n_val,
        cfg.generator.n_test,
        seed,
        cfg.workers(),
    )?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config_used.toml"), &cfg.to_toml())?;
    for (name, cohort) in [("train", &train), ("val", &val), ("test", &test)] {
        write_cohort(out, name, cohort, &fp)?;
        if cohort.meta.overlap_violations > 0 {
            eprintln!(
                "warning: {name} cohort has {} steps with assignment probability outside (0.01, 0.99)",
                cohort.meta.overlap_violations
            );
        }
    }
    println!(
        "simulated {} + {} + {} units into {}",
        train.n_units(),
        val.n_units(),
        test.n_units(),
        out.display()
    );
    Ok(())
}

fn load_split(data: &Path, name: &str, expected_fp: &str) -> Result<Cohort, CliError> {
    let csv = cfseq_core::simkit::cohort_csv_path(data, name);
    if !csv.exists() {
        return Err(CliError::MissingArtifact(csv.display().to_string()));
    }
    let (cohort, fp) = read_cohort(data, name)?;
    if fp != expected_fp {
        return Err(CliError::FingerprintMismatch {
            what: csv.display().to_string(),
            found: fp,
            expected: expected_fp.to_string(),
        });
    }
    Ok(cohort)
}

fn cmd_pretrain(config: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::parse_file(config)?;
    let fp = cfg.fingerprint();
    let train = load_split(data, "train", &fp)?;
    let val = load_split(data, "val", &fp)?;
    let mcfg = cfg.model_config();
    let prep_train = prepare(&train, &[]);
    let prep_val = prepare(&val, &[]);
    std::fs::create_dir_all(out)?;
    for &seed in &cfg.run.seeds {
        let (store, _, log) = pretrain_encoder(&prep_train, &prep_val, &mcfg, seed)?;
        let meta = CheckpointMeta::new("encoder", &fp, seed, prep_train.dims, &mcfg);
        save_checkpoint(&out.join(format!("encoder_s{seed}.ckpt")), &store, &meta)?;
        let mut csv = String::from("step,loss_cpc,loss_infomax,val_loss\n");
        for row in &log {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.epoch, row.loss_cpc, row.loss_infomax, row.val_loss
            ));
        }
        write_atomic(&out.join(format!("encoder_log_s{seed}.csv")), &csv)?;
        println!("pretrained encoder seed {seed}: {} epochs", log.len());
    }
    Ok(())
}

/// A checkpoint argument may be a single file or a directory of them.
fn checkpoint_paths(path: &Path, prefix: &str) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if path.is_dir() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with(prefix) && n.ends_with(".ckpt"))
                    .unwrap_or(false)
            })
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(CliError::MissingArtifact(format!(
                "{}/{prefix}*.ckpt",
                path.display()
            )));
        }
        return Ok(found);
    }
    Err(CliError::MissingArtifact(path.display().to_string()))
}

fn cmd_train(config: &Path, data: &Path, encoder: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::parse_file(config)?;
    let fp = cfg.fingerprint();
    let train = load_split(data, "train", &fp)?;
    let val = load_split(data, "val", &fp)?;
    let mcfg = cfg.model_config();
    let prep_train = prepare(&train, &[]);
    let prep_val = prepare(&val, &[]);
    std::fs::create_dir_all(out)?;
    for ckpt_path in checkpoint_paths(encoder, "encoder_s")? {
        let (store, meta) = load_checkpoint(&ckpt_path)?;
        if meta.kind != "encoder" {
            return Err(CliError::Invalid(format!(
                "{} is a {} checkpoint, expected encoder",
                ckpt_path.display(),
                meta.kind
            )));
        }
        if meta.fingerprint != fp {
            return Err(CliError::FingerprintMismatch {
                what: ckpt_path.display().to_string(),
                found: meta.fingerprint,
                expected: fp,
            });
        }
        let seed = meta.seed;
        let trained = train_decoder(&prep_train, &prep_val, &store, &mcfg, seed)?;
        if trained.aborted {
            eprintln!("warning: seed {seed} stopped on a non-finite loss; keeping last good parameters");
        }
        let meta = CheckpointMeta::new("model", &fp, seed, prep_train.dims, &mcfg);
        save_checkpoint(&out.join(format!("model_s{seed}.ckpt")), &trained.store, &meta)?;
        let mut csv = String::from("epoch,loss_y,balance,loss_w,val_mse\n");
        for row in &trained.log {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.epoch, row.loss_y, row.balance_term, row.loss_w, row.val_mse
            ));
        }
        write_atomic(&out.join(format!("train_log_s{seed}.csv")), &csv)?;
        println!("trained decoder seed {seed}: {} epochs", trained.log.len());
    }
    Ok(())
}

fn cmd_evaluate(config: &Path, data: &Path, model: &Path, strategy: &str, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::parse_file(config)?;
    let fp = cfg.fingerprint();
    let test = load_split(data, "test", &fp)?;
    let mcfg = cfg.model_config();
    let generator = cfg.generator_config();
    let strat = Strategy::parse(strategy)
        .ok_or_else(|| CliError::Invalid(format!("unknown strategy {strategy}")))?;
    let queries = build_queries(&test, &generator, strat, mcfg.tau, cfg.run.eval_origin_stride)?;
    let prep_test = prepare(&test, &[]);
    let norm = nrmse_normalizer(&test);
    let workers = cfg.workers();

    let mut seeds = Vec::new();
    let mut rmse_acc = vec![0.0f64; mcfg.tau];
    let mut model_hashes = Vec::new();
    let paths = checkpoint_paths(model, "model_s")?;
    for ckpt_path in &paths {
        let (store, meta) = load_checkpoint(ckpt_path)?;
        if meta.kind != "model" {
            return Err(CliError::Invalid(format!(
                "{} is a {} checkpoint, expected model",
                ckpt_path.display(),
                meta.kind
            )));
        }
        if meta.fingerprint != fp {
            return Err(CliError::FingerprintMismatch {
                what: ckpt_path.display().to_string(),
                found: meta.fingerprint,
                expected: fp,
            });
        }
        let mut eff = mcfg.clone();
        meta.apply_to(&mut eff);
        let enc = EncoderModel::handles(meta.dims, &eff);
        let dec = DecoderModel::handles(meta.dims, &eff);
        let preds = predict_queries(&store, &enc, &dec, &prep_test, prep_test.y_scale, &queries, workers)?;
        let rmse = rmse_by_horizon(&preds, &queries)?;
        for (a, r) in rmse_acc.iter_mut().zip(&rmse) {
            *a += r;
        }
        seeds.push(meta.seed);
        model_hashes.push(file_content_hash(ckpt_path)?);
    }
    let mean_rmse: Vec<f64> = rmse_acc.iter().map(|r| r / paths.len() as f64).collect();
    let nr = nrmse(&mean_rmse, norm)?;
    let report = EvalReport {
        variant: "full".into(),
        per_horizon: mean_rmse
            .iter()
            .zip(&nr)
            .enumerate()
            .map(|(j, (&rmse, &nrmse))| HorizonStat { horizon: j + 1, rmse, nrmse, count: queries.len() })
            .collect(),
        norm_const: norm,
        seed_list: seeds.clone(),
        model_fingerprint: model_hashes.join(";"),
        config_fingerprint: fp.clone(),
    };
    std::fs::create_dir_all(out)?;
    write_report_csv(&out.join("report.csv"), &[report])?;
    write_manifest(
        out,
        &fp,
        &seeds,
        &[
            ("strategy", strategy.to_string()),
            ("model_fingerprint", model_hashes.join(";")),
            ("n_queries", queries.len().to_string()),
            ("norm_const", norm.to_string()),
            (
                "cohort_test_hash",
                file_content_hash(&cfseq_core::simkit::cohort_csv_path(data, "test"))?,
            ),
        ],
    )?;
    println!(
        "evaluated {} queries over {} model(s); report at {}",
        queries.len(),
        paths.len(),
        out.join("report.csv").display()
    );
    Ok(())
}

fn cmd_ablate(config: &Path, variants: &[String], out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::parse_file(config)?;
    let fp = cfg.fingerprint();
    let mut parsed = Vec::new();
    for v in variants.iter().filter(|v| !v.is_empty()) {
        let variant = AblationVariant::parse(v)
            .ok_or_else(|| CliError::Invalid(format!("unknown ablation variant {v}")))?;
        parsed.push(variant);
    }
    let generator = cfg.generator_config();
    let (train, val, test) = simulate_split(
        &generator,
        cfg.generator.n_train,
        cfg.generator.n_val,
        cfg.generator.n_test,
        cfg.run.data_seed,
        cfg.workers(),
    )?;
    let data = cfseq_core::evalkit::ExperimentData { generator, train, val, test };
    let strategy = match cfg.generator.kind.as_str() {
        "tumor" => Strategy::Sliding,
        _ => Strategy::Random,
    };
    let reports = run_ablation(
        &data,
        &cfg.model_config(),
        &parsed,
        &cfg.run.seeds,
        strategy,
        cfg.run.eval_origin_stride,
        cfg.workers(),
        &fp,
    )?;
    std::fs::create_dir_all(out)?;
    write_report_csv(&out.join("ablation_report.csv"), &reports)?;
    write_manifest(
        out,
        &fp,
        &cfg.run.seeds,
        &[
            ("data_seed", cfg.run.data_seed.to_string()),
            ("strategy", strategy.label().to_string()),
            (
                "variants",
                reports.iter().map(|r| r.variant.clone()).collect::<Vec<_>>().join(";"),
            ),
        ],
    )?;
    for r in &reports {
        println!("{}: mean NRMSE {:.4}", r.variant, r.mean_nrmse());
    }
    Ok(())
}

fn cmd_report(input: &Path, out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    files.sort();
    for f in &files {
        if let Ok(parsed) = read_report_csv(f) {
            rows.extend(parsed);
        }
    }
    if rows.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "{}/*.csv with report rows",
            input.display()
        )));
    }
    let mut by_variant: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for r in rows {
        by_variant
            .entry(r.variant)
            .or_default()
            .push((r.horizon as f64, r.nrmse));
    }
    let series: Vec<svg::Series> = by_variant
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            svg::Series { label, points }
        })
        .collect();
    let chart = svg::render_line_chart("Counterfactual error by horizon", "NRMSE", &series);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_atomic(out, &chart)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn write_manifest(
    out: &Path,
    config_fp: &str,
    seeds: &[u64],
    extras: &[(&str, String)],
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!("config_fingerprint = {config_fp}\n"));
    text.push_str(&format!(
        "seeds = {}\n",
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
    ));
    for (k, v) in extras {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_atomic(&out.join("manifest.txt"), &text)?;
    Ok(())
}
