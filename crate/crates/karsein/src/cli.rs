//! Command-line entry points: train, evaluate, ablate, synthetic, explain,
//! prune, gradcheck. Every subcommand validates its inputs up front, refuses
//! to clobber an existing output directory without --force, and writes a
//! machine-readable summary.json on success.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis;
use crate::checkpoint::{self, AnyModel};
use crate::config::{ModelKind, RunConfig};
use crate::data::{DatasetSchema, EncodedDataset};
use crate::error::{Error, Result};
use crate::kan::{fit_synthetic, KanCtrModel, MlpCtrModel, SyntheticTarget};
use crate::model::{KarseinModel, TowerSet};
use crate::optim::ParamGrads;
use crate::training::{self, evaluate, train, TrainReport, METRICS_CSV_HEADER};

#[derive(Parser)]
#[command(
    name = "karsein",
    about = "B-spline learnable-activation interaction networks for CTR prediction",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a dataset, train a model, evaluate on the test split
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Evaluate(EvaluateArgs),
    /// Tower ablations plus the pairwise-multiplication layer sweep
    Ablate(AblateArgs),
    /// Synthetic multiplicative-fit experiments (three settings x three targets)
    Synthetic(SyntheticArgs),
    /// Connection heat maps, redundancy report, activation curves, cubic fits
    Explain(ExplainArgs),
    /// Explain, then mask redundant inputs and fine-tune
    Prune(PruneArgs),
    /// Finite-difference verification of all hand-derived gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// model kind: karsein | kan | mlp
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    /// comma-separated hidden widths, e.g. 8,8
    #[arg(long)]
    explicit_hidden: Option<String>,
    #[arg(long)]
    implicit_hidden: Option<String>,
    /// comma-separated 1-based layer indices, e.g. 1,2 (empty string = none)
    #[arg(long)]
    pairwise_layers: Option<String>,
    /// head mode: mean | paper_sum
    #[arg(long)]
    head_mode: Option<String>,
    /// towers: both | explicit_only | implicit_only
    #[arg(long)]
    towers: Option<String>,
    /// dataset path override
    #[arg(long)]
    data: Option<PathBuf>,
    /// dataset schema override: ml1m | douban | criteo
    #[arg(long)]
    schema: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// comma-separated seed list; runs one training per seed plus a mean summary
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// split to evaluate: train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// seeds for the pairwise sweep (mean is reported), default seed..seed+2
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    #[arg(long, default_value_t = 3)]
    finetune_epochs: usize,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// double (1e-4 gate) or single (smoke gate)
    #[arg(long, default_value = "double")]
    precision: String,
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Synthetic(args) => cmd_synthetic(args),
        Cmd::Explain(args) => cmd_explain(args),
        Cmd::Prune(args) => cmd_prune(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) -> Result<()> {
    if let Some(kind) = &ov.model {
        cfg.model.kind = match kind.as_str() {
            "karsein" => ModelKind::Karsein,
            "kan" => ModelKind::Kan,
            "mlp" => ModelKind::Mlp,
            other => return Err(Error::config(format!("unknown model kind '{other}'"))),
        };
    }
    if let Some(v) = ov.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = ov.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = ov.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = ov.lambda1 {
        cfg.train.lambda1 = v;
    }
    if let Some(v) = ov.lambda2 {
        cfg.train.lambda2 = v;
    }
    if let Some(v) = ov.threads {
        cfg.train.threads = v;
    }
    if let Some(v) = ov.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = ov.kappa {
        cfg.model.kappa = v;
    }
    if let Some(v) = ov.grid {
        cfg.model.grid = v;
    }
    if let Some(v) = &ov.explicit_hidden {
        cfg.model.explicit_hidden = parse_usize_list(v)?;
    }
    if let Some(v) = &ov.implicit_hidden {
        cfg.model.implicit_hidden = parse_usize_list(v)?;
    }
    if let Some(v) = &ov.pairwise_layers {
        cfg.model.pairwise_layers = parse_usize_list(v)?;
    }
    if let Some(v) = &ov.head_mode {
        cfg.model.head_mode = match v.as_str() {
            "mean" => crate::model::HeadMode::Mean,
            "paper_sum" => crate::model::HeadMode::PaperSum,
            other => return Err(Error::config(format!("unknown head mode '{other}'"))),
        };
    }
    if let Some(v) = &ov.towers {
        cfg.model.towers = match v.as_str() {
            "both" => TowerSet::Both,
            "explicit_only" => TowerSet::ExplicitOnly,
            "implicit_only" => TowerSet::ImplicitOnly,
            other => return Err(Error::config(format!("unknown tower set '{other}'"))),
        };
    }
    if let Some(v) = &ov.data {
        cfg.dataset.path = v.clone();
    }
    if let Some(v) = &ov.schema {
        cfg.dataset.schema = v.clone();
    }
    cfg.validate()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad list entry '{p}'")))
        })
        .collect()
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad seed '{p}'")))
        })
        .collect()
}

/// Refuses to reuse a non-empty output directory unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<EncodedDataset> {
    let schema = DatasetSchema::by_name(&cfg.dataset.schema)?;
    EncodedDataset::load(&cfg.dataset.path, &schema, cfg.seed)
}

/// Train one model of the configured kind; returns the report and the
/// non-embedding parameter count, having saved a checkpoint under `dir`.
fn train_one(
    cfg: &RunConfig,
    data: &EncodedDataset,
    model_seed: u64,
    dir: &Path,
) -> Result<(TrainReport, usize)> {
    let tc = cfg.train.to_train_config(model_seed);
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = String::from(METRICS_CSV_HEADER);
    metrics.push('\n');

    let (mut report, params) = match cfg.model.kind {
        ModelKind::Karsein => {
            let hyper = cfg.model.karsein_hyper();
            let mut model = KarseinModel::<f32>::new(hyper, &data.vocab_sizes(), model_seed)?;
            let report = train(&mut model, data, &tc, |row| {
                metrics.push_str(&training::metrics_csv_row(row));
                metrics.push('\n');
            })?;
            let params = model.non_embedding_params();
            checkpoint::save_karsein(&dir.join("checkpoint"), &model, model_seed)?;
            let threads = training::effective_threads(tc.threads);
            let (auc, ll) = evaluate(&model, data, &data.test_idx, threads)?;
            (with_test(report, auc, ll), params)
        }
        ModelKind::Kan => {
            let mc = &cfg.model;
            let mut model = KanCtrModel::<f32>::new(
                &data.vocab_sizes(),
                mc.embed_dim,
                &mc.baseline_hidden,
                mc.baseline_grid,
                mc.baseline_kappa,
                model_seed,
            )?;
            let report = train(&mut model, data, &tc, |row| {
                metrics.push_str(&training::metrics_csv_row(row));
                metrics.push('\n');
            })?;
            let params = model.total_param_len() - model.param(0).value.len();
            checkpoint::save_kan_ctr(
                &dir.join("checkpoint"),
                &model,
                &mc.baseline_hidden,
                mc.baseline_grid,
                mc.baseline_kappa,
                model_seed,
            )?;
            let threads = training::effective_threads(tc.threads);
            let (auc, ll) = evaluate(&model, data, &data.test_idx, threads)?;
            (with_test(report, auc, ll), params)
        }
        ModelKind::Mlp => {
            let mc = &cfg.model;
            let mut model = MlpCtrModel::<f32>::new(
                &data.vocab_sizes(),
                mc.embed_dim,
                &mc.baseline_hidden,
                model_seed,
            )?;
            let report = train(&mut model, data, &tc, |row| {
                metrics.push_str(&training::metrics_csv_row(row));
                metrics.push('\n');
            })?;
            let params = model.total_param_len() - model.param(0).value.len();
            checkpoint::save_mlp_ctr(&dir.join("checkpoint"), &model, &mc.baseline_hidden, model_seed)?;
            let threads = training::effective_threads(tc.threads);
            let (auc, ll) = evaluate(&model, data, &data.test_idx, threads)?;
            (with_test(report, auc, ll), params)
        }
    };

    std::fs::write(&metrics_path, metrics)?;
    report.best_checkpoint = Some(dir.join("checkpoint").display().to_string());
    write_json(&dir.join("report.json"), &serde_json::to_value(&report)?)?;
    Ok((report, params))
}

fn with_test(mut report: TrainReport, auc: f64, ll: f64) -> TrainReport {
    report.test_auc = Some(auc);
    report.test_logloss = Some(ll);
    report
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let seeds = match &args.seeds {
        Some(list) => parse_seed_list(list)?,
        None => vec![cfg.seed],
    };
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs/train"));
    prepare_out_dir(&out, args.force)?;

    let data = load_dataset(&cfg)?;
    println!(
        "dataset: {} records, m={}, splits {}/{}/{}",
        data.n(),
        data.m(),
        data.train_idx.len(),
        data.val_idx.len(),
        data.test_idx.len()
    );

    let mut runs = Vec::new();
    for &seed in &seeds {
        let dir = if seeds.len() == 1 {
            out.clone()
        } else {
            let d = out.join(format!("seed_{seed}"));
            std::fs::create_dir_all(&d)?;
            d
        };
        let (report, params) = train_one(&cfg, &data, seed, &dir)?;
        println!(
            "seed {seed}: test AUC {:.4}, LogLoss {:.4} ({} non-embedding params, stopped: {})",
            report.test_auc.unwrap_or(f64::NAN),
            report.test_logloss.unwrap_or(f64::NAN),
            params,
            report.stopping_reason
        );
        runs.push(json!({
            "seed": seed,
            "test_auc": report.test_auc,
            "test_logloss": report.test_logloss,
            "best_val_auc": report.best_val_auc,
            "epochs_run": report.epochs.len(),
            "stopping_reason": report.stopping_reason,
            "non_embedding_params": params,
            "checkpoint": report.best_checkpoint,
        }));
    }
    let mean = |key: &str| -> f64 {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r[key].as_f64()).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let summary = json!({
        "command": "train",
        "model": format!("{:?}", cfg.model.kind).to_lowercase(),
        "dataset": cfg.dataset.path,
        "schema": cfg.dataset.schema,
        "seeds": seeds,
        "runs": runs,
        "mean_test_auc": mean("test_auc"),
        "mean_test_logloss": mean("test_logloss"),
    });
    write_json(&out.join("summary.json"), &summary)?;
    if seeds.len() > 1 {
        println!("mean test AUC {:.4}", summary["mean_test_auc"].as_f64().unwrap());
    }
    Ok(0)
}

fn split_indices<'a>(data: &'a EncodedDataset, split: &str) -> Result<&'a [u32]> {
    match split {
        "train" => Ok(&data.train_idx),
        "val" => Ok(&data.val_idx),
        "test" => Ok(&data.test_idx),
        other => Err(Error::config(format!("unknown split '{other}'"))),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    let data = load_dataset(&cfg)?;
    let idx = split_indices(&data, &args.split)?;
    let threads = training::effective_threads(cfg.train.threads);
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let (auc, ll) = match &model {
        AnyModel::Karsein(m) => evaluate(m, &data, idx, threads)?,
        AnyModel::KanCtr(m) => evaluate(m, &data, idx, threads)?,
        AnyModel::MlpCtr(m) => evaluate(m, &data, idx, threads)?,
    };
    println!("{} AUC {:.4}, LogLoss {:.4}", args.split, auc, ll);
    if let Some(out) = &args.out {
        prepare_out_dir(out, args.force)?;
        write_json(
            &out.join("summary.json"),
            &json!({
                "command": "evaluate",
                "checkpoint": args.checkpoint,
                "split": args.split,
                "auc": auc,
                "logloss": ll,
            }),
        )?;
    }
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.model.kind = ModelKind::Karsein;
    let sweep_seeds = match &args.seeds {
        Some(list) => parse_seed_list(list)?,
        None => vec![cfg.seed, cfg.seed + 1, cfg.seed + 2],
    };
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs/ablate"));
    prepare_out_dir(&out, args.force)?;
    let data = load_dataset(&cfg)?;

    let mut table = String::from("row,label,mean_auc,mean_logloss,params,seconds,seeds\n");
    let mut rows_json = Vec::new();
    let run_row = |label: &str,
                       towers: TowerSet,
                       pairwise: Vec<usize>,
                       seeds: &[u64],
                       table: &mut String,
                       rows_json: &mut Vec<serde_json::Value>|
     -> Result<(f64, f64)> {
        let mut c = cfg.clone();
        c.model.towers = towers;
        c.model.pairwise_layers = pairwise.clone();
        let started = Instant::now();
        let mut aucs = Vec::new();
        let mut lls = Vec::new();
        let mut params = 0usize;
        for &seed in seeds {
            let dir = out.join(format!("{}_{seed}", label.replace([' ', '{', '}', ','], "_")));
            std::fs::create_dir_all(&dir)?;
            let (report, p) = train_one(&c, &data, seed, &dir)?;
            params = p;
            aucs.push(report.test_auc.unwrap_or(f64::NAN));
            lls.push(report.test_logloss.unwrap_or(f64::NAN));
        }
        let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let mean_ll = lls.iter().sum::<f64>() / lls.len() as f64;
        let secs = started.elapsed().as_secs_f64();
        table.push_str(&format!(
            "{},{label},{mean_auc:.4},{mean_ll:.4},{params},{secs:.1},{}\n",
            rows_json.len(),
            seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("|")
        ));
        rows_json.push(json!({
            "label": label,
            "mean_auc": mean_auc,
            "mean_logloss": mean_ll,
            "per_seed_auc": aucs,
            "params": params,
            "seconds": secs,
        }));
        println!("{label}: mean AUC {mean_auc:.4}");
        Ok((mean_auc, mean_ll))
    };

    let base_seed = [cfg.seed];
    let pw = cfg.model.pairwise_layers.clone();
    run_row("full", TowerSet::Both, pw.clone(), &base_seed, &mut table, &mut rows_json)?;
    run_row(
        "explicit-only",
        TowerSet::ExplicitOnly,
        pw.clone(),
        &base_seed,
        &mut table,
        &mut rows_json,
    )?;
    run_row(
        "implicit-only",
        TowerSet::ImplicitOnly,
        pw,
        &base_seed,
        &mut table,
        &mut rows_json,
    )?;
    for (label, layers) in [
        ("pairwise=none", vec![]),
        ("pairwise={1}", vec![1]),
        ("pairwise={1,2}", vec![1, 2]),
        ("pairwise={1,2,3}", vec![1, 2, 3]),
    ] {
        run_row(
            label,
            TowerSet::ExplicitOnly,
            layers,
            &sweep_seeds,
            &mut table,
            &mut rows_json,
        )?;
    }

    std::fs::write(out.join("ablation.csv"), &table)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "ablate",
            "rows": rows_json,
            "sweep_seeds": sweep_seeds,
        }),
    )?;
    println!("ablation table written to {}", out.join("ablation.csv").display());
    Ok(0)
}

/// The three synthetic settings: (widths per target, regularization).
pub fn synthetic_settings() -> Vec<(u32, [Vec<usize>; 3], f64, [usize; 3])> {
    vec![
        (
            1,
            [vec![2, 1], vec![2, 1], vec![2, 2, 1]],
            0.01,
            [3000, 3000, 5000],
        ),
        (
            2,
            [vec![2, 4, 1], vec![2, 4, 1], vec![2, 2, 4, 1]],
            0.01,
            [3000, 3000, 5000],
        ),
        (
            3,
            [vec![2, 4, 1], vec![2, 4, 1], vec![2, 2, 4, 1]],
            0.0,
            [2000, 2000, 2000],
        ),
    ]
}

pub const SYNTHETIC_LR: f64 = 1e-3;

fn cmd_synthetic(args: SyntheticArgs) -> Result<i32> {
    let seed = args.seed.unwrap_or(42);
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs/synthetic"));
    prepare_out_dir(&out, args.force)?;

    let targets = [
        SyntheticTarget::ASquared,
        SyntheticTarget::BSquared,
        SyntheticTarget::Ab,
    ];
    let mut settings_json = Vec::new();
    for (id, widths, reg, budgets) in synthetic_settings() {
        let mut runs = Vec::new();
        for (t, target) in targets.iter().enumerate() {
            let run = fit_synthetic(*target, &widths[t], reg, SYNTHETIC_LR, budgets[t], seed)?;
            println!(
                "setting {id} {}: {}",
                run.target,
                match run.steps_to_target.converged() {
                    Some(s) => format!("{s} steps (final rmse {:.4})", run.final_rmse),
                    None => format!("failed (final rmse {:.4})", run.final_rmse),
                }
            );
            runs.push(serde_json::to_value(&run)?);
        }
        settings_json.push(json!({
            "setting": id,
            "regularization": reg,
            "runs": runs,
        }));
    }
    let summary = json!({
        "command": "synthetic",
        "seed": seed,
        "lr": SYNTHETIC_LR,
        "rmse_target": crate::kan::SYNTHETIC_RMSE_TARGET,
        "settings": settings_json,
    });
    write_json(&out.join("synthetic.json"), &summary)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(0)
}

/// Explanation artifacts for a trained model; shared by explain and prune.
fn explain_into(model: &KarseinModel<f32>, out: &Path, threshold: f64) -> Result<serde_json::Value> {
    let maps = analysis::connection_map(model);
    let heat_dir = out.join("heatmaps");
    std::fs::create_dir_all(&heat_dir)?;
    for map in &maps {
        let stem = format!("{}_layer{}", map.tower, map.layer);
        analysis::write_matrix_csv(&heat_dir.join(format!("{stem}.csv")), &map.strength)?;
        analysis::write_svg_heatmap(
            &heat_dir.join(format!("{stem}.svg")),
            &map.strength,
            &format!("connection strength: {} layer {}", map.tower, map.layer),
        )?;
    }

    let report = analysis::find_redundant(&maps, threshold);
    write_json(&out.join("redundancy.json"), &serde_json::to_value(&report)?)?;

    // activation curves for every explicit-tower input row, plus cubic fits
    let (lo, hi) = model.basis.domain();
    let xs: Vec<f64> = (0..=100).map(|i| lo + (hi - lo) * i as f64 / 100.0).collect();
    let act_dir = out.join("activations");
    std::fs::create_dir_all(&act_dir)?;
    let mut fits = Vec::new();
    let mut good_fits = 0usize;
    let mut total_fits = 0usize;
    for (l, layer) in model.explicit_tower.iter().enumerate() {
        for row in 0..layer.eff_in {
            let ys = analysis::sample_activation(model, "explicit", l, row, &xs)?;
            let stem = format!("explicit_layer{l}_row{row}");
            analysis::write_xy_csv(&act_dir.join(format!("{stem}.csv")), &xs, &ys)?;
            analysis::write_svg_curve(
                &act_dir.join(format!("{stem}.svg")),
                &xs,
                &ys,
                &format!("explicit layer {l}, input row {row}"),
            )?;
            let fit = analysis::fit_cubic(&xs, &ys)?;
            total_fits += 1;
            if fit.r2 >= 0.9 {
                good_fits += 1;
            }
            fits.push(json!({
                "tower": "explicit",
                "layer": l,
                "row": row,
                "coeffs": fit.coeffs,
                "r2": fit.r2,
            }));
        }
    }
    let fraction = good_fits as f64 / total_fits.max(1) as f64;
    write_json(&out.join("cubic_fits.json"), &json!({ "fits": fits }))?;
    Ok(json!({
        "layers": report.layers.len(),
        "redundancy": serde_json::to_value(&report)?,
        "activation_curves": total_fits,
        "cubic_r2_ge_0.9_fraction": fraction,
    }))
}

fn cmd_explain(args: ExplainArgs) -> Result<i32> {
    prepare_out_dir(&args.out, args.force)?;
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let AnyModel::Karsein(model) = model else {
        return Err(Error::config(
            "explain requires an interaction-model checkpoint".to_string(),
        ));
    };
    let summary = explain_into(&model, &args.out, args.threshold)?;
    println!(
        "explain: {} activation curves, cubic R^2>=0.9 fraction {:.2}",
        summary["activation_curves"],
        summary["cubic_r2_ge_0.9_fraction"].as_f64().unwrap_or(0.0)
    );
    write_json(
        &args.out.join("summary.json"),
        &json!({ "command": "explain", "threshold": args.threshold, "results": summary }),
    )?;
    Ok(0)
}

fn cmd_prune(args: PruneArgs) -> Result<i32> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    prepare_out_dir(&args.out, args.force)?;
    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let AnyModel::Karsein(model) = model else {
        return Err(Error::config(
            "prune requires an interaction-model checkpoint".to_string(),
        ));
    };
    let data = load_dataset(&cfg)?;

    let explain_summary = explain_into(&model, &args.out, args.threshold)?;
    let maps = analysis::connection_map(&model);
    let report = analysis::find_redundant(&maps, args.threshold);
    let tc = cfg.train.to_train_config(manifest.seed);
    let outcome =
        analysis::mask_and_finetune(&model, &report, &data, &tc, args.finetune_epochs)?;
    checkpoint::save_karsein(&args.out.join("checkpoint"), &outcome.model, manifest.seed)?;

    println!(
        "prune: {} inputs masked; test AUC {:.4} -> {:.4} after {} fine-tune epochs",
        report.total_redundant(),
        outcome.before_test_auc,
        outcome.after_test_auc,
        args.finetune_epochs
    );
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "command": "prune",
            "threshold": args.threshold,
            "masked_inputs": report.total_redundant(),
            "before_test_auc": outcome.before_test_auc,
            "after_test_auc": outcome.after_test_auc,
            "auc_drop": outcome.before_test_auc - outcome.after_test_auc,
            "finetune_epochs": args.finetune_epochs,
            "explain": explain_summary,
        }),
    )?;
    Ok(0)
}

/// The mini-model gradient check: a small random model over a synthetic
/// dataset, exact backward vs central finite differences.
pub fn gradcheck_report(seed: u64) -> Result<crate::optim::FiniteDiffReport> {
    let (data, idx) = gradcheck_dataset(seed);
    let hyper = crate::model::KarseinHyper {
        embed_dim: 4,
        kappa: 3,
        grid: 5,
        explicit_hidden: vec![4],
        implicit_hidden: vec![4],
        ..Default::default()
    };
    let mut model = KarseinModel::<f64>::new(hyper, &data.vocab_sizes(), seed)?;
    let (l1, l2) = (0.01, 1e-4);
    training::backward(&mut model, &data, &idx, l1, l2)?;
    crate::optim::finite_diff_check(
        &mut model,
        |m| training::total_loss(m, &data, &idx, l1, l2),
        1e-5,
    )
}

fn gradcheck_dataset(seed: u64) -> (EncodedDataset, Vec<u32>) {
    // m=3 synthetic records with small vocabularies and mixed labels
    let rows: Vec<Vec<String>> = (0..64)
        .map(|i| {
            let r = (i * 2654435761u64 + seed) % 97;
            vec![
                format!("a{}", r % 4),
                format!("b{}", r % 5),
                format!("c{}", r % 3),
                if r % 3 == 0 { "5" } else { "1" }.to_string(),
            ]
        })
        .collect();
    let schema = DatasetSchema {
        name: "gradcheck".to_string(),
        fields: ["f1", "f2", "f3"]
            .iter()
            .map(|n| crate::data::SchemaField {
                name: n.to_string(),
                kind: crate::data::FieldKind::Categorical,
            })
            .collect(),
        label: "rating".to_string(),
        label_kind: crate::data::LabelKind::Rating,
    };
    let data = EncodedDataset::encode(&rows, &schema, seed).unwrap();
    let idx: Vec<u32> = (0..16).collect();
    (data, idx)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    match args.precision.as_str() {
        "double" => {
            let report = gradcheck_report(args.seed)?;
            println!(
                "gradcheck (double): max rel err {:.3e} over {} coordinates (worst: {}[{}] analytic {:.6e} vs fd {:.6e})",
                report.max_rel_err,
                report.coords_checked,
                report.worst_param,
                report.worst_coord,
                report.worst_analytic,
                report.worst_fd
            );
            if report.max_rel_err <= 1e-4 {
                println!("gradcheck PASS");
                Ok(0)
            } else {
                eprintln!("gradcheck FAIL: worst parameter {}", report.worst_param);
                Ok(2)
            }
        }
        "single" => {
            // f32 smoke mode: wider perturbation, looser gate
            let (data, idx) = gradcheck_dataset(args.seed);
            let hyper = crate::model::KarseinHyper {
                embed_dim: 4,
                kappa: 3,
                grid: 5,
                explicit_hidden: vec![4],
                implicit_hidden: vec![4],
                ..Default::default()
            };
            let mut model64 =
                KarseinModel::<f32>::new(hyper, &data.vocab_sizes(), args.seed)?.cast::<f64>();
            let (l1, l2) = (0.01, 1e-4);
            training::backward(&mut model64, &data, &idx, l1, l2)?;
            let report = crate::optim::finite_diff_check(
                &mut model64,
                |m| training::total_loss(m, &data, &idx, l1, l2),
                1e-3,
            )?;
            println!(
                "gradcheck (single-precision parameters, coarse h): max rel err {:.3e}",
                report.max_rel_err
            );
            if report.max_rel_err <= 5e-2 {
                println!("gradcheck PASS");
                Ok(0)
            } else {
                eprintln!("gradcheck FAIL: worst parameter {}", report.worst_param);
                Ok(2)
            }
        }
        other => Err(Error::config(format!(
            "unknown precision '{other}' (expected double or single)"
        ))),
    }
}
