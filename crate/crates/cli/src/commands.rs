//! Subcommand bodies. Each takes parsed flags and returns a `CliError` whose
//! exit code the caller reports.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use sngp::baselines::{build_and_train, train_ensemble, ModelVariant, Trained, UncertaintyMetric};
use sngp::checkpoint::Checkpoint;
use sngp::data::{distance_to_set, Dataset2D, EvalGrid, Surface};
use sngp::experiment::stack;
use sngp::linalg::{Matrix, RngState};
use sngp::metrics::{evaluate, spearman, MetricsReport, PredictionSet, DEFAULT_ECE_BINS};
use sngp::train::TrainReport;

use crate::config::{DatasetKind, RunConfig};
use crate::error::CliError;

pub const TRAIN_REPORT_FORMAT: &str = "sngp-train-report/1";
pub const EVAL_REPORT_FORMAT: &str = "sngp-eval-report/1";
pub const COMPARE_FORMAT: &str = "sngp-compare/1";

/// Columns of the `compare` table, in order.
pub const COMPARE_COLUMNS: [&str; 10] = [
    "variant",
    "accuracy",
    "ece",
    "nll",
    "brier",
    "auroc",
    "aupr",
    "uncertainty",
    "distance_spearman",
    "train_accuracy",
];

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p.display().to_string(), e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// `x0,x1,y0,y1,n` or `x0,x1,y0,y1,nx,ny`.
pub fn parse_grid(spec: &str) -> Result<EvalGrid, CliError> {
    let bad = || CliError::Usage(format!("bad grid spec `{spec}` (expected x0,x1,y0,y1,n[,ny])"));
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if !(5..=6).contains(&parts.len()) {
        return Err(bad());
    }
    let r: Vec<f64> = parts[..4]
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let nx: usize = parts[4].parse().map_err(|_| bad())?;
    let ny: usize = match parts.get(5) {
        Some(p) => p.parse().map_err(|_| bad())?,
        None => nx,
    };
    EvalGrid::new((r[0], r[1]), (r[2], r[3]), nx, ny).map_err(|e| CliError::Usage(e.to_string()))
}

/// Metric used when none is requested: posterior variance for GP heads,
/// otherwise the probability margin (two classes) or Dempster–Shafer.
pub fn native_metric(model: &Trained) -> UncertaintyMetric {
    if model.has_gp_head() {
        UncertaintyMetric::Variance
    } else if model.num_classes() == 2 {
        UncertaintyMetric::Margin
    } else {
        UncertaintyMetric::DempsterShafer
    }
}

pub fn gen_data(kind: DatasetKind, n: usize, seed: u64, noise: f64, out: &Path) -> Result<(), CliError> {
    let data = kind.generate(n, noise, seed)?;
    let mut w = create(out)?;
    data.write_csv(&mut w)?;
    w.into_inner()
        .map_err(|e| CliError::io(out.display().to_string(), e.into_error()))?;
    println!(
        "wrote {} rows ({} in-domain, {} out-of-domain) to {}",
        data.len() + data.num_ood(),
        data.len(),
        data.num_ood(),
        out.display()
    );
    Ok(())
}

fn train_model(
    cfg: &RunConfig,
    variant: ModelVariant,
    data: &Dataset2D,
) -> Result<(Trained, Vec<TrainReport>), CliError> {
    if variant.is_ensemble() {
        let (ens, reports) = train_ensemble(&cfg.model, &cfg.train, cfg.ensemble_size, &data.points, &data.labels)?;
        Ok((Trained::Ensemble(ens), reports))
    } else {
        let (m, report) = build_and_train(variant, &cfg.model, &cfg.train, &data.points, &data.labels)?;
        Ok((Trained::Single(m), vec![report]))
    }
}

pub fn train(cfg: &RunConfig, out: &Path, report_path: Option<&Path>) -> Result<(), CliError> {
    let data = cfg.training_data()?;
    let start = Instant::now();
    let (model, reports) = train_model(cfg, cfg.variant, &data)?;
    let secs = start.elapsed().as_secs_f64();

    let ckpt = Checkpoint {
        variant: cfg.variant,
        config_echo: cfg.echo(),
        model,
    };
    std::fs::write(out, ckpt.to_bytes()).map_err(|e| CliError::io(out.display().to_string(), e))?;

    let mut text = format!("format={TRAIN_REPORT_FORMAT}\n");
    for (k, v) in cfg.echo() {
        text.push_str(&format!("config.{k}={v}\n"));
    }
    text.push_str(&format!("train_rows={}\n", data.len()));
    for (i, r) in reports.iter().enumerate() {
        let prefix = if reports.len() > 1 { format!("member.{i}.") } else { String::new() };
        text.push_str(&format!("{prefix}seed={}\n", r.seed));
        text.push_str(&format!("{prefix}train_accuracy={}\n", r.train_accuracy));
        let final_loss = r.epoch_losses.last().copied().unwrap_or(f64::NAN);
        text.push_str(&format!("{prefix}final_loss={final_loss}\n"));
        for (e, l) in r.epoch_losses.iter().enumerate() {
            text.push_str(&format!("{prefix}epoch_loss.{e}={l}\n"));
        }
    }
    text.push_str(&format!("wall_clock_secs={secs:.3}\n"));
    let default_report = out.with_extension("report.txt");
    let report_path = report_path.unwrap_or(&default_report);
    write_text(report_path, &text)?;

    let acc = reports.iter().map(|r| r.train_accuracy).sum::<f64>() / reports.len() as f64;
    println!(
        "trained {} on {} rows in {secs:.1} s: train accuracy {acc:.4}",
        cfg.variant.tag(),
        data.len()
    );
    println!("checkpoint {}", out.display());
    println!("report {}", report_path.display());
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::read(std::io::BufReader::new(open(path)?))?)
}

pub struct SurfaceArgs<'a> {
    pub checkpoint: &'a Path,
    pub grid: EvalGrid,
    pub metric: UncertaintyMetric,
    pub out: &'a Path,
    pub pgm: Option<&'a Path>,
    pub mc_samples: usize,
    pub seed: u64,
}

pub fn surface(args: SurfaceArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(args.checkpoint)?;
    let mut rng = RngState::new(args.seed).derive("surface");
    let values = ckpt
        .model
        .uncertainty(&args.grid.points(), args.metric, args.mc_samples, &mut rng)?;
    let mut meta = vec![
        ("variant".to_string(), ckpt.variant.tag().to_string()),
        ("metric".to_string(), args.metric.name().to_string()),
    ];
    meta.extend(ckpt.config_echo.iter().map(|(k, v)| (format!("config.{k}"), v.clone())));
    let surface = Surface::new(args.grid, values, meta)?;
    let mut w = create(args.out)?;
    surface.write_csv(&mut w)?;
    drop(w);
    if let Some(pgm) = args.pgm {
        let mut w = create(pgm)?;
        surface.write_pgm(&mut w)?;
    }
    println!(
        "wrote {} grid values ({}) to {}",
        surface.values.len(),
        args.metric.name(),
        args.out.display()
    );
    Ok(())
}

fn probs_matrix(model: &Trained, x: &Matrix, mc: usize, rng: &mut RngState) -> Result<Matrix, CliError> {
    let preds = model.predict(x, mc, rng)?;
    let mut probs = Matrix::zeros(x.rows(), model.num_classes());
    for (i, p) in preds.iter().enumerate() {
        probs.row_mut(i).copy_from_slice(&p.probs);
    }
    Ok(probs)
}

/// Classification metrics on `ind`, plus OOD detection metrics when `ood` is
/// given (OOD points are the positives).
fn score_model(
    model: &Trained,
    ind: &Dataset2D,
    ood: Option<&Matrix>,
    metric: UncertaintyMetric,
    mc: usize,
    rng: &mut RngState,
) -> Result<MetricsReport, CliError> {
    let probs = probs_matrix(model, &ind.points, mc, rng)?;
    let preds = PredictionSet::new(probs, ind.labels.clone())?;
    match ood {
        Some(ood) if ood.rows() > 0 => {
            let x = stack(&ind.points, ood)?;
            let scores = model.uncertainty(&x, metric, mc, rng)?;
            let flags: Vec<bool> = (0..x.rows()).map(|i| i >= ind.len()).collect();
            Ok(evaluate(&preds, Some((&scores, &flags)), DEFAULT_ECE_BINS)?)
        }
        _ => Ok(evaluate(&preds, None, DEFAULT_ECE_BINS)?),
    }
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub ood_data: Option<&'a Path>,
    pub metric: Option<UncertaintyMetric>,
    pub out: Option<&'a Path>,
    pub mc_samples: usize,
    pub seed: u64,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(args.checkpoint)?;
    let data = Dataset2D::read_csv(open(args.data)?)?;
    let ood = match args.ood_data {
        Some(p) => {
            let d = Dataset2D::read_csv(open(p)?)?;
            // a dedicated OOD file may hold only OOD rows, or plain points
            Some(d.ood_points.unwrap_or(d.points))
        }
        None => data.ood_points.clone(),
    };
    let metric = args.metric.unwrap_or_else(|| native_metric(&ckpt.model));
    let mut rng = RngState::new(args.seed).derive("eval");
    let metrics = score_model(&ckpt.model, &data, ood.as_ref(), metric, args.mc_samples, &mut rng)?;

    let mut text = format!("format={EVAL_REPORT_FORMAT}\n");
    text.push_str(&format!("variant={}\n", ckpt.variant.tag()));
    text.push_str(&format!("uncertainty={}\n", metric.name()));
    text.push_str(&format!("n_ood={}\n", ood.as_ref().map_or(0, Matrix::rows)));
    text.push_str(&metrics.to_key_value());
    for (k, v) in &ckpt.config_echo {
        text.push_str(&format!("config.{k}={v}\n"));
    }
    match args.out {
        Some(p) => {
            write_text(p, &text)?;
            println!("{}", metrics.to_key_value().trim_end());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub struct CompareArgs<'a> {
    pub cfg: RunConfig,
    pub variants: Vec<ModelVariant>,
    pub grid: EvalGrid,
    pub out: Option<&'a Path>,
}

struct CompareRow {
    metrics: MetricsReport,
    metric: UncertaintyMetric,
    distance_spearman: f64,
    train_accuracy: f64,
    secs: f64,
}

fn compare_one(
    cfg: &RunConfig,
    variant: ModelVariant,
    train_set: &Dataset2D,
    test_set: &Dataset2D,
    grid: &Matrix,
    dist: &[f64],
) -> Result<CompareRow, CliError> {
    let start = Instant::now();
    let (model, reports) = train_model(cfg, variant, train_set)?;
    let metric = native_metric(&model);
    let mut rng = RngState::new(cfg.train.seed).derive("compare");
    let mc = cfg.train.mc_samples;
    let metrics = score_model(&model, test_set, train_set.ood_points.as_ref(), metric, mc, &mut rng)?;
    let surface = model.uncertainty(grid, metric, mc, &mut rng)?;
    // a constant surface has no rank correlation; report NaN rather than fail
    let distance_spearman = spearman(&surface, dist).unwrap_or(f64::NAN);
    Ok(CompareRow {
        metrics,
        metric,
        distance_spearman,
        train_accuracy: reports.iter().map(|r| r.train_accuracy).sum::<f64>() / reports.len() as f64,
        secs: start.elapsed().as_secs_f64(),
    })
}

pub fn compare(args: CompareArgs) -> Result<(), CliError> {
    let cfg = &args.cfg;
    let train_set = cfg.training_data()?;
    let test_set = cfg.test_data((cfg.n_per_class / 2).max(1))?;
    let grid = args.grid.points();
    let dist: Vec<f64> = grid.row_iter().map(|p| distance_to_set(p, &train_set.points)).collect();

    let rows: Vec<Result<CompareRow, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = args
            .variants
            .iter()
            .map(|&v| {
                let (train_set, test_set, grid, dist) = (&train_set, &test_set, &grid, &dist);
                s.spawn(move || compare_one(cfg, v, train_set, test_set, grid, dist))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("compare worker panicked"))
            .collect()
    });

    let mut text = format!("# format={COMPARE_FORMAT}\n");
    for (k, v) in cfg.echo() {
        text.push_str(&format!("# config.{k}={v}\n"));
    }
    text.push_str(&COMPARE_COLUMNS.join(","));
    text.push('\n');
    for (variant, row) in args.variants.iter().zip(rows) {
        let row = row?;
        let get = |k: &str| row.metrics.get(k).unwrap_or("NaN").to_string();
        let cells = [
            variant.tag().to_string(),
            get("accuracy"),
            get("ece"),
            get("nll"),
            get("brier"),
            get("auroc"),
            get("aupr"),
            row.metric.name().to_string(),
            row.distance_spearman.to_string(),
            row.train_accuracy.to_string(),
        ];
        text.push_str(&cells.join(","));
        text.push('\n');
        eprintln!("{}: trained and scored in {:.1} s", variant.tag(), row.secs);
    }
    match args.out {
        Some(p) => {
            write_text(p, &text)?;
            println!("wrote {} rows to {}", args.variants.len(), p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
