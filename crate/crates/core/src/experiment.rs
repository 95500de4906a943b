//! Run drivers behind the command-line tool: multi-seed training,
//! evaluation of checkpoints, gradient maps and the ablation sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Bounds, ModeReport};
use crate::objectives::GeneratorVariant;
use crate::par;
use crate::train::{self, TrainSetup, Trainer, METRICS_CSV_HEADER};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ABORTED_SUFFIX: &str = ".aborted";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: Option<ModeReport>,
    /// Set when the run aborted; the partial checkpoint carries
    /// [`ABORTED_SUFFIX`].
    pub error: Option<String>,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Directory of one seed: the output directory itself for a single seed,
/// `seed_<n>` below it otherwise.
pub fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    if cfg.seeds.len() == 1 {
        cfg.out_dir.clone()
    } else {
        cfg.out_dir.join(format!("seed_{seed}"))
    }
}

pub fn setup_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<TrainSetup> {
    Ok(TrainSetup {
        hp: cfg.hp_for_seed(seed),
        arch: cfg.architecture()?,
        data: cfg.training_data(seed)?,
        spec: cfg.mixture()?,
        eval_every: cfg.eval_every,
        log_every: cfg.log_every,
    })
}

fn write_metrics(path: &Path, rows: &[train::MetricRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(path: &Path, report: &ModeReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", eval::REPORT_CSV_HEADER)?;
    writeln!(w, "{}", report.csv_row())?;
    w.flush()?;
    Ok(())
}

/// Trains one seed into `dir`. Setup errors are returned; training errors
/// are recorded in the result after the partial state is written.
pub fn train_one(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(dir)?;
    let mut own = cfg.clone();
    own.seeds = vec![seed];
    own.hp.seed = seed;
    own.out_dir = dir.to_path_buf();
    std::fs::write(dir.join(CONFIG_FILE), own.to_text())?;
    let mut trainer = Trainer::new(setup_for_seed(cfg, seed)?)?;
    let outcome = trainer.run();
    let hash = cfg.config_hash(seed);
    write_metrics(&dir.join(METRICS_FILE), trainer.metrics())?;
    match outcome {
        Ok(()) => {
            let out = trainer.into_outcome();
            Checkpoint::new(out.model, hash).save(&dir.join(CHECKPOINT_FILE))?;
            if let Some(r) = &out.report {
                write_report(&dir.join(REPORT_FILE), r)?;
            }
            Ok(RunResult {
                seed,
                dir: dir.to_path_buf(),
                report: out.report,
                error: None,
            })
        }
        Err(e) => {
            let name = format!("{CHECKPOINT_FILE}{ABORTED_SUFFIX}");
            Checkpoint::new(trainer.model().clone(), hash).save(&dir.join(name))?;
            Ok(RunResult {
                seed,
                dir: dir.to_path_buf(),
                report: None,
                error: Some(e.to_string()),
            })
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const SUMMARY_HEADER: &str = "run,covered_modes,registered_points,tv_true,tv_differential";

/// Per-run rows followed by `mean` and `std` rows over successful runs
/// with a report.
pub fn summary_csv(runs: &[RunResult]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    let mut cols: [Vec<f64>; 4] = Default::default();
    for r in runs {
        match &r.report {
            Some(rep) => {
                let vals = [
                    rep.covered_modes as f64,
                    rep.registered_points as f64,
                    rep.tv_true.unwrap_or(f64::NAN),
                    rep.tv_differential.unwrap_or(f64::NAN),
                ];
                for (c, v) in cols.iter_mut().zip(vals) {
                    c.push(v);
                }
                s.push_str(&format!(
                    "seed_{},{},{},{},{}\n",
                    r.seed,
                    rep.covered_modes,
                    rep.registered_points,
                    eval::fmt_float(vals[2]),
                    eval::fmt_float(vals[3])
                ));
            }
            None => s.push_str(&format!("seed_{},aborted,,,\n", r.seed)),
        }
    }
    let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let cells: Vec<String> = stats
            .iter()
            .map(|&(m, sd)| eval::fmt_float(if pick == 0 { m } else { sd }))
            .collect();
        s.push_str(&format!("{label},{}\n", cells.join(",")));
    }
    s
}

fn run_jobs(jobs: Vec<(ExperimentConfig, u64, PathBuf)>) -> Vec<Result<RunResult>> {
    par::map_capped(jobs, par::thread_cap(), |(cfg, seed, dir)| train_one(&cfg, seed, &dir))
}

/// Trains every seed of `cfg`, writing one directory per seed and, for
/// several seeds, a summary.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let jobs = cfg
        .seeds
        .iter()
        .map(|&s| (cfg.clone(), s, run_dir(cfg, s)))
        .collect();
    let runs = run_jobs(jobs).into_iter().collect::<Result<Vec<_>>>()?;
    if cfg.seeds.len() > 1 {
        std::fs::write(cfg.out_dir.join(SUMMARY_FILE), summary_csv(&runs))?;
    }
    Ok(runs)
}

/// Evaluates a checkpoint with the evaluation stream of `seed`.
pub fn cmd_eval(checkpoint: &Path, cfg: &ExperimentConfig, seed: u64, force: bool) -> Result<ModeReport> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_hash(cfg.config_hash(seed), force)?;
    let spec = cfg
        .mixture()?
        .ok_or_else(|| Error::Config("dataset: evaluation needs a mixture (centers and sigma)".into()))?;
    if ck.model.generator.out_dim() != spec.dim() {
        return Err(Error::Shape(format!(
            "checkpoint generates {}-d points, mixture is {}-d",
            ck.model.generator.out_dim(),
            spec.dim()
        )));
    }
    let reference = eval::reference_proportions(&cfg.training_data(seed)?, &spec)?;
    train::evaluate(&ck.model, &spec, &reference, seed)
}

/// Writes the discriminator's input-gradient field (2-D data) or score
/// curve (1-D data) of a checkpoint as CSV. Returns the row count.
pub fn cmd_gradmap(checkpoint: &Path, bounds: Bounds, resolution: (usize, usize), out: &mut impl Write) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let d = &ck.model.discriminator;
    match d.in_dim() {
        1 => {
            let n = resolution.0;
            if n < 2 {
                return Err(Error::InvalidArgument("score curve needs at least 2 points".into()));
            }
            let xs: Vec<f64> = (0..n)
                .map(|i| bounds.x.0 + (bounds.x.1 - bounds.x.0) * i as f64 / (n - 1) as f64)
                .collect();
            let curve = eval::score_curve_1d(d, &xs)?;
            eval::write_score_csv(&curve, out)?;
            Ok(curve.len())
        }
        2 => {
            let field = eval::gradient_map(d, bounds, resolution)?;
            eval::write_gradient_csv(&field, out)?;
            Ok(field.len())
        }
        k => Err(Error::InvalidArgument(format!("gradient maps need 1-d or 2-d data, got {k}-d"))),
    }
}

/// One arm of the ablation sweep.
#[derive(Clone, Debug)]
pub struct ArmSummary {
    pub variant: GeneratorVariant,
    pub runs: Vec<RunResult>,
}

pub const ABLATION_HEADER: &str = "arm,runs,aborted,covered_mean,covered_std,registered_mean,registered_std,tv_true_mean,tv_true_std";

impl ArmSummary {
    pub fn csv_row(&self) -> String {
        let reports: Vec<&ModeReport> = self.runs.iter().filter_map(|r| r.report.as_ref()).collect();
        let covered: Vec<f64> = reports.iter().map(|r| r.covered_modes as f64).collect();
        let registered: Vec<f64> = reports.iter().map(|r| r.registered_points as f64).collect();
        let tv: Vec<f64> = reports.iter().filter_map(|r| r.tv_true).collect();
        let aborted = self.runs.iter().filter(|r| !r.succeeded()).count();
        let mut cells = vec![self.variant.name().to_string(), self.runs.len().to_string(), aborted.to_string()];
        for v in [covered, registered, tv] {
            let (m, s) = mean_std(&v);
            cells.push(eval::fmt_float(m));
            cells.push(eval::fmt_float(s));
        }
        cells.join(",")
    }
}

/// Runs every generator variant over every seed, each arm under
/// `<out_dir>/<variant>`, and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<ArmSummary>> {
    cfg.validate()?;
    let arms: Vec<ExperimentConfig> = GeneratorVariant::ALL
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.hp.generator_variant = v;
            c.out_dir = cfg.out_dir.join(v.name());
            c
        })
        .collect();
    let jobs = arms
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |&s| (c.clone(), s, run_dir(c, s))))
        .collect();
    let mut results = run_jobs(jobs).into_iter();
    let mut out = Vec::new();
    for c in &arms {
        let runs = results
            .by_ref()
            .take(c.seeds.len())
            .collect::<Result<Vec<_>>>()?;
        if c.seeds.len() > 1 {
            std::fs::write(c.out_dir.join(SUMMARY_FILE), summary_csv(&runs))?;
        }
        out.push(ArmSummary {
            variant: c.hp.generator_variant,
            runs,
        });
    }
    let mut text = format!("{ABLATION_HEADER}\n");
    for a in &out {
        text.push_str(&a.csv_row());
        text.push('\n');
    }
    std::fs::write(cfg.out_dir.join("ablation.csv"), text)?;
    Ok(out)
}
