//! Mode registration, total-variation scores and discriminator diagnostics.

use std::io::Write;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Mlp;
use crate::par;
use crate::synth::GaussianMixtureSpec;

/// A sample registers to a mode within this many σ of its center.
pub const REGISTRATION_SIGMAS: f64 = 3.0;
/// Modes with fewer registered samples count as missed.
pub const MIN_MODE_SAMPLES: usize = 20;
/// Generated samples per evaluation.
pub const EVAL_SAMPLES: usize = 2000;

/// Nearest-center assignment, `None` when the nearest center is farther
/// than [`REGISTRATION_SIGMAS`]·σ. Ties go to the lower index.
pub fn register_samples(samples: &Matrix, spec: &GaussianMixtureSpec) -> Result<Vec<Option<usize>>> {
    if samples.cols() != spec.dim() {
        return Err(Error::Shape(format!(
            "samples have {} columns, mixture is {}-dimensional",
            samples.cols(),
            spec.dim()
        )));
    }
    let radius2 = (REGISTRATION_SIGMAS * spec.sigma).powi(2);
    let k = spec.num_modes();
    Ok((0..samples.rows())
        .map(|r| {
            let p = samples.row(r);
            let mut best = (usize::MAX, f64::INFINITY);
            for c in 0..k {
                let d2: f64 = p
                    .iter()
                    .zip(spec.centers.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            (best.1 <= radius2).then_some(best.0)
        })
        .collect())
}

pub fn mode_counts(assignment: &[Option<usize>], num_modes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_modes];
    for m in assignment.iter().flatten() {
        counts[*m] += 1;
    }
    counts
}

/// Registered-mode proportions of a reference set (usually the training
/// data). Uniform when nothing registers.
pub fn reference_proportions(data: &Matrix, spec: &GaussianMixtureSpec) -> Result<Vec<f64>> {
    let counts = mode_counts(&register_samples(data, spec)?, spec.num_modes());
    let total: usize = counts.iter().sum();
    let k = spec.num_modes();
    Ok(if total == 0 {
        vec![1.0 / k as f64; k]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeReport {
    pub covered_modes: usize,
    pub registered_points: usize,
    pub per_mode_counts: Vec<usize>,
    /// Half the L1 distance to the uniform mode law; `None` when nothing
    /// registered.
    pub tv_true: Option<f64>,
    /// Half the L1 distance to the reference mode law.
    pub tv_differential: Option<f64>,
    pub n_generated: usize,
    pub seed: u64,
}

fn half_l1(counts: &[usize], total: usize, target: impl Fn(usize) -> f64) -> f64 {
    0.5 * counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (c as f64 / total as f64 - target(k)).abs())
        .sum::<f64>()
}

pub fn mode_report(
    samples: &Matrix,
    spec: &GaussianMixtureSpec,
    reference: &[f64],
    seed: u64,
) -> Result<ModeReport> {
    let k = spec.num_modes();
    if reference.len() != k {
        return Err(Error::Shape(format!(
            "reference has {} proportions for {k} modes",
            reference.len()
        )));
    }
    let counts = mode_counts(&register_samples(samples, spec)?, k);
    let registered: usize = counts.iter().sum();
    let covered = counts.iter().filter(|&&c| c >= MIN_MODE_SAMPLES).count();
    let (tv_true, tv_diff) = if registered == 0 {
        (None, None)
    } else {
        (
            Some(half_l1(&counts, registered, |_| 1.0 / k as f64)),
            Some(half_l1(&counts, registered, |i| reference[i])),
        )
    };
    Ok(ModeReport {
        covered_modes: covered,
        registered_points: registered,
        per_mode_counts: counts,
        tv_true,
        tv_differential: tv_diff,
        n_generated: samples.rows(),
        seed,
    })
}

pub const REPORT_CSV_HEADER: &str =
    "seed,covered_modes,registered_points,tv_true,tv_differential,n_generated,per_mode_counts";

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_else(|| "undefined".to_string())
}

impl ModeReport {
    pub fn csv_row(&self) -> String {
        let counts: Vec<String> = self.per_mode_counts.iter().map(|c| c.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.seed,
            self.covered_modes,
            self.registered_points,
            fmt_opt(self.tv_true),
            fmt_opt(self.tv_differential),
            self.n_generated,
            counts.join(";")
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "covered modes {}/{} | registered points {}/{} | TV(true) {} | TV(differential) {}",
            self.covered_modes,
            self.per_mode_counts.len(),
            self.registered_points,
            self.n_generated,
            self.tv_true.map_or("undefined".into(), |v| format!("{v:.4}")),
            self.tv_differential.map_or("undefined".into(), |v| format!("{v:.4}")),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSample {
    pub point: [f64; 2],
    pub grad: [f64; 2],
}

/// Axis-aligned lattice bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self { x: (lo, hi), y: (lo, hi) }
    }
}

fn lattice_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Input gradients of `disc` at the points of a batch.
pub fn input_gradients(disc: &Mlp, points: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let d = disc.bind(&mut g, false)?;
    let x = g.constant(points.clone())?;
    let score = d.forward(&mut g, x)?;
    let grad = g.grad_as_graph(score, x)?;
    Ok(g.value(grad).clone())
}

const LATTICE_CHUNK: usize = 256;

/// `∇ₓD` on a `resolution.0 × resolution.1` lattice, row-major in y then x.
pub fn gradient_map(disc: &Mlp, bounds: Bounds, resolution: (usize, usize)) -> Result<Vec<GradientSample>> {
    if disc.in_dim() != 2 {
        return Err(Error::Shape(format!(
            "gradient maps need a 2-D discriminator, got input dim {}",
            disc.in_dim()
        )));
    }
    let (nx, ny) = resolution;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("lattice resolution must be >= 1".into()));
    }
    let xs = lattice_axis(bounds.x.0, bounds.x.1, nx);
    let ys = lattice_axis(bounds.y.0, bounds.y.1, ny);
    let points: Vec<[f64; 2]> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .collect();
    let chunks: Vec<Vec<[f64; 2]>> = points.chunks(LATTICE_CHUNK).map(|c| c.to_vec()).collect();
    let fields = par::map(chunks, |chunk| -> Result<Vec<GradientSample>> {
        let grads = input_gradients(disc, &Matrix::from_rows(&chunk))?;
        Ok(chunk
            .iter()
            .enumerate()
            .map(|(i, &p)| GradientSample {
                point: p,
                grad: [grads[(i, 0)], grads[(i, 1)]],
            })
            .collect())
    });
    let mut out = Vec::with_capacity(points.len());
    for f in fields {
        out.extend(f?);
    }
    Ok(out)
}

/// `(x, D(x))` along a 1-D lattice.
pub fn score_curve_1d(disc: &Mlp, xs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if disc.in_dim() != 1 {
        return Err(Error::Shape(format!(
            "score curves need a 1-D discriminator, got input dim {}",
            disc.in_dim()
        )));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let scores = disc.eval(&Matrix::from_vec(xs.len(), 1, xs.to_vec())?)?;
    Ok(xs.iter().copied().zip(scores.as_slice().iter().copied()).collect())
}

pub fn write_gradient_csv(field: &[GradientSample], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "x,y,gx,gy")?;
    for s in field {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_float(s.point[0]),
            fmt_float(s.point[1]),
            fmt_float(s.grad[0]),
            fmt_float(s.grad[1])
        )?;
    }
    Ok(())
}

pub fn write_score_csv(curve: &[(f64, f64)], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "x,score")?;
    for (x, s) in curve {
        writeln!(out, "{},{}", fmt_float(*x), fmt_float(*s))?;
    }
    Ok(())
}
