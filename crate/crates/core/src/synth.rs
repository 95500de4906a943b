//! Synthetic Gaussian-mixture datasets and the latent prior.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Equal-weight isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureSpec {
    /// K × d, one center per row.
    pub centers: Matrix,
    /// Per-mode standard deviation shared by all modes.
    pub sigma: f64,
}

impl GaussianMixtureSpec {
    pub fn new(centers: Matrix, sigma: f64) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one center".into()));
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!("mixture sigma must be > 0, got {sigma}")));
        }
        if !centers.is_finite() {
            return Err(Error::NonFinite("mixture centers".into()));
        }
        let spec = Self { centers, sigma };
        let gap = spec.min_center_distance();
        if gap <= 6.0 * sigma {
            return Err(Error::InvalidArgument(format!(
                "modes overlap: closest centers {gap} apart, need > 6·sigma = {}",
                6.0 * sigma
            )));
        }
        Ok(spec)
    }

    pub fn num_modes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// Infinite for a single mode.
    pub fn min_center_distance(&self) -> f64 {
        let k = self.num_modes();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let d = self
                    .centers
                    .row(i)
                    .iter()
                    .zip(self.centers.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// 5×5 grid on {−4, −2, 0, 2, 4}², σ = 0.1.
pub fn grid25_spec() -> GaussianMixtureSpec {
    let axis = [-4.0, -2.0, 0.0, 2.0, 4.0];
    let rows: Vec<[f64; 2]> = axis
        .iter()
        .flat_map(|&x| axis.iter().map(move |&y| [x, y]))
        .collect();
    GaussianMixtureSpec::new(Matrix::from_rows(&rows), 0.1).expect("valid grid")
}

/// Three 1-D modes at −2, 0, 2 with σ = 0.3.
pub fn tri1d_spec() -> GaussianMixtureSpec {
    GaussianMixtureSpec::new(Matrix::from_rows(&[[-2.0], [0.0], [2.0]]), 0.3).expect("valid modes")
}

/// `n` draws: a uniformly chosen center plus σ-scaled standard normal noise.
pub fn sample_data(spec: &GaussianMixtureSpec, n: usize, rng: &mut impl Rng) -> Matrix {
    let (k, d) = spec.centers.shape();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mode = rng.random_range(0..k);
        for &c in spec.centers.row(mode) {
            let e: f64 = rng.sample(StandardNormal);
            data.push(c + spec.sigma * e);
        }
    }
    Matrix::from_vec(n, d, data).expect("sized")
}

/// i.i.d. uniform on [−1, 1]^dim.
pub fn sample_prior(dim: usize, n: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..n * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Matrix::from_vec(n, dim, data).expect("sized")
}

/// Writes rows as CSV with an `x1..xd` header.
pub fn write_csv(points: &Matrix, out: &mut impl Write) -> std::io::Result<()> {
    let header: Vec<String> = (1..=points.cols()).map(|i| format!("x{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for r in 0..points.rows() {
        let cells: Vec<String> = points.row(r).iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads a CSV of numeric columns; a non-numeric first line is a header.
pub fn read_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if rows.is_empty() => continue,
            Err(e) => {
                return Err(Error::InvalidArgument(format!(
                    "csv line {}: {e}",
                    lineno + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("csv has no data rows".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("csv rows have different lengths".into()));
    }
    let n = rows.len();
    let m = Matrix::from_vec(n, d, rows.into_iter().flatten().collect())?;
    if !m.is_finite() {
        return Err(Error::NonFinite("csv data".into()));
    }
    Ok(m)
}
