//! Neighbor-embedding regularizer: symmetric Student-t affinities over a
//! batch and the KL divergence between the latent-side and data-side
//! affinity distributions.
//!
//! The kernel for a pair is `(1 + ‖a − b‖² / 2σ²)⁻¹` where σ² is the
//! variance of all pairwise distances of the same point set, so the
//! affinities are invariant to a uniform rescaling of the points.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor for the pairwise-distance variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Floor for data-side affinities inside the log.
pub const Q_FLOOR: f64 = 1e-12;
/// Added under the square root of squared distances.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityKind {
    LatentP,
    DataQ,
}

/// Joint affinities: symmetric, zero diagonal, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub values: Matrix,
    pub kind: AffinityKind,
}

fn require_pairs(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairwise affinities need at least 2 points, got {n}"
        )));
    }
    Ok(())
}

/// Population variance of `{‖x_i − x_j‖ : i < j}`, floored at
/// [`VARIANCE_FLOOR`].
pub fn pairwise_distance_variance(points: &Matrix) -> Result<f64> {
    let n = points.rows();
    require_pairs(n)?;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    let m = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / m;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / m;
    Ok(var.max(VARIANCE_FLOOR))
}

/// n×n squared Euclidean distances, built column by column so every entry
/// is an exact sum of squares.
fn squared_distances(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (n, d) = g.shape(x);
    let ones_row = g.constant(Matrix::ones(1, n))?;
    let mut acc: Option<NodeId> = None;
    for k in 0..d {
        let mut sel = Matrix::zeros(d, 1);
        sel[(k, 0)] = 1.0;
        let sel = g.constant(sel)?;
        let col = g.matmul(x, sel)?;
        let spread = g.matmul(col, ones_row)?;
        let spread_t = g.transpose(spread)?;
        let diff = g.sub(spread, spread_t)?;
        let sq = g.square(diff)?;
        acc = Some(match acc {
            Some(a) => g.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc.expect("d >= 1"))
}

fn off_diagonal(n: usize) -> Matrix {
    let mut m = Matrix::ones(n, n);
    for i in 0..n {
        m[(i, i)] = 0.0;
    }
    m
}

/// 1×1 node holding the floored pairwise-distance variance.
fn distance_variance_node(g: &mut Graph, sq_dist: NodeId) -> Result<NodeId> {
    let n = g.shape(sq_dist).0;
    let pairs = (n * (n - 1)) as f64;
    let mut shift = Matrix::filled(n, n, DIST_EPS);
    for i in 0..n {
        shift[(i, i)] = 1.0;
    }
    let shift = g.constant(shift)?;
    let mask = g.constant(off_diagonal(n))?;
    let shifted = g.add(sq_dist, shift)?;
    let dist = g.sqrt(shifted)?;
    let dist = g.mul(dist, mask)?;
    let total = g.sum_all(dist)?;
    let mean = g.scalar_mul(1.0 / pairs, total)?;
    let mean_fill = g.scale_by(mask, mean)?;
    let centered = g.sub(dist, mean_fill)?;
    let sq = g.square(centered)?;
    let ss = g.sum_all(sq)?;
    let var = g.scalar_mul(1.0 / pairs, ss)?;
    if g.value(var).item() < VARIANCE_FLOOR {
        return g.constant(Matrix::scalar(VARIANCE_FLOOR));
    }
    Ok(var)
}

/// Row-normalised Student-t kernel, `p_{j|i}` in row i.
fn conditional_node(g: &mut Graph, sq_dist: NodeId, variance: NodeId) -> Result<NodeId> {
    let n = g.shape(sq_dist).0;
    let two_var = g.scalar_mul(2.0, variance)?;
    let inv = g.reciprocal(two_var)?;
    let scaled = g.scale_by(sq_dist, inv)?;
    let shifted = g.add_scalar(scaled, 1.0)?;
    let kernel = g.reciprocal(shifted)?;
    let mask = g.constant(off_diagonal(n))?;
    let kernel = g.mul(kernel, mask)?;
    let ones_col = g.constant(Matrix::ones(n, 1))?;
    let row_sums = g.matmul(kernel, ones_col)?;
    let inv_sums = g.reciprocal(row_sums)?;
    g.mul_col_broadcast(kernel, inv_sums)
}

/// Joint affinities of the rows of `points` as a graph node.
pub fn joint_affinity_node(g: &mut Graph, points: NodeId) -> Result<NodeId> {
    let n = g.shape(points).0;
    require_pairs(n)?;
    let sq = squared_distances(g, points)?;
    let var = distance_variance_node(g, sq)?;
    let cond = conditional_node(g, sq, var)?;
    let cond_t = g.transpose(cond)?;
    let sym = g.add(cond, cond_t)?;
    g.scalar_mul(1.0 / (2 * n) as f64, sym)
}

/// `p_{j|i}` for a given σ².
pub fn conditional_affinities(points: &Matrix, sigma2: f64) -> Result<Matrix> {
    require_pairs(points.rows())?;
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma² must be > 0, got {sigma2}")));
    }
    let mut g = Graph::new();
    let x = g.constant(points.clone())?;
    let sq = squared_distances(&mut g, x)?;
    let var = g.constant(Matrix::scalar(sigma2))?;
    let cond = conditional_node(&mut g, sq, var)?;
    Ok(g.value(cond).clone())
}

/// Joint affinities with σ² taken from the same point set.
pub fn joint_affinities(points: &Matrix, kind: AffinityKind) -> Result<AffinityMatrix> {
    let mut g = Graph::new();
    let x = g.constant(points.clone())?;
    let p = joint_affinity_node(&mut g, x)?;
    Ok(AffinityMatrix {
        values: g.value(p).clone(),
        kind,
    })
}

/// `KL(P ‖ Q)` with P from `latents` and Q from `generated`, both n rows.
///
/// When `latent_grad` is false the latent side is detached: P is a constant
/// and gradients only reach the generated points.
pub fn ne_loss(g: &mut Graph, latents: NodeId, generated: NodeId, latent_grad: bool) -> Result<NodeId> {
    let n = g.shape(latents).0;
    let m = g.shape(generated).0;
    if n != m {
        return Err(Error::Shape(format!(
            "neighbor embedding needs matching batches, got {n} latents and {m} samples"
        )));
    }
    require_pairs(n)?;
    let latents = if latent_grad { latents } else { g.detach(latents)? };
    let p = joint_affinity_node(g, latents)?;
    let q = joint_affinity_node(g, generated)?;
    let eye = g.constant(Matrix::identity(n))?;
    // Diagonal terms have p = 0; shifting by I keeps their logs at 0.
    let p_shift = g.add(p, eye)?;
    let log_p = g.log(p_shift)?;
    let q_shift = g.add(q, eye)?;
    let q_floor = g.clamp(q_shift, Q_FLOOR, f64::MAX)?;
    let log_q = g.log(q_floor)?;
    let ratio = g.sub(log_p, log_q)?;
    let terms = g.mul(p, ratio)?;
    g.sum_all(terms)
}

/// Value-only KL between the joint affinities of two point sets.
pub fn ne_loss_value(latents: &Matrix, generated: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(latents.clone())?;
    let x = g.constant(generated.clone())?;
    let kl = ne_loss(&mut g, z, x, false)?;
    Ok(g.value(kl).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_have_unit_conditionals() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]);
        let c = conditional_affinities(&pts, 0.7).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        let j = joint_affinities(&pts, AffinityKind::LatentP).unwrap();
        assert!((j.values[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((j.values[(1, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn collinear_middle_row_is_split_evenly() {
        let pts = Matrix::from_rows(&[[0.0], [1.0], [2.0]]);
        let c = conditional_affinities(&pts, 1.0).unwrap();
        assert!((c[(1, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(c[(1, 1)], 0.0);
        assert!((c[(1, 2)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn conditional_rejects_bad_inputs() {
        assert!(conditional_affinities(&Matrix::ones(1, 2), 1.0).is_err());
        assert!(conditional_affinities(&Matrix::ones(3, 2), 0.0).is_err());
    }

    #[test]
    fn variance_examples() {
        let two = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(pairwise_distance_variance(&two).unwrap(), VARIANCE_FLOOR);
        let line = Matrix::from_rows(&[[0.0], [1.0], [2.0]]);
        assert!((pairwise_distance_variance(&line).unwrap() - 2.0 / 9.0).abs() < 1e-15);
        let scaled = line.map(|v| 3.0 * v);
        assert!((pairwise_distance_variance(&scaled).unwrap() - 2.0).abs() < 1e-14);
        assert!(pairwise_distance_variance(&Matrix::ones(1, 1)).is_err());
    }

    #[test]
    fn variance_node_agrees_with_direct_value() {
        let pts = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1], [1.1, 1.9]]);
        let mut g = Graph::new();
        let x = g.constant(pts.clone()).unwrap();
        let sq = squared_distances(&mut g, x).unwrap();
        let v = distance_variance_node(&mut g, sq).unwrap();
        let want = pairwise_distance_variance(&pts).unwrap();
        assert!((g.value(v).item() - want).abs() < 1e-11);
    }

    #[test]
    fn two_point_kl_is_zero() {
        let z = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.5]]);
        let x = Matrix::from_rows(&[[5.0, 1.0], [-2.0, 3.0]]);
        assert!(ne_loss_value(&z, &x).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::ones(3, 2)).unwrap();
        let x = g.constant(Matrix::ones(4, 2)).unwrap();
        assert!(matches!(ne_loss(&mut g, z, x, false), Err(Error::Shape(_))));
    }
}
