//! Auto-encoder, discriminator and generator objectives.
//!
//! All expectations are batch means. Discriminator objectives are returned
//! in their maximisation form; the trainer negates them.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::neighbors;
use crate::nn::BoundMlp;

/// Discriminator outputs are clamped to `[D_CLAMP, 1 - D_CLAMP]` before logs.
pub const D_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    Log,
    Hinge,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Log => "log",
            LossVariant::Hinge => "hinge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log" => Some(LossVariant::Log),
            "hinge" => Some(LossVariant::Hinge),
            _ => None,
        }
    }
}

/// Which generator-side techniques are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorVariant {
    /// Plain GAN: no auto-encoder, no reconstruction reward, no gradient
    /// penalty, non-saturating generator loss.
    StandardGan,
    /// Gradient matching generator, no neighbor embedding.
    Gm,
    /// Neighbor embedding with the standard generator loss.
    NeOnly,
    GmNe,
}

impl GeneratorVariant {
    pub const ALL: [GeneratorVariant; 4] = [
        GeneratorVariant::StandardGan,
        GeneratorVariant::NeOnly,
        GeneratorVariant::Gm,
        GeneratorVariant::GmNe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorVariant::StandardGan => "standard_gan",
            GeneratorVariant::Gm => "gm",
            GeneratorVariant::NeOnly => "ne_only",
            GeneratorVariant::GmNe => "gm_ne",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_gm(self) -> bool {
        matches!(self, GeneratorVariant::Gm | GeneratorVariant::GmNe)
    }

    pub fn uses_ne(self) -> bool {
        matches!(self, GeneratorVariant::NeOnly | GeneratorVariant::GmNe)
    }

    pub fn uses_autoencoder(self) -> bool {
        self != GeneratorVariant::StandardGan
    }
}

/// How the two gradient terms of the matching objective are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmForm {
    /// Batch means of per-row gradient norms and of `|∇D·x|`.
    Norms,
    /// Squared distance between batch-mean gradient vectors and between
    /// batch means of `∇D·x`.
    Literal,
}

impl GmForm {
    pub fn name(self) -> &'static str {
        match self {
            GmForm::Norms => "norms",
            GmForm::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "norms" => Some(GmForm::Norms),
            "literal" => Some(GmForm::Literal),
            _ => None,
        }
    }
}

/// Every scalar knob of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub lambda_m1: f64,
    pub lambda_m2: f64,
    pub alpha: f64,
    pub loss_variant: LossVariant,
    pub generator_variant: GeneratorVariant,
    pub gm_form: GmForm,
    /// Let gradients reach the encoder through the latent affinities.
    pub latent_affinity_grad: bool,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_decay_every: u64,
    pub lr_decay_base: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_p: 0.1,
            lambda_r: 0.1,
            lambda_m1: 0.1,
            lambda_m2: 0.1,
            alpha: 0.05,
            loss_variant: LossVariant::Log,
            generator_variant: GeneratorVariant::Gm,
            gm_form: GmForm::Norms,
            latent_affinity_grad: false,
            batch_size: 128,
            latent_dim: 2,
            epochs: 500,
            lr: 0.001,
            beta1: 0.8,
            beta2: 0.999,
            lr_decay_every: 10_000,
            lr_decay_base: 0.99,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_r", self.lambda_r),
            ("lambda_m1", self.lambda_m1),
            ("lambda_m2", self.lambda_m2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(name, format!("must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be >= 2, got {}", self.batch_size));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be >= 1".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("lr", format!("must be a finite value >= 0, got {}", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, format!("must lie in [0, 1), got {v}"));
            }
        }
        if self.lr_decay_base.is_nan() || self.lr_decay_base <= 0.0 || self.lr_decay_base > 1.0 {
            return bad(
                "lr_decay_base",
                format!("must lie in (0, 1], got {}", self.lr_decay_base),
            );
        }
        Ok(())
    }

    /// λ_r as applied: zero unless the variant includes neighbor embedding.
    pub fn effective_lambda_r(&self) -> f64 {
        if self.generator_variant.uses_ne() {
            self.lambda_r
        } else {
            0.0
        }
    }

    /// α as applied: zero for the plain baseline.
    pub fn effective_alpha(&self) -> f64 {
        if self.generator_variant.uses_autoencoder() {
            self.alpha
        } else {
            0.0
        }
    }

    /// λ_p as applied: zero for the plain baseline.
    pub fn effective_lambda_p(&self) -> f64 {
        if self.generator_variant.uses_autoencoder() {
            self.lambda_p
        } else {
            0.0
        }
    }
}

/// Nodes of the regularised auto-encoder objective.
#[derive(Clone, Copy, Debug)]
pub struct AeLoss {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub neighbor: Option<NodeId>,
}

/// `mean ‖x − G(E(x))‖² + λ_r · KL(P ‖ Q)`.
///
/// The neighbor term runs on the merged sets: latents `[E(x); z]` against
/// samples `[G(E(x)); G(z)]`.
pub fn ae_loss(
    g: &mut Graph,
    encoder: &BoundMlp,
    generator: &BoundMlp,
    x: NodeId,
    z: NodeId,
    lambda_r: f64,
    latent_affinity_grad: bool,
) -> Result<AeLoss> {
    let n = g.shape(x).0;
    let encoded = encoder.forward(g, x)?;
    let recon = generator.forward(g, encoded)?;
    let diff = g.sub(x, recon)?;
    let sq = g.square(diff)?;
    let total_sq = g.sum_all(sq)?;
    let reconstruction = g.scalar_mul(1.0 / n as f64, total_sq)?;
    if lambda_r == 0.0 {
        return Ok(AeLoss {
            total: reconstruction,
            reconstruction,
            neighbor: None,
        });
    }
    let generated = generator.forward(g, z)?;
    let latents = g.concat_rows(encoded, z)?;
    let samples = g.concat_rows(recon, generated)?;
    let kl = neighbors::ne_loss(g, latents, samples, latent_affinity_grad)?;
    let weighted = g.scalar_mul(lambda_r, kl)?;
    let total = g.add(reconstruction, weighted)?;
    Ok(AeLoss {
        total,
        reconstruction,
        neighbor: Some(kl),
    })
}

/// Per-row interpolation `μ·x + (1 − μ)·gz`.
pub fn interpolate(x: &Matrix, gz: &Matrix, mu: &[f64]) -> Result<Matrix> {
    if x.shape() != gz.shape() || mu.len() != x.rows() {
        return Err(Error::Shape(format!(
            "interpolating {:?} and {:?} with {} weights",
            x.shape(),
            gz.shape(),
            mu.len()
        )));
    }
    let c = x.cols();
    let data = x
        .as_slice()
        .iter()
        .zip(gz.as_slice())
        .enumerate()
        .map(|(i, (a, b))| {
            let m = mu[i / c];
            m * a + (1.0 - m) * b
        })
        .collect();
    Matrix::from_vec(x.rows(), c, data)
}

/// Gradient penalty `mean (‖∇D(x̂)‖ − 1)²` at given interpolates.
pub fn gradient_penalty_at(g: &mut Graph, disc: &BoundMlp, x_hat: &Matrix) -> Result<NodeId> {
    let xh = g.constant(x_hat.clone())?;
    let score = disc.forward(g, xh)?;
    let grad = g.grad_as_graph(score, xh)?;
    let norm = g.row_l2_norm(grad)?;
    let gap = g.add_scalar(norm, -1.0)?;
    let sq = g.square(gap)?;
    g.mean_all(sq)
}

/// Gradient penalty with one `μ ~ U[0, 1]` drawn per row.
pub fn gp_term(
    g: &mut Graph,
    disc: &BoundMlp,
    x: &Matrix,
    gz: &Matrix,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let mu: Vec<f64> = (0..x.rows()).map(|_| rng.random::<f64>()).collect();
    let x_hat = interpolate(x, gz, &mu)?;
    gradient_penalty_at(g, disc, &x_hat)
}

/// Inputs of the discriminator phase; E and G are frozen so their outputs
/// enter as plain values.
#[derive(Clone, Debug)]
pub struct DiscriminatorBatch {
    pub real: Matrix,
    /// G(E(x))
    pub reconstructed: Matrix,
    /// G(z)
    pub generated: Matrix,
}

/// Weights of the discriminator objective.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorWeights {
    pub alpha: f64,
    pub lambda_p: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorTerms {
    pub objective: NodeId,
    pub penalty: Option<NodeId>,
}

fn clamped(g: &mut Graph, d: NodeId) -> Result<NodeId> {
    g.clamp(d, D_CLAMP, 1.0 - D_CLAMP)
}

fn mean_log(g: &mut Graph, d: NodeId) -> Result<NodeId> {
    let c = clamped(g, d)?;
    let l = g.log(c)?;
    g.mean_all(l)
}

fn mean_log_one_minus(g: &mut Graph, d: NodeId) -> Result<NodeId> {
    let c = clamped(g, d)?;
    let neg = g.scalar_mul(-1.0, c)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let l = g.log(one_minus)?;
    g.mean_all(l)
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, NodeId)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(w, t) in terms {
        if w == 0.0 {
            continue;
        }
        let s = if w == 1.0 { t } else { g.scalar_mul(w, t)? };
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.constant(Matrix::scalar(0.0)),
    }
}

fn discriminator_objective(
    g: &mut Graph,
    disc: &BoundMlp,
    batch: &DiscriminatorBatch,
    w: DiscriminatorWeights,
    variant: LossVariant,
    rng: &mut impl Rng,
) -> Result<DiscriminatorTerms> {
    let real = g.constant(batch.real.clone())?;
    let fake = g.constant(batch.generated.clone())?;
    let d_real = disc.forward(g, real)?;
    let d_fake = disc.forward(g, fake)?;
    let d_recon = if w.alpha != 0.0 {
        let recon = g.constant(batch.reconstructed.clone())?;
        Some(disc.forward(g, recon)?)
    } else {
        None
    };
    let mut terms = Vec::with_capacity(4);
    match variant {
        LossVariant::Log => {
            terms.push((1.0 - w.alpha, mean_log(g, d_real)?));
            if let Some(dr) = d_recon {
                terms.push((w.alpha, mean_log(g, dr)?));
            }
            terms.push((1.0, mean_log_one_minus(g, d_fake)?));
        }
        LossVariant::Hinge => {
            terms.push((1.0 - w.alpha, g.mean_all(d_real)?));
            if let Some(dr) = d_recon {
                terms.push((w.alpha, g.mean_all(dr)?));
            }
            terms.push((-1.0, g.mean_all(d_fake)?));
        }
    }
    let penalty = if w.lambda_p != 0.0 {
        let p = gp_term(g, disc, &batch.real, &batch.generated, rng)?;
        terms.push((-w.lambda_p, p));
        Some(p)
    } else {
        None
    };
    Ok(DiscriminatorTerms {
        objective: weighted_sum(g, &terms)?,
        penalty,
    })
}

/// `(1−α)·E log D(x) + α·E log D(G(E(x))) + E log(1 − D(G(z))) − λ_p·V_P`
pub fn d_loss_log(
    g: &mut Graph,
    disc: &BoundMlp,
    batch: &DiscriminatorBatch,
    w: DiscriminatorWeights,
    rng: &mut impl Rng,
) -> Result<DiscriminatorTerms> {
    discriminator_objective(g, disc, batch, w, LossVariant::Log, rng)
}

/// `(1−α)·E D(x) + α·E D(G(E(x))) − E D(G(z)) − λ_p·V_P`
pub fn d_loss_hinge(
    g: &mut Graph,
    disc: &BoundMlp,
    batch: &DiscriminatorBatch,
    w: DiscriminatorWeights,
    rng: &mut impl Rng,
) -> Result<DiscriminatorTerms> {
    discriminator_objective(g, disc, batch, w, LossVariant::Hinge, rng)
}

pub fn d_objective(
    g: &mut Graph,
    disc: &BoundMlp,
    batch: &DiscriminatorBatch,
    w: DiscriminatorWeights,
    variant: LossVariant,
    rng: &mut impl Rng,
) -> Result<DiscriminatorTerms> {
    discriminator_objective(g, disc, batch, w, variant, rng)
}

/// Weights of the gradient matching objective.
#[derive(Clone, Copy, Debug)]
pub struct MatchingWeights {
    pub lambda_m1: f64,
    pub lambda_m2: f64,
    pub form: GmForm,
}

/// Batch statistics of one side of the matching objective.
struct SideStats {
    mean_score: NodeId,
    grad_term: NodeId,
    dot_term: NodeId,
}

fn side_stats(g: &mut Graph, disc: &BoundMlp, x: NodeId, form: GmForm) -> Result<SideStats> {
    let score = disc.forward(g, x)?;
    let grad = g.grad_as_graph(score, x)?;
    let mean_score = g.mean_all(score)?;
    let dot = g.rowwise_dot(grad, x)?;
    let (grad_term, dot_term) = match form {
        GmForm::Norms => {
            let norms = g.row_l2_norm(grad)?;
            let abs_dot = g.abs(dot)?;
            (g.mean_all(norms)?, g.mean_all(abs_dot)?)
        }
        GmForm::Literal => (g.mean_rows(grad)?, g.mean_all(dot)?),
    };
    Ok(SideStats {
        mean_score,
        grad_term,
        dot_term,
    })
}

/// Gradient matching generator objective:
/// `|E D(x) − E D(G(z))| + λ¹·(grad term gap)² + λ²·(dot term gap)²`.
///
/// `disc` should be bound as constants so only `generated` carries
/// gradients.
pub fn g_loss_gm(
    g: &mut Graph,
    disc: &BoundMlp,
    real: NodeId,
    generated: NodeId,
    w: MatchingWeights,
) -> Result<NodeId> {
    let r = side_stats(g, disc, real, w.form)?;
    let f = side_stats(g, disc, generated, w.form)?;
    let score_gap = g.sub(r.mean_score, f.mean_score)?;
    let score_term = g.abs(score_gap)?;
    let grad_gap = g.sub(r.grad_term, f.grad_term)?;
    let grad_sq = g.square(grad_gap)?;
    // Literal form compares 1×d mean gradients; reduce to a scalar.
    let grad_term = g.sum_all(grad_sq)?;
    let dot_gap = g.sub(r.dot_term, f.dot_term)?;
    let dot_term = g.square(dot_gap)?;
    weighted_sum(
        g,
        &[(1.0, score_term), (w.lambda_m1, grad_term), (w.lambda_m2, dot_term)],
    )
}

/// Non-saturating generator loss `−E log D(G(z))`.
pub fn g_loss_standard(g: &mut Graph, disc: &BoundMlp, generated: NodeId) -> Result<NodeId> {
    let d = disc.forward(g, generated)?;
    let m = mean_log(g, d)?;
    g.scalar_mul(-1.0, m)
}
