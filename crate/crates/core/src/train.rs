//! Model state, the three-phase training step and the epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::eval::{self, ModeReport, EVAL_SAMPLES};
use crate::matrix::Matrix;
use crate::nn::{mlp_specs, Activation, Adam, LayerSpec, Mlp};
use crate::objectives::{
    self, DiscriminatorBatch, DiscriminatorWeights, HyperParams, MatchingWeights,
};
use crate::synth::{sample_prior, GaussianMixtureSpec};

/// XOR-ed into the run seed for the evaluation stream.
pub const EVAL_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

/// Layer layouts of the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub encoder: Vec<LayerSpec>,
    pub generator: Vec<LayerSpec>,
    pub discriminator: Vec<LayerSpec>,
}

impl Architecture {
    /// Two hidden layers of width 64 everywhere; linear E/G outputs,
    /// sigmoid D output.
    pub fn grid(data_dim: usize, latent_dim: usize) -> Self {
        Self {
            encoder: mlp_specs(data_dim, 64, 2, latent_dim, Activation::None),
            generator: mlp_specs(latent_dim, 64, 2, data_dim, Activation::None),
            discriminator: mlp_specs(data_dim, 64, 2, 1, Activation::Sigmoid),
        }
    }

    /// Width-4 networks: three-layer E and G, two-layer D.
    pub fn small(data_dim: usize, latent_dim: usize) -> Self {
        Self {
            encoder: mlp_specs(data_dim, 4, 2, latent_dim, Activation::None),
            generator: mlp_specs(latent_dim, 4, 2, data_dim, Activation::None),
            discriminator: mlp_specs(data_dim, 4, 1, 1, Activation::Sigmoid),
        }
    }

    /// Grid networks for 2-D data, small ones for 1-D.
    pub fn for_data_dim(data_dim: usize, latent_dim: usize) -> Self {
        if data_dim == 1 {
            Self::small(data_dim, latent_dim)
        } else {
            Self::grid(data_dim, latent_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ends = |s: &[LayerSpec]| (s.first().map(|l| l.in_dim), s.last().map(|l| l.out_dim));
        let (e_in, e_out) = ends(&self.encoder);
        let (g_in, g_out) = ends(&self.generator);
        let (d_in, d_out) = ends(&self.discriminator);
        if e_in.is_none() || g_in.is_none() || d_in.is_none() {
            return Err(Error::InvalidArgument("every network needs a layer".into()));
        }
        if e_out != g_in || g_out != e_in || d_in != e_in || d_out != Some(1) {
            return Err(Error::Shape(format!(
                "E {e_in:?}->{e_out:?}, G {g_in:?}->{g_out:?}, D {d_in:?}->{d_out:?} do not fit together"
            )));
        }
        if self.discriminator.last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::InvalidArgument("discriminator output must be sigmoid".into()));
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.encoder[0].in_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.generator[0].in_dim
    }
}

/// Encoder, generator, discriminator and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct GnGanModel {
    pub encoder: Mlp,
    pub generator: Mlp,
    pub discriminator: Mlp,
    /// Joint state over E then G parameters.
    pub opt_ae: Adam,
    pub opt_d: Adam,
    pub opt_g: Adam,
    pub iteration: u64,
}

/// Loss values and gradient norms of one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// Iterations completed including this one.
    pub iteration: u64,
    /// `None` when the variant has no auto-encoder phase.
    pub v_ae: Option<f64>,
    pub reconstruction: Option<f64>,
    pub v_r: Option<f64>,
    /// Maximisation objective of the discriminator.
    pub v_d: f64,
    pub v_p: Option<f64>,
    pub v_g: f64,
    pub lr: f64,
    pub grad_norm_ae: Option<f64>,
    pub grad_norm_d: f64,
    pub grad_norm_g: f64,
}

fn collect_grads(grads: &mut Gradients, nodes: &[NodeId], graph: &Graph) -> Vec<Matrix> {
    nodes
        .iter()
        .map(|&n| {
            grads.remove(n).unwrap_or_else(|| {
                let (r, c) = graph.shape(n);
                Matrix::zeros(r, c)
            })
        })
        .collect()
}

fn grad_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

impl GnGanModel {
    pub fn init(arch: &Architecture, hp: &HyperParams, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let encoder = Mlp::init(&arch.encoder, rng)?;
        let generator = Mlp::init(&arch.generator, rng)?;
        let discriminator = Mlp::init(&arch.discriminator, rng)?;
        let ae_params: Vec<&Matrix> = encoder.params().into_iter().chain(generator.params()).collect();
        let opt_ae = Adam::for_params(&ae_params, hp.lr, hp.beta1, hp.beta2);
        let opt_d = Adam::new(&discriminator, hp.lr, hp.beta1, hp.beta2);
        let opt_g = Adam::new(&generator, hp.lr, hp.beta1, hp.beta2);
        Ok(Self {
            encoder,
            generator,
            discriminator,
            opt_ae,
            opt_d,
            opt_g,
            iteration: 0,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder: self.encoder.specs(),
            generator: self.generator.specs(),
            discriminator: self.discriminator.specs(),
        }
    }

    /// `lr` of every optimizer for the current iteration.
    pub fn apply_lr_schedule(&mut self, hp: &HyperParams) {
        for opt in [&mut self.opt_ae, &mut self.opt_d, &mut self.opt_g] {
            opt.decay_lr(self.iteration, hp.lr_decay_every, hp.lr_decay_base);
        }
    }

    /// Updates E and G on the regularised auto-encoder objective.
    /// Returns (total, reconstruction, KL, gradient norm).
    pub fn ae_phase(
        &mut self,
        x: &Matrix,
        z: &Matrix,
        hp: &HyperParams,
    ) -> Result<(f64, f64, Option<f64>, f64)> {
        let mut g = Graph::new();
        let e = self.encoder.bind(&mut g, true)?;
        let gen = self.generator.bind(&mut g, true)?;
        let xn = g.constant(x.clone())?;
        let zn = g.constant(z.clone())?;
        let loss = objectives::ae_loss(
            &mut g,
            &e,
            &gen,
            xn,
            zn,
            hp.effective_lambda_r(),
            hp.latent_affinity_grad,
        )?;
        let total = check_finite(g.value(loss.total).item(), "auto-encoder loss")?;
        let recon = g.value(loss.reconstruction).item();
        let kl = loss.neighbor.map(|n| g.value(n).item());
        let nodes: Vec<NodeId> = e.param_nodes().into_iter().chain(gen.param_nodes()).collect();
        let mut grads = g.backward(loss.total)?;
        let grads = collect_grads(&mut grads, &nodes, &g);
        let norm = grad_norm(&grads);
        let mut params: Vec<&mut Matrix> = self
            .encoder
            .params_mut()
            .into_iter()
            .chain(self.generator.params_mut())
            .collect();
        self.opt_ae.step(&mut params, &grads)?;
        Ok((total, recon, kl, norm))
    }

    /// Ascends the discriminator objective with E and G frozen.
    /// Returns (objective, penalty, gradient norm).
    pub fn d_phase(
        &mut self,
        x: &Matrix,
        z: &Matrix,
        hp: &HyperParams,
        rng: &mut impl Rng,
    ) -> Result<(f64, Option<f64>, f64)> {
        let alpha = hp.effective_alpha();
        let generated = self.generator.eval(z)?;
        let reconstructed = if alpha != 0.0 {
            self.generator.eval(&self.encoder.eval(x)?)?
        } else {
            Matrix::zeros(x.rows(), x.cols())
        };
        let batch = DiscriminatorBatch {
            real: x.clone(),
            reconstructed,
            generated,
        };
        let w = DiscriminatorWeights {
            alpha,
            lambda_p: hp.effective_lambda_p(),
        };
        let mut g = Graph::new();
        let d = self.discriminator.bind(&mut g, true)?;
        let terms = objectives::d_objective(&mut g, &d, &batch, w, hp.loss_variant, rng)?;
        let value = check_finite(g.value(terms.objective).item(), "discriminator objective")?;
        let penalty = terms.penalty.map(|p| g.value(p).item());
        let loss = g.scalar_mul(-1.0, terms.objective)?;
        let nodes = d.param_nodes();
        let mut grads = g.backward(loss)?;
        let grads = collect_grads(&mut grads, &nodes, &g);
        let norm = grad_norm(&grads);
        self.opt_d.step(&mut self.discriminator.params_mut(), &grads)?;
        Ok((value, penalty, norm))
    }

    /// Updates G with D frozen. Returns (loss, gradient norm).
    pub fn g_phase(&mut self, x: &Matrix, z: &Matrix, hp: &HyperParams) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let d = self.discriminator.bind(&mut g, false)?;
        let gen = self.generator.bind(&mut g, true)?;
        let zn = g.constant(z.clone())?;
        let fake = gen.forward(&mut g, zn)?;
        let loss = if hp.generator_variant.uses_gm() {
            let real = g.constant(x.clone())?;
            let w = MatchingWeights {
                lambda_m1: hp.lambda_m1,
                lambda_m2: hp.lambda_m2,
                form: hp.gm_form,
            };
            objectives::g_loss_gm(&mut g, &d, real, fake, w)?
        } else {
            objectives::g_loss_standard(&mut g, &d, fake)?
        };
        let value = check_finite(g.value(loss).item(), "generator loss")?;
        let nodes = gen.param_nodes();
        let mut grads = g.backward(loss)?;
        let grads = collect_grads(&mut grads, &nodes, &g);
        let norm = grad_norm(&grads);
        self.opt_g.step(&mut self.generator.params_mut(), &grads)?;
        Ok((value, norm))
    }

    /// One iteration: auto-encoder, then discriminator, then generator, all
    /// on the same `x` and `z`.
    pub fn train_step(
        &mut self,
        x: &Matrix,
        z: &Matrix,
        hp: &HyperParams,
        rng: &mut impl Rng,
    ) -> Result<StepDiagnostics> {
        let it = self.iteration;
        self.apply_lr_schedule(hp);
        let mut diag = StepDiagnostics {
            iteration: it + 1,
            lr: self.opt_g.lr,
            ..Default::default()
        };
        if hp.generator_variant.uses_autoencoder() {
            let (total, recon, kl, norm) =
                self.ae_phase(x, z, hp).map_err(|e| e.in_phase("autoencoder", it))?;
            diag.v_ae = Some(total);
            diag.reconstruction = Some(recon);
            diag.v_r = kl;
            diag.grad_norm_ae = Some(norm);
        }
        let (v_d, v_p, norm_d) = self
            .d_phase(x, z, hp, rng)
            .map_err(|e| e.in_phase("discriminator", it))?;
        diag.v_d = v_d;
        diag.v_p = v_p;
        diag.grad_norm_d = norm_d;
        let (v_g, norm_g) = self.g_phase(x, z, hp).map_err(|e| e.in_phase("generator", it))?;
        diag.v_g = v_g;
        diag.grad_norm_g = norm_g;
        self.iteration += 1;
        Ok(diag)
    }

    /// `n` generator samples from a prior draw.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Matrix> {
        let z = sample_prior(self.generator.in_dim(), n, rng);
        self.generator.eval(&z)
    }
}

/// Everything a run needs besides the hyper-parameters.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub hp: HyperParams,
    pub arch: Architecture,
    pub data: Matrix,
    /// Mixture used for evaluation; `None` disables mode reports.
    pub spec: Option<GaussianMixtureSpec>,
    /// Evaluate every this many iterations; 0 keeps only the final report.
    pub eval_every: u64,
    /// Write a metrics row every this many iterations (at least 1).
    pub log_every: u64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: StepDiagnostics,
    pub report: Option<ModeReport>,
}

pub const METRICS_CSV_HEADER: &str =
    "iteration,v_ae,v_d,v_g,lr,covered_modes,registered_points,tv_true,tv_differential";

fn opt_float(v: Option<f64>) -> String {
    v.map(eval::fmt_float).unwrap_or_default()
}

impl MetricRow {
    pub fn csv_row(&self) -> String {
        let s = &self.step;
        let (covered, registered, tv_t, tv_d) = match &self.report {
            Some(r) => (
                r.covered_modes.to_string(),
                r.registered_points.to_string(),
                opt_float(r.tv_true),
                opt_float(r.tv_differential),
            ),
            None => Default::default(),
        };
        format!(
            "{},{},{},{},{},{covered},{registered},{tv_t},{tv_d}",
            s.iteration,
            opt_float(s.v_ae),
            eval::fmt_float(s.v_d),
            eval::fmt_float(s.v_g),
            eval::fmt_float(s.lr),
        )
    }
}

/// Mode report of `EVAL_SAMPLES` generator draws from the evaluation stream
/// of `seed`.
pub fn evaluate(
    model: &GnGanModel,
    spec: &GaussianMixtureSpec,
    reference: &[f64],
    seed: u64,
) -> Result<ModeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_XOR);
    let samples = model.sample(EVAL_SAMPLES, &mut rng)?;
    eval::mode_report(&samples, spec, reference, seed)
}

/// Stateful run so a failure leaves the partial model accessible.
#[derive(Debug)]
pub struct Trainer {
    setup: TrainSetup,
    model: GnGanModel,
    rng: ChaCha8Rng,
    reference: Option<Vec<f64>>,
    metrics: Vec<MetricRow>,
    report: Option<ModeReport>,
}

impl Trainer {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.hp.validate()?;
        setup.arch.validate()?;
        if setup.arch.latent_dim() != setup.hp.latent_dim {
            return Err(Error::Config(format!(
                "latent_dim: architecture uses {}, hyper-parameters say {}",
                setup.arch.latent_dim(),
                setup.hp.latent_dim
            )));
        }
        if setup.data.cols() != setup.arch.data_dim() {
            return Err(Error::Shape(format!(
                "data has {} columns, networks expect {}",
                setup.data.cols(),
                setup.arch.data_dim()
            )));
        }
        if setup.data.rows() < setup.hp.batch_size {
            return Err(Error::Config(format!(
                "batch_size: {} exceeds the {} training points",
                setup.hp.batch_size,
                setup.data.rows()
            )));
        }
        if let Some(spec) = &setup.spec {
            if spec.dim() != setup.data.cols() {
                return Err(Error::Shape("mixture and data dimensions differ".into()));
            }
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(setup.hp.seed);
        init_rng.set_stream(STREAM_INIT);
        let model = GnGanModel::init(&setup.arch, &setup.hp, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.hp.seed);
        rng.set_stream(STREAM_TRAIN);
        let reference = match &setup.spec {
            Some(spec) => Some(eval::reference_proportions(&setup.data, spec)?),
            None => None,
        };
        Ok(Self {
            setup,
            model,
            rng,
            reference,
            metrics: Vec::new(),
            report: None,
        })
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        (self.setup.data.rows() / self.setup.hp.batch_size) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations_per_epoch() * self.setup.hp.epochs as u64
    }

    fn report_now(&self) -> Result<Option<ModeReport>> {
        match (&self.setup.spec, &self.reference) {
            (Some(spec), Some(reference)) => {
                Ok(Some(evaluate(&self.model, spec, reference, self.setup.hp.seed)?))
            }
            _ => Ok(None),
        }
    }

    /// Runs every epoch. On error the model holds the state reached so far.
    pub fn run(&mut self) -> Result<()> {
        let hp = self.setup.hp.clone();
        let n = self.setup.data.rows();
        let m = hp.batch_size;
        let d = self.setup.data.cols();
        let total = self.total_iterations();
        let log_every = self.setup.log_every.max(1);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..hp.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks_exact(m) {
                let mut xs = Vec::with_capacity(m * d);
                for &i in chunk {
                    xs.extend_from_slice(self.setup.data.row(i));
                }
                let x = Matrix::from_vec(m, d, xs)?;
                let z = sample_prior(hp.latent_dim, m, &mut self.rng);
                let step = self.model.train_step(&x, &z, &hp, &mut self.rng)?;
                let done = self.model.iteration;
                let eval_due = (self.setup.eval_every > 0 && done.is_multiple_of(self.setup.eval_every)) || done == total;
                let report = if eval_due {
                    self.report_now().map_err(|e| e.in_phase("evaluation", step.iteration))?
                } else {
                    None
                };
                if report.is_some() || done.is_multiple_of(log_every) || done == total {
                    self.metrics.push(MetricRow {
                        step,
                        report: report.clone(),
                    });
                }
                if done == total {
                    self.report = report;
                }
            }
        }
        Ok(())
    }

    pub fn model(&self) -> &GnGanModel {
        &self.model
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            metrics: self.metrics,
            report: self.report,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GnGanModel,
    pub metrics: Vec<MetricRow>,
    /// Report after the last iteration; `None` with zero epochs or no spec.
    pub report: Option<ModeReport>,
}

pub fn train(setup: TrainSetup) -> Result<TrainOutcome> {
    let mut t = Trainer::new(setup)?;
    t.run()?;
    Ok(t.into_outcome())
}
