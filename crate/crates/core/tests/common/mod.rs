//! Independent scalar re-implementations used as test oracles. Nothing here
//! touches the autodiff graph: networks are evaluated with nested loops and
//! input gradients are back-propagated by hand.

#![allow(dead_code)]

use gngan::autodiff::NORM_EPS;
use gngan::neighbors::{DIST_EPS, Q_FLOOR, VARIANCE_FLOOR};
use gngan::nn::{Activation, Layer, Mlp};
use gngan::objectives::{GmForm, LossVariant, D_CLAMP};
use gngan::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Activation::None => v,
    }
}

fn act_grad(a: Activation, pre: f64) -> f64 {
    match a {
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => {
            let s = act(a, pre);
            s * (1.0 - s)
        }
        Activation::None => 1.0,
    }
}

/// Returns pre-activations of every layer and the output.
fn forward_trace(net: &Mlp, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut h = x.to_vec();
    let mut pres = Vec::new();
    for l in net.layers() {
        let (out, inp) = l.weight.shape();
        let pre: Vec<f64> = (0..out)
            .map(|o| {
                let mut s = l.bias.as_slice()[o];
                for (i, hi) in h.iter().enumerate().take(inp) {
                    s += l.weight[(o, i)] * hi;
                }
                s
            })
            .collect();
        h = pre.iter().map(|&p| act(l.activation, p)).collect();
        pres.push(pre);
    }
    (pres, h)
}

/// Smallest |pre-activation| of any ReLU unit over the rows of `xs`.
/// Central differences are only meaningful well away from the kink.
pub fn relu_margin(net: &Mlp, xs: &Matrix) -> f64 {
    let mut m = f64::INFINITY;
    for r in 0..xs.rows() {
        let (pres, _) = forward_trace(net, xs.row(r));
        for (l, pre) in net.layers().iter().zip(&pres) {
            if l.activation == Activation::Relu {
                for v in pre {
                    m = m.min(v.abs());
                }
            }
        }
    }
    m
}

pub fn forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
    forward_trace(net, x).1
}

pub fn forward_rows(net: &Mlp, xs: &Rows) -> Rows {
    xs.iter().map(|x| forward(net, x)).collect()
}

/// Gradient of a scalar-output network with respect to its input.
pub fn input_grad(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let (pres, _) = forward_trace(net, x);
    let mut d = vec![1.0];
    for (l, pre) in net.layers().iter().zip(&pres).rev() {
        let (out, inp) = l.weight.shape();
        let dpre: Vec<f64> = (0..out).map(|o| d[o] * act_grad(l.activation, pre[o])).collect();
        d = (0..inp)
            .map(|i| (0..out).map(|o| l.weight[(o, i)] * dpre[o]).sum())
            .collect();
    }
    d
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn distance_variance(p: &Rows) -> f64 {
    let n = p.len();
    let mut d = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            // Smoothed like the graph so coincident points stay differentiable.
            d.push((dist(&p[i], &p[j]).powi(2) + DIST_EPS).sqrt());
        }
    }
    let m = d.len() as f64;
    let mean = d.iter().sum::<f64>() / m;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    var.max(VARIANCE_FLOOR)
}

pub fn conditional(p: &Rows, var: f64) -> Rows {
    let n = p.len();
    let kernel = |i: usize, j: usize| 1.0 / (1.0 + dist(&p[i], &p[j]).powi(2) / (2.0 * var));
    (0..n)
        .map(|i| {
            let z: f64 = (0..n).filter(|&k| k != i).map(|k| kernel(i, k)).sum();
            (0..n).map(|j| if j == i { 0.0 } else { kernel(i, j) / z }).collect()
        })
        .collect()
}

pub fn joint(p: &Rows) -> Rows {
    let n = p.len();
    let c = conditional(p, distance_variance(p));
    (0..n)
        .map(|i| (0..n).map(|j| (c[i][j] + c[j][i]) / (2 * n) as f64).collect())
        .collect()
}

pub fn kl(latents: &Rows, generated: &Rows) -> f64 {
    let p = joint(latents);
    let q = joint(generated);
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if p[i][j] > 0.0 {
                s += p[i][j] * (p[i][j] / q[i][j].max(Q_FLOOR)).ln();
            }
        }
    }
    s
}

pub fn ae_loss(e: &Mlp, g: &Mlp, x: &Rows, z: &Rows, lambda_r: f64) -> f64 {
    let ex = forward_rows(e, x);
    let gex = forward_rows(g, &ex);
    let recon = x
        .iter()
        .zip(&gex)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum::<f64>()
        / x.len() as f64;
    if lambda_r == 0.0 {
        return recon;
    }
    let gz = forward_rows(g, z);
    let lat: Rows = ex.iter().chain(z).cloned().collect();
    let gen: Rows = gex.iter().chain(&gz).cloned().collect();
    recon + lambda_r * kl(&lat, &gen)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn clamp_d(v: f64) -> f64 {
    v.clamp(D_CLAMP, 1.0 - D_CLAMP)
}

fn norm_eps(v: &[f64]) -> f64 {
    (v.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt()
}

pub fn gradient_penalty(d: &Mlp, x: &Rows, gz: &Rows, mu: &[f64]) -> f64 {
    mean(x.iter().zip(gz).zip(mu).map(|((a, b), &m)| {
        let xh: Vec<f64> = a.iter().zip(b).map(|(u, v)| m * u + (1.0 - m) * v).collect();
        (norm_eps(&input_grad(d, &xh)) - 1.0).powi(2)
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn d_objective(
    d: &Mlp,
    real: &Rows,
    recon: &Rows,
    fake: &Rows,
    alpha: f64,
    lambda_p: f64,
    mu: &[f64],
    variant: LossVariant,
) -> f64 {
    let score = |r: &Vec<f64>| forward(d, r)[0];
    let (t_real, t_recon, t_fake) = match variant {
        LossVariant::Log => (
            mean(real.iter().map(|r| clamp_d(score(r)).ln())),
            mean(recon.iter().map(|r| clamp_d(score(r)).ln())),
            mean(fake.iter().map(|r| (1.0 - clamp_d(score(r))).ln())),
        ),
        LossVariant::Hinge => (
            mean(real.iter().map(score)),
            mean(recon.iter().map(score)),
            -mean(fake.iter().map(score)),
        ),
    };
    let mut v = (1.0 - alpha) * t_real + t_fake;
    if alpha != 0.0 {
        v += alpha * t_recon;
    }
    if lambda_p != 0.0 {
        v -= lambda_p * gradient_penalty(d, real, fake, mu);
    }
    v
}

pub fn gm_loss(d: &Mlp, real: &Rows, fake: &Rows, l1: f64, l2: f64, form: GmForm) -> f64 {
    let side = |xs: &Rows| {
        let s = mean(xs.iter().map(|x| forward(d, x)[0]));
        let grads: Rows = xs.iter().map(|x| input_grad(d, x)).collect();
        let dots: Vec<f64> = grads
            .iter()
            .zip(xs)
            .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        match form {
            GmForm::Norms => (
                s,
                vec![mean(grads.iter().map(|g| norm_eps(g)))],
                mean(dots.iter().map(|v| v.abs())),
            ),
            GmForm::Literal => {
                let dim = grads[0].len();
                let mg = (0..dim).map(|k| mean(grads.iter().map(|g| g[k]))).collect();
                (s, mg, mean(dots.iter().copied()))
            }
        }
    };
    let (sr, gr, dr) = side(real);
    let (sf, gf, df) = side(fake);
    let grad_term: f64 = gr.iter().zip(&gf).map(|(a, b)| (a - b).powi(2)).sum();
    (sr - sf).abs() + l1 * grad_term + l2 * (dr - df).powi(2)
}

pub fn standard_loss(d: &Mlp, fake: &Rows) -> f64 {
    -mean(fake.iter().map(|f| clamp_d(forward(d, f)[0]).ln()))
}

/// Random network with 1 to `max_layers` layers, hidden widths up to 8,
/// mixed hidden activations, normal weights and biases.
pub fn random_mlp(rng: &mut impl Rng, in_dim: usize, out_dim: usize, output: Activation, max_layers: usize) -> Mlp {
    let n_layers = rng.random_range(1..=max_layers);
    let mut layers = Vec::new();
    let mut prev = in_dim;
    for k in 0..n_layers {
        let last = k + 1 == n_layers;
        let out = if last { out_dim } else { rng.random_range(1..=8) };
        let activation = if last {
            output
        } else {
            [Activation::Relu, Activation::Sigmoid, Activation::None][rng.random_range(0..3)]
        };
        let scale = 1.0 / (prev as f64).sqrt();
        let mut normal = |r: usize, c: usize, s: f64| {
            let data = (0..r * c).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
            Matrix::from_vec(r, c, data).unwrap()
        };
        layers.push(Layer {
            weight: normal(out, prev, scale),
            bias: normal(1, out, 0.5),
            activation,
        });
        prev = out;
    }
    Mlp::from_layers(layers).unwrap()
}

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> Matrix {
    let data = (0..n * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(n, d, data).unwrap()
}

/// Central differences of `f` with respect to every entry of every tensor.
pub fn finite_differences(params: &[Matrix], h: f64, mut f: impl FnMut(&[Matrix]) -> f64) -> Vec<Matrix> {
    let mut work: Vec<Matrix> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Matrix::zeros(params[t].rows(), params[t].cols());
        for k in 0..params[t].len() {
            let orig = params[t].as_slice()[k];
            work[t].as_mut_slice()[k] = orig + h;
            let up = f(&work);
            work[t].as_mut_slice()[k] = orig - h;
            let down = f(&work);
            work[t].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm();
    diff / a.norm().max(b.norm()).max(floor)
}

/// Copy of `net` with its parameters replaced, in `Mlp::params` order.
pub fn with_params(net: &Mlp, params: &[Matrix]) -> Mlp {
    let mut out = net.clone();
    for (dst, src) in out.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    out
}

pub fn params_of(net: &Mlp) -> Vec<Matrix> {
    net.params().into_iter().cloned().collect()
}
