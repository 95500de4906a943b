//! Dense feed-forward networks and the Adam optimizer.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::None => "none",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// `depth` hidden layers of width `hidden` with ReLU, then an output layer.
pub fn mlp_specs(
    in_dim: usize,
    hidden: usize,
    depth: usize,
    out_dim: usize,
    output: Activation,
) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(depth + 1);
    let mut prev = in_dim;
    for _ in 0..depth {
        specs.push(LayerSpec::new(prev, hidden, Activation::Relu));
        prev = hidden;
    }
    specs.push(LayerSpec::new(prev, out_dim, output));
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out × in
    pub weight: Matrix,
    /// 1 × out
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weight.cols(), self.weight.rows(), self.activation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::InvalidArgument(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        check_chain(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let data = (0..s.in_dim * s.out_dim)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Matrix::from_vec(s.out_dim, s.in_dim, data).expect("sized"),
                    bias: Matrix::zeros(1, s.out_dim),
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        check_chain(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.rows()) {
                return Err(Error::Shape(format!(
                    "layer {i} bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Places the parameters on `graph`. With `trainable = false` they are
    /// constants, so no gradient reaches this network.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = graph.leaf(l.weight.clone(), trainable)?;
            let b = graph.leaf(l.bias.clone(), trainable)?;
            let wt = graph.transpose(w)?;
            layers.push(BoundLayer {
                weight: w,
                weight_t: wt,
                bias: b,
                activation: l.activation,
            });
        }
        Ok(BoundMlp {
            layers,
            in_dim: self.in_dim(),
        })
    }

    /// Straight matrix evaluation with no graph.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {:?}",
                self.in_dim(),
                x.shape()
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = crate::matrix::gemm(&h, false, &l.weight, true);
            let c = z.cols();
            for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
                *v += l.bias.as_slice()[i % c];
            }
            h = match l.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Sigmoid => z.map(crate::autodiff::sigmoid),
                Activation::None => z,
            };
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: NodeId,
    weight_t: NodeId,
    pub bias: NodeId,
    activation: Activation,
}

/// An [`Mlp`] whose parameters live on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
    in_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (_, cols) = graph.shape(x);
        if cols != self.in_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {cols}",
                self.in_dim
            )));
        }
        let mut h = x;
        for l in &self.layers {
            let z = graph.matmul(h, l.weight_t)?;
            let z = graph.add_row_broadcast(z, l.bias)?;
            h = match l.activation {
                Activation::Relu => graph.relu(z)?,
                Activation::Sigmoid => graph.sigmoid(z)?,
                Activation::None => z,
            };
        }
        Ok(h)
    }

    /// Parameter leaves in the same order as [`Mlp::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Adam with bias correction and step-wise learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub base_lr: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(net: &Mlp, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self::for_params(&net.params(), lr, beta1, beta2)
    }

    /// Zero moments shaped like `params`, e.g. the union of two networks.
    pub fn for_params(params: &[&Matrix], lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            base_lr: lr,
            lr,
            beta1,
            beta2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of `params` from `grads`. A non-finite gradient leaves
    /// both parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient {i} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// `lr = base_lr · base^⌊step / every⌋`.
    pub fn decay_lr(&mut self, step: u64, every: u64, base: f64) {
        let k = step.checked_div(every).unwrap_or(0);
        self.lr = self.base_lr * base.powi(k as i32);
    }
}
