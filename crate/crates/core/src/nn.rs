//! Minimal feedforward networks in f64 with hand-written backpropagation and
//! an Adam optimizer.
//!
//! The actor maps an observation to logits over the agent's own action set;
//! the critic maps observation ⊕ skill one-hot to two Q heads (extrinsic and
//! intrinsic), each as wide as the union action space. Both are plain MLPs
//! with ELU hidden layers and linear outputs. Everything is deterministic
//! given a seed.

use std::io::{self, BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("layer sizes need at least an input and an output entry, all nonzero")]
    InvalidLayerSizes,
    #[error("input length {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient shape does not match parameter shape")]
    ShapeMismatch,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// Row-major `out x in` weight matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// A feedforward network: ELU hidden layers, linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Cached pre/post activations of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Array1<f64>,
    pre: Vec<Array1<f64>>,
    post: Vec<Array1<f64>>,
}

/// Per-layer gradient (or moment) buffers shaped like an `Mlp`.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for (w, b) in &self.layers {
            sq += w.iter().map(|v| v * v).sum::<f64>();
            sq += b.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self
                .layers
                .iter()
                .zip(&mlp.layers)
                .all(|((w, b), l)| w.dim() == l.weight.dim() && b.len() == l.bias.len())
    }
}

/// Gaussian matrix orthonormalized along its smaller dimension via modified
/// Gram-Schmidt, then scaled by `gain`.
fn orthogonal_matrix(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let transpose = rows > cols;
    let (n_vecs, dim) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Array1<f64>> = Vec::with_capacity(n_vecs);
    while vecs.len() < n_vecs {
        let mut v: Array1<f64> =
            Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for u in &vecs {
            let dot = v.dot(u);
            v = v - u * dot;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            vecs.push(v / norm);
        }
    }
    let mut m = Array2::zeros((n_vecs, dim));
    for (i, v) in vecs.into_iter().enumerate() {
        m.row_mut(i).assign(&(v * gain));
    }
    if transpose {
        m.t().to_owned()
    } else {
        m
    }
}

impl Mlp {
    /// Orthogonally initialized network: hidden weights at gain 1.0, the
    /// output layer at gain 0.01, biases zero. Deterministic per seed.
    pub fn orthogonal(layer_sizes: &[usize], seed: u64) -> Result<Mlp, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidLayerSizes);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_sizes.len() - 2;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (input, output) = (w[0], w[1]);
                let (gain, activation) = if i == last {
                    (0.01, Activation::Identity)
                } else {
                    (1.0, Activation::Elu)
                };
                DenseLayer {
                    weight: orthogonal_matrix(output, input, gain, &mut rng),
                    bias: Array1::zeros(output),
                    activation,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// All-zero network of the same shape family; useful as a stub.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Mlp, NnError> {
        let mut mlp = Mlp::orthogonal(layer_sizes, 0)?;
        for l in &mut mlp.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: ArrayView1<f64>) -> Result<Array1<f64>, NnError> {
        Ok(self.forward_trace(input)?.0)
    }

    pub fn forward_trace(&self, input: ArrayView1<f64>) -> Result<(Array1<f64>, Trace), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let z = layer.weight.dot(&x) + &layer.bias;
            let a = z.mapv(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(a.clone());
            x = a;
        }
        let out = x;
        Ok((
            out,
            Trace {
                input: input.to_owned(),
                pre,
                post,
            },
        ))
    }

    /// Accumulates dL/dparams into `grads` given dL/doutput for the forward
    /// pass captured in `trace`. Returns dL/dinput.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: ArrayView1<f64>,
        grads: &mut MlpGrads,
    ) -> Result<Array1<f64>, NnError> {
        if !grads.matches(self) || grad_output.len() != self.output_dim() {
            return Err(NnError::ShapeMismatch);
        }
        let mut grad = grad_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let delta = &grad * &trace.pre[i].mapv(|v| layer.activation.derivative(v));
            let layer_input = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            let (gw, gb) = &mut grads.layers[i];
            for (r, d) in delta.iter().enumerate() {
                let mut row = gw.row_mut(r);
                row.scaled_add(*d, layer_input);
            }
            *gb += &delta;
            grad = self.layers[i].weight.t().dot(&delta);
        }
        Ok(grad)
    }
}

/// Numerically stable softmax; outputs are strictly positive and sum to one.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Policy head output: softmax probabilities over the agent's own action set.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub probs: Array1<f64>,
    pub logits: Array1<f64>,
}

pub fn forward_policy(params: &Mlp, obs: ArrayView1<f64>) -> Result<PolicyOutput, NnError> {
    let logits = params.forward(obs)?;
    let probs = softmax(logits.view());
    Ok(PolicyOutput { probs, logits })
}

/// Two Q heads over the union action space, split from one output vector.
#[derive(Debug, Clone)]
pub struct CriticOutput {
    pub q_ext: Array1<f64>,
    pub q_int: Array1<f64>,
}

pub fn forward_critic(
    params: &Mlp,
    obs: ArrayView1<f64>,
    skill_onehot: ArrayView1<f64>,
) -> Result<CriticOutput, NnError> {
    let expected = params.input_dim();
    if obs.len() + skill_onehot.len() != expected {
        return Err(NnError::DimensionMismatch {
            expected,
            got: obs.len() + skill_onehot.len(),
        });
    }
    let mut input = Array1::zeros(expected);
    input.slice_mut(ndarray::s![..obs.len()]).assign(&obs);
    input.slice_mut(ndarray::s![obs.len()..]).assign(&skill_onehot);
    let out = params.forward(input.view())?;
    let half = out.len() / 2;
    debug_assert_eq!(half * 2, out.len());
    Ok(CriticOutput {
        q_ext: out.slice(ndarray::s![..half]).to_owned(),
        q_int: out.slice(ndarray::s![half..]).to_owned(),
    })
}

/// Adam with bias correction. Defaults: lr 1e-4, beta1 0.9, beta2 0.999,
/// eps 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: MlpGrads,
    second_moment: MlpGrads,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(params: &Mlp, lr: f64) -> Self {
        AdamState {
            first_moment: MlpGrads::zeros_like(params),
            second_moment: MlpGrads::zeros_like(params),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads) -> Result<(), NnError> {
        if !grads.matches(params) || !self.first_moment.matches(params) {
            return Err(NnError::ShapeMismatch);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, layer) in params.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            let (mw, mb) = &mut self.first_moment.layers[i];
            let (vw, vb) = &mut self.second_moment.layers[i];
            mw.zip_mut_with(gw, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            mb.zip_mut_with(gb, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            vw.zip_mut_with(gw, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            vb.zip_mut_with(gb, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(&mut layer.weight)
                .and(&*mw)
                .and(&*vw)
                .for_each(|p, &m, &v| {
                    *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps_hat);
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(&*mb)
                .and(&*vb)
                .for_each(|p, &m, &v| {
                    *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps_hat);
                });
        }
        Ok(())
    }
}

const CHECKPOINT_HEADER: &str = "hetrl-mlp v1";

/// Writes layer shapes and row-major weights as versioned text. Floats use
/// Rust's shortest round-trip formatting, so loading restores exact values.
pub fn save_checkpoint(mlp: &Mlp, w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(w, "layers {}", mlp.layers.len())?;
    for layer in &mlp.layers {
        let act = match layer.activation {
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        };
        writeln!(w, "layer {} {} {}", layer.out_dim(), layer.in_dim(), act)?;
        let row_major: Vec<String> = layer.weight.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "w {}", row_major.join(" "))?;
        let bias: Vec<String> = layer.bias.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "b {}", bias.join(" "))?;
    }
    Ok(())
}

pub fn load_checkpoint(r: &mut impl BufRead) -> Result<Mlp, NnError> {
    let bad = |msg: &str| NnError::Checkpoint(msg.to_string());
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String, NnError> {
        lines
            .next()
            .ok_or_else(|| bad(&format!("missing {what}")))?
            .map_err(|e| NnError::Checkpoint(e.to_string()))
    };
    if next("header")? != CHECKPOINT_HEADER {
        return Err(bad("unsupported header"));
    }
    let count_line = next("layer count")?;
    let n: usize = count_line
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad layer count"))?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let header = next("layer header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "layer" {
            return Err(bad("bad layer header"));
        }
        let out: usize = parts[1].parse().map_err(|_| bad("bad out dim"))?;
        let input: usize = parts[2].parse().map_err(|_| bad("bad in dim"))?;
        let activation = match parts[3] {
            "elu" => Activation::Elu,
            "identity" => Activation::Identity,
            _ => return Err(bad("bad activation")),
        };
        let wline = next("weights")?;
        let values: Vec<f64> = wline
            .strip_prefix("w ")
            .ok_or_else(|| bad("bad weight line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad weight value")))
            .collect::<Result<_, _>>()?;
        if values.len() != out * input {
            return Err(bad("weight length mismatch"));
        }
        let weight = Array2::from_shape_vec((out, input), values)
            .map_err(|_| bad("weight shape mismatch"))?;
        let bline = next("bias")?;
        let bias: Vec<f64> = bline
            .strip_prefix("b ")
            .ok_or_else(|| bad("bad bias line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad bias value")))
            .collect::<Result<_, _>>()?;
        if bias.len() != out {
            return Err(bad("bias length mismatch"));
        }
        layers.push(DenseLayer {
            weight,
            bias: Array1::from_vec(bias),
            activation,
        });
    }
    Ok(Mlp { layers })
}
