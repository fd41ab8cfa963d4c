//! Dense numerical kernel: a fixed-shape multilayer perceptron with analytic
//! gradients, embedding tables that live in the same parameter set, and an
//! Adam optimizer with decoupled weight decay.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major real matrix. Batches are stored `(samples, features)`.
pub type RealMatrix = Array2<f64>;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SBPS";
const CHECKPOINT_VERSION: u32 = 1;

/// One trainable tensor together with its gradient and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: RealMatrix,
    pub grad: RealMatrix,
    m: RealMatrix,
    v: RealMatrix,
}

impl Param {
    pub fn new(value: RealMatrix) -> Self {
        let dim = value.raw_dim();
        Self {
            value,
            grad: Array2::zeros(dim.clone()),
            m: Array2::zeros(dim.clone()),
            v: Array2::zeros(dim),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Affine layer `y = x W + b`, `W` of shape `(in, out)` and `b` of shape `(1, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }
}

/// Layer widths of a perceptron. Hidden layers use SiLU, the output is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpShape {
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

/// All trainable weights of one predictor: perceptron layers plus any
/// embedding tables consumed by its input encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<Dense>,
    pub embeddings: Vec<Param>,
    pub step_count: u64,
}

impl ParameterSet {
    /// Glorot-uniform weights, zero biases, embedding entries `N(0, 0.02²)`.
    /// `tables` lists `(rows, cols)` for each embedding table.
    pub fn new<R: Rng + ?Sized>(shape: &MlpShape, tables: &[(usize, usize)], rng: &mut R) -> Self {
        let widths = shape.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng));
                Dense {
                    weight: Param::new(weight),
                    bias: Param::new(Array2::zeros((1, fan_out))),
                }
            })
            .collect();
        let normal = Normal::new(0.0, 0.02).expect("valid scale");
        let embeddings = tables
            .iter()
            .map(|&(r, c)| Param::new(Array2::from_shape_simple_fn((r, c), || normal.sample(rng))))
            .collect();
        Self {
            layers,
            embeddings,
            step_count: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    /// Tensors in declaration order: layer weights and biases, then tables.
    pub fn tensors(&self) -> impl Iterator<Item = &Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(self.embeddings.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(self.embeddings.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Param::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.tensors_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Writes shapes then values in declaration order, plus the step count.
    /// Gradients and moments are not persisted.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step_count.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u64).to_le_bytes())?;
        w.write_all(&(self.embeddings.len() as u64).to_le_bytes())?;
        for p in self.tensors() {
            let (r, c) = p.shape();
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
            for x in p.value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |msg: &str| Error::Input(format!("checkpoint: {msg}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r).map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let step_count = read_u64(r).map_err(|_| bad("truncated header"))?;
        let n_layers = read_u64(r).map_err(|_| bad("truncated header"))? as usize;
        let n_tables = read_u64(r).map_err(|_| bad("truncated header"))? as usize;
        let mut read_tensor = || -> Result<Param> {
            let rows = read_u64(r).map_err(|_| bad("truncated tensor"))? as usize;
            let cols = read_u64(r).map_err(|_| bad("truncated tensor"))? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(|_| bad("truncated tensor"))?;
                data.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| bad(&e.to_string()))?;
            Ok(Param::new(value))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let weight = read_tensor()?;
            let bias = read_tensor()?;
            if bias.shape() != (1, weight.shape().1) {
                return Err(bad("bias shape does not match weight"));
            }
            layers.push(Dense { weight, bias });
        }
        let embeddings = (0..n_tables).map(|_| read_tensor()).collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(bad("layer widths do not chain"));
            }
        }
        Ok(Self {
            layers,
            embeddings,
            step_count,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations recorded by [`forward`] for use by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<RealMatrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<RealMatrix>,
}

pub fn forward(
    params: &ParameterSet,
    input: &RealMatrix,
    record: bool,
) -> Result<(RealMatrix, Option<ForwardCache>)> {
    if params.layers.is_empty() {
        return Err(Error::State("parameter set has no layers".into()));
    }
    if input.ncols() != params.input_width() {
        return Err(Error::Dimension(format!(
            "input has {} columns, first layer expects {}",
            input.ncols(),
            params.input_width()
        )));
    }
    let last = params.layers.len() - 1;
    let mut cache = record.then(|| ForwardCache {
        inputs: Vec::with_capacity(params.layers.len()),
        pre: Vec::with_capacity(last),
    });
    let mut h = input.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = h.dot(&layer.weight.value);
        z += &layer.bias.value;
        if let Some(c) = cache.as_mut() {
            c.inputs.push(h);
        }
        if i < last {
            let a = z.mapv(silu);
            if let Some(c) = cache.as_mut() {
                c.pre.push(z);
            }
            h = a;
        } else {
            h = z;
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite network output".into()));
    }
    Ok((h, cache))
}

/// Accumulates `∂L/∂θ` into `params` grads and returns `∂L/∂input`.
pub fn backward(
    params: &mut ParameterSet,
    cache: Option<&ForwardCache>,
    grad_output: &RealMatrix,
) -> Result<RealMatrix> {
    let cache = cache.ok_or_else(|| {
        Error::State("backward called without a recorded forward pass".into())
    })?;
    let n_layers = params.layers.len();
    if cache.inputs.len() != n_layers || cache.pre.len() + 1 != n_layers {
        return Err(Error::State("cache does not match parameter set".into()));
    }
    let batch = cache.inputs[0].nrows();
    if grad_output.dim() != (batch, params.output_width()) {
        return Err(Error::Dimension(format!(
            "output gradient shape {:?}, expected ({batch}, {})",
            grad_output.dim(),
            params.output_width()
        )));
    }
    let mut delta = grad_output.clone();
    for i in (0..n_layers).rev() {
        if i < n_layers - 1 {
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre[i])
                .for_each(|d, &z| *d *= silu_grad(z));
        }
        let layer = &mut params.layers[i];
        let x = &cache.inputs[i];
        general_mat_mul(1.0, &x.t(), &delta, 1.0, &mut layer.weight.grad);
        layer.bias.grad += &delta.sum_axis(Axis(0)).insert_axis(Axis(0));
        delta = delta.dot(&layer.weight.value.t());
    }
    Ok(delta)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("epsilon must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam step. Weight decay scales parameters directly by
/// `1 - lr * weight_decay` before the moment update is applied. Gradients are
/// zeroed afterwards.
pub fn optimizer_step(params: &mut ParameterSet, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    params.step_count += 1;
    let t = params.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for p in params.tensors_mut() {
        ndarray::Zip::from(&mut p.value)
            .and(&mut p.grad)
            .and(&mut p.m)
            .and(&mut p.v)
            .for_each(|w, g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                *g = 0.0;
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = MlpShape {
            input: 3,
            hidden: vec![5],
            output: 2,
        };
        ParameterSet::new(&shape, &[], &mut rng)
    }

    fn single_linear(w: RealMatrix, b: RealMatrix) -> ParameterSet {
        ParameterSet {
            layers: vec![Dense {
                weight: Param::new(w),
                bias: Param::new(b),
            }],
            embeddings: vec![],
            step_count: 0,
        }
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let mut p = small_net(1);
        for l in &mut p.layers {
            l.weight.value.fill(0.0);
            l.bias.value.fill(0.3);
        }
        p.layers[1].bias.value = array![[1.5, -2.0]];
        let (y, _) = forward(&p, &array![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]], false).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn identity_linear_layer() {
        let p = single_linear(Array2::eye(2), Array2::zeros((1, 2)));
        let (y, _) = forward(&p, &array![[1.0, 2.0]], false).unwrap();
        assert_eq!(y, array![[1.0, 2.0]]);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let p = small_net(9);
        let x = array![[0.3, -1.2, 2.0]];
        let (y, _) = forward(&p, &x, false).unwrap();
        let (w0, b0) = (&p.layers[0].weight.value, &p.layers[0].bias.value);
        let (w1, b1) = (&p.layers[1].weight.value, &p.layers[1].bias.value);
        let mut hidden = [0.0; 5];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut z = b0[[0, j]];
            for i in 0..3 {
                z += x[[0, i]] * w0[[i, j]];
            }
            *h = z / (1.0 + (-z).exp());
        }
        for k in 0..2 {
            let mut z = b1[[0, k]];
            for (j, h) in hidden.iter().enumerate() {
                z += h * w1[[j, k]];
            }
            assert!((y[[0, k]] - z).abs() < 1e-14, "{} vs {z}", y[[0, k]]);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = small_net(2);
        assert!(matches!(
            forward(&p, &Array2::zeros((1, 4)), false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let mut p = small_net(3);
        let r = backward(&mut p, None, &Array2::zeros((1, 2)));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gradient_leaves_grads() {
        let mut p = small_net(4);
        let x = array![[0.1, 0.2, 0.3]];
        let (_, cache) = forward(&p, &x, true).unwrap();
        backward(&mut p, cache.as_ref(), &Array2::zeros((1, 2))).unwrap();
        assert!(p.tensors().all(|t| t.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn scalar_chain_rule() {
        let mut p = single_linear(array![[0.7]], array![[0.0]]);
        let (_, cache) = forward(&p, &array![[3.0]], true).unwrap();
        backward(&mut p, cache.as_ref(), &array![[1.0]]).unwrap();
        assert_eq!(p.layers[0].weight.grad[[0, 0]], 3.0);
        assert_eq!(p.layers[0].bias.grad[[0, 0]], 1.0);
        // accumulates
        backward(&mut p, cache.as_ref(), &array![[1.0]]).unwrap();
        assert_eq!(p.layers[0].weight.grad[[0, 0]], 6.0);
    }

    #[test]
    fn finite_difference_gradient() {
        let mut p = small_net(5);
        let x = array![[0.5, -0.3, 1.1], [0.2, 0.9, -1.4]];
        let target = array![[0.1, -0.2], [0.4, 0.3]];
        let loss = |p: &ParameterSet| -> f64 {
            let (y, _) = forward(p, &x, false).unwrap();
            0.5 * (&y - &target).mapv(|d| d * d).sum()
        };
        let (y, cache) = forward(&p, &x, true).unwrap();
        backward(&mut p, cache.as_ref(), &(&y - &target)).unwrap();
        let analytic: Vec<f64> = p.tensors().flat_map(|t| t.grad.iter().copied()).collect();
        let mut k = 0;
        for ti in 0..p.layers.len() * 2 {
            let n = p.tensors().nth(ti).unwrap().len();
            for e in 0..n {
                let step = 1e-5;
                let mut plus = p.clone();
                plus.tensors_mut().nth(ti).unwrap().value.as_slice_mut().unwrap()[e] += step;
                let mut minus = p.clone();
                minus.tensors_mut().nth(ti).unwrap().value.as_slice_mut().unwrap()[e] -= step;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let a = analytic[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "tensor {ti} entry {e}: {a} vs {numeric}");
                k += 1;
            }
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = small_net(6);
        let before = p.clone();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        optimizer_step(&mut p, &cfg).unwrap();
        assert_eq!(p.layers, before.layers);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn zero_gradient_decay_scales_parameters() {
        let mut p = small_net(7);
        let before = p.clone();
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        optimizer_step(&mut p, &cfg).unwrap();
        let s = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for (a, b) in p.tensors().zip(before.tensors()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(*x, y * s);
            }
        }
    }

    #[test]
    fn first_step_matches_scalar_hand_step() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = single_linear(array![[0.25]], array![[-1.0]]);
        p.layers[0].weight.grad[[0, 0]] = 3.0;
        p.layers[0].bias.grad[[0, 0]] = -0.5;
        optimizer_step(&mut p, &cfg).unwrap();
        // hand step: m = (1-b1) g, v = (1-b2) g², bias-corrected to g and g²
        let hand = |w: f64, g: f64| {
            let m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
            let v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
            w - cfg.learning_rate * m / (v.sqrt() + cfg.epsilon)
        };
        assert!((p.layers[0].weight.value[[0, 0]] - hand(0.25, 3.0)).abs() < 1e-15);
        assert!((p.layers[0].bias.value[[0, 0]] - hand(-1.0, -0.5)).abs() < 1e-15);
        assert!((p.layers[0].weight.value[[0, 0]] - (0.25 - 1e-3)).abs() < 1e-9);
        assert_eq!(p.layers[0].weight.grad[[0, 0]], 0.0);
    }

    #[test]
    fn invalid_optimizer_config() {
        let mut p = small_net(8);
        let cfg = OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(optimizer_step(&mut p, &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = MlpShape {
            input: 4,
            hidden: vec![6, 6],
            output: 3,
        };
        let mut p = ParameterSet::new(&shape, &[(3, 2), (1, 4)], &mut rng);
        p.step_count = 17;
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParameterSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(q.step_count, 17);
        for (a, b) in p.tensors().zip(q.tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(ParameterSet::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }
}
