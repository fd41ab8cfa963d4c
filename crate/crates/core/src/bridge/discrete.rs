//! Binary activation bridge: κ-mixture interpolation with `κ(t) = t/T`, the
//! per-gene posterior cross-entropy, and a factorized CTMC Euler sampler.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use super::BridgeConfig;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, RealMatrix};

/// Gene activation states, `1` = expressed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationVector(pub Vec<u8>);

impl ActivationVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_real(&self) -> Array1<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// Row-wise binary matrix stored as `0.0`/`1.0` so it feeds the network directly.
pub type BinaryMatrix = RealMatrix;

/// `bitᵢ = [xᵢ ≠ 0]`.
pub fn discretize(x: ArrayView1<f64>) -> ActivationVector {
    ActivationVector(x.iter().map(|&v| (v != 0.0) as u8).collect())
}

pub fn discretize_matrix(x: &RealMatrix) -> BinaryMatrix {
    x.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

/// Mixing probability `κ(t) = t / T`.
pub fn kappa(t: f64, cfg: &BridgeConfig) -> f64 {
    t / cfg.horizon
}

/// Each coordinate independently takes its `d_T` value with probability
/// `κ(t)`, otherwise its `d_0` value.
pub fn discrete_interpolate<R: Rng + ?Sized>(
    d0: &ActivationVector,
    d_end: &ActivationVector,
    t: f64,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<ActivationVector> {
    cfg.check_time(t)?;
    if d0.len() != d_end.len() {
        return Err(Error::Dimension(format!(
            "d0 has {} genes, d_T has {}",
            d0.len(),
            d_end.len()
        )));
    }
    let k = kappa(t, cfg);
    Ok(ActivationVector(
        d0.0.iter()
            .zip(&d_end.0)
            .map(|(&a, &b)| if rng.random::<f64>() < k { b } else { a })
            .collect(),
    ))
}

/// Summed binary cross-entropy `Σᵢ BCE(σ(logitᵢ), d_Tᵢ)` and its gradient
/// `σ(logit) - d_T`, evaluated in softplus form.
pub fn posterior_loss(logits: ArrayView1<f64>, d_end: &ActivationVector) -> Result<(f64, Array1<f64>)> {
    if logits.len() != d_end.len() {
        return Err(Error::Dimension(format!(
            "{} logits for {} genes",
            logits.len(),
            d_end.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Input("logits contain non-finite values".into()));
    }
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(&d_end.0)
        .map(|(&l, &y)| {
            let y = y as f64;
            loss += l.max(0.0) + (-l.abs()).exp().ln_1p() - y * l;
            sigmoid(l) - y
        })
        .collect();
    Ok((loss, grad))
}

fn flip_probability(state: f64, q: f64, ratio: f64) -> f64 {
    let p = if state == 0.0 { ratio * q } else { ratio * (1.0 - q) };
    p.clamp(0.0, 1.0)
}

fn check_posterior(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Input(format!("posterior probability {q} outside [0, 1]")));
    }
    Ok(())
}

/// One Euler step of the factorized chain. A gene at 0 turns on with
/// probability `h qᵢ / (T - t)`, a gene at 1 turns off with probability
/// `h (1 - qᵢ) / (T - t)`, both clamped to `[0, 1]`.
pub fn ctmc_step<R: Rng + ?Sized>(
    d_t: &ActivationVector,
    q: ArrayView1<f64>,
    t: f64,
    h: f64,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<ActivationVector> {
    if q.len() != d_t.len() {
        return Err(Error::Dimension(format!(
            "{} posteriors for {} genes",
            q.len(),
            d_t.len()
        )));
    }
    if t < 0.0 || t + h > cfg.horizon * (1.0 + 1e-12) {
        return Err(Error::Range {
            what: "t + h",
            value: t + h,
            lo: 0.0,
            hi: cfg.horizon,
        });
    }
    q.iter().try_for_each(|&p| check_posterior(p))?;
    let ratio = cfg.step_ratio(t, h);
    Ok(ActivationVector(
        d_t.0.iter()
            .zip(q.iter())
            .map(|(&b, &qi)| {
                let p = flip_probability(b as f64, qi, ratio);
                if rng.random::<f64>() < p {
                    1 - b
                } else {
                    b
                }
            })
            .collect(),
    ))
}

/// Batched CTMC sampler over the same grid as the continuous sampler.
/// `predictor(t, d_t)` returns `P(d_T = 1 | d_t)` per row and gene.
pub fn sample_activations<R, F>(
    d0: &BinaryMatrix,
    mut predictor: F,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<BinaryMatrix>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &BinaryMatrix) -> Result<RealMatrix>,
{
    cfg.validate()?;
    if d0.iter().any(|&b| b != 0.0 && b != 1.0) {
        return Err(Error::Input("initial activation states must be 0 or 1".into()));
    }
    let h = cfg.step_size();
    let mut d = d0.clone();
    for k in 0..cfg.steps {
        let t = cfg.time(k);
        let q = predictor(t, &d)?;
        if q.dim() != d.dim() {
            return Err(Error::Dimension(format!(
                "predictor returned {:?}, expected {:?}",
                q.dim(),
                d.dim()
            )));
        }
        q.iter().try_for_each(|&p| check_posterior(p)).map_err(|e| match e {
            Error::Input(m) => Error::Numerical(format!("step {k} (t = {t}): {m}")),
            other => other,
        })?;
        let ratio = cfg.step_ratio(t, h);
        let u: Array2<f64> = Array2::from_shape_simple_fn(d.raw_dim(), || rng.random());
        Zip::from(&mut d).and(&q).and(&u).for_each(|b, &qi, &ui| {
            if ui < flip_probability(*b, qi, ratio) {
                *b = 1.0 - *b;
            }
        });
    }
    Ok(d)
}

/// Single-trajectory form of [`sample_activations`].
pub fn sample_activation<R, F>(
    d0: &ActivationVector,
    mut predictor: F,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<ActivationVector>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &ActivationVector) -> Result<Array1<f64>>,
{
    let start = d0.to_real().insert_axis(ndarray::Axis(0));
    let out = sample_activations(
        &start,
        |t, d| {
            let state = discretize(d.row(0));
            Ok(predictor(t, &state)?.insert_axis(ndarray::Axis(0)))
        },
        cfg,
        rng,
    )?;
    Ok(discretize(out.row(0)))
}
