//! Brownian-bridge interpolation, the masked endpoint regression loss, and
//! Euler–Maruyama generation driven by an endpoint predictor.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::BridgeConfig;
use crate::conditioning::ConditionKey;
use crate::error::{Error, Result};
use crate::nn::RealMatrix;

/// A control cell paired with a perturbed cell of the same condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPair {
    pub x0: Array1<f64>,
    pub x_end: Array1<f64>,
    pub condition: ConditionKey,
}

/// Draws `x_t = (t/T) x_T + (1 - t/T) x_0 + σ z`, `z ~ N(0, t(1 - t/T) I)`.
/// Endpoints are returned exactly at `t = 0` and `t = T`.
pub fn interpolate<R: Rng + ?Sized>(
    x0: ArrayView1<f64>,
    x_end: ArrayView1<f64>,
    t: f64,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<Array1<f64>> {
    cfg.check_time(t)?;
    if x0.len() != x_end.len() {
        return Err(Error::Dimension(format!(
            "x0 has {} genes, x_T has {}",
            x0.len(),
            x_end.len()
        )));
    }
    if t == 0.0 {
        return Ok(x0.to_owned());
    }
    if t == cfg.horizon {
        return Ok(x_end.to_owned());
    }
    let s = t / cfg.horizon;
    let std = cfg.sigma * (t * (1.0 - s)).sqrt();
    Ok(Zip::from(&x0).and(&x_end).map_collect(|&a, &b| {
        let z: f64 = rng.sample(StandardNormal);
        s * b + (1.0 - s) * a + std * z
    }))
}

/// Masked squared error and its gradient for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointLoss {
    pub loss: f64,
    pub grad: Array1<f64>,
    /// The target had no expressed gene, so the mask is empty.
    pub degenerate: bool,
}

/// `Σ dᵢ (x_Tᵢ - predᵢ)² / Σ dᵢ` with `dᵢ = [x_Tᵢ ≠ 0]`. An all-zero target
/// yields zero loss and gradient and is flagged degenerate.
pub fn masked_endpoint_loss(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<EndpointLoss> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} genes, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if target.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("target contains non-finite values".into()));
    }
    let active = target.iter().filter(|&&x| x != 0.0).count();
    if active == 0 {
        return Ok(EndpointLoss {
            loss: 0.0,
            grad: Array1::zeros(pred.len()),
            degenerate: true,
        });
    }
    let denom = active as f64;
    let mut loss = 0.0;
    let grad = Zip::from(&pred).and(&target).map_collect(|&p, &y| {
        if y == 0.0 {
            0.0
        } else {
            let r = y - p;
            loss += r * r;
            -2.0 * r / denom
        }
    });
    Ok(EndpointLoss {
        loss: loss / denom,
        grad,
        degenerate: false,
    })
}

/// `v_t = (pred - x_t) / max(T - t, h)`.
pub fn drift_from_endpoint(
    pred: ArrayView1<f64>,
    x_t: ArrayView1<f64>,
    t: f64,
    cfg: &BridgeConfig,
) -> Array1<f64> {
    let denom = (cfg.horizon - t).max(cfg.step_size());
    Zip::from(&pred).and(&x_t).map_collect(|&p, &x| (p - x) / denom)
}

/// Euler–Maruyama over the uniform grid for a batch of trajectories (one per
/// row). `predictor(t, x_t)` returns predicted endpoints for every row. The
/// last step is noiseless and lands on the prediction made at `T - h`.
pub fn sample_endpoints<R, F>(
    x0: &RealMatrix,
    mut predictor: F,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<RealMatrix>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &RealMatrix) -> Result<RealMatrix>,
{
    cfg.validate()?;
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("initial state contains non-finite values".into()));
    }
    let h = cfg.step_size();
    let noise = cfg.sigma * h.sqrt();
    let mut x = x0.clone();
    for k in 0..cfg.steps {
        let t = cfg.time(k);
        let pred = predictor(t, &x)?;
        if pred.dim() != x.dim() {
            return Err(Error::Dimension(format!(
                "predictor returned {:?}, expected {:?}",
                pred.dim(),
                x.dim()
            )));
        }
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!(
                "predictor returned non-finite values at step {k} (t = {t})"
            )));
        }
        if k + 1 == cfg.steps {
            x = pred;
            break;
        }
        let w = cfg.step_ratio(t, h);
        let z: Array2<f64> = Array2::from_shape_simple_fn(x.raw_dim(), || rng.sample(StandardNormal));
        Zip::from(&mut x)
            .and(&pred)
            .and(&z)
            .for_each(|xi, &p, &zi| *xi += w * (p - *xi) + noise * zi);
    }
    Ok(x)
}

/// Single-trajectory form of [`sample_endpoints`].
pub fn sample_endpoint<R, F>(
    x0: ArrayView1<f64>,
    mut predictor: F,
    cfg: &BridgeConfig,
    rng: &mut R,
) -> Result<Array1<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(f64, ArrayView1<f64>) -> Result<Array1<f64>>,
{
    let start = x0.to_owned().insert_axis(ndarray::Axis(0));
    let out = sample_endpoints(
        &start,
        |t, x| Ok(predictor(t, x.row(0))?.insert_axis(ndarray::Axis(0))),
        cfg,
        rng,
    )?;
    Ok(out.row(0).to_owned())
}
