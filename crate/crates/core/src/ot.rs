//! Source–target coupling by minibatch entropic optimal transport.
//!
//! For every perturbed condition a batch of controls of the same cell type is
//! drawn, a cost matrix is built under the chosen metric, the entropic plan is
//! solved with log-domain Sinkhorn iterations, and one source is sampled per
//! target from the plan's column.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionKey;
use crate::data::ExpressionDataset;
use crate::error::{Error, Result};
use crate::nn::RealMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    #[default]
    SquaredEuclidean,
    Euclidean,
    /// `1 - cos(a, b)`; undefined for zero vectors.
    CosineDistance,
}

/// Entropic regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Absolute(f64),
    /// Multiple of the mean entry of the cost matrix.
    RelativeToMeanCost(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    pub max_iters: usize,
    /// Bound on the largest absolute marginal residual.
    pub tolerance: f64,
    pub metric: CostMetric,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: Epsilon::RelativeToMeanCost(0.05),
            max_iters: 1000,
            tolerance: 1e-6,
            metric: CostMetric::SquaredEuclidean,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        let e = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::RelativeToMeanCost(e) => e,
        };
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::Config(format!("sinkhorn epsilon must be > 0, got {e}")));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn max_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// The absolute regularization used for `cost`.
    pub fn resolve_epsilon(&self, cost: &RealMatrix) -> f64 {
        match self.epsilon {
            Epsilon::Absolute(e) => e,
            Epsilon::RelativeToMeanCost(r) => {
                let mean = cost.mean().unwrap_or(0.0);
                r * if mean > 0.0 { mean } else { 1.0 }
            }
        }
    }
}

/// `C[i][j]` = distance between `source` row `i` and `target` row `j`.
pub fn cost_matrix(source: &RealMatrix, target: &RealMatrix, metric: CostMetric) -> Result<RealMatrix> {
    if source.ncols() != target.ncols() {
        return Err(Error::Dimension(format!(
            "source has {} genes, target has {}",
            source.ncols(),
            target.ncols()
        )));
    }
    let sq_norms = |m: &RealMatrix| m.map_axis(Axis(1), |r| r.dot(&r));
    let (ns, nt) = (sq_norms(source), sq_norms(target));
    if metric == CostMetric::CosineDistance {
        for (name, norms) in [("source", &ns), ("target", &nt)] {
            if let Some(i) = norms.iter().position(|&n| n == 0.0) {
                return Err(Error::Degenerate(format!(
                    "{name} row {i} has zero norm under cosine distance"
                )));
            }
        }
    }
    let (src, tgt) = (source.as_standard_layout(), target.as_standard_layout());
    let mut cost = Array2::zeros((source.nrows(), target.nrows()));
    for ((i, j), c) in cost.indexed_iter_mut() {
        let (a, b) = (src.row(i), tgt.row(j));
        let (a, b) = (a.as_slice().expect("standard layout"), b.as_slice().expect("standard layout"));
        *c = match metric {
            CostMetric::SquaredEuclidean => squared_distance(a, b),
            CostMetric::Euclidean => squared_distance(a, b).sqrt(),
            CostMetric::CosineDistance => (1.0 - dot(a, b) / (ns[i] * nt[j]).sqrt()).max(0.0),
        };
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    Ok(cost)
}

/// Four-lane accumulation so the loop vectorizes.
fn lanes(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| f(x, y)).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += f(x[k], y[k]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| (x - y) * (x - y))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    lanes(a, b, |x, y| x * y)
}

/// Outcome of a Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub plan: RealMatrix,
    /// Largest absolute deviation of any row or column sum from `1/B`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub epsilon: f64,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Scaling vectors beyond `e^ABSORB_AT` are folded into the log potentials.
const ABSORB_AT: f64 = 30.0;
const CHECK_EVERY: usize = 5;

/// Exact log-domain update of both potentials, `f` then `g`.
fn log_domain_step(neg_c: &RealMatrix, neg_c_t: &RealMatrix, f: &mut Array1<f64>, g: &mut Array1<f64>, log_mass: f64) {
    let mut buf = vec![0.0; f.len()];
    let mut half = |m: &RealMatrix, dual: &Array1<f64>, out: &mut Array1<f64>| {
        for (o, row) in out.iter_mut().zip(m.rows()) {
            for ((b, c), d) in buf.iter_mut().zip(row.iter()).zip(dual.iter()) {
                *b = c + d;
            }
            *o = log_mass - log_sum_exp(&buf);
        }
    };
    half(neg_c, g, f);
    half(neg_c_t, f, g);
}

/// `K x` for a standard-layout `K`.
fn mat_vec(k: &RealMatrix, x: &Array1<f64>) -> Array1<f64> {
    let x = x.as_slice().expect("contiguous");
    k.rows()
        .into_iter()
        .map(|r| dot(r.as_slice().expect("standard layout"), x))
        .collect()
}

/// `Kᵀ x` as a sum of scaled rows.
fn mat_t_vec(k: &RealMatrix, x: &Array1<f64>) -> Array1<f64> {
    let mut out = vec![0.0; k.ncols()];
    for (r, &xi) in k.rows().into_iter().zip(x.iter()) {
        for (o, &kij) in out.iter_mut().zip(r.as_slice().expect("standard layout")) {
            *o += xi * kij;
        }
    }
    Array1::from(out)
}

/// `K_ij = exp(f_i + g_j - C_ij / ε)`.
fn stabilized_kernel(neg_c: &RealMatrix, f: &Array1<f64>, g: &Array1<f64>) -> RealMatrix {
    let mut k = neg_c.clone();
    for (mut row, fi) in k.rows_mut().into_iter().zip(f.iter()) {
        for (x, gj) in row.iter_mut().zip(g.iter()) {
            *x = (*x + fi + gj).exp();
        }
    }
    k
}

/// Entropic OT between uniform marginals on a square cost. The plan is
/// `exp(f_i + g_j - C_ij / ε)` scaled by vectors `a`, `b`; whenever those
/// grow large, or a kernel row or column underflows, they are absorbed into
/// the log potentials `f`, `g`, so small `ε` stays stable.
pub fn sinkhorn(cost: &RealMatrix, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if n != m || n == 0 {
        return Err(Error::Dimension(format!(
            "sinkhorn expects a non-empty square cost, got {n}x{m}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    let epsilon = cfg.resolve_epsilon(cost);
    if n == 1 {
        return Ok(SinkhornResult {
            plan: Array2::ones((1, 1)),
            residual: 0.0,
            iterations: 0,
            converged: true,
            epsilon,
        });
    }
    let mass = 1.0 / n as f64;
    let log_mass = mass.ln();
    let neg_c = cost.mapv(|c| -c / epsilon);
    let neg_c_t = neg_c.t().as_standard_layout().into_owned();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(n);
    log_domain_step(&neg_c, &neg_c_t, &mut f, &mut g, log_mass);
    let mut iterations = 1;
    let mut kernel = stabilized_kernel(&neg_c, &f, &g);
    let mut a = Array1::<f64>::ones(n);
    let mut b = Array1::<f64>::ones(n);
    let usable = |x: &Array1<f64>| x.iter().all(|&v| v > 0.0 && v.is_finite());
    while iterations < cfg.max_iters {
        iterations += 1;
        let kb = mat_vec(&kernel, &b);
        let next_a = kb.mapv(|s| mass / s);
        let kta = mat_t_vec(&kernel, &next_a);
        let next_b = kta.mapv(|s| mass / s);
        if !usable(&next_a) || !usable(&next_b) {
            // Underflowed kernel: fall back to one exact step and rebuild.
            f += &a.mapv(f64::ln);
            g += &b.mapv(f64::ln);
            log_domain_step(&neg_c, &neg_c_t, &mut f, &mut g, log_mass);
            kernel = stabilized_kernel(&neg_c, &f, &g);
            a.fill(1.0);
            b.fill(1.0);
            continue;
        }
        a = next_a;
        b = next_b;
        let large = a.iter().chain(b.iter()).any(|v| v.ln().abs() > ABSORB_AT);
        if large {
            f += &a.mapv(f64::ln);
            g += &b.mapv(f64::ln);
            kernel = stabilized_kernel(&neg_c, &f, &g);
            a.fill(1.0);
            b.fill(1.0);
        }
        if iterations % CHECK_EVERY == 0 {
            // Columns are exact after the b update; rows carry the error.
            let rows = &a * &mat_vec(&kernel, &b);
            let step_residual = rows.iter().map(|r| (r - mass).abs()).fold(0.0, f64::max);
            if step_residual < cfg.tolerance {
                break;
            }
        }
    }
    let mut plan = kernel;
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p *= a[i] * b[j];
    }
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let residual = rows
        .iter()
        .chain(cols.iter())
        .map(|s| (s - mass).abs())
        .fold(0.0, f64::max);
    let converged = residual < cfg.tolerance;
    if !converged {
        log::warn!(
            "sinkhorn did not converge in {iterations} iterations: residual {residual:.3e} (tolerance {:.1e})",
            cfg.tolerance
        );
    }
    Ok(SinkhornResult {
        plan,
        residual,
        iterations,
        converged,
        epsilon,
    })
}

/// `Σ P ⊙ C`.
pub fn transport_cost(plan: &RealMatrix, cost: &RealMatrix) -> f64 {
    (plan * cost).sum()
}

/// How a target picks its source from the plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    /// Categorical draw from the normalized plan column.
    #[default]
    Sample,
    /// Highest-mass source, lowest index on ties.
    Argmax,
}

/// A solved plan between sampled sources and a condition's targets.
#[derive(Debug, Clone)]
pub struct CouplingPlan {
    pub plan: RealMatrix,
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub condition: ConditionKey,
}

impl CouplingPlan {
    /// One `(source_id, target_id)` pair per target.
    pub fn extract_pairs<R: Rng + ?Sized>(
        &self,
        mode: Extraction,
        rng: &mut R,
    ) -> Result<Vec<(usize, usize)>> {
        let local = extract_pairs(&self.plan, mode, rng)?;
        Ok(local
            .into_iter()
            .map(|(s, t)| (self.source_ids[s], self.target_ids[t]))
            .collect())
    }
}

/// Local `(row, column)` pairs, one per column of `plan`.
pub fn extract_pairs<R: Rng + ?Sized>(
    plan: &RealMatrix,
    mode: Extraction,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::with_capacity(plan.ncols());
    for (j, col) in plan.columns().into_iter().enumerate() {
        if col.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Degenerate(format!("plan column {j} has invalid mass")));
        }
        let total: f64 = col.sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!("plan column {j} has zero mass")));
        }
        let i = match mode {
            Extraction::Argmax => col
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0,
            Extraction::Sample => {
                let mut u = rng.random::<f64>() * total;
                let mut pick = col.len() - 1;
                for (i, &p) in col.iter().enumerate() {
                    if u < p {
                        pick = i;
                        break;
                    }
                    u -= p;
                }
                // Skip trailing zero-mass rows if rounding overshot.
                while col[pick] == 0.0 && pick > 0 {
                    pick -= 1;
                }
                pick
            }
        };
        pairs.push((i, j));
    }
    Ok(pairs)
}

/// Source selection for training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    Ot(Extraction),
    /// Uniformly random controls, no transport plan.
    Random,
}

impl Default for PairingStrategy {
    fn default() -> Self {
        PairingStrategy::Ot(Extraction::Sample)
    }
}

/// `(source_row, target_row)` pairs per condition, indices into the dataset.
pub type EpochPairs = BTreeMap<ConditionKey, Vec<(usize, usize)>>;

/// Draws `count` controls: without replacement when enough exist, otherwise
/// with replacement.
fn sample_controls<R: Rng + ?Sized>(controls: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if controls.len() >= count {
        index::sample(rng, controls.len(), count)
            .into_iter()
            .map(|i| controls[i])
            .collect()
    } else {
        (0..count)
            .map(|_| controls[rng.random_range(0..controls.len())])
            .collect()
    }
}

/// Builds fresh source–target pairs for every perturbed condition in `ds`.
/// Each condition gets its own generator seeded from `rng`, in key order.
pub fn epoch_pairing<R: Rng + ?Sized>(
    ds: &ExpressionDataset,
    cfg: &SinkhornConfig,
    strategy: PairingStrategy,
    rng: &mut R,
) -> Result<EpochPairs> {
    let controls = ds.controls_by_cell_type();
    let mut out = BTreeMap::new();
    for (key, targets) in ds.perturbed_groups() {
        let mut local = ChaCha8Rng::seed_from_u64(rng.random());
        let pool = controls.get(&key.cell_type_id).ok_or_else(|| {
            Error::Data(format!(
                "condition {} has no control cells of its cell type",
                ds.describe(&key)
            ))
        })?;
        let sources = sample_controls(pool, targets.len(), &mut local);
        let pairs = match strategy {
            PairingStrategy::Random => sources.into_iter().zip(targets.iter().copied()).collect(),
            PairingStrategy::Ot(mode) => {
                let cost = cost_matrix(&ds.rows(&sources), &ds.rows(&targets), cfg.metric)?;
                let solved = sinkhorn(&cost, cfg)?;
                let plan = CouplingPlan {
                    plan: solved.plan,
                    source_ids: sources,
                    target_ids: targets.clone(),
                    condition: key,
                };
                plan.extract_pairs(mode, &mut local)?
            }
        };
        out.insert(key, pairs);
    }
    Ok(out)
}

/// Writes `condition,source_id,target_id` rows using cell ids.
pub fn write_pairs_csv(ds: &ExpressionDataset, pairs: &EpochPairs, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "condition,source_id,target_id").map_err(io)?;
    for (key, list) in pairs {
        let name = ds.describe(key);
        for &(s, t) in list {
            writeln!(w, "{name},{},{}", ds.cell_ids[s], ds.cell_ids[t]).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
