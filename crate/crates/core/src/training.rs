//! Joint training of the endpoint predictor and the activation posterior,
//! conditional generation, and held-out evaluation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::continuous::{interpolate, masked_endpoint_loss, sample_endpoints};
use crate::bridge::discrete::{
    discrete_interpolate, discretize, discretize_matrix, posterior_loss, sample_activations,
    ActivationVector,
};
use crate::bridge::{time_features, BridgeConfig};
use crate::conditioning::{self, ConditionKey, Vocabulary, EMBED_DIM};
use crate::data::ExpressionDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, AggregateReport, MetricsReport};
use crate::nn::{self, sigmoid, ForwardCache, MlpShape, OptimizerConfig, ParameterSet, RealMatrix};
use crate::ot::{self, EpochPairs, PairingStrategy, SinkhornConfig};

/// Predictor architecture shared by both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    /// Endpoint predictor outputs `x_t + MLP(...)` instead of `MLP(...)`.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 3],
            time_features: 16,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub bridge: BridgeConfig,
    pub sinkhorn: SinkhornConfig,
    pub pairing: PairingStrategy,
    /// Train the activation model and mask generated values with it. When
    /// off, the endpoint loss covers every gene and outputs are unmasked.
    pub discrete: bool,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            bridge: BridgeConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            pairing: PairingStrategy::default(),
            discrete: true,
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.model.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be even".into()));
        }
        self.optimizer.validate()?;
        self.bridge.validate()?;
        self.sinkhorn.validate()
    }
}

/// Network inputs are `[state, time features, condition embedding]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub n_genes: usize,
    pub gene_names: Vec<String>,
    pub vocab_text: String,
    pub model: ModelConfig,
    pub bridge: BridgeConfig,
    pub discrete: bool,
}

/// The trained pair of predictors plus what is needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeModel {
    pub gene_names: Vec<String>,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub bridge: BridgeConfig,
    /// Endpoint predictor `x_θ(t, x_t, condition)`.
    pub continuous: ParameterSet,
    /// Activation posterior logits `d_θ(t, d_t, condition)`.
    pub discrete: Option<ParameterSet>,
}

const MODEL_MAGIC: &[u8; 4] = b"SBMD";

impl BridgeModel {
    pub fn new<R: Rng + ?Sized>(
        gene_names: Vec<String>,
        vocab: Vocabulary,
        model: ModelConfig,
        bridge: BridgeConfig,
        discrete: bool,
        rng: &mut R,
    ) -> Self {
        let n = gene_names.len();
        let shape = MlpShape {
            input: n + model.time_features + EMBED_DIM,
            hidden: model.hidden.clone(),
            output: n,
        };
        let tables = conditioning::table_shapes(&vocab);
        let continuous = ParameterSet::new(&shape, &tables, rng);
        let discrete = discrete.then(|| ParameterSet::new(&shape, &tables, rng));
        Self {
            gene_names,
            vocab,
            model,
            bridge,
            continuous,
            discrete,
        }
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice(), path)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = ModelHeader {
            n_genes: self.n_genes(),
            gene_names: self.gene_names.clone(),
            vocab_text: self.vocab.to_text(),
            model: self.model.clone(),
            bridge: self.bridge,
            discrete: self.discrete.is_some(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        self.continuous.write_to(w)?;
        if let Some(d) = &self.discrete {
            d.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Input(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
        let header: ModelHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let vocab = Vocabulary::parse(&header.vocab_text, path)?;
        let continuous = ParameterSet::read_from(r)?;
        let discrete = if header.discrete {
            Some(ParameterSet::read_from(r)?)
        } else {
            None
        };
        let expect_in = header.n_genes + header.model.time_features + EMBED_DIM;
        for p in std::iter::once(&continuous).chain(discrete.as_ref()) {
            if p.input_width() != expect_in || p.output_width() != header.n_genes {
                return Err(bad("parameter shapes do not match header".into()));
            }
        }
        Ok(Self {
            gene_names: header.gene_names,
            vocab,
            model: header.model,
            bridge: header.bridge,
            continuous,
            discrete,
        })
    }
}

/// Assembles network inputs, one row per sample.
fn build_input(
    params: &ParameterSet,
    states: &RealMatrix,
    times: &[f64],
    conditions: &[ConditionKey],
    model: &ModelConfig,
    bridge: &BridgeConfig,
) -> Result<RealMatrix> {
    let (b, n) = states.dim();
    let tf = model.time_features;
    let mut input = Array2::zeros((b, n + tf + EMBED_DIM));
    input.slice_mut(s![.., ..n]).assign(states);
    let mut cache: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (i, (&t, key)) in times.iter().zip(conditions).enumerate() {
        let feats = cache
            .entry(t.to_bits())
            .or_insert_with(|| time_features(t, bridge.horizon, tf));
        let mut row = input.row_mut(i);
        row.slice_mut(s![n..n + tf])
            .assign(&ArrayView1::from(feats.as_slice()));
        conditioning::embed_into(key, params, row.slice_mut(s![n + tf..]))?;
    }
    Ok(input)
}

/// Runs one predictor on a batch.
pub fn predict(
    params: &ParameterSet,
    states: &RealMatrix,
    times: &[f64],
    conditions: &[ConditionKey],
    model: &ModelConfig,
    bridge: &BridgeConfig,
    record: bool,
) -> Result<(RealMatrix, Option<ForwardCache>)> {
    let input = build_input(params, states, times, conditions, model, bridge)?;
    nn::forward(params, &input, record)
}

/// Backpropagates through the network and into the condition tables.
pub fn predict_backward(
    params: &mut ParameterSet,
    cache: &ForwardCache,
    grad_output: &RealMatrix,
    conditions: &[ConditionKey],
) -> Result<()> {
    let grad_in = nn::backward(params, Some(cache), grad_output)?;
    let offset = grad_in.ncols() - EMBED_DIM;
    for (row, key) in grad_in.rows().into_iter().zip(conditions) {
        conditioning::embed_backward(key, params, row.slice(s![offset..]))?;
    }
    Ok(())
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cont: f64,
    pub l_disc: f64,
    pub wallclock_s: f64,
}

impl EpochLog {
    pub fn total(&self) -> f64 {
        self.l_cont + self.l_disc
    }
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,l_cont,l_disc,wallclock_s\n");
    for e in log {
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_cont, e.l_disc, e.wallclock_s));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training tuples for one minibatch. Each discrete tuple is built from the
/// discretized endpoints of its continuous tuple.
#[derive(Debug, Clone)]
pub struct BridgeBatch {
    pub x0: RealMatrix,
    pub x_end: RealMatrix,
    pub x_t: RealMatrix,
    pub d0: Vec<ActivationVector>,
    pub d_end: Vec<ActivationVector>,
    pub d_t: RealMatrix,
    pub times: Vec<f64>,
    pub conditions: Vec<ConditionKey>,
}

/// Draws `t ~ U[0, T - h]` per sample and the bridge states at `t`.
pub fn build_batch<R: Rng + ?Sized>(
    ds: &ExpressionDataset,
    pairs: &[(ConditionKey, usize, usize)],
    bridge: &BridgeConfig,
    rng: &mut R,
) -> Result<BridgeBatch> {
    let b = pairs.len();
    let n = ds.n_genes();
    let src: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let tgt: Vec<usize> = pairs.iter().map(|p| p.2).collect();
    let x0 = ds.rows(&src);
    let x_end = ds.rows(&tgt);
    let mut x_t = Array2::zeros((b, n));
    let mut d_t = Array2::zeros((b, n));
    let mut d0 = Vec::with_capacity(b);
    let mut d_end = Vec::with_capacity(b);
    let mut times = Vec::with_capacity(b);
    let t_max = bridge.max_train_time();
    for i in 0..b {
        let t = rng.random::<f64>() * t_max;
        x_t.row_mut(i)
            .assign(&interpolate(x0.row(i), x_end.row(i), t, bridge, rng)?);
        let a = discretize(x0.row(i));
        let z = discretize(x_end.row(i));
        let mid = discrete_interpolate(&a, &z, t, bridge, rng)?;
        d_t.row_mut(i).assign(&mid.to_real());
        d0.push(a);
        d_end.push(z);
        times.push(t);
    }
    Ok(BridgeBatch {
        x0,
        x_end,
        x_t,
        d0,
        d_end,
        d_t,
        times,
        conditions: pairs.iter().map(|p| p.0).collect(),
    })
}

/// Mean squared error over every gene; used when no activation model exists.
fn unmasked_endpoint_loss(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let n = pred.len() as f64;
    let diff = &pred - &target;
    (diff.mapv(|d| d * d).sum() / n, diff.mapv(|d| 2.0 * d / n))
}

/// Losses of one batch, with gradients written into the models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub l_cont: f64,
    pub l_disc: f64,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.l_cont + self.l_disc
    }
}

/// Forward and backward for both predictors on one batch. Batch losses are
/// sample means; gradients are accumulated, not applied.
pub fn batch_gradients(model: &mut BridgeModel, batch: &BridgeBatch) -> Result<BatchLoss> {
    let b = batch.times.len();
    let scale = 1.0 / b as f64;
    let (pred, cache) = predict(
        &model.continuous,
        &batch.x_t,
        &batch.times,
        &batch.conditions,
        &model.model,
        &model.bridge,
        true,
    )?;
    let pred = if model.model.residual { pred + &batch.x_t } else { pred };
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut l_cont = 0.0;
    for i in 0..b {
        let (loss, g) = if model.discrete.is_some() {
            let l = masked_endpoint_loss(pred.row(i), batch.x_end.row(i))?;
            (l.loss, l.grad)
        } else {
            unmasked_endpoint_loss(pred.row(i), batch.x_end.row(i))
        };
        l_cont += loss * scale;
        grad.row_mut(i).assign(&(g * scale));
    }
    predict_backward(
        &mut model.continuous,
        cache.as_ref().expect("recorded"),
        &grad,
        &batch.conditions,
    )?;

    let mut l_disc = 0.0;
    if let Some(disc) = model.discrete.as_mut() {
        let (logits, cache) = predict(
            disc,
            &batch.d_t,
            &batch.times,
            &batch.conditions,
            &model.model,
            &model.bridge,
            true,
        )?;
        let mut grad = Array2::zeros(logits.raw_dim());
        for i in 0..b {
            let (loss, g) = posterior_loss(logits.row(i), &batch.d_end[i])?;
            l_disc += loss * scale;
            grad.row_mut(i).assign(&(g * scale));
        }
        predict_backward(disc, cache.as_ref().expect("recorded"), &grad, &batch.conditions)?;
    }
    Ok(BatchLoss { l_cont, l_disc })
}

/// Fraction of perturbed cells whose profile is entirely zero.
fn degenerate_fraction(ds: &ExpressionDataset) -> f64 {
    let groups = ds.perturbed_groups();
    let total: usize = groups.values().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let zero = groups
        .values()
        .flatten()
        .filter(|&&i| ds.matrix.row(i).iter().all(|&x| x == 0.0))
        .count();
    zero as f64 / total as f64
}

/// Trains on every perturbed cell of `ds`, re-pairing at each epoch start.
/// `on_epoch` runs after each epoch with the current model.
pub fn train_with<F>(
    ds: &ExpressionDataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(BridgeModel, Vec<EpochLog>)>
where
    F: FnMut(usize, &BridgeModel) -> Result<()>,
{
    cfg.validate()?;
    ds.validate()?;
    ds.check_controls()?;
    if ds.perturbed_groups().is_empty() {
        return Err(Error::Data("no perturbed cells to train on".into()));
    }
    let zero_frac = degenerate_fraction(ds);
    if zero_frac > 0.01 {
        log::warn!(
            "{:.1}% of perturbed cells are all-zero and contribute no endpoint loss",
            100.0 * zero_frac
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = BridgeModel::new(
        ds.gene_names.clone(),
        ds.vocab.clone(),
        cfg.model.clone(),
        cfg.bridge,
        cfg.discrete,
        &mut rng,
    );
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let pairs = ot::epoch_pairing(ds, &cfg.sinkhorn, cfg.pairing, &mut rng)?;
        let mut flat = flatten_pairs(&pairs);
        flat.shuffle(&mut rng);
        let (mut sum_cont, mut sum_disc) = (0.0, 0.0);
        for (bi, chunk) in flat.chunks(cfg.batch_size).enumerate() {
            let batch = build_batch(ds, chunk, &cfg.bridge, &mut rng)?;
            let loss = batch_gradients(&mut model, &batch)?;
            if !loss.total().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            nn::optimizer_step(&mut model.continuous, &cfg.optimizer)?;
            if let Some(d) = model.discrete.as_mut() {
                nn::optimizer_step(d, &cfg.optimizer)?;
            }
            let w = chunk.len() as f64;
            sum_cont += loss.l_cont * w;
            sum_disc += loss.l_disc * w;
        }
        let n = flat.len() as f64;
        let entry = EpochLog {
            epoch,
            l_cont: sum_cont / n,
            l_disc: sum_disc / n,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: l_cont {:.5} l_disc {:.5} ({:.1}s)",
            entry.l_cont,
            entry.l_disc,
            entry.wallclock_s
        );
        log.push(entry);
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

pub fn train(ds: &ExpressionDataset, cfg: &TrainConfig) -> Result<(BridgeModel, Vec<EpochLog>)> {
    train_with(ds, cfg, |_, _| Ok(()))
}

/// Pairs in condition order as `(condition, source_row, target_row)`.
pub fn flatten_pairs(pairs: &EpochPairs) -> Vec<(ConditionKey, usize, usize)> {
    pairs
        .iter()
        .flat_map(|(k, list)| list.iter().map(move |&(s, t)| (*k, s, t)))
        .collect()
}

/// Output of [`generate`]: `values = endpoints ⊙ activations`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub values: RealMatrix,
    pub endpoints: RealMatrix,
    pub activations: RealMatrix,
}

/// Samples from both bridges for each control row. Without an activation
/// model the endpoints are returned unmasked and activations are their
/// nonzero pattern.
pub fn generate_with<R, FC, FD>(
    controls: &RealMatrix,
    bridge: &BridgeConfig,
    continuous: FC,
    discrete: Option<FD>,
    rng: &mut R,
) -> Result<Generated>
where
    R: Rng + ?Sized,
    FC: FnMut(f64, &RealMatrix) -> Result<RealMatrix>,
    FD: FnMut(f64, &RealMatrix) -> Result<RealMatrix>,
{
    let endpoints = sample_endpoints(controls, continuous, bridge, rng)?;
    let (values, activations) = match discrete {
        Some(pred) => {
            let start = discretize_matrix(controls);
            let act = sample_activations(&start, pred, bridge, rng)?;
            (&endpoints * &act, act)
        }
        None => (endpoints.clone(), discretize_matrix(&endpoints)),
    };
    Ok(Generated {
        values,
        endpoints,
        activations,
    })
}

pub fn generate<R: Rng + ?Sized>(
    model: &BridgeModel,
    controls: &RealMatrix,
    condition: &ConditionKey,
    rng: &mut R,
) -> Result<Generated> {
    model.vocab.check(condition)?;
    if controls.ncols() != model.n_genes() {
        return Err(Error::Dimension(format!(
            "controls have {} genes, model expects {}",
            controls.ncols(),
            model.n_genes()
        )));
    }
    let conds = vec![*condition; controls.nrows()];
    let run = |params: &ParameterSet, t: f64, x: &RealMatrix| {
        let times = vec![t; x.nrows()];
        predict(params, x, &times, &conds, &model.model, &model.bridge, false).map(|r| r.0)
    };
    let continuous = |t: f64, x: &RealMatrix| {
        let out = run(&model.continuous, t, x)?;
        Ok(if model.model.residual { out + x } else { out })
    };
    let discrete = model
        .discrete
        .as_ref()
        .map(|d| move |t: f64, x: &RealMatrix| Ok(run(d, t, x)?.mapv(sigmoid)));
    generate_with(controls, &model.bridge, continuous, discrete, rng)
}

/// Per-condition and aggregate metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_condition: Vec<ConditionReport>,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub metrics: MetricsReport,
}

/// Draws `n` rows from `pool`, without replacement when possible.
pub fn sample_rows<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= n {
        rand::seq::index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Evaluates every perturbed condition of `test` against samples generated
/// from `train` controls of the matching cell type. `predictor` maps
/// `(condition, sampled controls, rng)` to predicted cells; DE genes come
/// from all train controls of the cell type vs the true perturbed cells.
pub fn evaluate_with<F>(
    train: &ExpressionDataset,
    test: &ExpressionDataset,
    seed: u64,
    mut predictor: F,
) -> Result<Evaluation>
where
    F: FnMut(&ConditionKey, &RealMatrix, &mut ChaCha8Rng) -> Result<RealMatrix>,
{
    let groups = test.perturbed_groups();
    if groups.is_empty() {
        return Err(Error::Data("test set has no perturbed cells".into()));
    }
    let controls = train.controls_by_cell_type();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_condition = Vec::with_capacity(groups.len());
    for (key, cells) in &groups {
        let mut local = ChaCha8Rng::seed_from_u64(rng.random());
        let pool = controls.get(&key.cell_type_id).ok_or_else(|| {
            Error::Data(format!(
                "no train controls for condition {}",
                test.describe(key)
            ))
        })?;
        let picked = sample_rows(pool, cells.len(), &mut local);
        let pred = predictor(key, &train.rows(&picked), &mut local)?;
        let truth = test.rows(cells);
        let report = metrics::compare(&pred, &truth, &train.rows(pool), &mut local)?;
        per_condition.push(ConditionReport {
            condition: test.describe(key),
            metrics: report,
        });
    }
    let reports: Vec<MetricsReport> = per_condition.iter().map(|c| c.metrics.clone()).collect();
    Ok(Evaluation {
        aggregate: metrics::aggregate(&reports),
        per_condition,
    })
}

pub fn evaluate(
    model: &BridgeModel,
    train: &ExpressionDataset,
    test: &ExpressionDataset,
    seed: u64,
) -> Result<Evaluation> {
    evaluate_with(train, test, seed, |key, controls, rng| {
        Ok(generate(model, controls, key, rng)?.values)
    })
}

/// Keeps only rows whose condition matches `key`.
pub fn condition_rows(ds: &ExpressionDataset, key: &ConditionKey) -> Vec<usize> {
    (0..ds.n_cells()).filter(|&i| ds.conditions[i] == *key).collect()
}

/// Mean prediction row, handy for quick sanity checks.
pub fn mean_row(m: &RealMatrix) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}
