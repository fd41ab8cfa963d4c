//! Expression datasets: CSV ingest and export, median-total log1p
//! normalization, highly-variable-gene selection, a synthetic benchmark
//! generator with known shifts, and train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionKey, Vocabulary, CONTROL_NAME};
use crate::error::{Error, Result};
use crate::nn::RealMatrix;

const FIXED_COLUMNS: [&str; 4] = ["cell_id", "cell_type", "perturbation", "dosage"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Log1p,
}

/// Cells × genes matrix with one condition key per cell. Control cells carry
/// perturbation id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionDataset {
    pub matrix: RealMatrix,
    pub gene_names: Vec<String>,
    pub cell_ids: Vec<String>,
    pub conditions: Vec<ConditionKey>,
    pub vocab: Vocabulary,
    pub provenance: Provenance,
}

impl ExpressionDataset {
    pub fn n_cells(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_control(&self, cell: usize) -> bool {
        self.conditions[cell].is_control()
    }

    /// Control cell indices keyed by cell type id.
    pub fn controls_by_cell_type(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, k) in self.conditions.iter().enumerate() {
            if k.is_control() {
                out.entry(k.cell_type_id).or_default().push(i);
            }
        }
        out
    }

    /// Perturbed cell indices keyed by condition.
    pub fn perturbed_groups(&self) -> BTreeMap<ConditionKey, Vec<usize>> {
        let mut out: BTreeMap<ConditionKey, Vec<usize>> = BTreeMap::new();
        for (i, k) in self.conditions.iter().enumerate() {
            if !k.is_control() {
                out.entry(*k).or_default().push(i);
            }
        }
        out
    }

    pub fn rows(&self, idx: &[usize]) -> RealMatrix {
        self.matrix.select(Axis(0), idx)
    }

    /// Keeps the given cells, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            matrix: self.rows(idx),
            gene_names: self.gene_names.clone(),
            cell_ids: idx.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            conditions: idx.iter().map(|&i| self.conditions[i]).collect(),
            vocab: self.vocab.clone(),
            provenance: self.provenance,
        }
    }

    /// Re-expresses condition ids in `vocab`, matching by name. Files loaded
    /// separately intern names in their own order, so ids only agree after this.
    pub fn with_vocab(&self, vocab: &Vocabulary) -> Result<Self> {
        let cell_types = self
            .vocab
            .cell_types
            .iter()
            .map(|n| vocab.cell_type_id(n))
            .collect::<Result<Vec<_>>>()?;
        let perturbations = self
            .vocab
            .perturbations
            .iter()
            .map(|n| vocab.perturbation_id(n))
            .collect::<Result<Vec<_>>>()?;
        let mut out = self.clone();
        for k in &mut out.conditions {
            *k = ConditionKey::new(cell_types[k.cell_type_id], perturbations[k.perturbation_id], k.dosage);
        }
        out.vocab = vocab.clone();
        Ok(out)
    }

    /// Keeps the given genes, in the given order.
    pub fn gene_subset(&self, genes: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select(Axis(1), genes),
            gene_names: genes.iter().map(|&g| self.gene_names[g].clone()).collect(),
            ..self.clone()
        }
    }

    /// Checks shape consistency, finiteness, and non-negativity.
    pub fn validate(&self) -> Result<()> {
        let (n, g) = self.matrix.dim();
        if self.gene_names.len() != g || self.cell_ids.len() != n || self.conditions.len() != n {
            return Err(Error::Data("dataset fields have inconsistent lengths".into()));
        }
        if let Some(pos) = self.matrix.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Data(format!(
                "cell {} gene {} is negative or non-finite",
                self.cell_ids[pos / g],
                self.gene_names[pos % g]
            )));
        }
        for k in &self.conditions {
            self.vocab.check(k)?;
        }
        Ok(())
    }

    /// Every perturbed condition needs controls of its cell type to train on.
    /// Held-out files legitimately carry none.
    pub fn check_controls(&self) -> Result<()> {
        let controls = self.controls_by_cell_type();
        for key in self.perturbed_groups().keys() {
            if !controls.contains_key(&key.cell_type_id) {
                return Err(Error::Data(format!(
                    "condition {} (cell type `{}`) has no control cells",
                    self.describe(key),
                    self.vocab.cell_types[key.cell_type_id]
                )));
            }
        }
        Ok(())
    }

    /// Human-readable condition name.
    pub fn describe(&self, key: &ConditionKey) -> String {
        format!(
            "{}/{}/{}",
            self.vocab
                .perturbations
                .get(key.perturbation_id)
                .map_or("?", String::as_str),
            key.dosage,
            self.vocab
                .cell_types
                .get(key.cell_type_id)
                .map_or("?", String::as_str)
        )
    }
}

fn parse_error(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads the expression CSV:
/// `cell_id,cell_type,perturbation,dosage,<gene_1>,...,<gene_N>`.
pub fn load_matrix(path: &Path, provenance: Provenance) -> Result<ExpressionDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(path, 1, e.to_string()))?,
        None => return Err(parse_error(path, 1, "empty file")),
    };
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i) != Some(*expected) {
            return Err(parse_error(
                path,
                1,
                format!(
                    "column {} must be `{expected}`, found `{}`",
                    i + 1,
                    header.get(i).unwrap_or("")
                ),
            ));
        }
    }
    let gene_names: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(String::from).collect();
    let n_genes = gene_names.len();
    let mut vocab = Vocabulary::default();
    let mut cell_ids = Vec::new();
    let mut conditions = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n_genes + FIXED_COLUMNS.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", n_genes + FIXED_COLUMNS.len(), rec.len()),
            ));
        }
        cell_ids.push(rec[0].to_string());
        let cell_type = vocab.intern_cell_type(&rec[1]);
        let perturbation = if &rec[2] == CONTROL_NAME {
            0
        } else {
            vocab.intern_perturbation(&rec[2])
        };
        let dosage: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad dosage `{}`", &rec[3])))?;
        if !(dosage.is_finite() && dosage >= 0.0) {
            return Err(parse_error(path, line, format!("dosage {dosage} must be >= 0")));
        }
        conditions.push(ConditionKey::new(cell_type, perturbation, dosage));
        for (j, field) in rec.iter().skip(FIXED_COLUMNS.len()).enumerate() {
            let x: f64 = field.trim().parse().map_err(|_| {
                parse_error(path, line, format!("gene `{}`: bad value `{field}`", gene_names[j]))
            })?;
            if !x.is_finite() || x < 0.0 {
                return Err(parse_error(
                    path,
                    line,
                    format!("gene `{}`: negative or non-finite count {x}", gene_names[j]),
                ));
            }
            values.push(x);
        }
    }
    let matrix = Array2::from_shape_vec((cell_ids.len(), n_genes), values)
        .map_err(|e| parse_error(path, 0, e.to_string()))?;
    let ds = ExpressionDataset {
        matrix,
        gene_names,
        cell_ids,
        conditions,
        vocab,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the expression CSV. Values use the shortest representation that
/// round-trips exactly.
pub fn save_matrix(ds: &ExpressionDataset, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let header = FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(ds.gene_names.iter().cloned());
    w.write_record(header).map_err(|e| io(e.into()))?;
    for (i, row) in ds.matrix.rows().into_iter().enumerate() {
        let k = &ds.conditions[i];
        let fields = [
            ds.cell_ids[i].clone(),
            ds.vocab.cell_types[k.cell_type_id].clone(),
            ds.vocab.perturbations[k.perturbation_id].clone(),
            k.dosage.to_string(),
        ]
        .into_iter()
        .chain(row.iter().map(|x| x.to_string()));
        w.write_record(fields).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Scales each cell to the median cell total, then applies `ln(1 + x)`.
/// Cells with zero total are dropped with a warning.
pub fn log1p_normalize(ds: &ExpressionDataset) -> Result<ExpressionDataset> {
    if ds.provenance != Provenance::Raw {
        return Err(Error::State("dataset is already log1p-normalized".into()));
    }
    let totals = ds.matrix.sum_axis(Axis(1));
    let keep: Vec<usize> = (0..ds.n_cells()).filter(|&i| totals[i] > 0.0).collect();
    if keep.len() < ds.n_cells() {
        log::warn!(
            "dropping {} cell(s) with zero total count",
            ds.n_cells() - keep.len()
        );
    }
    if keep.is_empty() {
        return Err(Error::Data("every cell has zero total count".into()));
    }
    let mut kept: Vec<f64> = keep.iter().map(|&i| totals[i]).collect();
    kept.sort_by(f64::total_cmp);
    let m = kept.len();
    let median = if m % 2 == 1 {
        kept[m / 2]
    } else {
        0.5 * (kept[m / 2 - 1] + kept[m / 2])
    };
    let mut out = ds.subset(&keep);
    for (mut row, &i) in out.matrix.rows_mut().into_iter().zip(&keep) {
        let scale = median / totals[i];
        row.mapv_inplace(|x| (x * scale).ln_1p());
    }
    out.provenance = Provenance::Log1p;
    Ok(out)
}

/// Per-gene population variance across all cells.
pub fn gene_variances(m: &RealMatrix) -> Vec<f64> {
    m.var_axis(Axis(0), 0.0).to_vec()
}

/// Keeps the `n` genes with the largest variance (ties to the lower index),
/// preserving the original gene order.
pub fn select_hvg(ds: &ExpressionDataset, n: usize) -> Result<ExpressionDataset> {
    if n > ds.n_genes() {
        return Err(Error::Input(format!(
            "requested {n} HVGs but dataset has {} genes",
            ds.n_genes()
        )));
    }
    if ds.provenance != Provenance::Log1p {
        return Err(Error::State("HVG selection requires normalized data".into()));
    }
    let var = gene_variances(&ds.matrix);
    let mut order: Vec<usize> = (0..var.len()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(ds.gene_subset(&chosen))
}

/// Parameters of the synthetic benchmark. Every perturbation is applied to
/// every cell type, giving `n_conditions * n_cell_types` condition groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_genes: usize,
    pub n_cells_per_condition: usize,
    pub n_conditions: usize,
    pub n_cell_types: usize,
    pub cluster_count: usize,
    pub shift_magnitude: f64,
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_genes: 200,
            n_cells_per_condition: 500,
            n_conditions: 4,
            n_cell_types: 2,
            cluster_count: 3,
            shift_magnitude: 1.0,
            sparsity: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_genes,
            self.n_cells_per_condition,
            self.n_conditions,
            self.n_cell_types,
            self.cluster_count,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic counts must all be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} not in [0, 1)", self.sparsity)));
        }
        if !self.shift_magnitude.is_finite() {
            return Err(Error::Config("shift_magnitude must be finite".into()));
        }
        Ok(())
    }
}

/// Per-condition mean shift applied before clipping and resparsification.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub gene_names: Vec<String>,
    pub shifts: BTreeMap<ConditionKey, Vec<f64>>,
}

/// Within-cluster noise scale of the synthetic generator.
const SYNTH_NOISE: f64 = 0.4;
/// Spread of cluster centres around the cell-type baseline.
const SYNTH_CLUSTER_SPREAD: f64 = 0.8;

/// Controls come from a Gaussian mixture per cell type. A perturbation adds a
/// gene-wise shift shared by all cell types, then values are clipped at zero
/// and each gene is zeroed independently with probability `sparsity`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<(ExpressionDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.n_genes;
    let baseline = Uniform::new(1.0, 3.0).expect("valid range");
    let spread = Normal::new(0.0, SYNTH_CLUSTER_SPREAD).expect("valid scale");
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid scale");
    let unit = Normal::new(0.0, 1.0).expect("valid scale");

    let mut vocab = Vocabulary::default();
    // centres[cell_type][cluster][gene]
    let mut centres = Vec::with_capacity(spec.n_cell_types);
    for c in 0..spec.n_cell_types {
        vocab.intern_cell_type(&format!("celltype_{c}"));
        let base: Vec<f64> = (0..g).map(|_| baseline.sample(&mut rng)).collect();
        let clusters: Vec<Vec<f64>> = (0..spec.cluster_count)
            .map(|_| base.iter().map(|b| b + spread.sample(&mut rng)).collect())
            .collect();
        centres.push(clusters);
    }
    let mut shifts_by_pert = Vec::with_capacity(spec.n_conditions);
    for p in 0..spec.n_conditions {
        vocab.intern_perturbation(&format!("pert_{p}"));
        let shift: Vec<f64> = (0..g)
            .map(|_| spec.shift_magnitude * unit.sample(&mut rng))
            .collect();
        shifts_by_pert.push(shift);
    }

    let n_cells = spec.n_cells_per_condition * spec.n_cell_types * (spec.n_conditions + 1);
    let mut values = Vec::with_capacity(n_cells * g);
    let mut cell_ids = Vec::with_capacity(n_cells);
    let mut conditions = Vec::with_capacity(n_cells);
    let mut shifts = BTreeMap::new();
    let mut draw = |rng: &mut ChaCha8Rng, clusters: &[Vec<f64>], shift: Option<&[f64]>| {
        let k = rng.random_range(0..clusters.len());
        let row: Vec<f64> = (0..g)
            .map(|j| {
                let mut x = clusters[k][j] + noise.sample(rng);
                if let Some(s) = shift {
                    x += s[j];
                    x = x.max(0.0);
                    if spec.sparsity > 0.0 && rng.random::<f64>() < spec.sparsity {
                        x = 0.0;
                    }
                }
                x.max(0.0)
            })
            .collect();
        values.extend(row);
    };
    for (c, clusters) in centres.iter().enumerate() {
        for i in 0..spec.n_cells_per_condition {
            draw(&mut rng, clusters, None);
            cell_ids.push(format!("ct{c}_control_{i}"));
            conditions.push(ConditionKey::new(c, 0, 0.0));
        }
    }
    for (p, shift) in shifts_by_pert.iter().enumerate() {
        for (c, clusters) in centres.iter().enumerate() {
            let key = ConditionKey::new(c, p + 1, 0.0);
            shifts.insert(key, shift.clone());
            for i in 0..spec.n_cells_per_condition {
                draw(&mut rng, clusters, Some(shift));
                cell_ids.push(format!("ct{c}_pert{p}_{i}"));
                conditions.push(key);
            }
        }
    }
    let gene_names: Vec<String> = (0..g).map(|j| format!("gene_{j}")).collect();
    let matrix = Array2::from_shape_vec((n_cells, g), values)
        .map_err(|e| Error::State(e.to_string()))?;
    let ds = ExpressionDataset {
        matrix,
        gene_names: gene_names.clone(),
        cell_ids,
        conditions,
        vocab,
        provenance: Provenance::Log1p,
    };
    Ok((ds, GroundTruth { gene_names, shifts }))
}

impl GroundTruth {
    /// CSV `perturbation,dosage,cell_type,<gene shifts...>`.
    pub fn write_csv(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        write!(w, "perturbation,dosage,cell_type").map_err(io)?;
        for g in &self.gene_names {
            write!(w, ",{g}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for (k, shift) in &self.shifts {
            write!(
                w,
                "{},{},{}",
                vocab.perturbations[k.perturbation_id], k.dosage, vocab.cell_types[k.cell_type_id]
            )
            .map_err(io)?;
            for s in shift {
                write!(w, ",{s}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Hold out whole perturbation ids.
    ByPerturbation,
    /// Hold out whole `(perturbation, dosage, cell type)` groups independently.
    ByConditionGroup,
}

/// Splits perturbed cells into train and test. Control cells always go to
/// train.
pub fn split(
    ds: &ExpressionDataset,
    mode: SplitMode,
    fraction: f64,
    seed: u64,
) -> Result<(ExpressionDataset, ExpressionDataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction {fraction} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = ds.perturbed_groups();
    let held_out: BTreeSet<ConditionKey> = match mode {
        SplitMode::ByPerturbation => {
            let perts: BTreeSet<usize> = groups.keys().map(|k| k.perturbation_id).collect();
            let mut perts: Vec<usize> = perts.into_iter().collect();
            perts.shuffle(&mut rng);
            let n_test = (fraction * perts.len() as f64).round() as usize;
            let test: BTreeSet<usize> = perts[..n_test].iter().copied().collect();
            groups
                .keys()
                .filter(|k| test.contains(&k.perturbation_id))
                .copied()
                .collect()
        }
        SplitMode::ByConditionGroup => groups
            .keys()
            .filter(|_| rng.random::<f64>() < fraction)
            .copied()
            .collect(),
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, k) in ds.conditions.iter().enumerate() {
        if held_out.contains(k) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    if test.is_empty() {
        return Err(Error::Split(format!("seed {seed} produced an empty test set")));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Retries [`split`] with successive seeds until the test set is non-empty
/// and every held-out perturbation id also occurs in a training group, so
/// that its embedding row receives gradient. Returns the seed that was used.
pub fn split_with_seen_perturbations(
    ds: &ExpressionDataset,
    mode: SplitMode,
    fraction: f64,
    seed: u64,
) -> Result<(ExpressionDataset, ExpressionDataset, u64)> {
    const ATTEMPTS: u64 = 1000;
    for s in seed..seed.saturating_add(ATTEMPTS) {
        let (train, test) = match split(ds, mode, fraction, s) {
            Ok(parts) => parts,
            Err(Error::Split(_)) => continue,
            Err(e) => return Err(e),
        };
        let seen: BTreeSet<usize> = train.perturbed_groups().keys().map(|k| k.perturbation_id).collect();
        if test
            .perturbed_groups()
            .keys()
            .all(|k| seen.contains(&k.perturbation_id))
        {
            return Ok((train, test, s));
        }
    }
    Err(Error::Split(format!(
        "no split in seeds {seed}..{} keeps every test perturbation in train",
        seed.saturating_add(ATTEMPTS)
    )))
}
