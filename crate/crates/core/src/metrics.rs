//! Two-sample evaluation metrics: energy distance, per-gene squared
//! 1-D Wasserstein distance, differential-expression gene ranking, and the
//! Pearson correlation of gene-wise activation frequencies.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::RealMatrix;

fn check_pair(a: &RealMatrix, b: &RealMatrix, min_rows: usize) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "sets have {} and {} genes",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < min_rows || b.nrows() < min_rows {
        return Err(Error::Input(format!(
            "need at least {min_rows} rows per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sum of Euclidean distances over all ordered pairs `(a, b)`, self-pairs
/// included when `a` and `b` are the same set.
fn cross_sum(a: &RealMatrix, b: &RealMatrix) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| b.rows().into_iter().map(|s| distance(r, s)).sum::<f64>())
        .sum()
}

/// Rows in lexicographic order, so that equal multisets produce bitwise
/// equal sums.
fn canonical(m: &RealMatrix) -> RealMatrix {
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&i, &j| {
        m.row(i)
            .iter()
            .zip(m.row(j).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    m.select(Axis(0), &idx)
}

/// Energy distance `2 E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖`, every expectation an
/// average over all ordered pairs (self-pairs included). Identical sets give
/// exactly zero.
pub fn e_distance(a: &RealMatrix, b: &RealMatrix) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (a, b) = (canonical(a), canonical(b));
    let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
    let cross = cross_sum(&a, &b) / (na * nb);
    let within_a = cross_sum(&a, &a) / (na * na);
    let within_b = cross_sum(&b, &b) / (nb * nb);
    Ok(2.0 * cross - within_a - within_b)
}

/// Energy distance with within-set averages over distinct ordered pairs.
/// Unbiased: its expectation is zero when both sets share one distribution.
pub fn e_distance_unbiased(a: &RealMatrix, b: &RealMatrix) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
    let cross = cross_sum(a, b) / (na * nb);
    let within_a = cross_sum(a, a) / (na * (na - 1.0));
    let within_b = cross_sum(b, b) / (nb * (nb - 1.0));
    Ok(2.0 * cross - within_a - within_b)
}

/// Downsamples the larger set without replacement so both have equal rows.
pub fn match_rows<R: Rng + ?Sized>(
    a: &RealMatrix,
    b: &RealMatrix,
    rng: &mut R,
) -> (RealMatrix, RealMatrix) {
    let n = a.nrows().min(b.nrows());
    let shrink = |m: &RealMatrix, rng: &mut R| {
        if m.nrows() == n {
            m.clone()
        } else {
            let mut idx = index::sample(rng, m.nrows(), n).into_vec();
            idx.sort_unstable();
            m.select(Axis(0), &idx)
        }
    };
    let a = shrink(a, rng);
    let b = shrink(b, rng);
    (a, b)
}

/// Squared 2-Wasserstein distance between two equal-size 1-D samples.
pub fn squared_w2_1d(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean over genes of the per-gene squared 2-Wasserstein distance. The larger
/// set is downsampled without replacement first.
pub fn emd_per_gene<R: Rng + ?Sized>(a: &RealMatrix, b: &RealMatrix, rng: &mut R) -> Result<f64> {
    check_pair(a, b, 1)?;
    if a.ncols() == 0 {
        return Err(Error::Input("no genes to compare".into()));
    }
    let (a, b) = match_rows(a, b, rng);
    let total: f64 = a
        .columns()
        .into_iter()
        .zip(b.columns())
        .map(|(x, y)| squared_w2_1d(&x.to_vec(), &y.to_vec()))
        .sum();
    Ok(total / a.ncols() as f64)
}

/// The `k` genes with the largest absolute mean difference, largest first,
/// ties to the lower index.
pub fn de_genes(control: &RealMatrix, perturbed: &RealMatrix, k: usize) -> Result<Vec<usize>> {
    check_pair(control, perturbed, 1)?;
    if k > control.ncols() {
        return Err(Error::Input(format!(
            "k = {k} exceeds gene count {}",
            control.ncols()
        )));
    }
    let mc = control.mean_axis(Axis(0)).expect("non-empty");
    let mp = perturbed.mean_axis(Axis(0)).expect("non-empty");
    let diff: Vec<f64> = (&mp - &mc).mapv(f64::abs).to_vec();
    let mut order: Vec<usize> = (0..diff.len()).collect();
    order.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "activation frequencies have zero variance; correlation undefined".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation across genes between the per-gene activation
/// frequencies of two binary matrices.
pub fn activation_pcc(pred: &RealMatrix, truth: &RealMatrix) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let freq = |m: &RealMatrix| {
        m.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 })
            .mean_axis(Axis(0))
            .expect("non-empty")
            .to_vec()
    };
    pearson(&freq(pred), &freq(truth))
}

/// Metrics for one condition. Correlations are `None` where undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub e_distance: f64,
    pub emd_all: f64,
    pub emd_de20: f64,
    pub emd_de40: f64,
    pub activation_pcc_all: Option<f64>,
    pub activation_pcc_de20: Option<f64>,
    pub activation_pcc_de40: Option<f64>,
    pub n_pred: usize,
    pub n_true: usize,
}

pub const REPORT_FIELDS: [&str; 9] = [
    "e_distance",
    "emd_all",
    "emd_de20",
    "emd_de40",
    "activation_pcc_all",
    "activation_pcc_de20",
    "activation_pcc_de40",
    "n_pred",
    "n_true",
];

/// Computes a [`MetricsReport`] for predicted vs true perturbed cells. DE
/// genes come from `control` vs `truth`.
pub fn compare<R: Rng + ?Sized>(
    pred: &RealMatrix,
    truth: &RealMatrix,
    control: &RealMatrix,
    rng: &mut R,
) -> Result<MetricsReport> {
    let n_genes = truth.ncols();
    let de20 = de_genes(control, truth, 20.min(n_genes))?;
    let de40 = de_genes(control, truth, 40.min(n_genes))?;
    let cols = |m: &RealMatrix, idx: &[usize]| m.select(Axis(1), idx);
    let pcc = |p: &RealMatrix, t: &RealMatrix| match activation_pcc(p, t) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(MetricsReport {
        e_distance: e_distance(pred, truth)?,
        emd_all: emd_per_gene(pred, truth, rng)?,
        emd_de20: emd_per_gene(&cols(pred, &de20), &cols(truth, &de20), rng)?,
        emd_de40: emd_per_gene(&cols(pred, &de40), &cols(truth, &de40), rng)?,
        activation_pcc_all: pcc(pred, truth)?,
        activation_pcc_de20: pcc(&cols(pred, &de20), &cols(truth, &de20))?,
        activation_pcc_de40: pcc(&cols(pred, &de40), &cols(truth, &de40))?,
        n_pred: pred.nrows(),
        n_true: truth.nrows(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.e_distance,
            self.emd_all,
            self.emd_de20,
            self.emd_de40,
            opt(self.activation_pcc_all),
            opt(self.activation_pcc_de20),
            opt(self.activation_pcc_de40),
            self.n_pred,
            self.n_true
        )
    }

    /// One header line plus one data row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = format!("{}\n{}\n", REPORT_FIELDS.join(","), self.csv_row());
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mean and sample standard deviation over conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_conditions: usize,
    pub e_distance: Option<Stat>,
    pub emd_all: Option<Stat>,
    pub emd_de20: Option<Stat>,
    pub emd_de40: Option<Stat>,
    pub activation_pcc_all: Option<Stat>,
    pub activation_pcc_de20: Option<Stat>,
    pub activation_pcc_de40: Option<Stat>,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let stat = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        Stat::of(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    AggregateReport {
        n_conditions: reports.len(),
        e_distance: stat(&|r| Some(r.e_distance)),
        emd_all: stat(&|r| Some(r.emd_all)),
        emd_de20: stat(&|r| Some(r.emd_de20)),
        emd_de40: stat(&|r| Some(r.emd_de40)),
        activation_pcc_all: stat(&|r| r.activation_pcc_all),
        activation_pcc_de20: stat(&|r| r.activation_pcc_de20),
        activation_pcc_de40: stat(&|r| r.activation_pcc_de40),
    }
}

/// Writes per-condition rows (`condition,<fields>`) to CSV.
pub fn write_reports_csv(rows: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "condition,{}", REPORT_FIELDS.join(",")).map_err(io)?;
    for (name, r) in rows {
        writeln!(w, "{name},{}", r.csv_row()).map_err(io)?;
    }
    w.flush().map_err(io)
}
