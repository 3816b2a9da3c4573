//! Region logits, class-specific region aggregation and the
//! positive/negative contrastive classifier.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex = logits.mapv(|l| (l - max).exp());
    let z = ex.sum();
    ex / z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Weights from a softmax over the positive region logits, shared by
    /// both polarities.
    #[default]
    SoftmaxWeighted,
    Average,
    /// The region with the largest positive logit.
    Max,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::SoftmaxWeighted => "softmax_weighted",
            Aggregation::Average => "average",
            Aggregation::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub tau: f64,
    pub aggregation: Aggregation,
    pub spatial_temp: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            aggregation: Aggregation::SoftmaxWeighted,
            spatial_temp: 1.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.spatial_temp > 0.0 && self.spatial_temp.is_finite()) {
            return Err(Error::invalid(format!(
                "spatial_temp must be positive, got {}",
                self.spatial_temp
            )));
        }
        Ok(())
    }
}

/// Cosine similarities of every region with every class feature, R x M.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLogits {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
}

impl RegionLogits {
    pub fn n_regions(&self) -> usize {
        self.pos.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.pos.ncols()
    }
}

/// Divides every row by its L2 norm; zero rows are rejected.
pub fn normalize_rows(m: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate(format!(
                "{what} row {i} has zero norm; cosine similarity is undefined"
            )));
        }
        row /= n;
    }
    Ok(out)
}

/// Region logits from already unit-norm rows.
pub fn region_logits_normalized(v_hat: &Array2<f64>, t_pos_hat: &Array2<f64>, t_neg_hat: &Array2<f64>) -> RegionLogits {
    RegionLogits {
        pos: v_hat.dot(&t_pos_hat.t()),
        neg: v_hat.dot(&t_neg_hat.t()),
    }
}

pub fn region_logits(f_v: &Array2<f64>, f_t_pos: &Array2<f64>, f_t_neg: &Array2<f64>) -> Result<RegionLogits> {
    let d = f_v.ncols();
    for (m, context) in [
        (f_t_pos, "positive text feature width"),
        (f_t_neg, "negative text feature width"),
    ] {
        if m.ncols() != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: d,
                actual: m.ncols(),
            });
        }
    }
    if f_t_pos.nrows() != f_t_neg.nrows() {
        return Err(Error::DimensionMismatch {
            context: "negative vs positive class count",
            expected: f_t_pos.nrows(),
            actual: f_t_neg.nrows(),
        });
    }
    Ok(region_logits_normalized(
        &normalize_rows(f_v, "region feature")?,
        &normalize_rows(f_t_pos, "positive text feature")?,
        &normalize_rows(f_t_neg, "negative text feature")?,
    ))
}

/// Result of aggregating one class column, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ColumnAggregate {
    pub s_pos: f64,
    pub s_neg: f64,
    /// Region weights (softmax / average) or the selected region (max).
    pub weights: Option<Vec<f64>>,
    pub argmax: usize,
}

/// Index of the largest value, first occurrence on ties.
fn argmax(col: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in col.iter().enumerate() {
        if v > col[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn spatial_weights(pos_col: ArrayView1<'_, f64>, spatial_temp: f64) -> Array1<f64> {
    softmax(pos_col.mapv(|s| s / spatial_temp).view())
}

pub(crate) fn aggregate_column(
    pos_col: ArrayView1<'_, f64>,
    neg_col: ArrayView1<'_, f64>,
    cfg: &ClassifierConfig,
) -> ColumnAggregate {
    let r = pos_col.len();
    match cfg.aggregation {
        Aggregation::SoftmaxWeighted => {
            let w = spatial_weights(pos_col, cfg.spatial_temp);
            ColumnAggregate {
                s_pos: w.dot(&pos_col),
                s_neg: w.dot(&neg_col),
                weights: Some(w.to_vec()),
                argmax: 0,
            }
        }
        Aggregation::Average => ColumnAggregate {
            s_pos: pos_col.sum() / r as f64,
            s_neg: neg_col.sum() / r as f64,
            weights: None,
            argmax: 0,
        },
        Aggregation::Max => {
            let i = argmax(pos_col);
            ColumnAggregate {
                s_pos: pos_col[i],
                s_neg: neg_col[i],
                weights: None,
                argmax: i,
            }
        }
    }
}

/// Accumulates d(loss)/d(region logits) for one class column given
/// d(loss)/dS+ and d(loss)/dS-.
#[allow(clippy::too_many_arguments)]
pub(crate) fn aggregate_column_backward(
    pos_col: ArrayView1<'_, f64>,
    neg_col: ArrayView1<'_, f64>,
    agg: &ColumnAggregate,
    cfg: &ClassifierConfig,
    d_pos: f64,
    d_neg: f64,
    mut out_pos: ndarray::ArrayViewMut1<'_, f64>,
    mut out_neg: ndarray::ArrayViewMut1<'_, f64>,
) {
    let r = pos_col.len();
    match cfg.aggregation {
        Aggregation::SoftmaxWeighted => {
            let w = agg.weights.as_ref().expect("softmax weights");
            let t = cfg.spatial_temp;
            for i in 0..r {
                // dS+/ds+_i = w_i + w_i (s+_i - S+) / t ; dS-/ds+_i = w_i (s-_i - S-) / t
                let wi = w[i];
                out_pos[i] +=
                    d_pos * (wi + wi * (pos_col[i] - agg.s_pos) / t) + d_neg * wi * (neg_col[i] - agg.s_neg) / t;
                out_neg[i] += d_neg * wi;
            }
        }
        Aggregation::Average => {
            let inv = 1.0 / r as f64;
            out_pos.iter_mut().for_each(|g| *g += d_pos * inv);
            out_neg.iter_mut().for_each(|g| *g += d_neg * inv);
        }
        Aggregation::Max => {
            out_pos[agg.argmax] += d_pos;
            out_neg[agg.argmax] += d_neg;
        }
    }
}

/// Per-class aggregated logits `(S+_m, S-_m)`.
pub fn aggregate(rl: &RegionLogits, cfg: &ClassifierConfig) -> Result<(Array1<f64>, Array1<f64>)> {
    if rl.n_regions() == 0 {
        return Err(Error::invalid("cannot aggregate over an empty region set"));
    }
    let m = rl.n_classes();
    let mut sp = Array1::zeros(m);
    let mut sn = Array1::zeros(m);
    for c in 0..m {
        let a = aggregate_column(rl.pos.column(c), rl.neg.column(c), cfg);
        sp[c] = a.s_pos;
        sn[c] = a.s_neg;
    }
    Ok((sp, sn))
}

/// `exp(S+/tau) / (exp(S+/tau) + exp(S-/tau))` in logistic form.
pub fn class_probability(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    1.0 / (1.0 + ((s_neg - s_pos) / tau).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub s_pos: Vec<f64>,
    pub s_neg: Vec<f64>,
    pub p: Vec<f64>,
}

impl ScorePair {
    pub fn new(s_pos: Vec<f64>, s_neg: Vec<f64>, tau: f64) -> Self {
        let p = s_pos
            .iter()
            .zip(&s_neg)
            .map(|(&a, &b)| class_probability(a, b, tau))
            .collect();
        Self { s_pos, s_neg, p }
    }
}

/// +1 where the positive logit strictly beats the negative one, else -1.
pub fn predict_labels(sp: &ScorePair) -> Vec<i8> {
    sp.s_pos
        .iter()
        .zip(&sp.s_neg)
        .map(|(a, b)| if a > b { 1 } else { -1 })
        .collect()
}

/// Spatial weights used for `class_index`, reshaped to the H x W grid.
pub fn export_attention_maps(
    rl: &RegionLogits,
    cfg: &ClassifierConfig,
    class_index: usize,
    shape: (usize, usize),
) -> Result<Array2<f64>> {
    if cfg.aggregation != Aggregation::SoftmaxWeighted {
        return Err(Error::invalid(format!(
            "attention maps need softmax_weighted aggregation, not {}",
            cfg.aggregation
        )));
    }
    if class_index >= rl.n_classes() {
        return Err(Error::invalid(format!(
            "class index {class_index} out of range for {} classes",
            rl.n_classes()
        )));
    }
    if shape.0 * shape.1 != rl.n_regions() {
        return Err(Error::DimensionMismatch {
            context: "attention grid cells vs regions",
            expected: rl.n_regions(),
            actual: shape.0 * shape.1,
        });
    }
    let w = spatial_weights(rl.pos.column(class_index), cfg.spatial_temp);
    Ok(w.into_shape_with_order(shape).expect("size checked"))
}

pub fn write_attention_csv<W: Write>(out: W, grid: &Array2<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in grid.axis_iter(Axis(0)) {
        wtr.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Binary 8-bit PGM with weights scaled linearly so the largest maps to 255.
pub fn write_attention_pgm<W: Write>(mut out: W, grid: &Array2<f64>, comment: Option<&str>) -> Result<()> {
    let (h, w) = grid.dim();
    let max = grid.iter().cloned().fold(0.0, f64::max);
    let mut buf = Vec::with_capacity(32 + h * w);
    buf.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    buf.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for &v in grid.iter() {
        let px = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
        buf.push(px.clamp(0.0, 255.0) as u8);
    }
    out.write_all(&buf).map_err(|e| Error::io("<pgm>", e))
}
