//! Ranking and thresholded multi-label metrics, plus the evaluation driver
//! for the partial-label, ZSL and GZSL protocols.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassCatalog, LabelMatrix, ZslSplit};
use crate::encoders::EncoderBackend;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{encode_classes, score_images, ProjectedImages};
use crate::prompts::{PromptBank, PromptMode};
use crate::scoring::{predict_labels, ClassifierConfig};

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Ranking by score, descending; equal scores keep ascending index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank.
///
/// Cells labelled 0 are ignored. Returns `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[i8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs labels",
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let mut hits = 0usize;
    let mut rank = 0usize;
    let mut sum = 0.0;
    for i in ranking(scores) {
        match labels[i] {
            0 => continue,
            1 => {
                rank += 1;
                hits += 1;
                sum += hits as f64 / rank as f64;
            }
            _ => rank += 1,
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub per_class: Vec<ClassCounts>,
    /// Classes without a known positive, left out of the CR mean.
    pub skipped_in_cr: Vec<usize>,
}

/// Per-class-averaged and overall precision, recall and F1.
///
/// Truth cells equal to 0 are not counted.
pub fn classwise_overall_metrics(pred: &LabelMatrix, truth: &LabelMatrix) -> Result<ThresholdMetrics> {
    pred.ensure_same_shape(truth, "predictions vs truth")?;
    let m = truth.n_classes();
    let mut per_class = vec![ClassCounts::default(); m];
    for i in 0..truth.n_images() {
        for (c, counts) in per_class.iter_mut().enumerate() {
            match (pred.get(i, c) > 0, truth.get(i, c)) {
                (_, 0) => {}
                (true, 1) => counts.tp += 1,
                (true, _) => counts.fp += 1,
                (false, 1) => counts.fn_ += 1,
                (false, _) => {}
            }
        }
    }
    let cp = per_class.iter().map(|k| ratio(k.tp, k.tp + k.fp)).sum::<f64>() / m as f64;
    let with_pos: Vec<&ClassCounts> = per_class.iter().filter(|k| k.tp + k.fn_ > 0).collect();
    let cr = if with_pos.is_empty() {
        0.0
    } else {
        with_pos.iter().map(|k| ratio(k.tp, k.tp + k.fn_)).sum::<f64>() / with_pos.len() as f64
    };
    let tp: usize = per_class.iter().map(|k| k.tp).sum();
    let fp: usize = per_class.iter().map(|k| k.fp).sum();
    let fn_: usize = per_class.iter().map(|k| k.fn_).sum();
    let (op, or) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let skipped_in_cr = (0..m).filter(|&c| per_class[c].tp + per_class[c].fn_ == 0).collect();
    Ok(ThresholdMetrics {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
        per_class,
        skipped_in_cr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits: usize,
    pub truth_positives: usize,
}

/// Precision/recall/F1 of each image's `k` highest-scoring classes.
///
/// Ties go to the lower class index. Truth cells equal to 0 count as not
/// positive.
pub fn topk_metrics(scores: &[Vec<f64>], truth: &LabelMatrix, k: usize) -> Result<TopKMetrics> {
    let m = truth.n_classes();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("top-k needs 1 <= k <= {m}, got {k}")));
    }
    if scores.len() != truth.n_images() {
        return Err(Error::DimensionMismatch {
            context: "score rows vs truth rows",
            expected: truth.n_images(),
            actual: scores.len(),
        });
    }
    let mut hits = 0;
    let mut positives = 0;
    for (i, row) in scores.iter().enumerate() {
        if row.len() != m {
            return Err(Error::DimensionMismatch {
                context: "score row width",
                expected: m,
                actual: row.len(),
            });
        }
        let t = truth.row(i);
        positives += t.iter().filter(|&&v| v == 1).count();
        hits += ranking(row).into_iter().take(k).filter(|&c| t[c] == 1).count();
    }
    let precision = ratio(hits, k * scores.len());
    let recall = ratio(hits, positives);
    Ok(TopKMetrics {
        k,
        precision,
        recall,
        f1: f1(precision, recall),
        hits,
        truth_positives: positives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    #[default]
    PartialLabel,
    /// Unseen classes only.
    Zsl,
    /// Seen and unseen classes together.
    Gzsl,
}

impl std::fmt::Display for EvalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalKind::PartialLabel => "partial_label",
            EvalKind::Zsl => "zsl",
            EvalKind::Gzsl => "gzsl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMode {
    pub kind: EvalKind,
    pub topk: Vec<usize>,
    pub split: Option<ZslSplit>,
}

impl EvalMode {
    pub fn partial_label(topk: Vec<usize>) -> Self {
        Self {
            kind: EvalKind::PartialLabel,
            topk,
            split: None,
        }
    }

    /// Class indices scored under this mode.
    pub fn classes(&self, n_classes: usize) -> Result<Vec<usize>> {
        if self.topk.contains(&0) {
            return Err(Error::invalid("top-k values must be at least 1"));
        }
        match (self.kind, &self.split) {
            (EvalKind::PartialLabel, _) => Ok((0..n_classes).collect()),
            (_, None) => Err(Error::invalid(format!(
                "{} evaluation needs a seen/unseen split",
                self.kind
            ))),
            (kind, Some(s)) => {
                s.validate(n_classes)?;
                Ok(match kind {
                    EvalKind::Zsl => s.unseen().to_vec(),
                    _ => s.all(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalKind,
    pub n_images: usize,
    pub n_classes: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    #[serde(rename = "OP")]
    pub op: f64,
    #[serde(rename = "OR")]
    pub or: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    /// `P@k`, `R@k` and `F1@k` for each requested k.
    pub topk: BTreeMap<String, f64>,
    pub per_class_ap: Vec<ClassAp>,
    /// Classes with no positive, excluded from mAP.
    pub excluded_from_map: Vec<String>,
    pub skipped_in_cr: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl MetricsReport {
    pub fn topk_ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .topk
            .keys()
            .filter_map(|key| key.strip_prefix("P@")?.parse().ok())
            .collect();
        ks.sort_unstable();
        ks
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "mode",
            "n_images",
            "n_classes",
            "mAP",
            "CP",
            "CR",
            "CF1",
            "OP",
            "OR",
            "OF1",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for k in self.topk_ks() {
            h.extend([format!("P@{k}"), format!("R@{k}"), format!("F1@{k}")]);
        }
        h.push("config_digest".into());
        h
    }

    pub fn csv_values(&self) -> Vec<String> {
        let mut v = vec![
            self.mode.to_string(),
            self.n_images.to_string(),
            self.n_classes.to_string(),
        ];
        v.extend([self.map, self.cp, self.cr, self.cf1, self.op, self.or, self.of1].map(|x| format!("{x}")));
        for k in self.topk_ks() {
            for key in [format!("P@{k}"), format!("R@{k}"), format!("F1@{k}")] {
                v.push(format!("{}", self.topk[&key]));
            }
        }
        v.push(self.config_digest.clone().unwrap_or_default());
        v
    }

    /// Header plus one data row.
    pub fn write_csv_row<W: Write>(&self, out: W, with_header: bool) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        if with_header {
            wtr.write_record(self.csv_header())?;
        }
        wtr.write_record(self.csv_values())?;
        wtr.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }
}

/// Scores every image in the mode's class subset and computes all metrics.
///
/// Ranked metrics order classes by the classifier logit
/// `(S+ - S-) / tau`, the quantity `p` is a monotone function of; ranking
/// on the logit avoids ties once `p` saturates to 1.0 in floating point.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    bank: &PromptBank,
    catalog: &ClassCatalog,
    encoder: &dyn EncoderBackend,
    images: &ProjectedImages,
    truth: &LabelMatrix,
    mode: &EvalMode,
    cfg: &ClassifierConfig,
    exec: ExecMode,
) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::invalid("nothing to evaluate: image set is empty"));
    }
    if truth.n_images() != images.len() || truth.n_classes() != catalog.len() {
        return Err(Error::invalid(
            "truth labels do not match the evaluated images and classes",
        ));
    }
    if mode.kind != EvalKind::PartialLabel && bank.mode() == PromptMode::ClassSpecific {
        return Err(Error::IncompatibleMode(format!(
            "{} evaluation scores unseen classes, which needs a shared prompt bank; got class_specific",
            mode.kind
        )));
    }
    let classes = mode.classes(catalog.len())?;
    let text = encode_classes(bank, catalog, encoder)?;
    let scored = score_images(images, &text, cfg, exec)?;

    let n = images.len();
    let sub_truth = LabelMatrix::from_rows(
        &(0..n)
            .map(|i| classes.iter().map(|&c| truth.get(i, c)).collect())
            .collect::<Vec<Vec<i8>>>(),
    )?;
    let margins: Vec<Vec<f64>> = scored
        .iter()
        .map(|sp| classes.iter().map(|&c| (sp.s_pos[c] - sp.s_neg[c]) / cfg.tau).collect())
        .collect();
    let preds = LabelMatrix::from_rows(
        &scored
            .iter()
            .map(|sp| {
                let all = predict_labels(sp);
                classes.iter().map(|&c| all[c]).collect()
            })
            .collect::<Vec<Vec<i8>>>(),
    )?;

    let mut per_class_ap = Vec::with_capacity(classes.len());
    let mut excluded = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_count = 0;
    for (j, &c) in classes.iter().enumerate() {
        let col_scores: Vec<f64> = margins.iter().map(|r| r[j]).collect();
        let col_labels: Vec<i8> = (0..n).map(|i| sub_truth.get(i, j)).collect();
        let ap = average_precision(&col_scores, &col_labels)?;
        let name = catalog.names()[c].clone();
        match ap {
            Some(v) => {
                ap_sum += v;
                ap_count += 1;
            }
            None => excluded.push(name.clone()),
        }
        per_class_ap.push(ClassAp { class: name, ap });
    }

    let th = classwise_overall_metrics(&preds, &sub_truth)?;
    let mut topk = BTreeMap::new();
    for &k in &mode.topk {
        let t = topk_metrics(&margins, &sub_truth, k)?;
        topk.insert(format!("P@{k}"), t.precision);
        topk.insert(format!("R@{k}"), t.recall);
        topk.insert(format!("F1@{k}"), t.f1);
    }

    Ok(MetricsReport {
        mode: mode.kind,
        n_images: n,
        n_classes: classes.len(),
        map: if ap_count == 0 { 0.0 } else { ap_sum / ap_count as f64 },
        cp: th.cp,
        cr: th.cr,
        cf1: th.cf1,
        op: th.op,
        or: th.or,
        of1: th.of1,
        topk,
        per_class_ap,
        excluded_from_map: excluded,
        skipped_in_cr: th
            .skipped_in_cr
            .iter()
            .map(|&j| catalog.names()[classes[j]].clone())
            .collect(),
        config_digest: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.7, 0.1], &[1, -1, 1, -1]).unwrap(),
            Some((1.0 + 2.0 / 3.0) / 2.0)
        );
        assert_eq!(
            average_precision(&[0.1, 0.9, 0.5], &[1, -1, 1]).unwrap(),
            Some((1.0 / 2.0 + 2.0 / 3.0) / 2.0)
        );
        assert_eq!(average_precision(&[0.3], &[1]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.3, 0.2], &[1, 1]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.3, 0.2], &[-1, -1]).unwrap(), None);
        // ties keep ascending index order
        assert_eq!(average_precision(&[0.5, 0.5], &[-1, 1]).unwrap(), Some(0.5));
        // unknown cells are skipped
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[0, -1, 1]).unwrap(), Some(0.5));
    }

    #[test]
    fn threshold_examples() {
        let truth = LabelMatrix::from_rows(&[vec![1, -1], vec![-1, 1]]).unwrap();
        let m = classwise_overall_metrics(&truth, &truth).unwrap();
        assert_eq!((m.cp, m.cr, m.cf1, m.op, m.or, m.of1), (1.0, 1.0, 1.0, 1.0, 1.0, 1.0));

        let none = LabelMatrix::from_rows(&[vec![-1, -1], vec![-1, -1]]).unwrap();
        let m = classwise_overall_metrics(&none, &truth).unwrap();
        assert_eq!((m.cr, m.or), (0.0, 0.0));

        let pred = LabelMatrix::from_rows(&[vec![1, 1], vec![-1, 1]]).unwrap();
        let m = classwise_overall_metrics(&pred, &truth).unwrap();
        assert_eq!(m.per_class[0], ClassCounts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(m.per_class[1], ClassCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(m.cp, 0.75);
        assert_eq!(m.op, 2.0 / 3.0);
        assert_eq!((m.cr, m.or), (1.0, 1.0));

        assert!(classwise_overall_metrics(&LabelMatrix::zeros(1, 2), &truth).is_err());
    }

    #[test]
    fn topk_examples() {
        let truth = LabelMatrix::from_rows(&[vec![1, -1, 1, -1]]).unwrap();
        let t = topk_metrics(&[vec![0.9, 0.8, 0.7, 0.1]], &truth, 3).unwrap();
        assert_eq!((t.precision, t.recall), (2.0 / 3.0, 1.0));
        assert!((t.f1 - 0.8).abs() < 1e-15);

        let truth = LabelMatrix::from_rows(&[vec![-1, 1, -1], vec![1, -1, -1]]).unwrap();
        let t = topk_metrics(&[vec![0.1, 0.2, 0.3], vec![0.5, 0.4, 0.3]], &truth, 3).unwrap();
        assert_eq!(t.recall, 1.0);

        let truth = LabelMatrix::from_rows(&[vec![-1, -1, 1, 1]]).unwrap();
        let t = topk_metrics(&[vec![0.5; 4]], &truth, 2).unwrap();
        assert_eq!(t.hits, 0);
        assert!(topk_metrics(&[vec![0.5; 4]], &truth, 5).is_err());
    }

    #[test]
    fn ap_is_invariant_to_monotone_transforms() {
        let scores = [0.3, -1.2, 0.8, 0.05, 2.0, -0.4];
        let labels = [1, -1, -1, 1, 1, -1];
        let base = average_precision(&scores, &labels).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        assert_eq!(average_precision(&t, &labels).unwrap(), base);
    }

    #[test]
    fn report_csv_columns() {
        let mut topk = BTreeMap::new();
        for k in [5, 3] {
            topk.insert(format!("P@{k}"), 0.5);
            topk.insert(format!("R@{k}"), 0.25);
            topk.insert(format!("F1@{k}"), 1.0 / 3.0);
        }
        let r = MetricsReport {
            mode: EvalKind::Zsl,
            n_images: 2,
            n_classes: 5,
            map: 0.5,
            cp: 0.0,
            cr: 0.0,
            cf1: 0.0,
            op: 0.0,
            or: 0.0,
            of1: 0.0,
            topk,
            per_class_ap: vec![],
            excluded_from_map: vec![],
            skipped_in_cr: vec![],
            config_digest: Some("d".into()),
        };
        let h = r.csv_header();
        assert_eq!(&h[10..13], &["P@3", "R@3", "F1@3"]);
        assert_eq!(&h[13..16], &["P@5", "R@5", "F1@5"]);
        assert_eq!(h.len(), r.csv_values().len());
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
