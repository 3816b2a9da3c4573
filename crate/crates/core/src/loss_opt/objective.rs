use ndarray::{s, Array2};

use super::{asl_from_logit, LossConfig, Reduction};
use crate::data::{ClassCatalog, LabelMatrix};
use crate::encoders::EncoderBackend;
use crate::error::{Error, Result, Stage};
use crate::exec::{map_reduce, ExecMode};
use crate::model::{encode_classes, image_region_logits, ProjectedImages, TextFeatures};
use crate::prompts::{assemble_prompt, Polarity, PromptBank};
use crate::scoring::{aggregate_column, aggregate_column_backward, ClassifierConfig};

/// Everything besides the prompt bank that the objective depends on.
#[derive(Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub catalog: &'a ClassCatalog,
    pub encoder: &'a dyn EncoderBackend,
    pub images: &'a ProjectedImages,
    /// Labels for every image in `images`; rows are picked by `batch`.
    pub labels: &'a LabelMatrix,
    pub batch: &'a [usize],
    pub classifier: &'a ClassifierConfig,
    pub loss: &'a LossConfig,
    pub exec: ExecMode,
}

/// Per-image contribution: summed loss, known-cell count and gradients
/// with respect to the text features.
struct Partial {
    loss: f64,
    known: usize,
    grads: Option<(Array2<f64>, Array2<f64>)>,
}

impl Partial {
    fn empty() -> Self {
        Self {
            loss: 0.0,
            known: 0,
            grads: None,
        }
    }

    fn combine(a: Result<Self>, b: Result<Self>) -> Result<Self> {
        let (mut a, b) = (a?, b?);
        a.loss += b.loss;
        a.known += b.known;
        a.grads = match (a.grads, b.grads) {
            (Some((mut p, mut n)), Some((bp, bn))) => {
                p += &bp;
                n += &bn;
                Some((p, n))
            }
            (x, None) | (None, x) => x,
        };
        Ok(a)
    }
}

fn nonfinite(stage: Stage) -> Error {
    Error::NonFinite { stage }
}

fn image_partial(inputs: &ObjectiveInputs<'_>, text: &TextFeatures, image: usize, want_grad: bool) -> Result<Partial> {
    let labels = inputs.labels.row(image);
    if labels.iter().all(|&y| y == 0) {
        return Ok(Partial::empty());
    }
    let cfg = inputs.classifier;
    let rl = image_region_logits(inputs.images, image, text)?;
    let (r, m) = rl.pos.dim();
    let mut d_pos = want_grad.then(|| Array2::<f64>::zeros((r, m)));
    let mut d_neg = want_grad.then(|| Array2::<f64>::zeros((r, m)));
    let mut loss = 0.0;
    let mut known = 0;

    for (c, &y) in labels.iter().enumerate() {
        if y == 0 {
            continue;
        }
        known += 1;
        let (pc, nc) = (rl.pos.column(c), rl.neg.column(c));
        let agg = aggregate_column(pc, nc, cfg);
        if !(agg.s_pos.is_finite() && agg.s_neg.is_finite()) {
            return Err(nonfinite(Stage::Aggregation));
        }
        let z = (agg.s_pos - agg.s_neg) / cfg.tau;
        if !z.is_finite() {
            return Err(nonfinite(Stage::Probability));
        }
        let (l, dz) = asl_from_logit(z, y, inputs.loss);
        if !l.is_finite() {
            return Err(nonfinite(Stage::Loss));
        }
        loss += l;
        if let (Some(dp), Some(dn)) = (d_pos.as_mut(), d_neg.as_mut()) {
            let g = dz / cfg.tau;
            aggregate_column_backward(pc, nc, &agg, cfg, g, -g, dp.column_mut(c), dn.column_mut(c));
        }
    }

    // S = V_hat F_t^T, so dL/dF_t = (dL/dS)^T V_hat
    let grads = match (d_pos, d_neg) {
        (Some(dp), Some(dn)) => {
            let v = inputs.images.regions(image);
            Some((dp.t().dot(v), dn.t().dot(v)))
        }
        _ => None,
    };
    Ok(Partial { loss, known, grads })
}

fn check_inputs(bank: &PromptBank, inputs: &ObjectiveInputs<'_>) -> Result<()> {
    if inputs.batch.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    inputs.classifier.validate()?;
    inputs.loss.validate()?;
    if inputs.labels.n_images() != inputs.images.len() {
        return Err(Error::DimensionMismatch {
            context: "label rows vs projected images",
            expected: inputs.images.len(),
            actual: inputs.labels.n_images(),
        });
    }
    if inputs.labels.n_classes() != inputs.catalog.len() {
        return Err(Error::DimensionMismatch {
            context: "label columns vs classes",
            expected: inputs.catalog.len(),
            actual: inputs.labels.n_classes(),
        });
    }
    if let Some(&bad) = inputs.batch.iter().find(|&&i| i >= inputs.images.len()) {
        return Err(Error::invalid(format!("batch index {bad} out of range")));
    }
    crate::model::check_compat(bank, inputs.catalog, inputs.encoder)
}

fn evaluate(bank: &PromptBank, inputs: &ObjectiveInputs<'_>, want_grad: bool) -> Result<(f64, Option<PromptBank>)> {
    check_inputs(bank, inputs)?;
    if want_grad && !inputs.encoder.supports_gradients() {
        return Err(Error::Unsupported(
            "encoder backend is inference-only; prompt gradients are unavailable".into(),
        ));
    }
    let text = encode_classes(bank, inputs.catalog, inputs.encoder)?;
    let total = map_reduce(
        inputs.batch.len(),
        inputs.exec,
        |k| image_partial(inputs, &text, inputs.batch[k], want_grad),
        || Ok(Partial::empty()),
        Partial::combine,
    )?;

    if total.known == 0 {
        return Ok((0.0, want_grad.then(|| bank.zeros_like())));
    }
    let scale = match inputs.loss.reduction {
        Reduction::MeanOverKnown => 1.0 / total.known as f64,
        Reduction::Sum => 1.0,
    };
    let loss = total.loss * scale;
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = bank.zeros_like();
    if let Some((g_pos, g_neg)) = total.grads {
        for c in 0..inputs.catalog.len() {
            let pair_idx = bank.pair_index(c);
            for (pol, g) in [(Polarity::Positive, &g_pos), (Polarity::Negative, &g_neg)] {
                let row = g.row(c);
                if row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let gf = row.mapv(|v| v * scale);
                let tokens = assemble_prompt(bank.pair_for(c), inputs.catalog.token(c), pol)?;
                let gt = inputs.encoder.encode_text_vjp(tokens.view(), &gf)?;
                let n_ctx = tokens.nrows() - 1;
                let target = grad.pairs_mut()[pair_idx].contexts_mut(pol);
                *target += &gt.slice(s![..n_ctx, ..]);
            }
        }
    }
    if grad.iter_values().any(|v| !v.is_finite()) {
        return Err(nonfinite(Stage::Gradient));
    }
    Ok((loss, Some(grad)))
}

/// Reduced ASL over every known (image, class) cell of the batch.
pub fn batch_loss(bank: &PromptBank, inputs: &ObjectiveInputs<'_>) -> Result<f64> {
    Ok(evaluate(bank, inputs, false)?.0)
}

/// Exact gradient of [`batch_loss`] with respect to every context entry.
pub fn loss_gradients(bank: &PromptBank, inputs: &ObjectiveInputs<'_>) -> Result<PromptBank> {
    Ok(evaluate(bank, inputs, true)?.1.expect("gradient requested"))
}

pub fn loss_and_gradients(bank: &PromptBank, inputs: &ObjectiveInputs<'_>) -> Result<(f64, PromptBank)> {
    let (l, g) = evaluate(bank, inputs, true)?;
    Ok((l, g.expect("gradient requested")))
}
