//! Forward pass shared by training and evaluation: frozen image features,
//! text features for every class and per-image scores.

use ndarray::Array2;

use crate::data::{ClassCatalog, ImageRecord};
use crate::encoders::EncoderBackend;
use crate::error::{Error, Result, Stage};
use crate::exec::{map_indexed, ExecMode};
use crate::prompts::{assemble_prompt, Polarity, PromptBank};
use crate::scoring::{
    aggregate_column, normalize_rows, region_logits_normalized, ClassifierConfig, RegionLogits, ScorePair,
};

/// Unit-norm projected region features for every image.
///
/// Encoders are frozen, so projection happens once per dataset.
#[derive(Debug, Clone)]
pub struct ProjectedImages {
    regions: Vec<Array2<f64>>,
    grids: Vec<(usize, usize)>,
}

impl ProjectedImages {
    pub fn new(encoder: &dyn EncoderBackend, images: &[ImageRecord], exec: ExecMode) -> Result<Self> {
        let projected = map_indexed(images.len(), exec, |i| -> Result<Array2<f64>> {
            let fm = &images[i].feature_map;
            let f_v = encoder.project_regions(fm)?;
            if f_v.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: Stage::RegionProjection,
                });
            }
            normalize_rows(&f_v, &format!("image {} region", images[i].id))
        });
        let regions = projected.into_iter().collect::<Result<Vec<_>>>()?;
        let grids = images
            .iter()
            .map(|r| (r.feature_map.height(), r.feature_map.width()))
            .collect();
        Ok(Self { regions, grids })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self, image: usize) -> &Array2<f64> {
        &self.regions[image]
    }

    pub fn grid(&self, image: usize) -> (usize, usize) {
        self.grids[image]
    }

    pub fn text_dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.ncols())
    }
}

/// Positive and negative text features, one row per class (M x D_t).
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
}

pub(crate) fn check_compat(bank: &PromptBank, catalog: &ClassCatalog, encoder: &dyn EncoderBackend) -> Result<()> {
    if bank.dim() != catalog.dim() {
        return Err(Error::DimensionMismatch {
            context: "prompt width vs class token width",
            expected: catalog.dim(),
            actual: bank.dim(),
        });
    }
    if encoder.token_dim() != catalog.dim() {
        return Err(Error::DimensionMismatch {
            context: "encoder token width vs class token width",
            expected: catalog.dim(),
            actual: encoder.token_dim(),
        });
    }
    if let crate::prompts::PromptMode::ClassSpecific = bank.mode() {
        if bank.pairs().len() != catalog.len() {
            return Err(Error::DimensionMismatch {
                context: "class-specific prompt pairs vs classes",
                expected: catalog.len(),
                actual: bank.pairs().len(),
            });
        }
    }
    Ok(())
}

/// Encodes both prompts of every class in the catalog.
pub fn encode_classes(bank: &PromptBank, catalog: &ClassCatalog, encoder: &dyn EncoderBackend) -> Result<TextFeatures> {
    check_compat(bank, catalog, encoder)?;
    let m = catalog.len();
    let dt = encoder.text_dim();
    let mut pos = Array2::zeros((m, dt));
    let mut neg = Array2::zeros((m, dt));
    for c in 0..m {
        let pair = bank.pair_for(c);
        for (pol, out) in [(Polarity::Positive, &mut pos), (Polarity::Negative, &mut neg)] {
            let tokens = assemble_prompt(pair, catalog.token(c), pol)?;
            let f = encoder.encode_text(tokens.view())?;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: Stage::TextEncoding,
                });
            }
            out.row_mut(c).assign(&f);
        }
    }
    Ok(TextFeatures { pos, neg })
}

pub fn image_region_logits(images: &ProjectedImages, image: usize, text: &TextFeatures) -> Result<RegionLogits> {
    let v = images.regions(image);
    if v.ncols() != text.pos.ncols() {
        return Err(Error::DimensionMismatch {
            context: "region feature width vs text feature width",
            expected: text.pos.ncols(),
            actual: v.ncols(),
        });
    }
    let rl = region_logits_normalized(v, &text.pos, &text.neg);
    if rl.pos.iter().chain(rl.neg.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            stage: Stage::RegionLogits,
        });
    }
    Ok(rl)
}

/// Aggregated scores of every image against every class.
pub fn score_images(
    images: &ProjectedImages,
    text: &TextFeatures,
    cfg: &ClassifierConfig,
    exec: ExecMode,
) -> Result<Vec<ScorePair>> {
    cfg.validate()?;
    let m = text.pos.nrows();
    map_indexed(images.len(), exec, |i| {
        let rl = image_region_logits(images, i, text)?;
        let mut sp = Vec::with_capacity(m);
        let mut sn = Vec::with_capacity(m);
        for c in 0..m {
            let a = aggregate_column(rl.pos.column(c), rl.neg.column(c), cfg);
            sp.push(a.s_pos);
            sn.push(a.s_neg);
        }
        Ok(ScorePair::new(sp, sn, cfg.tau))
    })
    .into_iter()
    .collect()
}
