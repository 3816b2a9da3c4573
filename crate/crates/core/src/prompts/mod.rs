//! Learnable positive/negative context vectors, the only trainable state.

mod checkpoint;

use ndarray::{concatenate, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One pair shared by every class; needed for zero-shot transfer.
    Shared,
    /// One pair per class.
    ClassSpecific,
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptMode::Shared => "shared",
            PromptMode::ClassSpecific => "class_specific",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub n_ctx_pos: usize,
    pub n_ctx_neg: usize,
    pub dim: usize,
    pub mode: PromptMode,
    pub init_sigma: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n_ctx_pos: 16,
            n_ctx_neg: 16,
            dim: 32,
            mode: PromptMode::ClassSpecific,
            init_sigma: 0.02,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ctx_pos == 0 || self.n_ctx_neg == 0 {
            return Err(Error::invalid("context token counts must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("prompt dimension must be at least 1"));
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "init_sigma must be positive, got {}",
                self.init_sigma
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars for `n_classes` classes.
    pub fn parameter_count(&self, n_classes: usize) -> usize {
        let pairs = match self.mode {
            PromptMode::Shared => 1,
            PromptMode::ClassSpecific => n_classes,
        };
        (self.n_ctx_pos + self.n_ctx_neg) * self.dim * pairs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
}

impl PromptPair {
    pub fn contexts(&self, polarity: Polarity) -> &Array2<f64> {
        match polarity {
            Polarity::Positive => &self.pos,
            Polarity::Negative => &self.neg,
        }
    }

    pub fn contexts_mut(&mut self, polarity: Polarity) -> &mut Array2<f64> {
        match polarity {
            Polarity::Positive => &mut self.pos,
            Polarity::Negative => &mut self.neg,
        }
    }
}

/// Either one pair per class or a single shared pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    mode: PromptMode,
    pairs: Vec<PromptPair>,
}

impl PromptBank {
    pub fn new(mode: PromptMode, pairs: Vec<PromptPair>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::invalid("a prompt bank needs at least one pair"))?;
        if mode == PromptMode::Shared && pairs.len() != 1 {
            return Err(Error::invalid(format!(
                "shared bank must hold exactly one pair, got {}",
                pairs.len()
            )));
        }
        let (dp, dn) = (first.pos.dim(), first.neg.dim());
        if dp.1 != dn.1 {
            return Err(Error::DimensionMismatch {
                context: "positive vs negative context width",
                expected: dp.1,
                actual: dn.1,
            });
        }
        for p in &pairs {
            if p.pos.dim() != dp || p.neg.dim() != dn {
                return Err(Error::invalid("all prompt pairs in a bank must share shapes"));
            }
            if p.pos.iter().chain(p.neg.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("prompt contexts must be finite"));
            }
        }
        Ok(Self { mode, pairs })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [PromptPair] {
        &mut self.pairs
    }

    pub fn n_ctx_pos(&self) -> usize {
        self.pairs[0].pos.nrows()
    }

    pub fn n_ctx_neg(&self) -> usize {
        self.pairs[0].neg.nrows()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].pos.ncols()
    }

    /// The pair that scores `class`.
    pub fn pair_for(&self, class: usize) -> &PromptPair {
        match self.mode {
            PromptMode::Shared => &self.pairs[0],
            PromptMode::ClassSpecific => &self.pairs[class],
        }
    }

    /// Index into `pairs()` used for `class`.
    pub fn pair_index(&self, class: usize) -> usize {
        match self.mode {
            PromptMode::Shared => 0,
            PromptMode::ClassSpecific => class,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.pairs.len() * (self.n_ctx_pos() + self.n_ctx_neg()) * self.dim()
    }

    /// A bank of the same shape filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            pairs: self
                .pairs
                .iter()
                .map(|p| PromptPair {
                    pos: Array2::zeros(p.pos.dim()),
                    neg: Array2::zeros(p.neg.dim()),
                })
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &PromptBank) {
        assert_eq!(self.pairs.len(), other.pairs.len());
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            a.pos.scaled_add(alpha, &b.pos);
            a.neg.scaled_add(alpha, &b.neg);
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs
            .iter()
            .flat_map(|p| p.pos.iter().chain(p.neg.iter()).copied())
    }

    /// Flat coordinate access in `iter_values` order.
    pub fn get_flat(&self, k: usize) -> f64 {
        let (pair, pol, r, c) = self.locate(k);
        self.pairs[pair].contexts(pol)[[r, c]]
    }

    pub fn set_flat(&mut self, k: usize, v: f64) {
        let (pair, pol, r, c) = self.locate(k);
        self.pairs[pair].contexts_mut(pol)[[r, c]] = v;
    }

    fn locate(&self, k: usize) -> (usize, Polarity, usize, usize) {
        let d = self.dim();
        let per_pos = self.n_ctx_pos() * d;
        let per_pair = per_pos + self.n_ctx_neg() * d;
        let (pair, off) = (k / per_pair, k % per_pair);
        assert!(pair < self.pairs.len(), "flat index {k} out of range");
        if off < per_pos {
            (pair, Polarity::Positive, off / d, off % d)
        } else {
            let off = off - per_pos;
            (pair, Polarity::Negative, off / d, off % d)
        }
    }
}

/// Draws every context entry i.i.d. from N(0, init_sigma^2).
pub fn init_prompts(config: &PromptConfig, n_classes: usize, seed: u64) -> Result<PromptBank> {
    config.validate()?;
    if n_classes == 0 {
        return Err(Error::invalid("n_classes must be at least 1"));
    }
    let n_pairs = match config.mode {
        PromptMode::Shared => 1,
        PromptMode::ClassSpecific => n_classes,
    };
    let mut rng = substream(seed, 0x9a0f);
    let mut draw = |rows: usize| {
        Array2::from_shape_simple_fn((rows, config.dim), || config.init_sigma * standard_normal(&mut rng))
    };
    let pairs = (0..n_pairs)
        .map(|_| {
            let pos = draw(config.n_ctx_pos);
            let neg = draw(config.n_ctx_neg);
            PromptPair { pos, neg }
        })
        .collect();
    PromptBank::new(config.mode, pairs)
}

/// `[ctx_1, ..., ctx_N, class_token]` for the chosen polarity.
pub fn assemble_prompt(pair: &PromptPair, class_token: ArrayView1<'_, f64>, polarity: Polarity) -> Result<Array2<f64>> {
    let ctx = pair.contexts(polarity);
    if class_token.len() != ctx.ncols() {
        return Err(Error::DimensionMismatch {
            context: "class token vs context width",
            expected: ctx.ncols(),
            actual: class_token.len(),
        });
    }
    let token = class_token.insert_axis(Axis(0));
    Ok(concatenate(Axis(0), &[ctx.view(), token]).expect("widths checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn class_specific_shapes() {
        let cfg = PromptConfig {
            dim: 8,
            ..PromptConfig::default()
        };
        let bank = init_prompts(&cfg, 20, 0).unwrap();
        assert_eq!(bank.pairs().len(), 20);
        for p in bank.pairs() {
            assert_eq!(p.pos.dim(), (16, 8));
            assert_eq!(p.neg.dim(), (16, 8));
        }
    }

    #[test]
    fn shared_has_one_pair() {
        let cfg = PromptConfig {
            n_ctx_pos: 64,
            n_ctx_neg: 64,
            dim: 8,
            mode: PromptMode::Shared,
            init_sigma: 0.02,
        };
        let bank = init_prompts(&cfg, 1000, 0).unwrap();
        assert_eq!(bank.pairs().len(), 1);
        assert_eq!(bank.pair_for(999), &bank.pairs()[0]);
    }

    #[test]
    fn init_is_deterministic_and_independent() {
        let cfg = PromptConfig::default();
        let a = init_prompts(&cfg, 3, 5).unwrap();
        let b = init_prompts(&cfg, 3, 5).unwrap();
        let bits = |bank: &PromptBank| bank.iter_values().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a.pairs()[0].pos, a.pairs()[0].neg);
        assert_ne!(bits(&a), bits(&init_prompts(&cfg, 3, 6).unwrap()));
    }

    #[test]
    fn parameter_count_order_of_magnitude() {
        let cfg = PromptConfig {
            dim: 512,
            ..PromptConfig::default()
        };
        let n = cfg.parameter_count(20);
        assert_eq!(n, 327_680);
        assert_eq!(init_prompts(&cfg, 20, 0).unwrap().parameter_count(), n);
    }

    #[test]
    fn assemble_appends_class_token() {
        let pair = PromptPair {
            pos: array![[1.0, 2.0], [3.0, 4.0]],
            neg: array![[-1.0, -2.0]],
        };
        let before = pair.clone();
        let c = Array1::from(vec![9.0, 8.0]);
        let p = assemble_prompt(&pair, c.view(), Polarity::Positive).unwrap();
        assert_eq!(p, array![[1.0, 2.0], [3.0, 4.0], [9.0, 8.0]]);
        let n = assemble_prompt(&pair, c.view(), Polarity::Negative).unwrap();
        assert_eq!(n, array![[-1.0, -2.0], [9.0, 8.0]]);
        assert_eq!(pair, before);
        let bad = Array1::from(vec![1.0]);
        assert!(assemble_prompt(&pair, bad.view(), Polarity::Positive).is_err());
    }

    #[test]
    fn flat_indexing_covers_every_entry() {
        let cfg = PromptConfig {
            n_ctx_pos: 2,
            n_ctx_neg: 3,
            dim: 4,
            ..PromptConfig::default()
        };
        let mut bank = init_prompts(&cfg, 2, 1).unwrap();
        let flat: Vec<f64> = bank.iter_values().collect();
        assert_eq!(flat.len(), bank.parameter_count());
        for (k, v) in flat.iter().enumerate() {
            assert_eq!(bank.get_flat(k), *v);
        }
        bank.set_flat(13, 7.0);
        assert_eq!(bank.pairs()[0].neg[[1, 1]], 7.0);
    }

    #[test]
    fn config_validation() {
        let cfg = PromptConfig {
            n_ctx_neg: 0,
            ..PromptConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PromptConfig {
            init_sigma: 0.0,
            ..PromptConfig::default()
        };
        assert!(init_prompts(&cfg, 2, 0).is_err());
    }
}
