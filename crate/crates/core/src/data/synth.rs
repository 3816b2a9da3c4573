//! Deterministic synthetic data with planted class prototypes.
//!
//! Each image is a grid of pure Gaussian noise. For every positive class one
//! distinct cell additionally carries that class's prototype, so a detector
//! has to find the right region to recognise the label.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, ClassCatalog, ImageRecord, LabelMatrix, RegionFeatureMap};
use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub grid: (usize, usize),
    pub labels_min: usize,
    pub labels_max: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 2000,
            grid: (8, 8),
            labels_min: 1,
            labels_max: 3,
            noise_sigma: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub images: Vec<ImageRecord>,
    pub labels: LabelMatrix,
    /// `(class, cell)` pairs planted in each image, in draw order.
    pub planted: Vec<Vec<(usize, usize)>>,
}

/// Catalog of `n_classes` classes whose prototypes are uniform on the unit
/// sphere. Token embeddings equal the prototypes.
pub fn synth_catalog(n_classes: usize, dim: usize, seed: u64) -> Result<ClassCatalog> {
    if n_classes == 0 || dim == 0 {
        return Err(Error::invalid(
            "synthetic catalog needs at least one class and dimension",
        ));
    }
    let mut rng = substream(seed, 0xc1a5);
    let mut protos = Array2::zeros((n_classes, dim));
    for mut row in protos.outer_iter_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = standard_normal(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-8 {
                row.mapv_inplace(|v| quantize(v / norm));
                break;
            }
        }
    }
    let width = format!("{}", n_classes - 1).len().max(2);
    let names = (0..n_classes).map(|m| format!("class_{m:0width$}")).collect();
    ClassCatalog::new(names, protos.clone(), Some(protos))
}

pub fn synth_dataset(classes: &ClassCatalog, cfg: &SynthConfig) -> Result<SynthOutput> {
    let protos = classes
        .prototypes()
        .ok_or_else(|| Error::invalid("synthetic generation needs class prototypes"))?;
    let m = classes.len();
    let d = classes.dim();
    let (h, w) = cfg.grid;
    let cells = h * w;
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise_sigma must be finite and non-negative, got {}",
            cfg.noise_sigma
        )));
    }
    if cells == 0 {
        return Err(Error::invalid("grid must have at least one cell"));
    }
    if cfg.labels_min > cfg.labels_max {
        return Err(Error::invalid(format!(
            "labels_min {} exceeds labels_max {}",
            cfg.labels_min, cfg.labels_max
        )));
    }
    if cfg.labels_max > m {
        return Err(Error::invalid(format!(
            "labels_max {} exceeds class count {m}",
            cfg.labels_max
        )));
    }
    if cfg.labels_max > cells {
        return Err(Error::GridTooSmall {
            h,
            w,
            cells,
            needed: cfg.labels_max,
        });
    }

    let mut rng = seeded(cfg.seed);
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut labels = LabelMatrix::zeros(cfg.n_images, m);
    let mut planted = Vec::with_capacity(cfg.n_images);
    let width = format!("{}", cfg.n_images.saturating_sub(1)).len().max(5);

    for i in 0..cfg.n_images {
        let k = rng.random_range(cfg.labels_min..=cfg.labels_max);
        let chosen = index::sample(&mut rng, m, k).into_vec();
        let spots = index::sample(&mut rng, cells, k).into_vec();

        let mut regions = Array2::zeros((cells, d));
        regions
            .iter_mut()
            .for_each(|v| *v = cfg.noise_sigma * standard_normal(&mut rng));
        for (&class, &cell) in chosen.iter().zip(&spots) {
            let mut row = regions.row_mut(cell);
            row += &protos.row(class);
        }
        regions.mapv_inplace(quantize);

        for c in 0..m {
            labels.set(i, c, -1);
        }
        for &class in &chosen {
            labels.set(i, class, 1);
        }
        planted.push(chosen.into_iter().zip(spots).collect());
        images.push(ImageRecord {
            id: format!("img_{i:0width$}"),
            feature_map: RegionFeatureMap::new(h, w, regions)?,
        });
    }

    Ok(SynthOutput {
        images,
        labels,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, grid: (usize, usize), lo: usize, hi: usize, sigma: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_images: n,
            grid,
            labels_min: lo,
            labels_max: hi,
            noise_sigma: sigma,
            seed,
        }
    }

    #[test]
    fn zero_noise_single_cell_is_prototype() {
        let cat = synth_catalog(3, 6, 11).unwrap();
        let out = synth_dataset(&cat, &cfg(1, (1, 1), 1, 1, 0.0, 7)).unwrap();
        let (class, cell) = out.planted[0][0];
        assert_eq!(cell, 0);
        let row = out.images[0].feature_map.regions().row(0).to_owned();
        assert_eq!(row, cat.prototypes().unwrap().row(class));
        assert_eq!(out.labels.row(0).iter().filter(|&&v| v == 1).count(), 1);
    }

    #[test]
    fn deterministic_bytes() {
        let cat = synth_catalog(20, 8, 0).unwrap();
        let a = synth_dataset(&cat, &cfg(100, (8, 8), 1, 3, 0.1, 1)).unwrap();
        let b = synth_dataset(&cat, &cfg(100, (8, 8), 1, 3, 0.1, 1)).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            let xb: Vec<u64> = x.feature_map.regions().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.feature_map.regions().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn positive_counts_match_planted_recount() {
        let cat = synth_catalog(20, 8, 0).unwrap();
        let out = synth_dataset(&cat, &cfg(100, (8, 8), 1, 3, 0.1, 1)).unwrap();
        let mut recount = [0usize; 20];
        for draws in &out.planted {
            assert!((1..=3).contains(&draws.len()));
            let mut cells: Vec<usize> = draws.iter().map(|d| d.1).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), draws.len(), "planted cells must be distinct");
            for &(c, _) in draws {
                recount[c] += 1;
            }
        }
        for (c, &expected) in recount.iter().enumerate() {
            let col = (0..100).filter(|&i| out.labels.get(i, c) == 1).count();
            assert_eq!(col, expected);
        }
        assert_eq!(out.labels.count_known(), 100 * 20);
    }

    #[test]
    fn zero_noise_planted_cells_align_with_prototype() {
        let cat = synth_catalog(6, 5, 3).unwrap();
        let out = synth_dataset(&cat, &cfg(30, (3, 3), 1, 3, 0.0, 5)).unwrap();
        let protos = cat.prototypes().unwrap();
        for (img, draws) in out.images.iter().zip(&out.planted) {
            for &(c, cell) in draws {
                let x = img.feature_map.regions().row(cell);
                let p = protos.row(c);
                let cos = x.dot(&p) / (x.dot(&x).sqrt() * p.dot(&p).sqrt());
                assert!((cos - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_small_grid_and_bad_sigma() {
        let cat = synth_catalog(5, 4, 0).unwrap();
        let err = synth_dataset(&cat, &cfg(1, (1, 2), 3, 3, 0.1, 0)).unwrap_err();
        assert!(matches!(err, Error::GridTooSmall { needed: 3, .. }));
        assert!(synth_dataset(&cat, &cfg(1, (4, 4), 1, 1, -0.1, 0)).is_err());
        assert!(synth_dataset(&cat, &cfg(1, (4, 4), 1, 6, 0.1, 0)).is_err());
    }

    #[test]
    fn prototypes_unit_norm() {
        let cat = synth_catalog(50, 16, 9).unwrap();
        for row in cat.prototypes().unwrap().outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
