//! Dataset model: class catalogs, label matrices, region feature maps,
//! partial-label masking and seen/unseen splits.

mod io;
mod synth;

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use io::{
    read_feature_file, read_matrix_file, write_feature_file, write_labels_csv, write_matrix_file, Manifest,
    ManifestImage, FEATURE_MAGIC,
};
pub use synth::{synth_catalog, synth_dataset, SynthConfig, SynthOutput};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Rounds through IEEE single precision, so values survive the on-disk
/// float32 formats unchanged.
pub(crate) fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Ordered class names with one token embedding each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
    token_embeddings: Array2<f64>,
    prototypes: Option<Array2<f64>>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, token_embeddings: Array2<f64>, prototypes: Option<Array2<f64>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("class catalog is empty"));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::invalid("empty class name"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate class name {n:?}")));
            }
        }
        if token_embeddings.nrows() != names.len() {
            return Err(Error::DimensionMismatch {
                context: "token embeddings per class",
                expected: names.len(),
                actual: token_embeddings.nrows(),
            });
        }
        if let Some(p) = &prototypes {
            if p.dim() != token_embeddings.dim() {
                return Err(Error::DimensionMismatch {
                    context: "prototype rows",
                    expected: names.len(),
                    actual: p.nrows(),
                });
            }
            for (m, row) in p.outer_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("prototype {m} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(Self {
            names,
            token_embeddings,
            prototypes,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.token_embeddings.ncols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn token(&self, class: usize) -> ArrayView1<'_, f64> {
        self.token_embeddings.row(class)
    }

    pub fn token_embeddings(&self) -> &Array2<f64> {
        &self.token_embeddings
    }

    pub fn prototypes(&self) -> Option<&Array2<f64>> {
        self.prototypes.as_ref()
    }
}

/// Per-(image, class) annotation: +1 positive, -1 negative, 0 unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    n_images: usize,
    n_classes: usize,
    values: Vec<i8>,
}

impl LabelMatrix {
    pub fn zeros(n_images: usize, n_classes: usize) -> Self {
        Self {
            n_images,
            n_classes,
            values: vec![0; n_images * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let n_classes = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n_classes);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_classes {
                return Err(Error::DimensionMismatch {
                    context: "label row length",
                    expected: n_classes,
                    actual: r.len(),
                });
            }
            for &v in r {
                if !matches!(v, -1..=1) {
                    return Err(Error::invalid(format!("label {v} in row {i} is not one of +1, -1, 0")));
                }
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            n_images: rows.len(),
            n_classes,
            values,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, image: usize, class: usize) -> i8 {
        self.values[image * self.n_classes + class]
    }

    pub fn set(&mut self, image: usize, class: usize, value: i8) {
        assert!(matches!(value, -1..=1), "label must be +1, -1 or 0");
        self.values[image * self.n_classes + class] = value;
    }

    pub fn row(&self, image: usize) -> &[i8] {
        &self.values[image * self.n_classes..(image + 1) * self.n_classes]
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn count_known(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Builds a matrix holding only the given image rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.n_classes);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            n_images: rows.len(),
            n_classes: self.n_classes,
            values,
        }
    }

    fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.n_images != other.n_images {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.n_images,
                actual: other.n_images,
            });
        }
        if self.n_classes != other.n_classes {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.n_classes,
                actual: other.n_classes,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        self.check_same_shape(other, context)
    }
}

/// An H x W grid of visual feature vectors, stored as (H*W) x D rows in
/// row-major (h, w) order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureMap {
    h: usize,
    w: usize,
    regions: Array2<f64>,
}

impl RegionFeatureMap {
    pub fn new(h: usize, w: usize, regions: Array2<f64>) -> Result<Self> {
        if h == 0 || w == 0 || regions.ncols() == 0 {
            return Err(Error::invalid("feature map dimensions must be at least 1"));
        }
        if regions.nrows() != h * w {
            return Err(Error::DimensionMismatch {
                context: "feature map regions",
                expected: h * w,
                actual: regions.nrows(),
            });
        }
        if regions.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self { h, w, regions })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.regions.ncols()
    }

    pub fn n_regions(&self) -> usize {
        self.regions.nrows()
    }

    pub fn regions(&self) -> &Array2<f64> {
        &self.regions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub feature_map: RegionFeatureMap,
}

/// Images, their labels and the class catalog they are labelled against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub images: Vec<ImageRecord>,
    pub labels: LabelMatrix,
}

impl Dataset {
    pub fn new(catalog: ClassCatalog, images: Vec<ImageRecord>, labels: LabelMatrix) -> Result<Self> {
        if labels.n_images() != images.len() {
            return Err(Error::DimensionMismatch {
                context: "label rows vs images",
                expected: images.len(),
                actual: labels.n_images(),
            });
        }
        if labels.n_classes() != catalog.len() {
            return Err(Error::DimensionMismatch {
                context: "label columns vs classes",
                expected: catalog.len(),
                actual: labels.n_classes(),
            });
        }
        Ok(Self {
            catalog,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|r| r.id == id)
    }

    pub fn with_labels(&self, labels: LabelMatrix) -> Result<Self> {
        labels.ensure_same_shape(&self.labels, "replacement labels")?;
        Ok(Self {
            catalog: self.catalog.clone(),
            images: self.images.clone(),
            labels,
        })
    }
}

/// Keeps a uniformly random subset of exactly `round(keep_fraction * N * M)`
/// cells and sets every other cell to 0.
pub fn mask_labels(full: &LabelMatrix, keep_fraction: f64, seed: u64) -> Result<LabelMatrix> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if full.values.contains(&0) {
        return Err(Error::invalid(
            "mask_labels expects a fully annotated matrix (no 0 entries)",
        ));
    }
    let cells = full.values.len();
    let keep = (keep_fraction * cells as f64).round() as usize;
    let mut out = LabelMatrix::zeros(full.n_images, full.n_classes);
    let mut rng = seeded(seed);
    for cell in index::sample(&mut rng, cells, keep.min(cells)) {
        out.values[cell] = full.values[cell];
    }
    Ok(out)
}

/// Seen/unseen class partition for zero-shot evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZslSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl ZslSplit {
    /// Partition of `0..n_classes` with the given unseen classes.
    pub fn new(n_classes: usize, unseen: impl IntoIterator<Item = usize>) -> Result<Self> {
        make_split(n_classes, unseen)
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    /// Seen and unseen classes merged in ascending order.
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.seen.iter().chain(&self.unseen).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn n_classes(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let split = make_split(n_classes, self.unseen.iter().copied())?;
        if &split != self {
            return Err(Error::invalid("split is not a partition of the class set"));
        }
        Ok(())
    }
}

fn make_split(n_classes: usize, unseen: impl IntoIterator<Item = usize>) -> Result<ZslSplit> {
    let unseen: BTreeSet<usize> = unseen.into_iter().collect();
    if let Some(&bad) = unseen.iter().find(|&&u| u >= n_classes) {
        return Err(Error::invalid(format!(
            "unseen class {bad} out of range for {n_classes} classes"
        )));
    }
    if unseen.is_empty() {
        return Err(Error::invalid("unseen class set is empty"));
    }
    if unseen.len() == n_classes {
        return Err(Error::invalid("unseen class set covers every class"));
    }
    let seen = (0..n_classes).filter(|c| !unseen.contains(c)).collect();
    Ok(ZslSplit {
        seen,
        unseen: unseen.into_iter().collect(),
    })
}

pub fn make_zsl_split(classes: &ClassCatalog, unseen_indices: impl IntoIterator<Item = usize>) -> Result<ZslSplit> {
    make_split(classes.len(), unseen_indices)
}

/// Zeroes every unseen column.
pub fn restrict_labels_to_seen(labels: &LabelMatrix, split: &ZslSplit) -> Result<LabelMatrix> {
    if split.n_classes() != labels.n_classes {
        return Err(Error::DimensionMismatch {
            context: "split classes vs label columns",
            expected: labels.n_classes,
            actual: split.n_classes(),
        });
    }
    let mut out = labels.clone();
    for i in 0..out.n_images {
        for &u in &split.unseen {
            out.set(i, u, 0);
        }
    }
    Ok(out)
}
