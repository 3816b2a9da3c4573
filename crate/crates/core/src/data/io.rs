//! On-disk formats: DCFM feature files, JSON manifests and label CSVs.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, Dataset, ImageRecord, LabelMatrix, RegionFeatureMap};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DCFM";
const HEADER_LEN: usize = 16;

/// Encodes an (H, W, D) grid stored as (H*W) x D rows.
fn encode_grid(h: usize, w: usize, rows: &Array2<f64>) -> Vec<u8> {
    let d = rows.ncols();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * rows.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    for n in [h, w, d] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in rows.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

fn decode_grid(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Array2<f64>)> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "DCFM",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        });
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, d) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::Malformed {
            path: path.into(),
            detail: "dimension overflow".into(),
        })?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("expected {expected} bytes for {h}x{w}x{d}, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            path: path.into(),
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let rows = Array2::from_shape_vec((h * w, d), values).map_err(|e| Error::Malformed {
        path: path.into(),
        detail: e.to_string(),
    })?;
    Ok((h, w, rows))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_feature_file(path: &Path, fm: &RegionFeatureMap) -> Result<()> {
    write_bytes(path, &encode_grid(fm.height(), fm.width(), fm.regions()))
}

pub fn read_feature_file(path: &Path) -> Result<RegionFeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, rows) = decode_grid(path, &bytes)?;
    RegionFeatureMap::new(h, w, rows).map_err(|e| Error::Malformed {
        path: path.into(),
        detail: e.to_string(),
    })
}

/// Writes a matrix in the DCFM layout as an (rows, 1, cols) grid.
pub fn write_matrix_file(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_bytes(path, &encode_grid(m.nrows(), 1, m))
}

pub fn read_matrix_file(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, w, rows) = decode_grid(path, &bytes)?;
    if w != 1 {
        return Err(Error::ShapeMismatch {
            path: path.into(),
            detail: format!("matrix files have W = 1, found {w}"),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: String,
    pub feature_file: String,
    pub labels: Vec<i8>,
    /// `[class, cell]` pairs, present for synthetic data only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planted: Vec<[usize; 2]>,
}

/// Dataset manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_embeddings: Option<String>,
    pub images: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    /// Resolves `path` to a manifest file: either the file itself or
    /// `manifest.json` inside a directory.
    pub fn locate(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        }
    }

    /// Loads a manifest and returns it with the directory its paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = Self::locate(path);
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: file.clone(),
            detail: e.to_string(),
        })?;
        let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(&file)?;
        Ok((manifest, base))
    }

    fn validate(&self, file: &Path) -> Result<()> {
        let m = self.classes.len();
        for img in &self.images {
            if img.labels.len() != m {
                return Err(Error::ShapeMismatch {
                    path: file.into(),
                    detail: format!("image {} has {} labels for {m} classes", img.id, img.labels.len()),
                });
            }
            if img.labels.iter().any(|l| !matches!(l, -1..=1)) {
                return Err(Error::Malformed {
                    path: file.into(),
                    detail: format!("image {} has a label outside +1/-1/0", img.id),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = if path.extension().is_some_and(|e| e == "json") {
            path.to_path_buf()
        } else {
            path.join(MANIFEST_NAME)
        };
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_bytes(&file, text.as_bytes())
    }

    pub fn labels(&self) -> Result<LabelMatrix> {
        let rows: Vec<Vec<i8>> = self.images.iter().map(|i| i.labels.clone()).collect();
        if rows.is_empty() {
            return Ok(LabelMatrix::zeros(0, self.classes.len()));
        }
        LabelMatrix::from_rows(&rows)
    }

    pub fn set_labels(&mut self, labels: &LabelMatrix) -> Result<()> {
        if labels.n_images() != self.images.len() || labels.n_classes() != self.classes.len() {
            return Err(Error::invalid("label matrix does not match manifest shape"));
        }
        for (i, img) in self.images.iter_mut().enumerate() {
            img.labels = labels.row(i).to_vec();
        }
        Ok(())
    }

    pub fn planted(&self) -> Vec<Vec<(usize, usize)>> {
        self.images
            .iter()
            .map(|i| i.planted.iter().map(|p| (p[0], p[1])).collect())
            .collect()
    }

    /// Rewrites relative paths so they resolve from `to` instead of `from`.
    pub fn rebase(&mut self, from: &Path, to: &Path) -> Result<()> {
        let from = fs::canonicalize(from).map_err(|e| Error::io(from, e))?;
        fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
        let to = fs::canonicalize(to).map_err(|e| Error::io(to, e))?;
        let fix = |p: &mut String| {
            if Path::new(p.as_str()).is_relative() {
                *p = relative_path(&from.join(p.as_str()), &to)
                    .to_string_lossy()
                    .replace('\\', "/");
            }
        };
        if let Some(ce) = self.class_embeddings.as_mut() {
            fix(ce);
        }
        for img in &mut self.images {
            fix(&mut img.feature_file);
        }
        Ok(())
    }

    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        let emb_path = self
            .class_embeddings
            .as_ref()
            .ok_or_else(|| Error::invalid("manifest has no class_embeddings file; class tokens are required"))?;
        let embeddings = read_matrix_file(&base.join(emb_path))?;
        let catalog = ClassCatalog::new(self.classes.clone(), embeddings, None)?;
        let images = self
            .images
            .iter()
            .map(|img| {
                Ok(ImageRecord {
                    id: img.id.clone(),
                    feature_map: read_feature_file(&base.join(&img.feature_file))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(catalog, images, self.labels()?)
    }

    /// Writes class embeddings, one feature file per image and the manifest
    /// into `dir`.
    pub fn write_dataset(
        dir: &Path,
        dataset: &Dataset,
        planted: Option<&[Vec<(usize, usize)>]>,
        config_digest: Option<String>,
    ) -> Result<Self> {
        let emb = "classes.dcfm".to_string();
        write_matrix_file(&dir.join(&emb), dataset.catalog.token_embeddings())?;
        let mut images = Vec::with_capacity(dataset.len());
        for (i, rec) in dataset.images.iter().enumerate() {
            let feature_file = format!("features/{}.dcfm", rec.id);
            write_feature_file(&dir.join(&feature_file), &rec.feature_map)?;
            images.push(ManifestImage {
                id: rec.id.clone(),
                feature_file,
                labels: dataset.labels.row(i).to_vec(),
                planted: planted
                    .map(|p| p[i].iter().map(|&(c, cell)| [c, cell]).collect())
                    .unwrap_or_default(),
            });
        }
        let manifest = Manifest {
            classes: dataset.catalog.names().to_vec(),
            class_embeddings: Some(emb),
            images,
            config_digest,
        };
        manifest.save(dir)?;
        Ok(manifest)
    }
}

fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

/// Label CSV: header `id,<class names>`, one row per image.
pub fn write_labels_csv<W: Write>(out: W, ids: &[String], classes: &[String], labels: &LabelMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(classes.iter().cloned());
    wtr.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(labels.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_catalog, synth_dataset, SynthConfig};

    #[test]
    fn feature_file_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rows = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 0.5, 0.25, 3.0, -0.125]).unwrap();
        let fm = RegionFeatureMap::new(1, 2, rows).unwrap();
        let p = dir.path().join("a.dcfm");
        write_feature_file(&p, &fm).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DCFM");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(read_feature_file(&p).unwrap(), fm);
    }

    #[test]
    fn feature_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.dcfm");
        fs::write(&p, b"XXXX\x01\0\0\0").unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::BadMagic { .. })));
        let fm = RegionFeatureMap::new(1, 1, Array2::ones((1, 2))).unwrap();
        write_feature_file(&p, &fm).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dataset_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cat = synth_catalog(4, 5, 0).unwrap();
        let cfg = SynthConfig {
            n_images: 6,
            grid: (2, 3),
            labels_min: 1,
            labels_max: 2,
            noise_sigma: 0.2,
            seed: 4,
        };
        let out = synth_dataset(&cat, &cfg).unwrap();
        let ds = Dataset::new(cat.clone(), out.images, out.labels).unwrap();
        Manifest::write_dataset(dir.path(), &ds, Some(&out.planted), None).unwrap();
        let (man, base) = Manifest::load(dir.path()).unwrap();
        let back = man.load_dataset(&base).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.catalog.token_embeddings(), cat.token_embeddings());
        assert_eq!(man.planted(), out.planted);
    }

    #[test]
    fn rebase_keeps_features_reachable() {
        let dir = tempfile::tempdir().unwrap();
        let cat = synth_catalog(3, 4, 0).unwrap();
        let out = synth_dataset(
            &cat,
            &SynthConfig {
                n_images: 2,
                grid: (2, 2),
                labels_min: 1,
                labels_max: 1,
                noise_sigma: 0.1,
                seed: 0,
            },
        )
        .unwrap();
        let ds = Dataset::new(cat, out.images, out.labels).unwrap();
        let src = dir.path().join("src");
        let dst = dir.path().join("nested/dst");
        let mut man = Manifest::write_dataset(&src, &ds, None, None).unwrap();
        man.rebase(&src, &dst).unwrap();
        man.save(&dst).unwrap();
        assert!(man.images[0].feature_file.starts_with("../../src/"));
        let (m2, base) = Manifest::load(&dst).unwrap();
        assert_eq!(m2.load_dataset(&base).unwrap().images, ds.images);
    }

    #[test]
    fn labels_csv_layout() {
        let labels = LabelMatrix::from_rows(&[vec![1, -1], vec![0, 1]]).unwrap();
        let mut buf = Vec::new();
        write_labels_csv(
            &mut buf,
            &["a".into(), "b".into()],
            &["cat".into(), "dog".into()],
            &labels,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,cat,dog\na,1,-1\nb,0,1\n");
    }
}
