//! Binary prompt checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DCPT" | version u32 | mode u8 (0 shared, 1 class_specific)
//! | pairs u32 | n_ctx_pos u32 | n_ctx_neg u32 | dim u32
//! | every pos_ctx (pair order, row-major) | every neg_ctx | as f64
//! | trailer length u32 | JSON metadata
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{PromptBank, PromptConfig, PromptMode, PromptPair};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 * 4;

/// Run metadata stored in the checkpoint trailer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub prompt: PromptConfig,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub config_digest: String,
    pub encoder_digest: String,
    pub epochs_completed: usize,
    /// Free-form run configuration, serialized as given.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, bank: &PromptBank, meta: &CheckpointMeta) -> Result<()> {
    let trailer = serde_json::to_vec(meta)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * bank.parameter_count() + 4 + trailer.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(match bank.mode() {
        PromptMode::Shared => 0,
        PromptMode::ClassSpecific => 1,
    });
    for n in [bank.pairs().len(), bank.n_ctx_pos(), bank.n_ctx_neg(), bank.dim()] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for p in bank.pairs() {
        p.pos.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    for p in bank.pairs() {
        p.neg.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    buf.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    buf.extend_from_slice(&trailer);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                detail: format!(
                    "{what} needs {n} bytes at offset {}, {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(PromptBank, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "DCPT",
        });
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            path: path.into(),
            found: version,
        });
    }
    let mode = match r.take(1, "mode flag")?[0] {
        0 => PromptMode::Shared,
        1 => PromptMode::ClassSpecific,
        other => {
            return Err(Error::Malformed {
                path: path.into(),
                detail: format!("unknown mode flag {other}"),
            })
        }
    };
    let n_pairs = r.u32("pair count")? as usize;
    let n_pos = r.u32("positive context count")? as usize;
    let n_neg = r.u32("negative context count")? as usize;
    let dim = r.u32("dimension")? as usize;

    let mut read_block = |rows: usize, what: &str| -> Result<Array2<f64>> {
        let raw = r.take(8 * rows * dim, what)?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, dim), vals).expect("sized above"))
    };
    let pos: Vec<_> = (0..n_pairs)
        .map(|_| read_block(n_pos, "positive contexts"))
        .collect::<Result<_>>()?;
    let neg: Vec<_> = (0..n_pairs)
        .map(|_| read_block(n_neg, "negative contexts"))
        .collect::<Result<_>>()?;
    let trailer_len = r.u32("trailer length")? as usize;
    let trailer = r.take(trailer_len, "metadata trailer")?;
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            path: path.into(),
            detail: format!("{} bytes after trailer", bytes.len() - r.pos),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(trailer).map_err(|e| Error::Malformed {
        path: path.into(),
        detail: format!("metadata trailer: {e}"),
    })?;

    let mismatch = |detail: String| Error::ShapeMismatch {
        path: path.into(),
        detail,
    };
    let p = &meta.prompt;
    if p.n_ctx_pos != n_pos || p.n_ctx_neg != n_neg || p.dim != dim {
        return Err(mismatch(format!(
            "header says {n_pos}+{n_neg} contexts of width {dim}, metadata says {}+{} of width {}",
            p.n_ctx_pos, p.n_ctx_neg, p.dim
        )));
    }
    if p.mode != mode {
        return Err(mismatch(format!(
            "header mode {mode} disagrees with metadata mode {}",
            p.mode
        )));
    }
    let expected_pairs = match mode {
        PromptMode::Shared => 1,
        PromptMode::ClassSpecific => meta.n_classes,
    };
    if n_pairs != expected_pairs {
        return Err(mismatch(format!(
            "{n_pairs} pairs for a {mode} bank over {} classes",
            meta.n_classes
        )));
    }
    if meta.class_names.len() != meta.n_classes {
        return Err(mismatch("class name count differs from n_classes".into()));
    }

    let pairs = pos
        .into_iter()
        .zip(neg)
        .map(|(pos, neg)| PromptPair { pos, neg })
        .collect();
    let bank = PromptBank::new(mode, pairs).map_err(|e| Error::Malformed {
        path: path.into(),
        detail: e.to_string(),
    })?;
    Ok((bank, meta))
}

/// Loads a checkpoint and checks it was trained in `expected` mode.
///
/// A mismatch is an error unless `allow_mode_mismatch` is set.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: PromptMode,
    allow_mode_mismatch: bool,
) -> Result<(PromptBank, CheckpointMeta)> {
    let (bank, meta) = load_checkpoint(path)?;
    if bank.mode() != expected && !allow_mode_mismatch {
        return Err(Error::IncompatibleMode(format!(
            "checkpoint {} holds a {} bank but a {expected} bank was requested",
            path.display(),
            bank.mode()
        )));
    }
    Ok((bank, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::init_prompts;

    fn meta_for(cfg: &PromptConfig, m: usize) -> CheckpointMeta {
        CheckpointMeta {
            prompt: cfg.clone(),
            n_classes: m,
            class_names: (0..m).map(|i| format!("c{i}")).collect(),
            config_digest: "abc".into(),
            encoder_digest: "def".into(),
            epochs_completed: 0,
            run: serde_json::json!({"note": "test"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [PromptMode::Shared, PromptMode::ClassSpecific] {
            let cfg = PromptConfig {
                n_ctx_pos: 3,
                n_ctx_neg: 2,
                dim: 5,
                mode,
                init_sigma: 0.3,
            };
            let bank = init_prompts(&cfg, 4, 11).unwrap();
            let meta = meta_for(&cfg, 4);
            let p = dir.path().join(format!("{mode}.dcpt"));
            save_checkpoint(&p, &bank, &meta).unwrap();
            let (b2, m2) = load_checkpoint(&p).unwrap();
            assert_eq!(m2, meta);
            assert_eq!(b2.mode(), mode);
            let bits = |b: &PromptBank| b.iter_values().map(f64::to_bits).collect::<Vec<_>>();
            assert_eq!(bits(&b2), bits(&bank));
            let first = std::fs::read(&p).unwrap();
            save_checkpoint(&p, &b2, &m2).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), first);
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PromptConfig {
            n_ctx_pos: 2,
            n_ctx_neg: 2,
            dim: 3,
            ..PromptConfig::default()
        };
        let bank = init_prompts(&cfg, 2, 0).unwrap();
        let p = dir.path().join("a.dcpt");
        save_checkpoint(&p, &bank, &meta_for(&cfg, 2)).unwrap();
        let good = std::fs::read(&p).unwrap();

        std::fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadMagic { .. })));

        // header claims a wider dimension than the metadata
        let mut meta = meta_for(&cfg, 2);
        meta.prompt.dim = 4;
        save_checkpoint(&p, &bank, &meta).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::ShapeMismatch { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::FormatVersion { found: 9, .. })
        ));
    }

    #[test]
    fn mode_guard() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PromptConfig {
            dim: 4,
            ..PromptConfig::default()
        };
        let bank = init_prompts(&cfg, 3, 0).unwrap();
        let p = dir.path().join("cs.dcpt");
        save_checkpoint(&p, &bank, &meta_for(&cfg, 3)).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(&p, PromptMode::Shared, false),
            Err(Error::IncompatibleMode(_))
        ));
        assert!(load_checkpoint_expecting(&p, PromptMode::Shared, true).is_ok());
        assert!(load_checkpoint_expecting(&p, PromptMode::ClassSpecific, false).is_ok());
    }
}
