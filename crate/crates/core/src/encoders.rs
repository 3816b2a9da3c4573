//! Frozen text and visual encoders.
//!
//! The built-in [`ToyEncoders`] keep the differentiable path from prompt
//! tokens to text features while staying small enough for exact gradients:
//! the text encoder is mean pooling, a frozen linear map and L2
//! normalization. External pretrained backends plug in through
//! [`EncoderBackend`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{quantize, read_matrix_file, write_matrix_file, RegionFeatureMap};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, substream};

/// Frozen text projection `W_t` (D_t x D).
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    w_t: Array2<f64>,
}

/// Frozen visual maps: `v(.)` (D_emb x D_v) and `Proj_{v->t}` (D_t x D_emb).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualProjectionParams {
    w_v: Array2<f64>,
    w_proj: Array2<f64>,
}

/// Query/key maps of the attention-pool baseline, both D_k x D_v.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPoolParams {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    scale: f64,
}

fn check_finite(m: &Array2<f64>, name: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl TextEncoderParams {
    pub fn new(w_t: Array2<f64>) -> Result<Self> {
        check_finite(&w_t, "W_t")?;
        Ok(Self { w_t })
    }

    pub fn w_t(&self) -> &Array2<f64> {
        &self.w_t
    }

    pub fn token_dim(&self) -> usize {
        self.w_t.ncols()
    }

    pub fn text_dim(&self) -> usize {
        self.w_t.nrows()
    }
}

impl VisualProjectionParams {
    pub fn new(w_v: Array2<f64>, w_proj: Array2<f64>) -> Result<Self> {
        check_finite(&w_v, "W_v")?;
        check_finite(&w_proj, "W_proj")?;
        if w_proj.ncols() != w_v.nrows() {
            return Err(Error::DimensionMismatch {
                context: "W_proj input vs W_v output",
                expected: w_v.nrows(),
                actual: w_proj.ncols(),
            });
        }
        Ok(Self { w_v, w_proj })
    }

    pub fn w_v(&self) -> &Array2<f64> {
        &self.w_v
    }

    pub fn w_proj(&self) -> &Array2<f64> {
        &self.w_proj
    }

    pub fn visual_dim(&self) -> usize {
        self.w_v.ncols()
    }

    pub fn text_dim(&self) -> usize {
        self.w_proj.nrows()
    }
}

impl AttnPoolParams {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, scale: f64) -> Result<Self> {
        check_finite(&w_q, "W_q")?;
        check_finite(&w_k, "W_k")?;
        if w_q.dim() != w_k.dim() {
            return Err(Error::invalid("W_q and W_k must share a shape"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("attention scale must be positive, got {scale}")));
        }
        Ok(Self { w_q, w_k, scale })
    }

    pub fn w_q(&self) -> &Array2<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Array2<f64> {
        &self.w_k
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Mean-pools token rows, applies `W_t` and L2-normalizes.
pub fn encode_text(tokens: ArrayView2<'_, f64>, params: &TextEncoderParams) -> Result<Array1<f64>> {
    Ok(text_forward(tokens, params)?.0)
}

/// Returns the unit feature and the norm it was divided by.
fn text_forward(tokens: ArrayView2<'_, f64>, params: &TextEncoderParams) -> Result<(Array1<f64>, f64)> {
    if tokens.nrows() == 0 {
        return Err(Error::invalid("token sequence is empty"));
    }
    if tokens.ncols() != params.token_dim() {
        return Err(Error::DimensionMismatch {
            context: "token width vs W_t",
            expected: params.token_dim(),
            actual: tokens.ncols(),
        });
    }
    let mean = tokens.mean_axis(Axis(0)).expect("non-empty");
    let u = params.w_t.dot(&mean);
    let norm = u.dot(&u).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            stage: crate::error::Stage::TextEncoding,
        });
    }
    if norm == 0.0 {
        return Err(Error::Degenerate("text encoder input maps to the zero vector".into()));
    }
    Ok((u / norm, norm))
}

/// Gradient of `<grad_out, encode_text(tokens)>` with respect to every token row.
pub fn encode_text_vjp(
    tokens: ArrayView2<'_, f64>,
    params: &TextEncoderParams,
    grad_out: &Array1<f64>,
) -> Result<Array2<f64>> {
    let (f, norm) = text_forward(tokens, params)?;
    if grad_out.len() != f.len() {
        return Err(Error::DimensionMismatch {
            context: "text feature gradient",
            expected: f.len(),
            actual: grad_out.len(),
        });
    }
    // (I - f f^T) / |u|, then W_t^T, then the 1/L of the mean
    let grad_u = (grad_out - &(&f * f.dot(grad_out))) / norm;
    let grad_row = params.w_t.t().dot(&grad_u) / tokens.nrows() as f64;
    let grad_row = grad_row.insert_axis(Axis(0));
    Ok(grad_row
        .broadcast((tokens.nrows(), tokens.ncols()))
        .expect("row broadcast")
        .to_owned())
}

fn check_visual(fm: &RegionFeatureMap, vp: &VisualProjectionParams) -> Result<()> {
    if fm.dim() != vp.visual_dim() {
        return Err(Error::DimensionMismatch {
            context: "feature map width vs W_v",
            expected: vp.visual_dim(),
            actual: fm.dim(),
        });
    }
    Ok(())
}

/// Row i is `Proj(v(x_i))`, rows in row-major grid order.
pub fn project_regions(fm: &RegionFeatureMap, vp: &VisualProjectionParams) -> Result<Array2<f64>> {
    check_visual(fm, vp)?;
    Ok(fm.regions().dot(&vp.w_v.t()).dot(&vp.w_proj.t()))
}

/// Softmax weights of `q(x_mean) . k(x_i) / C` over regions.
pub fn attn_pool_weights(fm: &RegionFeatureMap, ap: &AttnPoolParams) -> Result<Array1<f64>> {
    if fm.dim() != ap.w_q.ncols() {
        return Err(Error::DimensionMismatch {
            context: "feature map width vs W_q",
            expected: ap.w_q.ncols(),
            actual: fm.dim(),
        });
    }
    let mean = fm.regions().mean_axis(Axis(0)).expect("at least one region");
    let q = ap.w_q.dot(&mean);
    let keys = fm.regions().dot(&ap.w_k.t());
    let logits = keys.dot(&q) / ap.scale;
    Ok(crate::scoring::softmax(logits.view()))
}

/// Attention-pooled global feature: `sum_i w_i Proj(v(x_i))`.
pub fn attn_pool(fm: &RegionFeatureMap, vp: &VisualProjectionParams, ap: &AttnPoolParams) -> Result<Array1<f64>> {
    check_visual(fm, vp)?;
    let w = attn_pool_weights(fm, ap)?;
    Ok(project_regions(fm, vp)?.t().dot(&w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Every map is the identity; all widths equal the token width.
    #[default]
    Aligned,
    /// Seeded Gaussian maps scaled by 1/sqrt(fan_in), then frozen.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub seed: u64,
    pub token_dim: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    /// Attention-pool scale C; `None` means sqrt(embed_dim).
    pub attn_scale: Option<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Aligned,
            seed: 0,
            token_dim: 32,
            visual_dim: 32,
            embed_dim: 32,
            text_dim: 32,
            attn_scale: None,
        }
    }
}

impl EncoderConfig {
    pub fn aligned(dim: usize) -> Self {
        Self {
            token_dim: dim,
            visual_dim: dim,
            embed_dim: dim,
            text_dim: dim,
            ..Self::default()
        }
    }
}

/// Operations an encoder backend must provide.
///
/// Backends without gradients can still score images but must return
/// `false` from `supports_gradients`; training then fails with
/// [`Error::Unsupported`].
pub trait EncoderBackend: Send + Sync {
    fn token_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    fn visual_dim(&self) -> usize;

    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    fn supports_gradients(&self) -> bool {
        false
    }

    /// Vector-Jacobian product of `encode_text` with respect to its tokens.
    fn encode_text_vjp(&self, _tokens: ArrayView2<'_, f64>, _grad_out: &Array1<f64>) -> Result<Array2<f64>> {
        Err(Error::Unsupported(
            "this encoder backend does not provide text gradients".into(),
        ))
    }

    fn project_regions(&self, fm: &RegionFeatureMap) -> Result<Array2<f64>>;
    fn attn_pool(&self, fm: &RegionFeatureMap) -> Result<Array1<f64>>;

    /// Hex digest of every frozen parameter.
    fn parameter_digest(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoders {
    pub text: TextEncoderParams,
    pub visual: VisualProjectionParams,
    pub attn: AttnPoolParams,
}

fn identity_or_random(rows: usize, cols: usize, mode: EncoderMode, rng: &mut crate::rng::Rng) -> Array2<f64> {
    match mode {
        EncoderMode::Aligned => Array2::eye(rows),
        EncoderMode::Random => {
            let s = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || quantize(s * standard_normal(rng)))
        }
    }
}

impl ToyEncoders {
    pub fn build(cfg: &EncoderConfig) -> Result<Self> {
        let dims = [cfg.token_dim, cfg.visual_dim, cfg.embed_dim, cfg.text_dim];
        if dims.contains(&0) {
            return Err(Error::invalid("encoder dimensions must be at least 1"));
        }
        if cfg.mode == EncoderMode::Aligned && dims.iter().any(|&d| d != cfg.token_dim) {
            return Err(Error::invalid(
                "aligned encoders need token, visual, embed and text widths to be equal",
            ));
        }
        let mut rng = substream(cfg.seed, 0xe4c0);
        let w_t = identity_or_random(cfg.text_dim, cfg.token_dim, cfg.mode, &mut rng);
        let w_v = identity_or_random(cfg.embed_dim, cfg.visual_dim, cfg.mode, &mut rng);
        let w_proj = identity_or_random(cfg.text_dim, cfg.embed_dim, cfg.mode, &mut rng);
        let w_q = identity_or_random(cfg.embed_dim, cfg.visual_dim, cfg.mode, &mut rng);
        let w_k = identity_or_random(cfg.embed_dim, cfg.visual_dim, cfg.mode, &mut rng);
        let scale = cfg.attn_scale.unwrap_or((cfg.embed_dim as f64).sqrt());
        Ok(Self {
            text: TextEncoderParams::new(w_t)?,
            visual: VisualProjectionParams::new(w_v, w_proj)?,
            attn: AttnPoolParams::new(w_q, w_k, scale)?,
        })
    }

    fn matrices(&self) -> [(&'static str, &Array2<f64>); 5] {
        [
            ("w_t", &self.text.w_t),
            ("w_v", &self.visual.w_v),
            ("w_proj", &self.visual.w_proj),
            ("w_q", &self.attn.w_q),
            ("w_k", &self.attn.w_k),
        ]
    }

    /// Writes one DCFM matrix file per parameter plus `index.json`.
    pub fn write_dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, m) in self.matrices() {
            let file = format!("{name}.dcfm");
            write_matrix_file(&dir.join(&file), m)?;
            entries.push(DumpEntry {
                name: name.into(),
                file,
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        let index = DumpIndex {
            matrices: entries,
            attn_scale: self.attn.scale,
            digest: self.parameter_digest(),
        };
        let mut text = serde_json::to_string_pretty(&index)?;
        text.push('\n');
        let p = dir.join("index.json");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn read_dump(dir: &Path) -> Result<Self> {
        let p = dir.join("index.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let index: DumpIndex = serde_json::from_str(&text)?;
        let get = |name: &str| -> Result<Array2<f64>> {
            let e = index
                .matrices
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Malformed {
                    path: p.clone(),
                    detail: format!("missing matrix {name}"),
                })?;
            let m = read_matrix_file(&dir.join(&e.file))?;
            if m.dim() != (e.rows, e.cols) {
                return Err(Error::ShapeMismatch {
                    path: dir.join(&e.file),
                    detail: format!("index says {}x{}, file holds {:?}", e.rows, e.cols, m.dim()),
                });
            }
            Ok(m)
        };
        let enc = Self {
            text: TextEncoderParams::new(get("w_t")?)?,
            visual: VisualProjectionParams::new(get("w_v")?, get("w_proj")?)?,
            attn: AttnPoolParams::new(get("w_q")?, get("w_k")?, index.attn_scale)?,
        };
        if enc.parameter_digest() != index.digest {
            return Err(Error::Malformed {
                path: p,
                detail: "parameter digest does not match index".into(),
            });
        }
        Ok(enc)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpIndex {
    matrices: Vec<DumpEntry>,
    attn_scale: f64,
    digest: String,
}

impl EncoderBackend for ToyEncoders {
    fn token_dim(&self) -> usize {
        self.text.token_dim()
    }

    fn text_dim(&self) -> usize {
        self.text.text_dim()
    }

    fn visual_dim(&self) -> usize {
        self.visual.visual_dim()
    }

    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        encode_text(tokens, &self.text)
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn encode_text_vjp(&self, tokens: ArrayView2<'_, f64>, grad_out: &Array1<f64>) -> Result<Array2<f64>> {
        encode_text_vjp(tokens, &self.text, grad_out)
    }

    fn project_regions(&self, fm: &RegionFeatureMap) -> Result<Array2<f64>> {
        project_regions(fm, &self.visual)
    }

    fn attn_pool(&self, fm: &RegionFeatureMap) -> Result<Array1<f64>> {
        attn_pool(fm, &self.visual, &self.attn)
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.matrices() {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update(self.attn.scale.to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }
}
