#![allow(dead_code)]

use dualprompt::data::{
    synth_catalog, synth_dataset, ClassCatalog, Dataset, ImageRecord, LabelMatrix, RegionFeatureMap, SynthConfig,
};
use dualprompt::encoders::{EncoderConfig, EncoderMode, ToyEncoders};
use dualprompt::exec::ExecMode;
use dualprompt::model::ProjectedImages;
use dualprompt::rng::{seeded, standard_normal, Rng};
use ndarray::Array2;
use rand::Rng as _;

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * standard_normal(rng))
}

/// A small random problem for gradient and oracle checks.
pub struct RandomInstance {
    pub catalog: ClassCatalog,
    pub encoder: ToyEncoders,
    pub images: ProjectedImages,
    pub labels: LabelMatrix,
}

pub fn random_instance(
    seed: u64,
    max_dim: usize,
    max_classes: usize,
    max_regions: usize,
    n_images: usize,
) -> RandomInstance {
    let mut rng = seeded(seed);
    let d = rng.random_range(2..=max_dim);
    let m = rng.random_range(1..=max_classes);
    let h = rng.random_range(1..=4usize.min(max_regions));
    let w = rng.random_range(1..=(max_regions / h).max(1));
    let dv = rng.random_range(2..=max_dim);
    let de = rng.random_range(2..=max_dim);
    let dt = rng.random_range(2..=max_dim);
    let encoder = ToyEncoders::build(&EncoderConfig {
        mode: EncoderMode::Random,
        seed: seed ^ 0x55,
        token_dim: d,
        visual_dim: dv,
        embed_dim: de,
        text_dim: dt,
        attn_scale: None,
    })
    .unwrap();
    let names = (0..m).map(|i| format!("c{i}")).collect();
    let catalog = ClassCatalog::new(names, gaussian(&mut rng, m, d, 1.0), None).unwrap();
    let records: Vec<ImageRecord> = (0..n_images)
        .map(|i| ImageRecord {
            id: format!("i{i}"),
            feature_map: RegionFeatureMap::new(h, w, gaussian(&mut rng, h * w, dv, 1.0)).unwrap(),
        })
        .collect();
    let rows: Vec<Vec<i8>> = (0..n_images)
        .map(|_| (0..m).map(|_| [1i8, -1, -1, 0][rng.random_range(0..4)]).collect())
        .collect();
    let labels = LabelMatrix::from_rows(&rows).unwrap();
    let images = ProjectedImages::new(&encoder, &records, ExecMode::Sequential).unwrap();
    RandomInstance {
        catalog,
        encoder,
        images,
        labels,
    }
}

/// Aligned-mode synthetic dataset with planted prototypes.
pub fn synthetic(
    classes: usize,
    dim: usize,
    n_images: usize,
    grid: (usize, usize),
    sigma: f64,
    catalog_seed: u64,
    seed: u64,
) -> (Dataset, Vec<Vec<(usize, usize)>>) {
    let catalog = synth_catalog(classes, dim, catalog_seed).unwrap();
    let out = synth_dataset(
        &catalog,
        &SynthConfig {
            n_images,
            grid,
            labels_min: 1,
            labels_max: 3,
            noise_sigma: sigma,
            seed,
        },
    )
    .unwrap();
    (Dataset::new(catalog, out.images, out.labels).unwrap(), out.planted)
}

pub fn aligned(dim: usize) -> ToyEncoders {
    ToyEncoders::build(&EncoderConfig::aligned(dim)).unwrap()
}

pub fn bits(v: impl Iterator<Item = f64>) -> Vec<u64> {
    v.map(f64::to_bits).collect()
}

pub struct GradCheck {
    pub coords: usize,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences against `loss_gradients` on a random
/// instance, sampling `n_coords` distinct prompt coordinates.
pub fn finite_difference_check(
    seed: u64,
    aggregation: dualprompt::scoring::Aggregation,
    prompt_mode: dualprompt::prompts::PromptMode,
    loss: &dualprompt::loss_opt::LossConfig,
    n_coords: usize,
    h: f64,
    floor: f64,
) -> GradCheck {
    use dualprompt::loss_opt::{batch_loss, loss_gradients, ObjectiveInputs};
    use dualprompt::prompts::{init_prompts, PromptConfig};
    use dualprompt::scoring::ClassifierConfig;

    let inst = random_instance(seed, 16, 8, 16, 6);
    let mut rng = seeded(seed.wrapping_mul(31) + 7);
    let d = inst.catalog.dim();
    let min_ctx = n_coords.div_ceil(2 * d);
    let prompt = PromptConfig {
        n_ctx_pos: min_ctx + rng.random_range(0..3),
        n_ctx_neg: min_ctx + rng.random_range(0..3),
        dim: d,
        mode: prompt_mode,
        init_sigma: 0.5,
    };
    let classifier = ClassifierConfig {
        tau: [0.05, 0.1, 0.5, 1.0][rng.random_range(0..4)],
        aggregation,
        spatial_temp: [0.1, 0.5, 1.0][rng.random_range(0..3)],
    };
    let bank = init_prompts(&prompt, inst.catalog.len(), seed).unwrap();
    let batch: Vec<usize> = (0..inst.images.len()).collect();
    let inputs = ObjectiveInputs {
        catalog: &inst.catalog,
        encoder: &inst.encoder,
        images: &inst.images,
        labels: &inst.labels,
        batch: &batch,
        classifier: &classifier,
        loss,
        exec: ExecMode::Sequential,
    };
    let grad = loss_gradients(&bank, &inputs).unwrap();
    let total = bank.parameter_count();
    assert!(total >= n_coords, "instance too small: {total} parameters");
    let picked = rand::seq::index::sample(&mut rng, total, n_coords);
    let mut worst: f64 = 0.0;
    for k in picked.iter() {
        let mut plus = bank.clone();
        plus.set_flat(k, bank.get_flat(k) + h);
        let mut minus = bank.clone();
        minus.set_flat(k, bank.get_flat(k) - h);
        let numeric = (batch_loss(&plus, &inputs).unwrap() - batch_loss(&minus, &inputs).unwrap()) / (2.0 * h);
        worst = worst.max(rel_err(grad.get_flat(k), numeric, floor));
    }
    GradCheck {
        coords: n_coords,
        max_rel_err: worst,
    }
}

/// Training settings shared by the synthetic end-to-end experiments.
///
/// Differs from the library defaults in two places: the spatial softmax
/// is sharpened so the planted cell dominates the pooled score, and the
/// base learning rate is raised to suit the toy feature scale.
pub fn synthetic_train_config(seed: u64) -> dualprompt::loss_opt::TrainConfig {
    let mut cfg = dualprompt::loss_opt::TrainConfig {
        lr0: 0.005,
        seed,
        record_wall_time: false,
        ..Default::default()
    };
    cfg.classifier.spatial_temp = 0.15;
    cfg
}

pub const SYNTH_DIM: usize = 32;
pub const SYNTH_CLASSES: usize = 20;

/// Train and test splits drawn from one catalog.
pub struct SyntheticTask {
    pub train: Dataset,
    pub test: Dataset,
    pub test_planted: Vec<Vec<(usize, usize)>>,
    pub encoder: ToyEncoders,
    pub train_proj: ProjectedImages,
    pub test_proj: ProjectedImages,
}

pub fn synthetic_task(seed: u64, n_train: usize, n_test: usize, sigma: f64) -> SyntheticTask {
    let (train, _) = synthetic(
        SYNTH_CLASSES,
        SYNTH_DIM,
        n_train,
        (8, 8),
        sigma,
        7 + seed,
        seed * 10 + 1,
    );
    let (test, test_planted) = synthetic(SYNTH_CLASSES, SYNTH_DIM, n_test, (8, 8), sigma, 7 + seed, seed * 10 + 2);
    let encoder = aligned(SYNTH_DIM);
    let train_proj = ProjectedImages::new(&encoder, &train.images, ExecMode::Deterministic).unwrap();
    let test_proj = ProjectedImages::new(&encoder, &test.images, ExecMode::Deterministic).unwrap();
    SyntheticTask {
        train,
        test,
        test_planted,
        encoder,
        train_proj,
        test_proj,
    }
}
