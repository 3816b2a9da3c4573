use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use dualprompt::data::{
    mask_labels, restrict_labels_to_seen, synth_catalog, synth_dataset, Dataset, Manifest, SynthConfig, ZslSplit,
};
use dualprompt::encoders::{EncoderBackend, ToyEncoders};
use dualprompt::exec::ExecMode;
use dualprompt::loss_opt::{self, TrainOutcome};
use dualprompt::metrics::{evaluate, EvalKind, EvalMode, MetricsReport};
use dualprompt::model::{encode_classes, image_region_logits, ProjectedImages};
use dualprompt::prompts::{load_checkpoint, save_checkpoint, CheckpointMeta, PromptBank, PromptMode};
use dualprompt::scoring::{export_attention_maps, write_attention_csv, write_attention_pgm, Aggregation};
use dualprompt::{config_digest, Error};
use serde::{Deserialize, Serialize};

use crate::config::{
    ensure_parent, output_path, parse_list, required_path, usage, write_file, CliError, CliResult, RunConfig,
};
use crate::{
    AggregationArg, AttmapArgs, DumpArgs, EvalArgs, ExecArg, MaskArgs, ModeArg, PromptModeArg, SplitArgs, SynthArgs,
    TrainArgs, TrainOverrides,
};

pub fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.prompt_mode {
        t.prompt.mode = match v {
            PromptModeArg::Shared => PromptMode::Shared,
            PromptModeArg::ClassSpecific => PromptMode::ClassSpecific,
        };
    }
    if let Some(v) = o.n_ctx {
        t.prompt.n_ctx_pos = v;
        t.prompt.n_ctx_neg = v;
    }
    if let Some(v) = o.aggregation {
        t.classifier.aggregation = match v {
            AggregationArg::SoftmaxWeighted => Aggregation::SoftmaxWeighted,
            AggregationArg::Average => Aggregation::Average,
            AggregationArg::Max => Aggregation::Max,
        };
    }
    if let Some(v) = o.spatial_temp {
        t.classifier.spatial_temp = v;
    }
    if let Some(v) = o.tau {
        t.classifier.tau = v;
    }
    if let Some(v) = o.exec {
        t.exec = exec_mode(v);
    }
    if o.no_wall_time {
        t.record_wall_time = false;
    }
}

fn exec_mode(e: ExecArg) -> ExecMode {
    match e {
        ExecArg::Sequential => ExecMode::Sequential,
        ExecArg::Deterministic => ExecMode::Deterministic,
        ExecArg::Parallel => ExecMode::Parallel,
    }
}

pub fn load_data(path: &Path) -> CliResult<(Manifest, PathBuf, Dataset)> {
    let (manifest, base) = Manifest::load(path)?;
    let dataset = manifest.load_dataset(&base)?;
    Ok((manifest, base, dataset))
}

pub fn build_encoder(cfg: &RunConfig) -> CliResult<ToyEncoders> {
    Ok(ToyEncoders::build(&cfg.encoder)?)
}

/// Split file: the partition plus the digest of the command that wrote it.
#[derive(Serialize, Deserialize)]
struct SplitFile {
    #[serde(flatten)]
    split: ZslSplit,
    #[serde(default)]
    config_digest: Option<String>,
}

pub fn load_split(path: &Path, n_classes: usize) -> CliResult<ZslSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let file: SplitFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.into(),
        detail: e.to_string(),
    })?;
    file.split.validate(n_classes)?;
    Ok(file.split)
}

/// Refuses to write a manifest over the one being read.
fn ensure_distinct(input: &Path, out: &Path) -> CliResult<()> {
    let a = std::fs::canonicalize(Manifest::locate(input)).ok();
    let b = std::fs::canonicalize(Manifest::locate(out)).ok();
    if a.is_some() && a == b {
        return Err(usage("output would overwrite the input manifest; choose another --out"));
    }
    Ok(())
}

fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("grid must look like 8x8, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("bad grid size {v:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    if a.images == 0 {
        return Err(usage("--images must be at least 1"));
    }
    let grid = parse_grid(&a.grid)?;
    let digest = config_digest(&a);
    let catalog = synth_catalog(a.classes, a.dim, a.catalog_seed.unwrap_or(a.seed))?;
    let out = synth_dataset(
        &catalog,
        &SynthConfig {
            n_images: a.images,
            grid,
            labels_min: a.labels_min,
            labels_max: a.labels_max,
            noise_sigma: a.sigma,
            seed: a.seed,
        },
    )?;
    let dataset = Dataset::new(catalog, out.images, out.labels)?;
    let dir = output_path(a.out, None, "data");
    Manifest::write_dataset(&dir, &dataset, Some(&out.planted), Some(digest.clone()))?;
    println!(
        "synth: {} images, {} classes, grid {}x{}, dim {} -> {} (config_digest {digest})",
        dataset.len(),
        dataset.catalog.len(),
        grid.0,
        grid.1,
        a.dim,
        dir.display()
    );
    Ok(())
}

pub fn mask(a: MaskArgs) -> CliResult<()> {
    let (mut manifest, base) = Manifest::load(&a.input)?;
    let out_dir = output_path(a.out.clone(), None, "masked");
    ensure_distinct(&a.input, &out_dir)?;
    let full = manifest.labels()?;
    let masked = mask_labels(&full, a.keep, a.seed)?;
    let digest = config_digest(&(config_digest(&a), &manifest.config_digest));
    manifest.set_labels(&masked)?;
    manifest.rebase(&base, &out_dir)?;
    manifest.config_digest = Some(digest.clone());
    manifest.save(&out_dir)?;
    println!(
        "mask: kept {} of {} label cells -> {} (config_digest {digest})",
        masked.count_known(),
        full.values().len(),
        out_dir.display()
    );
    Ok(())
}

pub fn split(a: SplitArgs) -> CliResult<()> {
    let (mut manifest, base) = Manifest::load(&a.input)?;
    let out_dir = output_path(a.out.clone(), None, "split");
    ensure_distinct(&a.input, &out_dir)?;
    let unseen: Vec<usize> = a
        .unseen
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .ok()
                .or_else(|| manifest.classes.iter().position(|c| c == t))
                .ok_or_else(|| usage(format!("unknown class {t:?}")))
        })
        .collect::<CliResult<_>>()?;
    let split = ZslSplit::new(manifest.classes.len(), unseen)?;
    let digest = config_digest(&(config_digest(&a), &manifest.config_digest));
    let restricted = restrict_labels_to_seen(&manifest.labels()?, &split)?;
    manifest.set_labels(&restricted)?;
    manifest.rebase(&base, &out_dir)?;
    manifest.config_digest = Some(digest.clone());
    manifest.save(&out_dir)?;
    let file = SplitFile {
        split: split.clone(),
        config_digest: Some(digest.clone()),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(Error::from)?;
    text.push('\n');
    write_file(&out_dir.join("split.json"), text.as_bytes())?;
    println!(
        "split: {} seen, {} unseen -> {} (config_digest {digest})",
        split.seen().len(),
        split.unseen().len(),
        out_dir.display()
    );
    Ok(())
}

/// Trains on `dataset` and returns the outcome with its checkpoint metadata.
pub fn train_on(
    cfg: &RunConfig,
    dataset: &Dataset,
    split: Option<&ZslSplit>,
) -> CliResult<(Result<TrainOutcome, Error>, CheckpointMeta, ToyEncoders)> {
    cfg.validate()?;
    let encoder = build_encoder(cfg)?;
    let images = ProjectedImages::new(&encoder, &dataset.images, cfg.train.exec)?;
    let outcome = loss_opt::train(&cfg.train, &dataset.catalog, &encoder, &images, &dataset.labels, split);
    let portable = cfg.portable();
    let meta = CheckpointMeta {
        prompt: cfg.train.prompt.clone(),
        n_classes: dataset.catalog.len(),
        class_names: dataset.catalog.names().to_vec(),
        config_digest: cfg.digest(),
        encoder_digest: encoder.parameter_digest(),
        epochs_completed: cfg.train.epochs,
        run: serde_json::to_value(&portable).map_err(Error::from)?,
    };
    Ok((outcome, meta, encoder))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_overrides(&mut cfg, &a.overrides);
    cfg.validate()?;
    let data = required_path(a.data, cfg.paths.data.as_ref(), "--data")?;
    let ckpt = output_path(a.out_checkpoint, cfg.paths.checkpoint.as_ref(), "prompts.dcpt");
    let history_path = output_path(a.history, cfg.paths.history.as_ref(), "history.csv");
    let (_, _, dataset) = load_data(&data)?;
    let split = match a.split.as_ref().or(cfg.paths.split.as_ref()) {
        Some(p) => Some(load_split(p, dataset.catalog.len())?),
        None => None,
    };
    let (outcome, meta, _) = train_on(&cfg, &dataset, split.as_ref())?;
    let out = match outcome {
        Ok(o) => o,
        Err(Error::Aborted(abort)) => {
            let mut last = ckpt.clone().into_os_string();
            last.push(".last_good");
            let last = PathBuf::from(last);
            let mut partial = meta.clone();
            partial.epochs_completed = abort.epoch;
            save_checkpoint(&last, &abort.last_good, &partial)?;
            let diag = serde_json::json!({
                "error": "training_aborted",
                "abort": &*abort,
                "last_good_checkpoint": last,
                "config_digest": meta.config_digest,
            });
            eprintln!("{diag}");
            return Err(CliError::Core(Error::Aborted(abort)));
        }
        Err(e) => return Err(e.into()),
    };
    ensure_parent(&ckpt)?;
    save_checkpoint(&ckpt, &out.bank, &meta)?;
    let mut csv = Vec::new();
    out.history.write_csv(&mut csv, Some(&meta.config_digest))?;
    write_file(&history_path, &csv)?;
    let last = out.history.epochs.last().expect("at least one epoch");
    println!(
        "train: {} epochs, final mean loss {:.6} -> {} (config_digest {})",
        out.history.epochs.len(),
        last.mean_loss,
        ckpt.display(),
        meta.config_digest
    );
    Ok(())
}

/// Checkpoint, its run config and an encoder verified against its digest.
pub fn open_checkpoint(
    path: &Path,
    override_cfg: Option<&Path>,
) -> CliResult<(PromptBank, CheckpointMeta, RunConfig, ToyEncoders)> {
    let (bank, meta) = load_checkpoint(path)?;
    let cfg = match override_cfg {
        Some(p) => RunConfig::load(Some(p))?,
        None if meta.run.is_null() => RunConfig::default(),
        None => serde_json::from_value(meta.run.clone()).map_err(|e| usage(format!("checkpoint run config: {e}")))?,
    };
    let encoder = build_encoder(&cfg)?;
    if encoder.parameter_digest() != meta.encoder_digest {
        return Err(usage(
            "encoder parameters differ from the ones the checkpoint was trained with",
        ));
    }
    Ok((bank, meta, cfg, encoder))
}

fn check_classes(meta: &CheckpointMeta, dataset: &Dataset) -> CliResult<()> {
    if meta.class_names != dataset.catalog.names() {
        return Err(usage("checkpoint classes differ from the dataset classes"));
    }
    Ok(())
}

pub fn evaluate_on(
    bank: &PromptBank,
    meta: &CheckpointMeta,
    cfg: &RunConfig,
    encoder: &ToyEncoders,
    dataset: &Dataset,
    split: Option<ZslSplit>,
) -> CliResult<MetricsReport> {
    check_classes(meta, dataset)?;
    let images = ProjectedImages::new(encoder, &dataset.images, cfg.train.exec)?;
    let mode = EvalMode {
        kind: cfg.eval.mode,
        topk: cfg.eval.topk.clone(),
        split,
    };
    let mut report = evaluate(
        bank,
        &dataset.catalog,
        encoder,
        &images,
        &dataset.labels,
        &mode,
        &cfg.train.classifier,
        cfg.train.exec,
    )?;
    report.config_digest = Some(config_digest(&(&meta.config_digest, &mode, &cfg.train.classifier)));
    Ok(report)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let fallback = RunConfig::load(a.config.as_deref())?;
    let ckpt = required_path(a.checkpoint, fallback.paths.checkpoint.as_ref(), "--checkpoint")?;
    let data = required_path(a.data, fallback.paths.data.as_ref(), "--data")?;
    let report_path = output_path(a.report, fallback.paths.report.as_ref(), "report.json");
    let (bank, meta, mut cfg, encoder) = open_checkpoint(&ckpt, a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.eval.mode = match m {
            ModeArg::Partial => EvalKind::PartialLabel,
            ModeArg::Zsl => EvalKind::Zsl,
            ModeArg::Gzsl => EvalKind::Gzsl,
        };
    }
    if let Some(k) = &a.topk {
        cfg.eval.topk = parse_list(k, "--topk")?;
    }
    if let Some(e) = a.exec {
        cfg.train.exec = exec_mode(e);
    }
    if cfg.eval.mode != EvalKind::PartialLabel && bank.mode() == PromptMode::ClassSpecific {
        return Err(Error::IncompatibleMode(format!(
            "{} evaluation needs a shared prompt bank; {} holds class_specific prompts",
            cfg.eval.mode,
            ckpt.display()
        ))
        .into());
    }
    let (_, _, dataset) = load_data(&data)?;
    let split = match a.split.as_ref().or(fallback.paths.split.as_ref()) {
        Some(p) => Some(load_split(p, dataset.catalog.len())?),
        None => None,
    };
    let report = evaluate_on(&bank, &meta, &cfg, &encoder, &dataset, split)?;
    ensure_parent(&report_path)?;
    report.write_json(&report_path)?;
    let csv_path = report_path.with_extension("csv");
    let fresh = !csv_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::Io {
            path: csv_path.clone(),
            source: e,
        })?;
    report.write_csv_row(file, fresh)?;
    let topk: Vec<String> = report.topk.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    println!(
        "eval: {} on {} images x {} classes: mAP {:.4}, CF1 {:.4}, OF1 {:.4}, {} -> {}",
        report.mode,
        report.n_images,
        report.n_classes,
        report.map,
        report.cf1,
        report.of1,
        topk.join(", "),
        report_path.display()
    );
    Ok(())
}

pub fn attmap(a: AttmapArgs) -> CliResult<()> {
    let (bank, meta, cfg, encoder) = open_checkpoint(&a.checkpoint, None)?;
    let (_, _, dataset) = load_data(&a.data)?;
    check_classes(&meta, &dataset)?;
    let idx = dataset
        .image_index(&a.image_id)
        .ok_or_else(|| usage(format!("unknown image id {:?}", a.image_id)))?;
    let class = a
        .class
        .parse::<usize>()
        .ok()
        .filter(|&c| c < dataset.catalog.len())
        .or_else(|| dataset.catalog.index_of(&a.class))
        .ok_or_else(|| usage(format!("unknown class {:?}", a.class)))?;
    let record = &dataset.images[idx];
    let images = ProjectedImages::new(&encoder, std::slice::from_ref(record), ExecMode::Sequential)?;
    let text = encode_classes(&bank, &dataset.catalog, &encoder)?;
    let rl = image_region_logits(&images, 0, &text)?;
    let grid = export_attention_maps(&rl, &cfg.train.classifier, class, images.grid(0))?;

    let prefix = output_path(a.out, None, &format!("attmap_{}_{}", a.image_id, class));
    let digest = config_digest(&(&meta.config_digest, &a.image_id, class));
    let class_name = &dataset.catalog.names()[class];
    let mut csv = format!("# config_digest={digest} image={} class={class_name}\n", a.image_id).into_bytes();
    write_attention_csv(&mut csv, &grid)?;
    let csv_path = PathBuf::from(format!("{}.csv", prefix.display()));
    write_file(&csv_path, &csv)?;
    let mut pgm = Vec::new();
    write_attention_pgm(
        &mut pgm,
        &grid,
        Some(&format!(
            "config_digest={digest} image={} class={class_name}",
            a.image_id
        )),
    )?;
    let pgm_path = PathBuf::from(format!("{}.pgm", prefix.display()));
    write_file(&pgm_path, &pgm)?;
    let (h, w) = grid.dim();
    let peak = grid
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
    println!(
        "attmap: image {} class {class_name}: peak weight {:.4} at cell {} ({}x{} grid) -> {}, {}",
        a.image_id,
        peak.1,
        peak.0,
        h,
        w,
        csv_path.display(),
        pgm_path.display()
    );
    Ok(())
}

pub fn dump_encoders(a: DumpArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let encoder = build_encoder(&cfg)?;
    let dir = output_path(a.out, None, "encoders");
    encoder.write_dump(&dir)?;
    println!(
        "dump-encoders: digest {} -> {}",
        encoder.parameter_digest(),
        dir.display()
    );
    Ok(())
}
