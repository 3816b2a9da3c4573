//! Resumable train + evaluate sweeps over kept-label fraction or context length.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dualprompt::data::mask_labels;
use dualprompt::metrics::EvalKind;
use dualprompt::Error;

use crate::commands::{apply_overrides, evaluate_on, load_data, train_on};
use crate::config::{output_path, parse_list, usage, write_file, CliError, CliResult, RunConfig};
use crate::SweepArgs;

/// Per-setting mean mAP may dip by this much and still count as monotone.
const TREND_TOLERANCE: f64 = 0.02;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> CliResult<Option<Table>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(Error::from)?;
    let header: Vec<String> = rdr.headers().map_err(Error::from)?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(Error::from)?;
    Ok(Some(Table { header, rows }))
}

fn write_table(path: &Path, t: &Table) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(&t.header).map_err(Error::from)?;
    for r in &t.rows {
        wtr.write_record(r).map_err(Error::from)?;
    }
    let bytes = wtr.into_inner().map_err(|e| usage(e.to_string()))?;
    write_file(path, &bytes)
}

/// `true` when mean mAP never drops by more than the tolerance as the
/// swept value grows.
fn monotone(t: &Table) -> CliResult<bool> {
    let col = |name: &str| {
        t.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| usage(format!("sweep table lacks column {name}")))
    };
    let (vc, mc) = (col("value")?, col("mAP")?);
    let mut by_value: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in &t.rows {
        let v: f64 = r[vc].parse().map_err(|_| usage(format!("bad value {:?}", r[vc])))?;
        let m: f64 = r[mc].parse().map_err(|_| usage(format!("bad mAP {:?}", r[mc])))?;
        let e = by_value.entry(v.to_bits()).or_insert((v, 0.0, 0));
        e.1 += m;
        e.2 += 1;
    }
    let mut means: Vec<(f64, f64)> = by_value.values().map(|&(v, s, n)| (v, s / n as f64)).collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(means.windows(2).all(|w| w[1].1 >= w[0].1 - TREND_TOLERANCE))
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let mut base = RunConfig::load(a.config.as_deref())?;
    apply_overrides(&mut base, &a.overrides);
    base.eval.mode = EvalKind::PartialLabel;
    let (variable, values): (&str, Vec<f64>) = match (&a.keep_list, &a.nctx_list) {
        (Some(k), None) => ("keep_fraction", parse_list(k, "--keep-list")?),
        (None, Some(n)) => (
            "n_ctx",
            parse_list::<usize>(n, "--nctx-list")?
                .into_iter()
                .map(|v| v as f64)
                .collect(),
        ),
        _ => return Err(usage("pass exactly one of --keep-list and --nctx-list")),
    };
    if values.is_empty() || a.repeat == 0 {
        return Err(usage("nothing to sweep"));
    }
    let seed0 = base.train.seed;
    let out = output_path(a.out, None, "sweep.csv");
    let (_, _, train_set) = load_data(&a.data)?;
    let (_, _, test_set) = load_data(&a.test)?;

    let mut table = read_table(&out)?;
    let mut done: BTreeSet<(u64, u64)> = BTreeSet::new();
    if let Some(t) = &table {
        if t.header.get(..3) != Some(&["variable".to_string(), "value".into(), "repeat".into()][..]) {
            return Err(usage(format!("{} is not a sweep table", out.display())));
        }
        for r in &t.rows {
            if r[0] != variable {
                return Err(usage(format!("{} holds a {} sweep", out.display(), r[0])));
            }
            let v: f64 = r[1].parse().map_err(|_| usage(format!("bad value {:?}", r[1])))?;
            let k: u64 = r[2].parse().map_err(|_| usage(format!("bad repeat {:?}", r[2])))?;
            done.insert((v.to_bits(), k));
        }
    }

    let mut ran = 0;
    for &value in &values {
        for rep in 0..a.repeat {
            if done.contains(&(value.to_bits(), rep)) {
                continue;
            }
            let mut cfg = base.clone();
            cfg.train.seed = seed0 + rep;
            let keep = if variable == "keep_fraction" {
                value
            } else {
                cfg.train.prompt.n_ctx_pos = value as usize;
                cfg.train.prompt.n_ctx_neg = value as usize;
                a.keep
            };
            let labels = mask_labels(&train_set.labels, keep, cfg.train.seed)?;
            let masked = train_set.with_labels(labels)?;
            let (outcome, meta, encoder) = train_on(&cfg, &masked, None)?;
            let trained = outcome.map_err(CliError::from)?;
            let report = evaluate_on(&trained.bank, &meta, &cfg, &encoder, &test_set, None)?;
            let mut header = vec!["variable".to_string(), "value".into(), "repeat".into(), "seed".into()];
            header.extend(report.csv_header());
            header.push("monotone_trend".into());
            let t = table.get_or_insert_with(|| Table {
                header: header.clone(),
                rows: Vec::new(),
            });
            if t.header != header {
                return Err(usage(format!(
                    "{} has different columns; use a fresh --out",
                    out.display()
                )));
            }
            let mut row = vec![
                variable.to_string(),
                format!("{value}"),
                rep.to_string(),
                cfg.train.seed.to_string(),
            ];
            row.extend(report.csv_values());
            row.push(String::new());
            t.rows.push(row);
            ran += 1;
            println!("sweep: {variable}={value} repeat {rep}: mAP {:.4}", report.map);
            write_table(&out, t)?;
        }
    }
    let Some(mut t) = table else {
        return Err(usage("sweep produced no rows"));
    };
    let trend = monotone(&t)?;
    let last = t.header.len() - 1;
    for r in &mut t.rows {
        r[last] = trend.to_string();
    }
    write_table(&out, &t)?;
    println!(
        "sweep: {ran} new runs, {} rows, monotone_trend={trend} -> {}",
        t.rows.len(),
        out.display()
    );
    Ok(())
}
