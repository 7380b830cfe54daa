use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{
    default_run_dir, AnalyzeArgs, Cli, Command, DumpArgs, EvalSide, EvaluateArgs, ExplainArgs,
    Format, MakeEdgeWorldArgs, SweepArgs, TagArgs,
};
use crate::error::{Error, Result};
use crate::explain::{
    activated_filters, error_report, evaluate, explain_image, hits_at_n, sweep, ErrorReport,
    EvalConfig,
};
use crate::infer::{forward, load_model, save_model, ModelSpec};
use crate::ingest::{
    split_dataset, ActivationRecord, DatasetSplit, DumpReader, DumpSchema, DumpSummary, DumpWriter,
    ImageDirManifest, PredictionEntry, Predictions, SplitSide,
};
use crate::synthetic::{EdgeWorld, EdgeWorldConfig, StripeKind};
use crate::tagging::{build_tag_store, SelectionMethod, TagStore};

pub(super) fn execute(cli: &Cli) -> Result<()> {
    let out = |given: &Option<PathBuf>| given.clone().unwrap_or_else(|| default_run_dir(cli));
    match &cli.command {
        Command::MakeEdgeWorld(a) => make_edge_world(a, &out(&a.out)),
        Command::DumpActivations(a) => cmd_dump(a, &out(&a.out), cli.threads),
        Command::Tag(a) => cmd_tag(a, &out(&a.out), cli.threads),
        Command::Explain(a) => cmd_explain(a, &out(&a.out)),
        Command::Evaluate(a) => cmd_evaluate(a, &out(&a.out), cli.threads),
        Command::Sweep(a) => cmd_sweep(a, &out(&a.out), cli.threads),
        Command::AnalyzeErrors(a) => cmd_analyze(a, &out(&a.out), cli.threads),
    }
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `stem.<ext>` for the chosen format and echoes it to stdout.
fn emit(dir: &Path, stem: &str, format: Format, contents: &str) -> Result<()> {
    let ext = match format {
        Format::Json => "json",
        Format::Csv => "csv",
        Format::Text => "txt",
    };
    let path = write_file(dir, &format!("{stem}.{ext}"), contents)?;
    print!("{contents}");
    log::info!("wrote {}", path.display());
    Ok(())
}

fn no_csv(format: Format, what: &str) -> Result<()> {
    if format == Format::Csv {
        return Err(Error::Usage(format!(
            "{what} has no csv rendering; use json or text"
        )));
    }
    Ok(())
}

fn make_edge_world(a: &MakeEdgeWorldArgs, out: &Path) -> Result<()> {
    let kinds = |names: &[String]| {
        names
            .iter()
            .map(|n| StripeKind::parse(n))
            .collect::<Result<Vec<_>>>()
    };
    let cfg = EdgeWorldConfig {
        filters: kinds(&a.filters)?,
        classes: kinds(&a.classes)?,
        per_class: a.per_class,
        noise: a.noise,
        label_noise: a.label_noise,
        seed: a.seed,
    };
    let world = EdgeWorld::generate(&cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_model(&world.model, out.join("model.ftm"))?;
    let names = &world.model.class_names;
    crate::ingest::write_image_dir(
        out.join("images"),
        world
            .images
            .iter()
            .map(|i| (i.image_id, names[i.label as usize].as_str(), &i.image)),
    )?;
    println!(
        "wrote {} with {} images over {} classes",
        out.display(),
        world.images.len(),
        names.len()
    );
    Ok(())
}

/// Runs `model` over every image of `images_dir` and writes a dump of all
/// conv layer outputs plus a predictions sidecar into `out`. Images are
/// processed in batches of one per worker; the dump does not depend on the
/// thread count.
pub fn dump_activations(
    model: &ModelSpec,
    images_dir: &Path,
    out: &Path,
    threads: usize,
    max_shard_bytes: Option<u64>,
) -> Result<DumpSummary> {
    model.validate()?;
    let manifest = ImageDirManifest::load(images_dir)?;
    let labels = manifest.labels(&model.class_names)?;
    let schema = DumpSchema {
        model_name: model.name.clone(),
        classes: model.class_names.clone(),
        layers: model.conv_schema()?,
    };
    let mut writer = DumpWriter::create(out, schema)?;
    if let Some(bytes) = max_shard_bytes {
        writer = writer.with_max_shard_bytes(bytes);
    }
    let pool = crate::thread_pool(threads)?;
    let batch = pool.current_num_threads().max(1);
    let entries: Vec<_> = manifest.images.iter().zip(&labels).collect();
    let mut predictions = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(batch) {
        let traces = pool.install(|| {
            chunk
                .par_iter()
                .map(|(entry, _)| {
                    let image = crate::ingest::read_image_file(images_dir, entry)?;
                    forward(model, &image).map_err(|e| match e {
                        Error::Shape(m) => {
                            Error::Shape(format!("image {} ({}): {m}", entry.image_id, entry.file))
                        }
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for ((entry, &label), trace) in chunk.iter().zip(traces) {
            predictions.push(PredictionEntry {
                image_id: entry.image_id,
                predicted_class: trace.predicted_class as u32,
                probabilities: trace.probabilities,
            });
            for (layer_id, maps) in trace.conv_outputs.into_iter().enumerate() {
                writer.push(ActivationRecord {
                    image_id: entry.image_id,
                    class_label: label,
                    layer_id: layer_id as u16,
                    feature_maps: maps,
                })?;
            }
        }
    }
    let summary = writer.finish()?;
    Predictions::new(model.name.clone(), predictions)?.save(out)?;
    Ok(summary)
}

fn cmd_dump(a: &DumpArgs, out: &Path, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let summary = dump_activations(
        &model,
        &a.images,
        out,
        threads,
        Some(a.shard_mib.max(1) << 20),
    )?;
    let reader = DumpReader::open(out)?;
    println!(
        "dump {}: {} images x {} layers = {} records in {} shard(s), id {}",
        out.display(),
        summary.images,
        summary.layers,
        summary.records,
        summary.shards,
        reader.dump_id()
    );
    Ok(())
}

fn split_for(reader: &DumpReader, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    split_dataset(&reader.labels(), reader.classes().len(), fraction, seed)
        .map_err(|e| Error::Usage(format!("cannot split dataset: {e}")))
}

fn store_summary(store: &TagStore) -> String {
    let mut out = format!(
        "tag store ({}) from dump {}, {} tagging images\n",
        store.method, store.provenance.dump_id, store.provenance.tagging_images
    );
    let classes = store.classes.len();
    for (layer, tagged, total) in store.tag_counts() {
        let filters = store.layers[layer as usize].filters.len();
        out.push_str(&format!(
            "  layer {layer}: {tagged}/{filters} filters tagged, {total} tags"
        ));
        if filters > 0 && total == filters * classes {
            out.push_str(" (every filter tagged by every class)");
        }
        out.push('\n');
    }
    out
}

fn cmd_tag(a: &TagArgs, out: &Path, threads: usize) -> Result<()> {
    no_csv(a.format, "tag")?;
    let method = a.method.method()?;
    let reader = DumpReader::open(&a.dump)?;
    let split = split_for(&reader, a.split_fraction, a.seed)?;
    let store = build_tag_store(&reader, &split, method, threads)?;
    let path = write_file(out, "store.json", &store.to_json()?)?;
    write_file(out, "split.json", &pretty_json(&split)?)?;
    match a.format {
        Format::Json => print!("{}", store.to_json()?),
        _ => print!("{}", store_summary(&store)),
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_predictions(dump: &Path) -> Result<Option<Predictions>> {
    Predictions::load(dump)
}

fn cmd_explain(a: &ExplainArgs, out: &Path) -> Result<()> {
    no_csv(a.format, "explain")?;
    let reader = DumpReader::open(&a.dump)?;
    let store = TagStore::load(&a.store)?;
    let method = a.method.method()?.unwrap_or(store.method);
    let image = reader.read_image(a.image)?;
    let predictions = load_predictions(&a.dump)?;
    let predicted = predictions
        .as_ref()
        .and_then(|p| p.get(a.image))
        .map(|p| p.predicted_class);
    let activated = activated_filters(&image, reader.layers(), method)?;
    let e = explain_image(
        image.image_id,
        image.class_label,
        predicted,
        activated,
        &store,
    )?;
    let contents = match a.format {
        Format::Json => pretty_json(&e)?,
        _ => {
            let mut t = e.to_text(&store);
            for &n in &a.n {
                t.push_str(&format!("  Hits@{n}: {}\n", hits_at_n(&e, n)));
            }
            t
        }
    };
    emit(
        out,
        &format!("explanation-{}", a.image),
        a.format,
        &contents,
    )
}

fn cmd_evaluate(a: &EvaluateArgs, out: &Path, threads: usize) -> Result<()> {
    let reader = DumpReader::open(&a.dump)?;
    let store = TagStore::load(&a.store)?;
    let seed = a.seed.unwrap_or(store.provenance.seed);
    let fraction = a.split_fraction.unwrap_or(store.provenance.split_fraction);
    let split = split_for(&reader, fraction, seed)?;
    let side = match a.eval_side {
        EvalSide::Test => SplitSide::Test,
        EvalSide::Tagging => SplitSide::Tagging,
    };
    let predictions = load_predictions(&a.dump)?.map(|p| p.classes());
    let cfg = EvalConfig {
        method: a.method.method()?,
        n_values: a.n.clone(),
        threads,
    };
    let report = evaluate(&reader, &store, &split, side, predictions.as_ref(), &cfg)?;
    if report.empty {
        log::warn!("evaluation set is empty");
    }
    let contents = match a.format {
        Format::Json => pretty_json(&report)?,
        Format::Csv => crate::explain::rows_to_csv(&report.rows())?,
        Format::Text => report.to_text(),
    };
    emit(out, "report", a.format, &contents)
}

fn cmd_sweep(a: &SweepArgs, out: &Path, threads: usize) -> Result<()> {
    no_text(a.format)?;
    let grid: Vec<SelectionMethod> =
        a.k.iter()
            .map(|&k| SelectionMethod::KBest { k })
            .chain(a.q.iter().map(|&q| SelectionMethod::QQuantile { q }))
            .collect();
    if grid.is_empty() {
        return Err(Error::Usage(
            "sweep needs at least one --k or --q value".into(),
        ));
    }
    for m in &grid {
        m.validate().map_err(|e| Error::Usage(e.to_string()))?;
    }
    let reader = DumpReader::open(&a.dump)?;
    let split = split_for(&reader, a.split_fraction, a.seed)?;
    let predictions = load_predictions(&a.dump)?.map(|p| p.classes());
    let table = sweep(&reader, &split, &grid, &a.n, predictions.as_ref(), threads)?;
    let contents = match a.format {
        Format::Json => pretty_json(&table)?,
        _ => table.to_csv()?,
    };
    emit(out, "sweep", a.format, &contents)
}

fn no_text(format: Format) -> Result<()> {
    if format == Format::Text {
        return Err(Error::Usage("sweep writes csv or json".into()));
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, out: &Path, threads: usize) -> Result<()> {
    no_csv(a.format, "analyze-errors")?;
    let reader = DumpReader::open(&a.dump)?;
    let store = TagStore::load(&a.store)?;
    let method = a.method.method()?.unwrap_or(store.method);
    let predictions = load_predictions(&a.dump)?.ok_or_else(|| {
        Error::Usage(format!(
            "{} has no {}; error analysis needs model predictions",
            a.dump.display(),
            crate::ingest::PREDICTIONS_FILE
        ))
    })?;

    let ids: Vec<u32> = match a.image {
        Some(id) => vec![id],
        None => {
            let split = split_for(
                &reader,
                store.provenance.split_fraction,
                store.provenance.seed,
            )?;
            crate::explain::check_contamination(&store, reader.dump_id(), &split, SplitSide::Test)?;
            split
                .test_ids()
                .into_iter()
                .filter(|id| {
                    let label = reader
                        .images()
                        .iter()
                        .find(|e| e.image_id == *id)
                        .map(|e| e.class_label);
                    predictions.get(*id).map(|p| p.predicted_class) != label
                })
                .collect()
        }
    };

    let pool = crate::thread_pool(threads)?;
    let reports: Vec<ErrorReport> = pool.install(|| {
        ids.par_iter()
            .map(|&id| {
                let image = reader.read_image(id)?;
                let pred = predictions
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no prediction for image {id}")))?;
                let activated = activated_filters(&image, reader.layers(), method)?;
                let e = explain_image(
                    id,
                    image.class_label,
                    Some(pred.predicted_class),
                    activated,
                    &store,
                )?;
                error_report(&e, &store, &a.n, Some(&pred.probabilities))
            })
            .collect::<Result<_>>()
    })?;

    let contents = match a.format {
        Format::Json => pretty_json(&reports)?,
        _ => {
            let mut t = format!("{} misclassified image(s)\n", reports.len());
            for r in &reports {
                t.push_str(&r.to_text());
            }
            t
        }
    };
    emit(out, "errors", a.format, &contents)
}
