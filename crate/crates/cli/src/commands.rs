use std::fs;
use std::io::{self, BufWriter};
use std::path::Path;

use serde_json::json;
use vodpipe_core::annotation::{
    class_histogram, load_label_dir, load_label_dir_lenient, read_detections, write_detections,
    AnnotationError, ClassMap, DatasetManifest, LabelRow,
};
use vodpipe_core::backends::conformance::run_conformance;
use vodpipe_core::backends::protocol::serve;
use vodpipe_core::backends::{
    open_backend, open_classifier, open_detector, open_translator, BackendDescriptor, Transport,
};
use vodpipe_core::eval::{
    evaluate as run_eval, ground_truth_from_labels, pr_curve_csv, EvalConfig,
};
use vodpipe_core::metatable::{
    build_training_table, build_translated_table, load_table, merge_tables, rejections_to_jsonl,
    save_table, SourceTag,
};
use vodpipe_core::pipeline::{run_end_to_end, Backends, PipelineConfig, PipelineError};

use crate::error::CliError;
use crate::manifest::{write_atomic, RunManifest};
use crate::{
    BuildTableArgs, ConformanceArgs, EvaluateArgs, InferArgs, ServeMockArgs, StatsArgs,
    TranslateArgs,
};

fn load_class_map(path: Option<&Path>) -> Result<ClassMap, CliError> {
    match path {
        Some(p) => Ok(ClassMap::load(p)?),
        None => Ok(ClassMap::default()),
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn load_descriptor(path: &Path) -> Result<BackendDescriptor, CliError> {
    if !path.exists() {
        return Err(CliError::io(format!("{}: no such file", path.display())));
    }
    Ok(BackendDescriptor::load(path)?)
}

fn named_class_hint(e: AnnotationError) -> CliError {
    match e {
        AnnotationError::NamedClassWithoutMap { .. } => {
            CliError::config(format!("{e} (pass --class-map)"))
        }
        other => other.into(),
    }
}

pub fn build_table(a: &BuildTableArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let class_map = load_class_map(a.class_map.as_deref())?;
    let labels = load_label_dir_lenient(&a.labels, &class_map)?;
    if let Some(Err(e)) = labels
        .values()
        .flatten()
        .find(|r| matches!(r, Err(AnnotationError::NamedClassWithoutMap { .. })))
    {
        return Err(CliError::config(format!("{e} (pass --class-map)")));
    }
    create_out(&a.out)?;
    let built = build_training_table(&manifest, &labels, &a.out)?;

    let table_path = a.out.join("table.jsonl");
    let rejections_path = a.out.join("rejections.jsonl");
    let hist_path = a.out.join("class_histogram.csv");
    let groups_path = a.out.join("group_histogram.csv");
    save_table(&built.table, &table_path)?;
    write_atomic(
        &rejections_path,
        rejections_to_jsonl(&built.rejections).as_bytes(),
    )?;
    let rows: Vec<&LabelRow> = labels
        .values()
        .flatten()
        .filter_map(|r| r.as_ref().ok())
        .collect();
    let hist = class_histogram(rows);
    write_atomic(&hist_path, hist.to_csv().as_bytes())?;
    write_atomic(&groups_path, hist.groups_to_csv().as_bytes())?;

    println!(
        "{} rows from {} frames, {} rejected",
        built.table.len(),
        manifest.frames.len(),
        built.rejections.len()
    );
    let mut m = RunManifest::new("build-table", json!({ "args": a }));
    m.input("manifest", &a.manifest).input("labels", &a.labels);
    if let Some(p) = &a.class_map {
        m.input("class_map", p);
    }
    m.output("table", &table_path)
        .output("rejections", &rejections_path)
        .output("class_histogram", &hist_path)
        .output("group_histogram", &groups_path);
    m.write(&a.out)?;
    Ok(())
}

pub fn translate(a: &TranslateArgs) -> Result<(), CliError> {
    let table = load_table(&a.table)?;
    let table_dir = a.table.parent().unwrap_or(Path::new("."));
    let descriptor = load_descriptor(&a.backend)?;
    let mut translator = open_translator(&descriptor, 0)?;
    create_out(&a.out)?;
    let built = build_translated_table(&table, table_dir, translator.as_mut(), &a.out)?;

    let table_path = a.out.join("table.jsonl");
    let rejections_path = a.out.join("rejections.jsonl");
    save_table(&built.table, &table_path)?;
    write_atomic(
        &rejections_path,
        rejections_to_jsonl(&built.rejections).as_bytes(),
    )?;

    let mut m = RunManifest::new(
        "translate",
        json!({ "args": a, "backend": descriptor.name }),
    );
    m.input("table", &a.table).input("backend", &a.backend);
    m.output("table", &table_path)
        .output("rejections", &rejections_path);

    if a.merge {
        // the merged table lives in `out`, so synthetic crops move there too
        for e in table
            .entries()
            .iter()
            .filter(|e| e.source == SourceTag::Synthetic)
        {
            let dst = a.out.join(&e.crop_ref);
            if let Some(parent) = dst.parent() {
                create_out(parent)?;
            }
            fs::copy(table_dir.join(&e.crop_ref), &dst)
                .map_err(|err| CliError::io(format!("{}: {err}", dst.display())))?;
        }
        let merged = merge_tables(&table, &built.table)?;
        let merged_path = a.out.join("merged.jsonl");
        save_table(&merged, &merged_path)?;
        m.output("merged", &merged_path);
        println!("merged table: {} rows", merged.len());
    }
    println!(
        "translated {} of {} rows, {} failed",
        built.table.len(),
        table.len(),
        built.rejections.len()
    );
    m.write(&a.out)?;
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.classifiers.len() != cfg.ensemble_size {
        return Err(PipelineError::EnsembleMismatch {
            expected: cfg.ensemble_size,
            actual: a.classifiers.len(),
        }
        .into());
    }
    let mut backends = Backends {
        det_car: open_detector(&load_descriptor(&a.det_car)?, cfg.seed)?,
        det_moto: open_detector(&load_descriptor(&a.det_moto)?, cfg.seed)?,
        classifiers: a
            .classifiers
            .iter()
            .map(|p| Ok(open_classifier(&load_descriptor(p)?, cfg.seed)?))
            .collect::<Result<_, CliError>>()?,
        translator: None,
    };
    create_out(&a.out)?;
    let run = run_end_to_end(&manifest, None, &mut backends, &cfg, &a.out)?;

    let dets_path = a.out.join("detections.jsonl");
    let report_path = a.out.join("run_report.json");
    let table_path = a.out.join("inference").join("table.jsonl");
    write_detections(&run.detections, &dets_path)?;
    write_atomic(&report_path, run.report.to_json().as_bytes())?;
    save_table(&run.inference_table, &table_path)?;

    let c = &run.report.counts;
    println!(
        "frames {}, raw {}, after nms {}, classified {}, emitted {}, failures {}",
        c.frames,
        c.raw_detections,
        c.post_nms,
        c.classified,
        c.emitted,
        run.report.failures.len()
    );
    let mut m = RunManifest::new("infer", json!({ "args": a, "pipeline": cfg }));
    m.seed = Some(cfg.seed);
    m.config_hash = run.report.config_hash.clone();
    m.input("manifest", &a.manifest)
        .input("det_car", &a.det_car)
        .input("det_moto", &a.det_moto);
    for (i, p) in a.classifiers.iter().enumerate() {
        m.input(&format!("classifier_{i}"), p);
    }
    if let Some(p) = &a.config {
        m.input("config", p);
    }
    m.output("detections", &dets_path)
        .output("run_report", &report_path)
        .output("inference_table", &table_path);
    m.write(&a.out)?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = match &a.eval_config {
        Some(p) => EvalConfig::load(p)?,
        None => EvalConfig::default(),
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    let dets = read_detections(&a.detections)?;
    let class_map = load_class_map(a.class_map.as_deref())?;
    let labels = load_label_dir(&a.gt_labels, &class_map).map_err(named_class_hint)?;
    let gts = ground_truth_from_labels(&labels);
    let report = run_eval(&dets, &gts, &manifest, &cfg)?;

    create_out(&a.out)?;
    let report_path = a.out.join("eval_report.json");
    write_atomic(&report_path, report.to_json().as_bytes())?;
    let pr_dir = a.out.join("pr");
    for split in &report.splits {
        for (c, curve) in split.classes.iter().zip(&split.pr_curves) {
            let path = pr_dir.join(&split.tag).join(format!("{}.csv", c.class));
            write_atomic(&path, pr_curve_csv(curve).as_bytes())?;
        }
    }
    print!("{}", report.summary());

    let mut m = RunManifest::new("evaluate", json!({ "args": a, "eval": cfg }));
    m.input("detections", &a.detections)
        .input("gt_labels", &a.gt_labels)
        .input("manifest", &a.manifest);
    if let Some(p) = &a.eval_config {
        m.input("eval_config", p);
    }
    m.output("report", &report_path)
        .output("pr_curves", &pr_dir);
    m.write(&a.out)?;
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<(), CliError> {
    let class_map = load_class_map(a.class_map.as_deref())?;
    let labels = load_label_dir(&a.labels, &class_map).map_err(named_class_hint)?;
    let hist = class_histogram(labels.values().flatten());
    create_out(&a.out)?;
    let hist_path = a.out.join("class_histogram.csv");
    let groups_path = a.out.join("group_histogram.csv");
    let summary_path = a.out.join("stats.json");
    write_atomic(&hist_path, hist.to_csv().as_bytes())?;
    write_atomic(&groups_path, hist.groups_to_csv().as_bytes())?;
    let summary = json!({
        "total": hist.total(),
        "groups": hist.group_totals(),
        "imbalance_ratio": hist.imbalance_ratio(),
    });
    write_atomic(
        &summary_path,
        (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes(),
    )?;
    print!("{}", hist.to_csv());
    match hist.imbalance_ratio() {
        Some(r) => println!("imbalance ratio {r}"),
        None => println!("imbalance ratio undefined (no annotations)"),
    }

    let mut m = RunManifest::new("stats", json!({ "args": a }));
    m.input("labels", &a.labels);
    if let Some(p) = &a.class_map {
        m.input("class_map", p);
    }
    m.output("class_histogram", &hist_path)
        .output("group_histogram", &groups_path)
        .output("summary", &summary_path);
    m.write(&a.out)?;
    Ok(())
}

pub fn conformance(a: &ConformanceArgs) -> Result<(), CliError> {
    let descriptor = load_descriptor(&a.backend)?;
    if descriptor.transport != Transport::SubprocessStream {
        return Err(CliError::config(format!(
            "{}: conformance applies to subprocess_stream backends",
            a.backend.display()
        )));
    }
    create_out(&a.out)?;
    let report = run_conformance(&descriptor, &a.out.join("work"))?;
    let report_path = a.out.join("conformance.json");
    write_atomic(
        &report_path,
        (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes(),
    )?;
    println!("{report}");

    let mut m = RunManifest::new("conformance", json!({ "args": a }));
    m.input("backend", &a.backend)
        .output("report", &report_path);
    m.write(&a.out)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::backend(format!(
            "{} is not conformant",
            descriptor.name
        )))
    }
}

pub fn serve_mock(a: &ServeMockArgs) -> Result<(), CliError> {
    let descriptor = load_descriptor(&a.backend)?;
    if descriptor.transport != Transport::InProcessMock {
        return Err(CliError::config(
            "serve-mock needs an in_process_mock descriptor",
        ));
    }
    let mut backend = open_backend(&descriptor, a.seed)?;
    let stdin = io::stdin();
    serve(
        &mut backend,
        stdin.lock(),
        BufWriter::new(io::stdout().lock()),
    )?;
    Ok(())
}
