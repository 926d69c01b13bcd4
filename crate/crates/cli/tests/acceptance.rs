//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vodpipe_core::annotation::{read_detections, sort_detections};
use vodpipe_core::classmodel::{
    class_index, class_of_index, format_class_name, group_of, parse_class_name,
};
use vodpipe_core::eval::{
    average_precision, brute_force_ap, combined_score, match_detections, GroundTruth, Interpolation,
};
use vodpipe_core::fixture::{self, Fixture, FixtureSpec};
use vodpipe_core::metatable::{entry_id, load_table, merge_tables, provenance_path, save_table};
use vodpipe_core::{
    BoundingBox, ClassProbs, Detection, MetaEntry, MetaTable, ObjectClass, SourceTag, VehicleGroup,
    NUM_CLASSES,
};

const PUBLISHED_SCORE_TOLERANCE: f64 = 5e-4;
const CLOSURE_TOLERANCE: f64 = 1e-9;
const AP_INSTANCES: usize = 1000;
const AP_MAX_DETECTIONS: usize = 50;
const AP_MAX_GT: usize = 20;
const AP_BUDGET: Duration = Duration::from_secs(10);
const CLOSURE_BUDGET: Duration = Duration::from_secs(30);
const TABLE_CASES: usize = 200;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: impl FnOnce() -> String, fail: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(ok())
    } else {
        Err(fail())
    }
}

fn vodpipe(args: &[&str]) -> Result<Output, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_vodpipe"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(o)
    } else {
        Err(format!(
            "`vodpipe {}` exited {:?}: {}",
            args[0],
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn write_json(path: &Path, value: serde_json::Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path.to_owned()
}

fn published_scores() -> Outcome {
    let ours = combined_score(0.374, 0.357, [0.45, 0.55]);
    let yolo = combined_score(0.282, 0.285, [0.45, 0.55]);
    let round3 = |x: f64| format!("{x:.3}");
    check(
        (ours - 0.36465).abs() < PUBLISHED_SCORE_TOLERANCE
            && (yolo - 0.28365).abs() < PUBLISHED_SCORE_TOLERANCE
            && round3(ours) == "0.365"
            && round3(yolo) == "0.284",
        || {
            format!(
                "{ours:.5} -> {}, {yolo:.5} -> {}",
                round3(ours),
                round3(yolo)
            )
        },
        || format!("got {ours} and {yolo}"),
    )
}

/// Random detections and ground truth on a few images, matched for real,
/// then scored by both AP implementations.
fn ap_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x00a9_0001);
    let class = ObjectClass::from_index(0).unwrap();
    let images = ["a", "b", "c"];
    let random_box = |rng: &mut ChaCha8Rng| {
        // coarse grid so exact overlaps and score ties both happen
        let g = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| rng.gen_range(lo..=hi) as f64 / 20.0;
        BoundingBox::new(g(rng, 4, 16), g(rng, 4, 16), g(rng, 2, 6), g(rng, 2, 6)).unwrap()
    };
    let mut with_tp = 0;
    for i in 0..AP_INSTANCES {
        let n_gt = rng.gen_range(0..=AP_MAX_GT);
        let n_det = rng.gen_range(0..=AP_MAX_DETECTIONS);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth {
                image_id: images[rng.gen_range(0..images.len())].into(),
                class,
                bbox: random_box(&mut rng),
            })
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                // half the detections land on a GT box, the rest anywhere
                let (image, bbox) = match gts.get(rng.gen_range(0..gts.len().max(1) * 2)) {
                    Some(g) => (g.image_id.clone(), g.bbox),
                    None => (
                        images[rng.gen_range(0..images.len())].to_owned(),
                        random_box(&mut rng),
                    ),
                };
                let score = rng.gen_range(0..=10) as f64 / 10.0;
                Detection::new(image, bbox, score, class.group())
                    .unwrap()
                    .with_class(class)
            })
            .collect();
        let m = match_detections(&dets, &gts, 0.5).map_err(|e| e.to_string())?;
        let flags = m.per_class[0].scored_flags();
        with_tp += flags.iter().any(|f| f.1) as usize;
        let fast = average_precision(&flags, n_gt, Interpolation::AllPoint);
        let slow = brute_force_ap(&flags, n_gt);
        if fast.to_bits() != slow.to_bits() {
            return Err(format!("instance {i}: {fast} != {slow}"));
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < AP_BUDGET,
        || {
            format!("{AP_INSTANCES} instances bit-identical ({with_tp} with true positives), {elapsed:.2?}")
        },
        || format!("took {elapsed:.2?}"),
    )
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    fx: Fixture,
}

fn closure_setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_owned();
    let fx = fixture::generate(&root.join("fx"), &FixtureSpec::default()).unwrap();
    Setup {
        _dir: dir,
        root,
        fx,
    }
}

fn descriptors(
    s: &Setup,
    tag: &str,
    detector_extra: serde_json::Value,
    noise: f64,
) -> (PathBuf, PathBuf, PathBuf) {
    let det = |group: &str| {
        let mut config = json!({ "mock": "oracle", "group": group, "labels": p(&s.fx.labels_dir) });
        if let serde_json::Value::Object(extra) = &detector_extra {
            for (k, v) in extra {
                config[k] = v.clone();
            }
        }
        write_json(
            &s.root.join(format!("{tag}_det_{group}.json")),
            json!({ "kind": "detector", "name": format!("{tag}-{group}"), "transport": "in_process_mock", "config": config }),
        )
    };
    let cls = write_json(
        &s.root.join(format!("{tag}_cls.json")),
        json!({ "kind": "classifier", "name": format!("{tag}-cls"), "transport": "in_process_mock",
                "config": { "mock": "oracle", "noise": noise } }),
    );
    (det("car_group"), det("motorbike_group"), cls)
}

fn run_infer(
    s: &Setup,
    d: &(PathBuf, PathBuf, PathBuf),
    out: &Path,
    seed: &str,
) -> Result<(), String> {
    let cls = [p(&d.2); 5].join(",");
    vodpipe(&[
        "infer",
        "--manifest",
        p(&s.fx.manifest_path),
        "--det-car",
        p(&d.0),
        "--det-moto",
        p(&d.1),
        "--classifiers",
        &cls,
        "--seed",
        seed,
        "--out",
        p(out),
    ])
    .map(|_| ())
}

fn run_evaluate(s: &Setup, dets: &Path, out: &Path) -> Result<serde_json::Value, String> {
    vodpipe(&[
        "evaluate",
        "--detections",
        p(dets),
        "--gt-labels",
        p(&s.fx.labels_dir),
        "--manifest",
        p(&s.fx.manifest_path),
        "--out",
        p(out),
    ])?;
    let text = fs::read_to_string(out.join("eval_report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn oracle_closure() -> Outcome {
    let start = Instant::now();
    let s = closure_setup();
    let classes: BTreeSet<_> = s.fx.objects.values().flatten().map(|(c, _)| *c).collect();
    if s.fx.manifest.frames.len() != 10 || s.fx.object_count() != 30 || classes.len() != NUM_CLASSES
    {
        return Err("fixture is not 10 frames / 30 objects / 12 classes".into());
    }

    // training side: table build and identity translation
    let train = s.root.join("train");
    vodpipe(&[
        "build-table",
        "--manifest",
        p(&s.fx.manifest_path),
        "--labels",
        p(&s.fx.labels_dir),
        "--out",
        p(&train),
    ])?;
    let identity = write_json(
        &s.root.join("identity.json"),
        json!({ "kind": "translator", "name": "identity", "transport": "in_process_mock", "config": { "mock": "identity" } }),
    );
    let cut = s.root.join("cut");
    vodpipe(&[
        "translate",
        "--table",
        p(&train.join("table.jsonl")),
        "--backend",
        p(&identity),
        "--merge",
        "--out",
        p(&cut),
    ])?;
    let merged = load_table(&cut.join("merged.jsonl")).map_err(|e| e.to_string())?;
    if merged.len() != 60 || merged.by_lineage().values().any(|v| v.len() != 2) {
        return Err(format!("merged training table has {} rows", merged.len()));
    }

    let d = descriptors(&s, "oracle", json!({}), 0.0);
    let out = s.root.join("infer");
    run_infer(&s, &d, &out, "0")?;
    let mut got = read_detections(&out.join("detections.jsonl")).map_err(|e| e.to_string())?;
    let mut want: Vec<Detection> =
        s.fx.objects
            .iter()
            .flat_map(|(id, objs)| {
                objs.iter().map(move |(c, b)| {
                    Detection::new(id, *b, 1.0, c.group())
                        .unwrap()
                        .with_class(*c)
                })
            })
            .collect();
    sort_detections(&mut got);
    sort_detections(&mut want);
    if got != want {
        return Err(format!(
            "{} detections differ from {} ground-truth objects",
            got.len(),
            want.len()
        ));
    }
    let report = run_evaluate(&s, &out.join("detections.jsonl"), &s.root.join("eval"))?;
    let score = report["combined_score"].as_f64().unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    check(
        (score - 1.0).abs() <= CLOSURE_TOLERANCE && elapsed < CLOSURE_BUDGET,
        || format!("30/30 detections equal ground truth, combined score {score}, {elapsed:.2?}"),
        || format!("combined score {score}, {elapsed:.2?}"),
    )
}

fn degradation() -> Outcome {
    let s = closure_setup();
    let victim = format!("{}:1", s.fx.objects.keys().next().unwrap());
    let d = descriptors(&s, "drop", json!({ "drop": [victim] }), 0.0);
    let out = s.root.join("infer");
    run_infer(&s, &d, &out, "0")?;
    let n = read_detections(&out.join("detections.jsonl"))
        .map_err(|e| e.to_string())?
        .len();
    let report = run_evaluate(&s, &out.join("detections.jsonl"), &s.root.join("eval"))?;
    let v1 = report["splits"][0]["wmap"].as_f64().unwrap_or(f64::NAN);
    let combined = report["combined_score"].as_f64().unwrap_or(f64::NAN);
    check(
        n == 29 && v1 < 1.0 && combined < 1.0,
        || format!("dropping {victim}: {n} detections, WmAP(v1) {v1:.4}, combined {combined:.4}"),
        || format!("{n} detections, WmAP(v1) {v1}, combined {combined}"),
    )
}

fn random_table(rng: &mut ChaCha8Rng, tag: &str) -> MetaTable {
    let images = ["f0", "f1", "f-2", "z"];
    let n = rng.gen_range(0..20);
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..n {
        let image = images[rng.gen_range(0..images.len())];
        let source = [
            SourceTag::Synthetic,
            SourceTag::Translated,
            SourceTag::RealInference,
        ][rng.gen_range(0..3)];
        let id = entry_id(source, image, rng.gen_range(0..40));
        if !seen.insert(id.clone()) {
            continue;
        }
        let class = ObjectClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap();
        let training = source != SourceTag::RealInference;
        let predicted = rng
            .gen_bool(0.5)
            .then(|| ObjectClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap());
        let s: f64 = rng.gen();
        entries.push(MetaEntry {
            crop_ref: format!("crops/{image}/{id}.png"),
            entry_id: id,
            image_id: image.into(),
            bbox: BoundingBox::new(
                rng.gen(),
                rng.gen(),
                rng.gen_range(0.001..=1.0),
                rng.gen_range(0.001..=1.0),
            )
            .unwrap(),
            class_org: training.then_some(class),
            group: if training {
                group_of(class)
            } else {
                [VehicleGroup::Car, VehicleGroup::Motorbike][rng.gen_range(0..2)]
            },
            detector_score: (!training).then(|| rng.gen()),
            source,
            predicted_class: predicted,
            predicted_probs: predicted.map(|c| {
                let mut v = [0.0; NUM_CLASSES];
                v[c.index()] = 1.0 - s / 2.0;
                v[(c.index() + 1) % NUM_CLASSES] = s / 2.0;
                ClassProbs::new(&v).unwrap()
            }),
        });
    }
    MetaTable::new(entries, vec![format!("random {tag}")]).unwrap()
}

fn table_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7ab1e);
    let mut merges = 0;
    for case in 0..TABLE_CASES {
        let a = random_table(&mut rng, "a");
        let path = dir.path().join("t.jsonl");
        save_table(&a, &path).map_err(|e| e.to_string())?;
        let back = load_table(&path).map_err(|e| e.to_string())?;
        if back != a {
            return Err(format!("case {case}: load(save(t)) != t"));
        }
        let b = random_table(&mut rng, "b");
        let (Ok(ab), Ok(ba)) = (merge_tables(&a, &b), merge_tables(&b, &a)) else {
            continue; // overlapping entry ids cannot be merged either way
        };
        let (pa, pb) = (dir.path().join("ab.jsonl"), dir.path().join("ba.jsonl"));
        save_table(&ab, &pa).map_err(|e| e.to_string())?;
        save_table(&ba, &pb).map_err(|e| e.to_string())?;
        let bytes = |p: &Path| fs::read(p).unwrap();
        if bytes(&pa) != bytes(&pb) || bytes(&provenance_path(&pa)) != bytes(&provenance_path(&pb))
        {
            return Err(format!(
                "case {case}: merge(a,b) and merge(b,a) serialize differently"
            ));
        }
        merges += 1;
    }
    check(
        merges >= TABLE_CASES / 2,
        || format!("{TABLE_CASES} round trips, {merges} merges byte-identical both ways"),
        || format!("only {merges} disjoint merges exercised"),
    )
}

fn class_algebra() -> Outcome {
    let all: Vec<ObjectClass> = ObjectClass::all().collect();
    let car = all
        .iter()
        .filter(|c| group_of(**c) == VehicleGroup::Car)
        .count();
    let moto = all
        .iter()
        .filter(|c| group_of(**c) == VehicleGroup::Motorbike)
        .count();
    if all.len() != NUM_CLASSES || car != 6 || moto != 6 {
        return Err(format!("{} classes, groups {car}/{moto}", all.len()));
    }
    let indices: BTreeSet<usize> = all.iter().map(|c| class_index(*c)).collect();
    if indices != (0..NUM_CLASSES).collect() {
        return Err("class_index is not onto 0..12".into());
    }
    for i in 0..NUM_CLASSES {
        let c = class_of_index(i).map_err(|e| e.to_string())?;
        if class_index(c) != i {
            return Err(format!("index {i} does not round-trip"));
        }
    }
    if class_of_index(NUM_CLASSES).is_ok() {
        return Err("index 12 accepted".into());
    }
    for c in &all {
        let name = format_class_name(*c);
        if parse_class_name(&name).ok() != Some(*c) {
            return Err(format!("{name} does not round-trip"));
        }
    }
    Ok("12 classes, groups 6/6, index bijection, parse(format(c)) = c".into())
}

fn determinism() -> Outcome {
    let s = closure_setup();
    let d = descriptors(&s, "noisy", json!({ "mock": "noisy" }), 0.3);
    let (a, b) = (s.root.join("a"), s.root.join("b"));
    run_infer(&s, &d, &a, "42")?;
    run_infer(&s, &d, &b, "42")?;
    let same = |f: &str| fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok() && a.join(f).exists();
    check(
        same("detections.jsonl") && same("run_report.json"),
        || "detections.jsonl and run_report.json byte-identical across two runs".into(),
        || "outputs differ between runs".into(),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("Published score arithmetic", published_scores),
        ("AP oracle equivalence", ap_oracle),
        ("Oracle closure end-to-end", oracle_closure),
        ("Degradation sensitivity", degradation),
        ("Meta-table round-trip", table_round_trip),
        ("Class-algebra exhaustives", class_algebra),
        ("Determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
