//! End-to-end acceptance suite. Every published floor the pipeline commits
//! to is asserted here, one test per claim, driving the real binary.
//!
//! The default-scale artifacts (2000-scene dataset, two 20000-step
//! checkpoints) take about two hours to build on one core. They are cached
//! under `target/acceptance-cache/` and reused across runs; wiping that
//! directory (or changing the configs below) rebuilds them from scratch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;
use std::time::Instant;

use objembed_core::evalkit::{
    global_retrieve, global_text_embedding, local_retrieve, recall_at_k, CaptionKind,
};
use objembed_core::io::{
    load_checkpoint, read_gallery, read_scenes, save_checkpoint, write_gallery, write_scenes,
};
use objembed_core::scenegen::{describe_object, DescribeKind};
use serde_json::{json, Value};

// The metric-equivalence and structural-invariant suites are part of the
// acceptance gate; include them so this one target runs every claim.
#[path = "../../core/tests/metrics_reference.rs"]
mod a3_metric_oracle;
#[path = "../../core/tests/properties.rs"]
mod a9_structural_properties;

// ---------------------------------------------------------------------------
// Published floors for the default-scale run (also recorded in README.md).
// ---------------------------------------------------------------------------

/// Detection AP on the 200-scene holdout with ground-truth-mixed proposals.
const MIN_MIXED_AP: f64 = 0.70;
/// Referring-expression accuracy at IoU 0.5 on the holdout.
const MIN_REC_ACCURACY: f64 = 0.85;
/// Object-level text-to-image Recall@1 on the holdout.
const MIN_LOCAL_RECALL_AT_1: f64 = 0.80;
/// Rank correlation between predicted quality and true best overlap.
const MIN_QUALITY_SPEARMAN: f64 = 0.9;
/// Wall-clock budget for the default training run, in seconds.
const MAX_TRAIN_SECS: f64 = 7_200.0;
/// Wall-clock budget for the gradient audit, in seconds.
const MAX_AUDIT_SECS: f64 = 60.0;
/// Worst acceptable |analytic - finite difference| / max(1, |analytic|).
const MAX_AUDIT_REL_ERR: f64 = 1e-4;
/// Scenes at the tail of the dataset held out from training.
const HOLDOUT: usize = 200;
/// An object is "small" when its box covers less than this canvas fraction.
const SMALL_AREA_FRACTION: f64 = 0.10;

/// Default-scale run: every knob at its built-in default.
const DUAL_CONFIG: &str = "{}\n";
/// Same budget and seeds, but the object block carries a single labeled
/// token and no quality slot.
const SINGLE_CONFIG: &str = "{\n  \"encoder\": { \"token_mode\": \"single_label_one\" }\n}\n";

// ---------------------------------------------------------------------------
// Binary harness.
// ---------------------------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_objembed")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .unwrap_or_else(|e| panic!("failed to spawn {}: {e}", bin()))
}

/// Run the binary, require exit 0, and hand back stdout.
fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "`objembed {}` failed (status {:?}):\n{}{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

fn utf8(p: &Path) -> &str {
    p.to_str().expect("test paths are UTF-8")
}

fn metric(report: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(report)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", report.display()));
    let v: Value = serde_json::from_str(&text)
        .unwrap_or_else(|e| panic!("{} is not JSON: {e}", report.display()));
    v["metrics"][key]
        .as_f64()
        .unwrap_or_else(|| panic!("metric {key} missing from {}", report.display()))
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

// ---------------------------------------------------------------------------
// Shared default-scale artifacts, built once and cached across runs.
// ---------------------------------------------------------------------------

struct Artifacts {
    scenes: PathBuf,
    dual_ckpt: PathBuf,
    single_ckpt: PathBuf,
    dual_gallery: PathBuf,
    dual_train_secs: f64,
}

static ARTIFACTS: LazyLock<Artifacts> = LazyLock::new(build_artifacts);

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache")
}

fn read_secs(meta: &Path) -> f64 {
    let v: Value = serde_json::from_str(&fs::read_to_string(meta).unwrap())
        .unwrap_or_else(|e| panic!("{} is not JSON: {e}", meta.display()));
    v["train_secs"]
        .as_f64()
        .unwrap_or_else(|| panic!("train_secs missing from {}", meta.display()))
}

/// Train one default-scale checkpoint through the binary and record how long
/// the run took next to it.
fn train_timed(config: &Path, scenes: &Path, ckpt: &Path, meta: &Path) {
    let t0 = Instant::now();
    run_ok(&[
        "train",
        "--config",
        utf8(config),
        "--data",
        utf8(scenes),
        "--out",
        utf8(ckpt),
    ]);
    let secs = t0.elapsed().as_secs_f64();
    fs::write(meta, json!({ "train_secs": secs }).to_string()).unwrap();
}

fn build_artifacts() -> Artifacts {
    let dir = cache_dir();
    let manifest = dir.join("manifest.json");
    let scenes = dir.join("scenes.jsonl");
    let dual_ckpt = dir.join("dual.obck");
    let single_ckpt = dir.join("single.obck");
    let dual_meta = dir.join("dual.meta.json");
    let single_meta = dir.join("single.meta.json");
    let dual_gallery = dir.join("gal-dual.obem");

    let wanted = json!({ "version": 1, "dual": DUAL_CONFIG, "single": SINGLE_CONFIG });
    let fresh = fs::read_to_string(&manifest)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .is_some_and(|have| have == wanted)
        && [&scenes, &dual_ckpt, &single_ckpt, &dual_meta, &single_meta]
            .iter()
            .all(|p| p.exists());

    if !fresh {
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let dual_cfg = dir.join("dual.json");
        let single_cfg = dir.join("single.json");
        fs::write(&dual_cfg, DUAL_CONFIG).unwrap();
        fs::write(&single_cfg, SINGLE_CONFIG).unwrap();
        run_ok(&["gen-data", "--config", utf8(&dual_cfg), "--out", utf8(&scenes)]);
        train_timed(&dual_cfg, &scenes, &dual_ckpt, &dual_meta);
        train_timed(&single_cfg, &scenes, &single_ckpt, &single_meta);
        fs::write(&manifest, wanted.to_string()).unwrap();
    }

    // Cheap relative to training; rebuild whenever missing.
    if !dual_gallery.exists() {
        run_ok(&[
            "embed",
            "--ckpt",
            utf8(&dual_ckpt),
            "--data",
            utf8(&scenes),
            "--holdout",
            &HOLDOUT.to_string(),
            "--out",
            utf8(&dual_gallery),
        ]);
    }

    Artifacts {
        scenes,
        dual_ckpt,
        single_ckpt,
        dual_gallery,
        dual_train_secs: read_secs(&dual_meta),
    }
}

/// Run `eval detect` for a checkpoint on the holdout and return the report.
fn detect_report(ckpt: &Path, mix_gt: bool, out: &Path) {
    let art = &*ARTIFACTS;
    let mut args = vec![
        "eval",
        "detect",
        "--ckpt",
        utf8(ckpt),
        "--data",
        utf8(&art.scenes),
        "--holdout",
        "200",
        "--out",
        utf8(out),
    ];
    if mix_gt {
        args.push("--mix-gt");
    }
    run_ok(&args);
}

// ---------------------------------------------------------------------------
// 1. The analytic gradients match finite differences, fast.
// ---------------------------------------------------------------------------

#[test]
fn a1_gradient_audit_is_accurate_and_fast() {
    let t0 = Instant::now();
    let stdout = run_ok(&["grad-check"]);
    let secs = t0.elapsed().as_secs_f64();

    let json_end = stdout
        .find("\ngradient audit")
        .expect("summary line follows the report");
    let report: Value = serde_json::from_str(&stdout[..json_end]).unwrap();
    let max_rel_err = report["max_rel_err"].as_f64().unwrap();
    let worst = report["worst_param"].as_str().unwrap();
    let n_checked = report["n_checked"].as_u64().unwrap();

    println!("audit: max rel err {max_rel_err:.3e} at {worst} ({n_checked} probes, {secs:.1}s)");
    assert!(n_checked > 0, "audit probed nothing");
    assert!(!worst.is_empty(), "audit did not name its worst parameter");
    assert!(
        max_rel_err < MAX_AUDIT_REL_ERR,
        "max rel err {max_rel_err:.3e} is at or above {MAX_AUDIT_REL_ERR:.0e}"
    );
    assert!(secs < MAX_AUDIT_SECS, "audit took {secs:.1}s (budget {MAX_AUDIT_SECS}s)");

    // A sabotaged gradient must be caught, and reported as an audit failure
    // (exit 1), not as a config/data error.
    let bad = run(&["grad-check", "--inject-fault"]);
    assert_eq!(
        bad.status.code(),
        Some(1),
        "fault injection should exit 1, got {:?}",
        bad.status.code()
    );
}

// ---------------------------------------------------------------------------
// 2. Planting ground-truth boxes in the proposal set saturates recall.
// ---------------------------------------------------------------------------

#[test]
fn a2_planted_proposals_make_average_recall_exactly_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let scenes = tmp.path().join("scenes.jsonl");
    let ckpt = tmp.path().join("ck.obck");
    let report = tmp.path().join("det.json");
    fs::write(
        &cfg,
        r#"{
  "encoder": { "d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32,
               "max_seq_len": 256, "grid_w": 16, "grid_h": 16, "grid_c": 8,
               "patch": 8, "roi_bins": 2 },
  "data": { "seed": 5, "scenes": 24, "max_objects": 3, "proposals": 12,
            "grid_w": 16, "grid_h": 16, "grid_c": 8 },
  "train": { "steps": 3, "batch_size": 2, "warmup_steps": 1,
             "eval_every": 0, "holdout_scenes": 8 }
}"#,
    )
    .unwrap();

    run_ok(&["gen-data", "--config", utf8(&cfg), "--out", utf8(&scenes)]);
    run_ok(&[
        "train",
        "--config",
        utf8(&cfg),
        "--data",
        utf8(&scenes),
        "--out",
        utf8(&ckpt),
    ]);
    run_ok(&[
        "eval",
        "detect",
        "--ckpt",
        utf8(&ckpt),
        "--data",
        utf8(&scenes),
        "--config",
        utf8(&cfg),
        "--holdout",
        "8",
        "--mix-gt",
        "--out",
        utf8(&report),
    ]);

    let ar = metric(&report, "AR");
    assert!(
        ar.to_bits() == 1.0f64.to_bits(),
        "mixed-proposal AR should be exactly 1.0, got {ar:.17}"
    );
}

// ---------------------------------------------------------------------------
// 4. The default run clears its published detection / REC / retrieval
//    floors inside the wall-clock budget.
// ---------------------------------------------------------------------------

#[test]
fn a4_default_run_reaches_detection_rec_and_retrieval_targets() {
    let art = &*ARTIFACTS;
    let tmp = tempfile::tempdir().unwrap();

    let det = tmp.path().join("det.json");
    detect_report(&art.dual_ckpt, true, &det);
    let ap = metric(&det, "AP");

    let rec = tmp.path().join("rec.json");
    run_ok(&[
        "eval",
        "rec",
        "--ckpt",
        utf8(&art.dual_ckpt),
        "--data",
        utf8(&art.scenes),
        "--holdout",
        "200",
        "--out",
        utf8(&rec),
    ]);
    let acc = metric(&rec, "acc@0.5");

    let loc = tmp.path().join("loc.json");
    run_ok(&[
        "eval",
        "local-retrieval",
        "--ckpt",
        utf8(&art.dual_ckpt),
        "--gallery",
        utf8(&art.dual_gallery),
        "--data",
        utf8(&art.scenes),
        "--holdout",
        "200",
        "--out",
        utf8(&loc),
    ]);
    let r1 = metric(&loc, "Recall@1");

    println!(
        "default run: mixed AP {ap:.4}, REC acc@0.5 {acc:.4}, local Recall@1 {r1:.4}, \
         trained in {:.0}s",
        art.dual_train_secs
    );
    assert!(
        art.dual_train_secs <= MAX_TRAIN_SECS,
        "training took {:.0}s (budget {MAX_TRAIN_SECS:.0}s)",
        art.dual_train_secs
    );
    assert!(ap >= MIN_MIXED_AP, "mixed AP {ap:.4} fell below {MIN_MIXED_AP}");
    assert!(acc >= MIN_REC_ACCURACY, "REC acc@0.5 {acc:.4} fell below {MIN_REC_ACCURACY}");
    assert!(r1 >= MIN_LOCAL_RECALL_AT_1, "Recall@1 {r1:.4} fell below {MIN_LOCAL_RECALL_AT_1}");
}

// ---------------------------------------------------------------------------
// 5. The quality head's predictions rank true overlap.
// ---------------------------------------------------------------------------

#[test]
fn a5_quality_predictions_rank_true_overlap() {
    let art = &*ARTIFACTS;
    let tmp = tempfile::tempdir().unwrap();
    let det = tmp.path().join("det.json");
    detect_report(&art.dual_ckpt, false, &det);
    let s = metric(&det, "Spearman_iou");
    println!("quality calibration: Spearman {s:.4} over held-out positives");
    assert!(
        s >= MIN_QUALITY_SPEARMAN,
        "Spearman {s:.4} fell below {MIN_QUALITY_SPEARMAN}"
    );
}

// ---------------------------------------------------------------------------
// 6. The two-token object block beats the single-token ablation on
//    detection at an identical seed and budget.
// ---------------------------------------------------------------------------

#[test]
fn a6_dual_token_block_beats_single_on_detection() {
    let art = &*ARTIFACTS;
    let tmp = tempfile::tempdir().unwrap();

    let det_dual = tmp.path().join("dual.json");
    detect_report(&art.dual_ckpt, true, &det_dual);
    let ap_dual = metric(&det_dual, "AP");

    let det_single = tmp.path().join("single.json");
    detect_report(&art.single_ckpt, true, &det_single);
    let ap_single = metric(&det_single, "AP");

    println!("mixed AP: dual-token {ap_dual:.4} vs single-token {ap_single:.4}");
    assert!(
        ap_dual >= ap_single,
        "dual-token AP {ap_dual:.4} lost to single-token AP {ap_single:.4}"
    );
}

// ---------------------------------------------------------------------------
// 7. For small objects, object-level retrieval beats whole-image retrieval.
// ---------------------------------------------------------------------------

#[test]
fn a7_small_object_queries_favor_object_level_retrieval() {
    let art = &*ARTIFACTS;
    let ck = load_checkpoint(&art.dual_ckpt).unwrap();
    let scenes = read_scenes(&art.scenes).unwrap();
    let holdout = &scenes[scenes.len() - HOLDOUT..];
    let (d_model, gallery) = read_gallery(&art.dual_gallery).unwrap();
    assert_eq!(d_model, ck.params.cfg.d_model);

    let canvas = (ck.params.cfg.grid_w * ck.params.cfg.grid_h) as f64;
    let cutoff = SMALL_AREA_FRACTION * canvas;

    let mut local_ranked: Vec<Vec<u64>> = Vec::new();
    let mut global_ranked: Vec<Vec<u64>> = Vec::new();
    let mut positives: Vec<Vec<u64>> = Vec::new();
    for scene in holdout {
        for j in 0..scene.objects.len() {
            if scene.objects[j].bbox.area() >= cutoff {
                continue;
            }
            let words = describe_object(scene, j, DescribeKind::Referring);
            let local = local_retrieve(&ck.params, &words, &gallery).unwrap();
            let text = global_text_embedding(&ck.params, &words).unwrap();
            let global = global_retrieve(&ck.params, &text, &gallery, CaptionKind::Long).unwrap();
            local_ranked.push(local.iter().map(|h| h.image_id).collect());
            global_ranked.push(global.iter().map(|h| h.image_id).collect());
            positives.push(vec![scene.id]);
        }
    }
    assert!(
        positives.len() >= 20,
        "only {} small-object queries; the comparison would be noise",
        positives.len()
    );

    let local_r1 = recall_at_k(&local_ranked, &positives, 1).unwrap();
    let global_r1 = recall_at_k(&global_ranked, &positives, 1).unwrap();
    println!(
        "small objects (area < {cutoff:.0} of {canvas:.0}): local R@1 {local_r1:.4} vs \
         global R@1 {global_r1:.4} over {} queries",
        positives.len()
    );
    assert!(
        local_r1 >= global_r1,
        "object-level R@1 {local_r1:.4} lost to whole-image R@1 {global_r1:.4}"
    );
}

// ---------------------------------------------------------------------------
// 8. Identical seeds reproduce every artifact bit for bit.
// ---------------------------------------------------------------------------

#[test]
fn a8_identical_seeds_reproduce_every_artifact_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let at = |name: &str| tmp.path().join(name);
    let shared = r#""encoder": { "d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32,
               "max_seq_len": 256, "grid_w": 16, "grid_h": 16, "grid_c": 8,
               "patch": 8, "roi_bins": 2 },
  "data": { "seed": 11, "scenes": 12, "max_objects": 3, "proposals": 10,
            "grid_w": 16, "grid_h": 16, "grid_c": 8 },
  "train": { "batch_size": 2, "warmup_steps": 1, "eval_every": 1,
             "holdout_scenes": 4"#;
    let cfg2 = at("cfg2.json");
    let cfg4 = at("cfg4.json");
    fs::write(&cfg2, format!("{{\n  {shared}, \"steps\": 2 }}\n}}")).unwrap();
    fs::write(&cfg4, format!("{{\n  {shared}, \"steps\": 4 }}\n}}")).unwrap();

    // Dataset generation is reproducible byte for byte.
    let s1 = at("s1.jsonl");
    let s2 = at("s2.jsonl");
    run_ok(&["gen-data", "--config", utf8(&cfg4), "--out", utf8(&s1)]);
    run_ok(&["gen-data", "--config", utf8(&cfg4), "--out", utf8(&s2)]);
    assert!(same_bytes(&s1, &s2), "identical seeds produced different datasets");

    // Two trainings from scratch agree: checkpoints byte for byte, and the
    // first optimizer step's losses bit for bit.
    let train = |cfg: &Path, out: &Path, log: &Path, resume: Option<&Path>| {
        let mut args = vec![
            "train",
            "--config",
            utf8(cfg),
            "--data",
            utf8(&s1),
            "--out",
            utf8(out),
            "--log",
            utf8(log),
        ];
        if let Some(r) = resume {
            args.push("--resume");
            args.push(utf8(r));
        }
        run_ok(&args);
    };
    let ck2a = at("ck2a.obck");
    let ck2b = at("ck2b.obck");
    let (log2a, log2b) = (at("2a.jsonl"), at("2b.jsonl"));
    train(&cfg2, &ck2a, &log2a, None);
    train(&cfg2, &ck2b, &log2b, None);
    assert!(same_bytes(&ck2a, &ck2b), "identical trainings produced different checkpoints");

    let first = |p: &Path| fs::read_to_string(p).unwrap().lines().next().unwrap().to_owned();
    let (l1, l2) = (first(&log2a), first(&log2b));
    assert_eq!(l1, l2, "step-1 log records differ");
    let bits = |line: &str| {
        serde_json::from_str::<Value>(line).unwrap()["L_total"]
            .as_f64()
            .unwrap()
            .to_bits()
    };
    assert_eq!(bits(&l1), bits(&l2), "step-1 total loss differs in the bits");

    // Training four steps straight equals training two, then resuming for
    // two more.
    let ck4 = at("ck4.obck");
    let ck4r = at("ck4r.obck");
    train(&cfg4, &ck4, &at("4.jsonl"), None);
    train(&cfg4, &ck4r, &at("4r.jsonl"), Some(&ck2a));
    assert!(same_bytes(&ck4, &ck4r), "resumed training diverged from the straight run");

    // Embedding the same split twice agrees byte for byte.
    let g1 = at("g1.obem");
    let g2 = at("g2.obem");
    let embed = |out: &Path| {
        run_ok(&[
            "embed",
            "--ckpt",
            utf8(&ck4),
            "--data",
            utf8(&s1),
            "--config",
            utf8(&cfg4),
            "--out",
            utf8(out),
        ]);
    };
    embed(&g1);
    embed(&g2);
    assert!(same_bytes(&g1, &g2), "identical embeds produced different galleries");

    // Read-write round-trips preserve every artifact byte for byte.
    let s_rt = at("s-rt.jsonl");
    write_scenes(&s_rt, &read_scenes(&s1).unwrap()).unwrap();
    assert!(same_bytes(&s1, &s_rt), "scene file round-trip changed bytes");

    let ck_rt = at("ck-rt.obck");
    save_checkpoint(&load_checkpoint(&ck4).unwrap(), &ck_rt).unwrap();
    assert!(same_bytes(&ck4, &ck_rt), "checkpoint round-trip changed bytes");

    let g_rt = at("g-rt.obem");
    let (d, entries) = read_gallery(&g1).unwrap();
    write_gallery(&g_rt, d, &entries).unwrap();
    assert!(same_bytes(&g1, &g_rt), "gallery round-trip changed bytes");
}
