//! Command bodies. Each returns the process exit code on success; errors
//! map to the exit-code contract in `main.rs`.

use crate::config::RunConfig;
use crate::{CaptionArg, CliError, Cmd, EvalCmd, ReportFormat};
use objembed_core::encoder::EncoderConfig;
use objembed_core::evalkit::{
    box_recall, coco_ap, detect, embed_scene, gallery_entry, global_retrieve,
    global_text_embedding, local_retrieve, map_at_k, plant_gt_proposals, rec_accuracy,
    recall_at_k, spearman, CaptionKind, Detection, EvalReport, GroundTruth,
};
use objembed_core::geometry::iou;
use objembed_core::io::{
    atomic_write, load_checkpoint, read_gallery, read_scenes, save_checkpoint, write_gallery,
    write_scenes,
};
use objembed_core::layout::{TaskKind, SHAPES};
use objembed_core::objectives::sigmoid;
use objembed_core::scenegen::{describe_object, generate_dataset, DescribeKind, Scene};
use objembed_core::trainer::{grad_check, train, Checkpoint, GradCheckConfig};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Output paths may point into directories that don't exist yet.
fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn run(cmd: Cmd) -> Result<ExitCode, CliError> {
    match cmd {
        Cmd::GenData { config, out } => gen_data(config.as_deref(), &out),
        Cmd::Train {
            config,
            data,
            out,
            resume,
            log,
        } => cmd_train(config.as_deref(), &data, &out, resume.as_deref(), log),
        Cmd::GradCheck {
            config,
            seed,
            per_tensor,
            inject_fault,
        } => cmd_grad_check(config.as_deref(), seed, per_tensor, inject_fault),
        Cmd::Embed {
            ckpt,
            data,
            out,
            config,
            holdout,
        } => cmd_embed(&ckpt, &data, &out, config.as_deref(), holdout),
        Cmd::Eval { task } => cmd_eval(task),
        Cmd::Report { runs, out, format } => cmd_report(&runs, out.as_deref(), format),
    }
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<ExitCode, CliError> {
    let cfg = RunConfig::load(config)?;
    let scenes = generate_dataset(&cfg.data)?;
    ensure_parent(out)?;
    write_scenes(out, &scenes)?;
    println!(
        "wrote {} scenes (seed {}) -> {}",
        scenes.len(),
        cfg.data.seed,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    log: Option<PathBuf>,
) -> Result<ExitCode, CliError> {
    let cfg = RunConfig::load(config)?;
    let scenes = read_scenes(data)?;
    let resume_ck = resume.map(load_checkpoint).transpose()?;
    let log_path = log.unwrap_or_else(|| out.with_extension("log.jsonl"));
    ensure_parent(out)?;
    ensure_parent(&log_path)?;
    let mut log_file = BufWriter::new(fs::File::create(&log_path)?);

    let start = Instant::now();
    let ck = train(
        &cfg.encoder,
        &cfg.loss,
        &cfg.train,
        &scenes,
        cfg.data.noise_sigma,
        resume_ck,
        &mut log_file,
    )?;
    save_checkpoint(&ck, out)?;
    println!(
        "trained to step {} in {:.1}s ({})",
        ck.step,
        start.elapsed().as_secs_f64(),
        cfg.digest()
    );
    println!("checkpoint -> {}", out.display());
    println!("loss log -> {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Small model for the built-in audit: full finite differences are only
/// affordable when every tensor is tiny, and the sampled probe must still
/// touch each one.
fn audit_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 256,
        grid_w: 16,
        grid_h: 16,
        grid_c: 8,
        patch: 8,
        roi_bins: 2,
        ..EncoderConfig::default()
    }
}

fn cmd_grad_check(
    config: Option<&Path>,
    seed: Option<u64>,
    per_tensor: Option<usize>,
    inject_fault: bool,
) -> Result<ExitCode, CliError> {
    let (enc, loss) = match config {
        Some(_) => {
            let cfg = RunConfig::load(config)?;
            (cfg.encoder, cfg.loss)
        }
        None => (audit_encoder(), Default::default()),
    };
    let mut gc = GradCheckConfig::default();
    if let Some(s) = seed {
        gc.seed = s;
    }
    if let Some(p) = per_tensor {
        gc.per_tensor = p;
    }
    gc.inject_fault = inject_fault;

    let start = Instant::now();
    let report = grad_check(&enc, &loss, &gc)?;
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?
    );
    let pass = report.max_rel_err < 1e-4;
    println!(
        "gradient audit {}: max rel err {:.3e} at {} ({} of {} parameters probed, {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.worst_param,
        report.n_checked,
        report.n_params,
        elapsed
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Last `holdout` scenes when requested — the exact split `train` reserves.
fn eval_slice(scenes: Vec<Scene>, holdout: usize) -> Result<Vec<Scene>, CliError> {
    if holdout == 0 {
        return Ok(scenes);
    }
    if holdout > scenes.len() {
        return Err(CliError::Config(format!(
            "--holdout {} exceeds dataset size {}",
            holdout,
            scenes.len()
        )));
    }
    Ok(scenes[scenes.len() - holdout..].to_vec())
}

fn check_scene_grids(scenes: &[Scene], cfg: &EncoderConfig) -> Result<(), CliError> {
    for scene in scenes {
        if scene.w as usize != cfg.grid_w || scene.h as usize != cfg.grid_h {
            return Err(CliError::Config(format!(
                "scene {} is {}x{} but the checkpoint expects a {}x{} grid",
                scene.id, scene.w, scene.h, cfg.grid_w, cfg.grid_h
            )));
        }
    }
    Ok(())
}

struct EvalContext {
    cfg: RunConfig,
    ck: Checkpoint,
    scenes: Vec<Scene>,
    digest: String,
}

impl EvalContext {
    /// The report digest echoes the checkpoint's actual encoder settings,
    /// not whatever the eval-side config file happens to say.
    fn load(
        ckpt: &Path,
        data: &Path,
        config: Option<&Path>,
        holdout: usize,
    ) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(config)?;
        let ck = load_checkpoint(ckpt)?;
        let scenes = eval_slice(read_scenes(data)?, holdout)?;
        check_scene_grids(&scenes, &ck.params.cfg)?;
        cfg.encoder = ck.params.cfg.clone();
        let digest = cfg.digest();
        Ok(Self {
            cfg,
            ck,
            scenes,
            digest,
        })
    }

    fn sigma(&self) -> f64 {
        self.cfg.data.noise_sigma
    }
}

fn emit_report(report: &EvalReport, out: &Path) -> Result<ExitCode, CliError> {
    let json = report.to_pretty_json();
    println!("{json}");
    ensure_parent(out)?;
    atomic_write(out, format!("{json}\n").as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(task: EvalCmd) -> Result<ExitCode, CliError> {
    match task {
        EvalCmd::Detect {
            ckpt,
            data,
            config,
            holdout,
            mix_gt,
            nms,
            out,
        } => {
            let ctx = EvalContext::load(&ckpt, &data, config.as_deref(), holdout)?;
            let mut scenes = ctx.scenes.clone();
            if mix_gt {
                plant_gt_proposals(&mut scenes);
            }
            let nms_iou = (nms || ctx.cfg.eval.nms).then_some(0.7);
            let report = eval_detect(&ctx, &scenes, nms_iou)?;
            emit_report(&report, &out.unwrap_or_else(|| "eval-detect.json".into()))
        }
        EvalCmd::Rec {
            ckpt,
            data,
            config,
            holdout,
            out,
        } => {
            let ctx = EvalContext::load(&ckpt, &data, config.as_deref(), holdout)?;
            let acc = rec_accuracy(&ctx.ck.params, &ctx.scenes, ctx.sigma())?;
            let mut report = EvalReport::new("rec", &ctx.digest);
            report.set("acc@0.5", acc);
            emit_report(&report, &out.unwrap_or_else(|| "eval-rec.json".into()))
        }
        EvalCmd::LocalRetrieval {
            ckpt,
            gallery,
            data,
            config,
            holdout,
            k,
            out,
        } => {
            let ctx = EvalContext::load(&ckpt, &data, config.as_deref(), holdout)?;
            let gallery = load_gallery_for(&ctx, &gallery)?;
            let k = k.unwrap_or(ctx.cfg.eval.k);
            let report = eval_local_retrieval(&ctx, &gallery, k)?;
            emit_report(
                &report,
                &out.unwrap_or_else(|| "eval-local-retrieval.json".into()),
            )
        }
        EvalCmd::GlobalRetrieval {
            ckpt,
            gallery,
            data,
            config,
            holdout,
            k,
            caption_kind,
            out,
        } => {
            let ctx = EvalContext::load(&ckpt, &data, config.as_deref(), holdout)?;
            let gallery = load_gallery_for(&ctx, &gallery)?;
            let k = k.unwrap_or(ctx.cfg.eval.k);
            let report = eval_global_retrieval(&ctx, &gallery, k, caption_kind)?;
            let default = format!(
                "eval-global-retrieval-{}.json",
                match caption_kind {
                    CaptionArg::Short => "short",
                    CaptionArg::Long => "long",
                }
            );
            emit_report(&report, &out.unwrap_or_else(|| default.into()))
        }
    }
}

fn eval_detect(
    ctx: &EvalContext,
    scenes: &[Scene],
    nms_iou: Option<f64>,
) -> Result<EvalReport, CliError> {
    const MAX_DETS: usize = 100;
    let queries: Vec<Vec<String>> = SHAPES.iter().map(|s| vec![s.to_string()]).collect();
    let mut dets: Vec<Detection> = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    for scene in scenes {
        for obj in &scene.objects {
            let query_id = SHAPES
                .iter()
                .position(|s| *s == obj.shape)
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "scene {}: unknown object shape {:?}",
                        scene.id, obj.shape
                    ))
                })?;
            gts.push(GroundTruth {
                image_id: scene.id,
                bbox: obj.bbox,
                query_id,
            });
        }
        dets.extend(detect(
            &ctx.ck.params,
            scene,
            &queries,
            ctx.sigma(),
            nms_iou,
            MAX_DETS,
        )?);
    }
    let thresholds = &ctx.cfg.eval.thresholds;
    let eval = coco_ap(&dets, &gts, thresholds)?;
    let ar = box_recall(scenes, thresholds, MAX_DETS)?;

    let mut report = EvalReport::new("detect", &ctx.digest);
    report.set("AP", eval.ap).set("AR", ar);
    for (key, value) in [
        ("AP_small", eval.ap_small),
        ("AP_medium", eval.ap_medium),
        ("AP_large", eval.ap_large),
    ] {
        if let Some(v) = value {
            report.set(key, v);
        }
    }
    if let Some(s) = quality_rank_correlation(ctx, scenes)? {
        report.set("Spearman_iou", s);
    }
    Ok(report)
}

/// Spearman correlation between the quality head's predictions and each
/// positive proposal's true best overlap. Absent for token modes without a
/// quality slot, or when the positives are degenerate (fewer than two, or
/// constant on either side).
fn quality_rank_correlation(
    ctx: &EvalContext,
    scenes: &[Scene],
) -> Result<Option<f64>, CliError> {
    if !ctx.ck.params.cfg.token_mode.has_iou_token() {
        return Ok(None);
    }
    let pos_threshold = ctx.cfg.loss.iou_pos_threshold;
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for scene in scenes {
        if scene.objects.is_empty() {
            continue;
        }
        let bundle = embed_scene(&ctx.ck.params, scene, TaskKind::Detection, ctx.sigma())?;
        let logits = bundle.iou_logits.as_ref().expect("dual mode has logits");
        for (j, proposal) in scene.proposals.iter().enumerate() {
            let best = scene
                .objects
                .iter()
                .map(|o| iou(proposal, &o.bbox))
                .fold(0.0f64, f64::max);
            if best > pos_threshold {
                predicted.push(sigmoid(logits[j] as f64));
                actual.push(best);
            }
        }
    }
    if predicted.len() < 2 {
        return Ok(None);
    }
    match spearman(&predicted, &actual) {
        Ok(s) => Ok(Some(s)),
        Err(_) => Ok(None),
    }
}

fn load_gallery_for(
    ctx: &EvalContext,
    path: &Path,
) -> Result<Vec<objembed_core::io::GalleryEntry>, CliError> {
    let (d_model, gallery) = read_gallery(path)?;
    if d_model != ctx.ck.params.cfg.d_model {
        return Err(CliError::Config(format!(
            "gallery embeddings have width {} but the checkpoint's is {}",
            d_model, ctx.ck.params.cfg.d_model
        )));
    }
    Ok(gallery)
}

/// Every query's target image must be present in the gallery; queries with
/// no reachable positive would silently floor the metrics.
fn require_in_gallery(ids: &BTreeSet<u64>, scene: &Scene) -> Result<(), CliError> {
    if !ids.contains(&scene.id) {
        return Err(CliError::Data(format!(
            "scene {} is not in the gallery; embed the same split first",
            scene.id
        )));
    }
    Ok(())
}

fn eval_local_retrieval(
    ctx: &EvalContext,
    gallery: &[objembed_core::io::GalleryEntry],
    k: usize,
) -> Result<EvalReport, CliError> {
    let ids: BTreeSet<u64> = gallery.iter().map(|e| e.id).collect();
    let mut ranked: Vec<Vec<u64>> = Vec::new();
    let mut positives: Vec<Vec<u64>> = Vec::new();
    for scene in &ctx.scenes {
        if scene.objects.is_empty() {
            continue;
        }
        require_in_gallery(&ids, scene)?;
        for j in 0..scene.objects.len() {
            let words = describe_object(scene, j, DescribeKind::Referring);
            let hits = local_retrieve(&ctx.ck.params, &words, gallery)?;
            ranked.push(hits.iter().map(|h| h.image_id).collect());
            positives.push(vec![scene.id]);
        }
    }
    let mut report = EvalReport::new("local-retrieval", &ctx.digest);
    report
        .set("Recall@1", recall_at_k(&ranked, &positives, 1)?)
        .set("Recall@5", recall_at_k(&ranked, &positives, 5)?)
        .set(&format!("mAP@{k}"), map_at_k(&ranked, &positives, k)?);
    Ok(report)
}

fn eval_global_retrieval(
    ctx: &EvalContext,
    gallery: &[objembed_core::io::GalleryEntry],
    k: usize,
    caption: CaptionArg,
) -> Result<EvalReport, CliError> {
    let kind = match caption {
        CaptionArg::Short => CaptionKind::Short,
        CaptionArg::Long => CaptionKind::Long,
    };
    let ids: BTreeSet<u64> = gallery.iter().map(|e| e.id).collect();
    let mut ranked: Vec<Vec<u64>> = Vec::new();
    let mut positives: Vec<Vec<u64>> = Vec::new();
    for scene in &ctx.scenes {
        require_in_gallery(&ids, scene)?;
        let words = match kind {
            CaptionKind::Short => &scene.short,
            CaptionKind::Long => &scene.long,
        };
        let text = global_text_embedding(&ctx.ck.params, words)?;
        let hits = global_retrieve(&ctx.ck.params, &text, gallery, kind)?;
        ranked.push(hits.iter().map(|h| h.image_id).collect());
        positives.push(vec![scene.id]);
    }
    let task = match kind {
        CaptionKind::Short => "global-retrieval-short",
        CaptionKind::Long => "global-retrieval-long",
    };
    let mut report = EvalReport::new(task, &ctx.digest);
    report
        .set("Recall@1", recall_at_k(&ranked, &positives, 1)?)
        .set("Recall@5", recall_at_k(&ranked, &positives, 5)?)
        .set(&format!("mAP@{k}"), map_at_k(&ranked, &positives, k)?);
    Ok(report)
}

fn cmd_embed(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    holdout: usize,
) -> Result<ExitCode, CliError> {
    let cfg = RunConfig::load(config)?;
    let ck = load_checkpoint(ckpt)?;
    let scenes = eval_slice(read_scenes(data)?, holdout)?;
    check_scene_grids(&scenes, &ck.params.cfg)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        entries.push(gallery_entry(&ck.params, scene, cfg.data.noise_sigma)?);
    }
    ensure_parent(out)?;
    write_gallery(out, ck.params.cfg.d_model, &entries)?;
    println!("embedded {} images -> {}", entries.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(
    runs: &Path,
    out: Option<&Path>,
    format: ReportFormat,
) -> Result<ExitCode, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(runs)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", runs.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();

    // cells[digest][task/metric] = value; files are visited in name order so
    // a duplicate key resolves deterministically (later file wins).
    let mut cells: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut columns: BTreeSet<String> = BTreeSet::new();
    let mut parsed = 0usize;
    for path in &paths {
        let text = fs::read_to_string(path)?;
        let report: EvalReport = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(_) => {
                eprintln!("skipping {}: not an eval report", path.display());
                continue;
            }
        };
        parsed += 1;
        let row = cells.entry(report.config_digest.clone()).or_default();
        for (metric, value) in &report.metrics {
            let col = format!("{}/{}", report.task, metric);
            columns.insert(col.clone());
            row.insert(col, *value);
        }
    }
    if parsed == 0 {
        return Err(CliError::Config(format!(
            "no eval reports found in {}",
            runs.display()
        )));
    }

    let table = render_table(&cells, &columns, format);
    print!("{table}");
    if let Some(path) = out {
        ensure_parent(path)?;
        atomic_write(path, table.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn render_table(
    cells: &BTreeMap<String, BTreeMap<String, f64>>,
    columns: &BTreeSet<String>,
    format: ReportFormat,
) -> String {
    let mut out = String::new();
    let cols: Vec<&String> = columns.iter().collect();
    match format {
        ReportFormat::Tsv => {
            out.push_str("config");
            for c in &cols {
                out.push('\t');
                out.push_str(c);
            }
            out.push('\n');
            for (digest, row) in cells {
                out.push_str(digest);
                for c in &cols {
                    out.push('\t');
                    if let Some(v) = row.get(*c) {
                        out.push_str(&format!("{v:.6}"));
                    }
                }
                out.push('\n');
            }
        }
        ReportFormat::Md => {
            out.push_str("| config |");
            for c in &cols {
                out.push_str(&format!(" {c} |"));
            }
            out.push('\n');
            out.push_str("| --- |");
            for _ in &cols {
                out.push_str(" --- |");
            }
            out.push('\n');
            for (digest, row) in cells {
                out.push_str(&format!("| {digest} |"));
                for c in &cols {
                    match row.get(*c) {
                        Some(v) => out.push_str(&format!(" {v:.6} |")),
                        None => out.push_str("  |"),
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}
