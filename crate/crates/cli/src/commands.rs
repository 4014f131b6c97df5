//! Subcommand implementations. Each single-stage command writes the same
//! files, with the same bytes, as the matching stage of `pipeline`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::json;

use scene2prompt::eval::{evaluate_run, load_records};
use scene2prompt::geometry::Scene;
use scene2prompt::hiervis::{self, load_checkpoint, save_checkpoint, ModelConfig, ToyExample, ToyModel};
use scene2prompt::ingest::features::encode_patch_features;
use scene2prompt::ingest::{load_patch_features, load_proposals, load_scene_dir, ProposalLoadOptions};
use scene2prompt::pipeline::{
    ask_entries, assemble_stage, describe_stage, feature_stage, load_questions, objects_file, parse_bundles, prune_stage, render_stage,
    run_pipeline, write_if_changed, write_run_outputs, PipelineConfig, PipelineError, BUNDLES_FILE, FEATURES_FILE,
    PRUNED_FILE, VIEWS_DIR,
};
use scene2prompt::describe::DescriptionMode;
use scene2prompt::prompt::ObjectTexts;
use scene2prompt::synthetic::write_scene_dir;

use crate::args::*;
use crate::config::{output_root, set};
use crate::Failure;

const OK: u8 = 0;
const PARTIAL: u8 = 1;

fn load_scene(cfg: &mut PipelineConfig, a: &SceneArgs) -> Result<Scene, Failure> {
    set(&mut cfg.load.min_confidence, a.min_confidence.map(Some));
    if !a.scene.is_dir() {
        return Err(Failure::Config(format!("scene directory {} does not exist", a.scene.display())));
    }
    load_scene_dir(&a.scene, cfg.load).map_err(|e| Failure::Run(format!("{}: {e}", a.scene.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let written = write_if_changed(path, bytes).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    log::info!("{} {}", if written { "wrote" } else { "unchanged" }, path.display());
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

pub fn ingest(mut cfg: PipelineConfig, a: &IngestArgs) -> Result<u8, Failure> {
    let scene = load_scene(&mut cfg, &a.scene)?;
    let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &scene.proposals {
        *labels.entry(p.class_label.as_str()).or_default() += 1;
    }
    let bounds = scene.point_bounds().map(|b| json!({"min": b.min.to_array(), "max": b.max.to_array()}));
    print_json(&json!({
        "scene_id": scene.scene_id,
        "points": scene.points.len(),
        "proposals": scene.proposals.len(),
        "labels": labels,
        "bounds": bounds,
        "situation": scene.situation.as_ref().map(|s| json!({"position": s.position.to_array(), "yaw": s.yaw, "description": s.description})),
    }));
    if let Some(out) = &a.out {
        let dir = write_scene_dir(out, &scene).map_err(Failure::run)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(OK)
}

pub fn prune(mut cfg: PipelineConfig, a: &PruneArgs) -> Result<u8, Failure> {
    a.prune.apply(&mut cfg)?;
    let out = output_root(&mut cfg, &a.out.out)?;
    let scene = load_scene(&mut cfg, &a.scene)?;
    let (kept, bytes) = prune_stage(&scene.proposals, &scene.scene_id, &cfg.prune);
    write(&out.join(&scene.scene_id).join(PRUNED_FILE), &bytes)?;
    println!("{}: kept {} of {} proposals", scene.scene_id, kept.len(), scene.proposals.len());
    Ok(OK)
}

pub fn describe(mut cfg: PipelineConfig, a: &DescribeArgs) -> Result<u8, Failure> {
    a.mode.apply(&mut cfg);
    a.describe.apply(&mut cfg)?;
    let out = output_root(&mut cfg, &a.out.out)?;
    let dmode = cfg.mode.object_text().ok_or_else(|| Failure::Config(format!("mode {} uses no object text", cfg.mode)))?;
    let scene = load_scene(&mut cfg, &a.scene)?;
    let path = a.proposals.clone().unwrap_or_else(|| out.join(&scene.scene_id).join(PRUNED_FILE));
    if !path.is_file() {
        return Err(Failure::Config(format!("{} does not exist (run `prune` first or pass --proposals)", path.display())));
    }
    let proposals = load_proposals(&path, ProposalLoadOptions::default()).map_err(Failure::run)?.proposals;
    let text = describe_stage(&proposals, scene.situation.as_ref(), dmode, cfg.describe).map_err(|e| Failure::Run(format!("{}: {e}", scene.scene_id)))?;
    write(&out.join(&scene.scene_id).join(objects_file(dmode)), text.as_bytes())?;
    print!("{text}");
    Ok(OK)
}

pub fn render(mut cfg: PipelineConfig, a: &RenderArgs) -> Result<u8, Failure> {
    a.render.apply(&mut cfg)?;
    let out = output_root(&mut cfg, &a.out.out)?;
    let scene = load_scene(&mut cfg, &a.scene)?;
    let views = render_stage(&scene, &cfg.render).map_err(|e| Failure::Run(format!("{}: {e}", scene.scene_id)))?;
    for (name, png) in views {
        let path = out.join(&scene.scene_id).join(VIEWS_DIR).join(name);
        write(&path, &png)?;
        println!("{}", path.display());
    }
    Ok(OK)
}

pub fn features(mut cfg: PipelineConfig, a: &FeaturesArgs) -> Result<u8, Failure> {
    a.render.apply(&mut cfg)?;
    a.features.apply(&mut cfg)?;
    let out = output_root(&mut cfg, &a.out.out)?;
    let scene = load_scene(&mut cfg, &a.scene)?;
    let set = match &a.import {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Config(format!("feature file {} does not exist", path.display())));
            }
            let set = load_patch_features(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
            if set.views.len() != hiervis::VIEW_COUNT {
                return Err(Failure::Run(format!("{}: expected {} views, got {}", path.display(), hiervis::VIEW_COUNT, set.views.len())));
            }
            set
        }
        None => feature_stage(&scene, &cfg.render, cfg.features).map_err(|e| Failure::Run(format!("{}: {e}", scene.scene_id)))?,
    };
    write(&out.join(&scene.scene_id).join(FEATURES_FILE), &encode_patch_features(&set))?;
    println!("{}: {} views x {} patches x {} dims", scene.scene_id, set.views.len(), set.patches_per_view(), set.dim());
    Ok(OK)
}

fn model_config(m: &ModelFlags, dim: usize) -> ModelConfig {
    ModelConfig { dim, heads: m.heads, vocab: m.vocab, max_len: m.max_len }
}

fn load_features_f64(path: &Path) -> Result<Vec<Array2<f64>>, Failure> {
    if !path.is_file() {
        return Err(Failure::Config(format!("feature file {} does not exist", path.display())));
    }
    let set = load_patch_features(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    Ok(set.to_f64())
}

pub fn hier(cfg: PipelineConfig, a: &HierArgs) -> Result<u8, Failure> {
    let hier_err = |e: hiervis::HierError| Failure::Run(e.to_string());
    match &a.action {
        HierAction::Forward { features, checkpoint, model } => {
            let patches = load_features_f64(features)?;
            let dim = patches.first().map_or(0, |p| p.ncols());
            let m = match checkpoint {
                Some(p) => load_checkpoint(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?,
                None => ToyModel::init(model_config(model, dim), cfg.seed).map_err(|e| Failure::Config(e.to_string()))?,
            };
            let h = m.encode(patches).map_err(hier_err)?;
            let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
            print_json(&json!({
                "patches_per_view": h.patches.first().map_or(0, |p| p.nrows()),
                "dim": m.config().dim,
                "token_count": h.token_count(),
                "view_tokens": rows(&h.view_tokens),
                "scene_token": h.scene_token.to_vec(),
            }));
            Ok(OK)
        }
        HierAction::Train { features, dim, patches, answer, steps, lr, save, model } => {
            let mut ex = ToyExample::synthetic(*dim, *patches, answer.clone(), cfg.seed.wrapping_add(1));
            if let Some(path) = features {
                ex.patches = load_features_f64(path)?;
            }
            let width = ex.patches.first().map_or(*dim, |p| p.ncols());
            let mut m = ToyModel::init(model_config(model, width), cfg.seed).map_err(|e| Failure::Config(e.to_string()))?;
            let trace = hiervis::train_toy(&mut m, std::slice::from_ref(&ex), *steps, *lr).map_err(hier_err)?;
            let initial = trace.first().copied().unwrap_or(f64::NAN);
            let last = m.loss(&ex).map_err(hier_err)?;
            print_json(&json!({"steps": steps, "initial_loss": initial, "final_loss": last, "reduction": initial / last}));
            if let Some(p) = save {
                save_checkpoint(&m, p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
            }
            Ok(OK)
        }
        HierAction::Gradcheck { dim, patches, instances, tolerance, model } => {
            let mcfg = model_config(model, *dim);
            let mut worst = 0.0f64;
            for i in 0..*instances as u64 {
                let m = ToyModel::init(mcfg, cfg.seed.wrapping_add(i)).map_err(|e| Failure::Config(e.to_string()))?;
                let answer = vec![(i as usize) % mcfg.vocab, (i as usize + 1) % mcfg.vocab];
                let ex = ToyExample::synthetic(*dim, *patches, answer, cfg.seed.wrapping_add(1000 + i));
                let checks = hiervis::gradient_check(&m, &ex, 1e-5).map_err(hier_err)?;
                let max = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
                println!("instance {i}: max relative error {max:.3e}");
                worst = worst.max(max);
            }
            let pass = worst < *tolerance;
            println!("{} (worst {worst:.3e}, tolerance {tolerance:.0e})", if pass { "PASS" } else { "FAIL" });
            Ok(if pass { OK } else { PARTIAL })
        }
    }
}

pub fn assemble(mut cfg: PipelineConfig, a: &AssembleArgs) -> Result<u8, Failure> {
    a.mode.apply(&mut cfg);
    a.assemble.apply(&mut cfg);
    set(&mut cfg.paths.questions, a.questions.clone().map(Some));
    let out = output_root(&mut cfg, &a.out.out)?;
    let qpath = cfg.paths.questions.clone().ok_or_else(|| Failure::Config("no questions file: pass --questions".into()))?;
    if !qpath.is_file() {
        return Err(Failure::Config(format!("questions file {} does not exist", qpath.display())));
    }
    let questions = load_questions(&qpath).map_err(|e| Failure::Config(e.to_string()))?;
    let scene = load_scene(&mut cfg, &a.scene)?;
    let dir = out.join(&scene.scene_id);
    let mut texts = ObjectTexts::default();
    if let Some(dmode) = cfg.mode.object_text() {
        let path = dir.join(objects_file(dmode));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::Run(format!("{}: {e} (run `describe` first)", path.display())))?
            .trim_end()
            .to_string();
        match dmode {
            DescriptionMode::Coordinate => texts.coordinate = Some(text),
            DescriptionMode::CoordinateDirection => texts.directional = Some(text),
        }
    }
    let mine: Vec<_> = questions.iter().filter(|q| q.scene_id == scene.scene_id).collect();
    let situation = scene.situation.as_ref().map(|s| s.description.as_str());
    let bytes = assemble_stage(&scene.scene_id, situation, &mine, cfg.mode, &texts, cfg.assemble)
        .map_err(|(qid, e)| Failure::Run(format!("question {qid}: {e}")))?;
    if !mine.is_empty() {
        write(&dir.join(BUNDLES_FILE), &bytes)?;
    }
    println!("{}: {} bundle(s) in mode {}", scene.scene_id, mine.len(), cfg.mode);
    Ok(OK)
}

fn default_bundle_files(out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(out)
        .map_err(|e| Failure::Config(format!("{}: {e}", out.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join(BUNDLES_FILE))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

pub fn ask(mut cfg: PipelineConfig, a: &AskArgs) -> Result<u8, Failure> {
    a.endpoint.apply(&mut cfg)?;
    let out = output_root(&mut cfg, &a.out.out)?;
    let ep = cfg.endpoint.clone().ok_or_else(|| Failure::Config("no endpoint: pass --endpoint or set [endpoint]".into()))?;
    let files = if a.bundles.is_empty() { default_bundle_files(&out)? } else { a.bundles.clone() };
    let mut entries = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Failure::Config(format!("{}: {e}", f.display())))?;
        entries.extend(parse_bundles(&text).map_err(|e| Failure::Config(format!("{}: {e}", f.display())))?);
    }
    if entries.is_empty() {
        return Err(Failure::Config(format!("no bundles found under {}", out.display())));
    }
    let (records, failures) = ask_entries(&cfg, &ep, &entries).map_err(pipeline_failure)?;
    for f in &failures {
        eprintln!("failed {} ({}): {}", f.question_id, f.scene_id, f.message);
    }
    let mut report = None;
    write_run_outputs(&out, &records, &mut report).map_err(pipeline_failure)?;
    if let Some(r) = report {
        print!("{}", r.to_table());
    }
    Ok(if failures.is_empty() { OK } else { PARTIAL })
}

pub fn eval(a: &EvalArgs) -> Result<u8, Failure> {
    if !a.predictions.is_file() {
        return Err(Failure::Config(format!("predictions file {} does not exist", a.predictions.display())));
    }
    let records = load_records(&a.predictions).map_err(|e| Failure::Config(format!("{}: {e}", a.predictions.display())))?;
    let report = evaluate_run(&records).map_err(Failure::run)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        write(p, report.to_json().as_bytes())?;
    }
    Ok(OK)
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) | PipelineError::Questions { .. } => Failure::Config(e.to_string()),
        PipelineError::Io { .. } => Failure::Run(e.to_string()),
    }
}

pub fn pipeline(mut cfg: PipelineConfig, a: &PipelineArgs) -> Result<u8, Failure> {
    set(&mut cfg.paths.scenes, a.scenes.clone());
    set(&mut cfg.paths.questions, a.questions.clone().map(Some));
    set(&mut cfg.paths.features, a.features_dir.clone().map(Some));
    set(&mut cfg.load.min_confidence, a.min_confidence.map(Some));
    if a.stub_features {
        cfg.features.enabled = true;
    }
    output_root(&mut cfg, &a.out.out)?;
    a.mode.apply(&mut cfg);
    a.prune.apply(&mut cfg)?;
    a.describe.apply(&mut cfg)?;
    a.render.apply(&mut cfg)?;
    a.features.apply(&mut cfg)?;
    a.assemble.apply(&mut cfg);
    a.endpoint.apply(&mut cfg)?;
    if cfg.paths.scenes.as_os_str().is_empty() {
        return Err(Failure::Config("no scene directory: pass --scenes or set paths.scenes".into()));
    }

    let outcome = run_pipeline(&cfg).map_err(pipeline_failure)?;
    for s in &outcome.scenes {
        match &s.error {
            None => println!("ok      {} ({} question(s))", s.scene_id, s.questions),
            Some(e) => println!("FAILED  {} at {:?}: {}", s.scene_id, e.stage, e.message),
        }
    }
    for q in &outcome.orphan_questions {
        println!("SKIPPED question {q}: scene not found");
    }
    for f in &outcome.failed_questions {
        println!("FAILED  question {} ({}): {}", f.question_id, f.scene_id, f.message);
    }
    if let Some(r) = &outcome.report {
        print!("{}", r.to_table());
    }
    Ok(outcome.exit_code() as u8)
}
