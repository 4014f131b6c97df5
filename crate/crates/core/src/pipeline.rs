//! Batch orchestration over a directory of scenes.
//!
//! Each scene goes through prune, describe, render, optional feature
//! extraction and prompt assembly, sequentially. Scenes run in parallel up
//! to `jobs`. Endpoint calls for all questions are issued afterwards as one
//! bounded batch, then predictions are scored. Every artifact is written
//! through [`write_if_changed`], so a rerun over unchanged inputs leaves the
//! output tree untouched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::client::{Client, ClientError, EndpointConfig};
use crate::describe::{describe, DescriptionConfig, DescriptionMode, Precision};
use crate::eval::{evaluate_run, records_to_jsonl, MetricReport, QaRecord};
use crate::geometry::{AgentSituation, ObjectProposal, Scene};
use crate::hiervis::{patchify_stub, VIEW_COUNT};
use crate::ingest::features::encode_patch_features;
use crate::ingest::proposals::proposals_to_json;
use crate::ingest::{list_scene_dirs, load_patch_features, load_scene_dir, PatchFeatureSet, ProposalLoadOptions};
use crate::prompt::{assemble_prompt, render_chat_request, AblationMode, AssembleOptions, ImageRef, ObjectTexts, PromptBundle, RequestOptions, Segment};
use crate::pruning::{prune, PruneConfig};
use crate::render::{render_scene, view_file_name, RenderConfig, ViewId};

pub const PRUNED_FILE: &str = "proposals_pruned.json";
pub const VIEWS_DIR: &str = "views";
pub const FEATURES_FILE: &str = "features.hvf";
pub const BUNDLES_FILE: &str = "bundles.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CACHE_DIR: &str = "cache";

/// Object description file name for a description mode.
pub fn objects_file(mode: DescriptionMode) -> &'static str {
    match mode {
        DescriptionMode::Coordinate => "objects_ct.txt",
        DescriptionMode::CoordinateDirection => "objects_cdt.txt",
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("questions line {line}: {message}")]
    Questions { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// One line of the questions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub question_id: String,
    pub scene_id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    /// Overrides the scene's own situation sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub situation: Option<String>,
}

pub fn parse_questions(text: &str) -> Result<Vec<QuestionRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::Questions { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>, PipelineError> {
    parse_questions(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelinePaths {
    /// Directory holding one sub-directory per scene.
    pub scenes: PathBuf,
    pub questions: Option<PathBuf>,
    /// Directory of precomputed `<scene_id>.hvf` patch features to import.
    pub features: Option<PathBuf>,
    pub output: PathBuf,
}

/// Description settings. The description mode itself follows the ablation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescribeOptions {
    pub precision: Precision,
    pub append_coordinate_list: bool,
}

impl DescribeOptions {
    pub fn config(self, mode: DescriptionMode) -> DescriptionConfig {
        DescriptionConfig { precision: self.precision, mode, append_coordinate_list: self.append_coordinate_list }
    }
}

/// Stub patch features computed from the rendered views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub enabled: bool,
    pub grid: usize,
    pub dim: usize,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self { enabled: false, grid: 14, dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    pub mode: AblationMode,
    pub seed: u64,
    pub jobs: usize,
    pub load: ProposalLoadOptions,
    pub prune: PruneConfig,
    pub describe: DescribeOptions,
    pub render: RenderConfig,
    pub features: FeatureOptions,
    pub assemble: AssembleOptions,
    pub request: RequestOptions,
    /// Answers are only requested when an endpoint is configured.
    pub endpoint: Option<EndpointConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            mode: AblationMode::CdtMvHr,
            seed: 0,
            jobs: 1,
            load: ProposalLoadOptions::default(),
            prune: PruneConfig::default(),
            describe: DescribeOptions::default(),
            render: RenderConfig::default(),
            features: FeatureOptions::default(),
            assemble: AssembleOptions::default(),
            request: RequestOptions::default(),
            endpoint: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !self.paths.scenes.is_dir() {
            return bad(format!("scene directory {} does not exist", self.paths.scenes.display()));
        }
        if self.paths.output.as_os_str().is_empty() {
            return bad("output directory is not set".into());
        }
        if let Some(q) = &self.paths.questions {
            if !q.is_file() {
                return bad(format!("questions file {} does not exist", q.display()));
            }
        }
        if let Some(f) = &self.paths.features {
            if !f.is_dir() {
                return bad(format!("feature directory {} does not exist", f.display()));
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if let Err(e) = PruneConfig::new(self.prune.iou_threshold, self.prune.vote_weighting) {
            return bad(e.to_string());
        }
        if self.render.width == 0 || self.render.height == 0 {
            return bad("render size must be positive".into());
        }
        if self.features.enabled && (self.features.grid == 0 || self.features.dim == 0) {
            return bad("feature grid and dim must be positive".into());
        }
        if let Some(ep) = &self.endpoint {
            ep.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Write `bytes` unless the file already holds exactly that content.
/// Returns whether the file was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> std::io::Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if Sha256::digest(&existing) == Sha256::digest(bytes) {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(true)
}

/// Compact JSON with sorted keys and a trailing newline.
fn json_line<T: Serialize>(v: &T) -> Vec<u8> {
    let value = serde_json::to_value(v).expect("artifact types serialize");
    let mut out = serde_json::to_vec(&value).expect("JSON values serialize");
    out.push(b'\n');
    out
}

// Stage functions. The CLI subcommands call these directly so that running
// the stages one by one produces the same bytes as a full pipeline run.

pub fn prune_stage(proposals: &[ObjectProposal], scene_id: &str, cfg: &PruneConfig) -> (Vec<ObjectProposal>, Vec<u8>) {
    let kept = prune(proposals, cfg);
    let bytes = proposals_to_json(scene_id, &kept).into_bytes();
    (kept, bytes)
}

pub fn describe_stage(
    proposals: &[ObjectProposal],
    situation: Option<&AgentSituation>,
    mode: DescriptionMode,
    opts: DescribeOptions,
) -> Result<String, crate::describe::DescribeError> {
    describe(proposals, situation, &opts.config(mode)).map(|d| d.text + "\n")
}

/// Rendered PNGs as `(file name, bytes)` in [`ViewId::ALL`] order.
pub fn render_stage(scene: &Scene, cfg: &RenderConfig) -> Result<Vec<(String, Vec<u8>)>, crate::render::RenderError> {
    render_scene(scene, cfg)?.into_iter().map(|v| Ok((v.file_name(&scene.scene_id), v.to_png()?))).collect()
}

/// Stub patch features from the rendered views, stored as `f32`.
pub fn feature_stage(scene: &Scene, render: &RenderConfig, opts: FeatureOptions) -> Result<PatchFeatureSet, String> {
    let views = render_scene(scene, render).map_err(|e| e.to_string())?;
    let mats: Vec<Array2<f32>> = views
        .iter()
        .map(|v| patchify_stub(v, opts.grid, opts.dim).map(|m| m.mapv(|x| x as f32)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    PatchFeatureSet::new(mats).map_err(|e| e.to_string())
}

/// Image references for a scene, relative to the output root.
pub fn view_refs(scene_id: &str) -> Vec<ImageRef> {
    ViewId::ALL.iter().map(|&view| ImageRef { view, path: Path::new(scene_id).join(VIEWS_DIR).join(view_file_name(scene_id, view)) }).collect()
}

/// One line of a bundle file: the assembled prompt plus what is needed to
/// score its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub question_id: String,
    pub scene_id: String,
    pub answers: Vec<String>,
    pub bundle: PromptBundle,
}

pub fn parse_bundles(text: &str) -> Result<Vec<BundleEntry>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Questions { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Assemble prompts for the questions of one scene. The question's own
/// situation sentence wins over the scene's.
pub fn assemble_stage(
    scene_id: &str,
    scene_situation: Option<&str>,
    questions: &[&QuestionRecord],
    mode: AblationMode,
    texts: &ObjectTexts,
    opts: AssembleOptions,
) -> Result<Vec<u8>, (String, crate::prompt::PromptError)> {
    let views = view_refs(scene_id);
    let mut out = Vec::new();
    for q in questions {
        let situation = q.situation.as_deref().or(scene_situation);
        let bundle = assemble_prompt(&q.question, situation, mode, texts, &views, opts).map_err(|e| (q.question_id.clone(), e))?;
        out.extend(json_line(&BundleEntry {
            question_id: q.question_id.clone(),
            scene_id: scene_id.to_string(),
            answers: q.answers.clone(),
            bundle,
        }));
    }
    Ok(out)
}

/// Resolve relative image paths against `root` before building a request.
pub fn resolve_images(bundle: &PromptBundle, root: &Path) -> PromptBundle {
    let mut b = bundle.clone();
    for seg in &mut b.user_segments {
        if let Segment::Image { path, .. } = seg {
            if path.is_relative() {
                *path = std::path::absolute(root.join(&*path)).unwrap_or_else(|_| root.join(&*path));
            }
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Prune,
    Describe,
    Render,
    Features,
    Assemble,
    Ask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneStatus {
    pub scene_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
    pub questions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFailure {
    pub question_id: String,
    pub scene_id: String,
    pub message: String,
}

/// Deterministic run summary, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub mode: AblationMode,
    pub scenes: Vec<SceneStatus>,
    /// Questions whose scene is missing from the scene directory.
    pub orphan_questions: Vec<String>,
    pub failed_questions: Vec<QuestionFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricReport>,
}

impl PipelineOutcome {
    pub fn succeeded(&self) -> bool {
        self.scenes.iter().all(|s| s.error.is_none()) && self.failed_questions.is_empty() && self.orphan_questions.is_empty()
    }

    /// 0 when everything succeeded, 1 on any per-scene or per-question failure.
    pub fn exit_code(&self) -> i32 {
        if self.succeeded() {
            0
        } else {
            1
        }
    }
}

struct SceneJob<'a> {
    dir: PathBuf,
    scene_id: String,
    questions: Vec<&'a QuestionRecord>,
}

/// Bundle bytes of one scene, or where it failed.
type SceneResult = Result<Vec<u8>, StageFailure>;

fn fail(stage: Stage, e: impl std::fmt::Display) -> StageFailure {
    StageFailure { stage, message: e.to_string() }
}

fn write(path: &Path, bytes: &[u8], stage: Stage) -> Result<(), StageFailure> {
    write_if_changed(path, bytes).map(|_| ()).map_err(|e| fail(stage, format!("{}: {e}", path.display())))
}

fn process_scene(cfg: &PipelineConfig, job: &SceneJob) -> SceneResult {
    let scene = load_scene_dir(&job.dir, cfg.load).map_err(|e| fail(Stage::Load, e))?;
    let out = cfg.paths.output.join(&scene.scene_id);

    let (kept, pruned) = prune_stage(&scene.proposals, &scene.scene_id, &cfg.prune);
    write(&out.join(PRUNED_FILE), &pruned, Stage::Prune)?;

    let mut texts = ObjectTexts::default();
    if let Some(dmode) = cfg.mode.object_text() {
        let text = describe_stage(&kept, scene.situation.as_ref(), dmode, cfg.describe).map_err(|e| fail(Stage::Describe, e))?;
        write(&out.join(objects_file(dmode)), text.as_bytes(), Stage::Describe)?;
        let text = text.trim_end().to_string();
        match dmode {
            DescriptionMode::Coordinate => texts.coordinate = Some(text),
            DescriptionMode::CoordinateDirection => texts.directional = Some(text),
        }
    }

    for (name, png) in render_stage(&scene, &cfg.render).map_err(|e| fail(Stage::Render, e))? {
        write(&out.join(VIEWS_DIR).join(name), &png, Stage::Render)?;
    }

    let feature_path = out.join(FEATURES_FILE);
    if let Some(dir) = &cfg.paths.features {
        let src = dir.join(format!("{}.hvf", scene.scene_id));
        let set = load_patch_features(&src).map_err(|e| fail(Stage::Features, format!("{}: {e}", src.display())))?;
        if set.views.len() != VIEW_COUNT {
            return Err(fail(Stage::Features, format!("{}: expected {VIEW_COUNT} views, got {}", src.display(), set.views.len())));
        }
        write_features(&feature_path, &set)?;
    } else if cfg.features.enabled {
        let set = feature_stage(&scene, &cfg.render, cfg.features).map_err(|e| fail(Stage::Features, e))?;
        write_features(&feature_path, &set)?;
    }

    let situation = scene.situation.as_ref().map(|s| s.description.as_str());
    let bundles = assemble_stage(&scene.scene_id, situation, &job.questions, cfg.mode, &texts, cfg.assemble)
        .map_err(|(qid, e)| fail(Stage::Assemble, format!("question {qid}: {e}")))?;
    if !job.questions.is_empty() {
        write(&out.join(BUNDLES_FILE), &bundles, Stage::Assemble)?;
    }
    Ok(bundles)
}

fn write_features(path: &Path, set: &PatchFeatureSet) -> Result<(), StageFailure> {
    write(path, &encode_patch_features(set), Stage::Features)
}

/// Run every stage over every scene under `paths.scenes`.
///
/// Configuration problems are returned as errors. Failures inside a scene
/// or a single request are recorded in the outcome and do not stop the
/// rest of the batch.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let questions = match &cfg.paths.questions {
        Some(p) => load_questions(p)?,
        None => Vec::new(),
    };
    let dirs = list_scene_dirs(&cfg.paths.scenes).map_err(io_err(&cfg.paths.scenes))?;
    std::fs::create_dir_all(&cfg.paths.output).map_err(io_err(&cfg.paths.output))?;

    let mut by_scene: BTreeMap<&str, Vec<&QuestionRecord>> = BTreeMap::new();
    for q in &questions {
        by_scene.entry(q.scene_id.as_str()).or_default().push(q);
    }
    let jobs: Vec<SceneJob> = dirs
        .into_iter()
        .map(|dir| {
            let scene_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let questions = by_scene.remove(scene_id.as_str()).unwrap_or_default();
            SceneJob { dir, scene_id, questions }
        })
        .collect();
    let orphan_questions: Vec<String> = by_scene.values().flatten().map(|q| q.question_id.clone()).collect();
    for id in &orphan_questions {
        log::warn!("question {id} refers to a scene that is not in {}", cfg.paths.scenes.display());
    }

    let results: Vec<Mutex<Option<SceneResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                log::info!("scene {}", job.scene_id);
                let r = process_scene(cfg, job);
                if let Err(e) = &r {
                    log::error!("scene {} failed at {:?}: {}", job.scene_id, e.stage, e.message);
                }
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });

    let mut scenes = Vec::with_capacity(jobs.len());
    let mut entries = Vec::new();
    for (job, slot) in jobs.iter().zip(results) {
        let r = slot.into_inner().expect("result lock").expect("every job ran");
        let error = match r {
            Ok(bytes) => {
                entries.extend(parse_bundles(std::str::from_utf8(&bytes).expect("bundles are UTF-8"))?);
                None
            }
            Err(e) => Some(e),
        };
        scenes.push(SceneStatus { scene_id: job.scene_id.clone(), error, questions: job.questions.len() });
    }

    let mut failed_questions = Vec::new();
    let mut report = None;
    if let Some(ep) = &cfg.endpoint {
        let (records, failures) = ask_entries(cfg, ep, &entries)?;
        failed_questions = failures;
        write_run_outputs(&cfg.paths.output, &records, &mut report)?;
    }

    let outcome = PipelineOutcome { mode: cfg.mode, scenes, orphan_questions, failed_questions, report };
    let summary = cfg.paths.output.join(SUMMARY_FILE);
    write_if_changed(&summary, &pretty(&outcome)).map_err(io_err(&summary))?;
    Ok(outcome)
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let value = serde_json::to_value(v).expect("summary serializes");
    let mut s = serde_json::to_vec_pretty(&value).expect("JSON values serialize");
    s.push(b'\n');
    s
}

/// Request answers for every bundle. Failed requests become records with
/// an empty prediction so they count as wrong.
pub fn ask_entries(
    cfg: &PipelineConfig,
    endpoint: &EndpointConfig,
    entries: &[BundleEntry],
) -> Result<(Vec<QaRecord>, Vec<QuestionFailure>), PipelineError> {
    let mut ep = endpoint.clone().with_env_key();
    ep.seed = cfg.seed;
    if ep.cache_dir.is_none() {
        ep.cache_dir = Some(cfg.paths.output.join(CACHE_DIR));
    }
    if let Some(dir) = ep.cache_dir.as_ref().filter(|_| ep.use_cache) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let client = Client::new(ep).map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut failures = Vec::new();
    let mut bodies: Vec<Value> = Vec::with_capacity(entries.len());
    let mut sendable = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        match render_chat_request(&resolve_images(&e.bundle, &cfg.paths.output), &cfg.request) {
            Ok(b) => {
                bodies.push(b);
                sendable.push(i);
            }
            Err(err) => failures.push((i, ClientError::from(err).to_string())),
        }
    }
    let answers = client.ask_batch(&bodies);
    let mut predictions: Vec<Option<String>> = vec![None; entries.len()];
    for (&i, r) in sendable.iter().zip(answers) {
        match r {
            Ok(a) => {
                log::debug!("{}: {:.3}s, {} attempt(s)", entries[i].question_id, a.latency_secs, a.attempts.len());
                predictions[i] = Some(a.answer_text);
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    failures.sort_by_key(|(i, _)| *i);
    let failures = failures
        .into_iter()
        .map(|(i, message)| QuestionFailure { question_id: entries[i].question_id.clone(), scene_id: entries[i].scene_id.clone(), message })
        .collect();
    let records = entries
        .iter()
        .zip(predictions)
        .map(|(e, p)| QaRecord {
            question_id: Some(e.question_id.clone()),
            scene_id: e.scene_id.clone(),
            question: e.bundle.question.clone(),
            references: e.answers.clone(),
            prediction: p.unwrap_or_default(),
        })
        .collect();
    Ok((records, failures))
}

/// Write predictions and, when every record has references, the metric report.
pub fn write_run_outputs(out: &Path, records: &[QaRecord], report: &mut Option<MetricReport>) -> Result<(), PipelineError> {
    let path = out.join(PREDICTIONS_FILE);
    write_if_changed(&path, records_to_jsonl(records).as_bytes()).map_err(io_err(&path))?;
    match evaluate_run(records) {
        Ok(r) => {
            let path = out.join(REPORT_JSON_FILE);
            write_if_changed(&path, r.to_json().as_bytes()).map_err(io_err(&path))?;
            let path = out.join(REPORT_TABLE_FILE);
            write_if_changed(&path, r.to_table().as_bytes()).map_err(io_err(&path))?;
            *report = Some(r);
        }
        Err(e) => log::warn!("no metric report: {e}"),
    }
    Ok(())
}
