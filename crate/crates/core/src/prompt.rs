//! Multimodal chat prompt assembly for each input configuration, and the
//! chat-completions request body built from it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::describe::DescriptionMode;
use crate::render::ViewId;

/// System message shared by every mode. Kept word for word, grammar
/// included, because the fine-tuned model was trained against it.
pub const SYSTEM_TEXT: &str = "You are a assistant that can understand a scene, you will be provided with images of top-down views of the scene,view representations and scene representation, a situation and coordinates[x,y,z] of objects of the scene. Answer the question using a single word or phrase";

/// Rough visual token cost of one image.
pub const TOKENS_PER_IMAGE: usize = 500;
pub const WORD_TOKEN_RATIO: f64 = 1.3;

/// Which inputs accompany the question and situation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    /// Multi-view images only.
    Mv,
    /// Coordinate text only.
    Ct,
    /// Coordinate and direction text.
    Cdt,
    CdtMv,
    /// Direction text, images and view/scene placeholders.
    CdtMvHr,
    /// Same inputs as `CdtMv`, sent to an untuned model.
    ZsCdtMv,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] =
        [AblationMode::Mv, AblationMode::Ct, AblationMode::Cdt, AblationMode::CdtMv, AblationMode::CdtMvHr, AblationMode::ZsCdtMv];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Mv => "MV",
            AblationMode::Ct => "CT",
            AblationMode::Cdt => "CDT",
            AblationMode::CdtMv => "CDT_MV",
            AblationMode::CdtMvHr => "CDT_MV_HR",
            AblationMode::ZsCdtMv => "ZS_CDT_MV",
        }
    }

    pub fn uses_images(self) -> bool {
        matches!(self, AblationMode::Mv | AblationMode::CdtMv | AblationMode::CdtMvHr | AblationMode::ZsCdtMv)
    }

    pub fn uses_hierarchy(self) -> bool {
        self == AblationMode::CdtMvHr
    }

    pub fn object_text(self) -> Option<DescriptionMode> {
        match self {
            AblationMode::Mv => None,
            AblationMode::Ct => Some(DescriptionMode::Coordinate),
            _ => Some(DescriptionMode::CoordinateDirection),
        }
    }

    pub fn zero_shot(self) -> bool {
        self == AblationMode::ZsCdtMv
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.trim().chars().map(|c| if c == '+' || c == '-' { '_' } else { c.to_ascii_uppercase() }).collect();
        let norm = norm.replace(' ', "");
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown mode '{s}' (expected one of MV, CT, CDT, CDT_MV, CDT_MV_HR, ZS_CDT_MV)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialToken {
    VisionStart,
    VisionEnd,
    ViewStart,
    View,
    ViewEnd,
    SceneStart,
    Scene,
    SceneEnd,
}

impl SpecialToken {
    pub fn as_str(self) -> &'static str {
        match self {
            SpecialToken::VisionStart => "<|vision_start|>",
            SpecialToken::VisionEnd => "<|vision_end|>",
            SpecialToken::ViewStart => "<|view_start|>",
            SpecialToken::View => "<view>",
            SpecialToken::ViewEnd => "<|view_end|>",
            SpecialToken::SceneStart => "<|scene_start|>",
            SpecialToken::Scene => "<scene>",
            SpecialToken::SceneEnd => "<|scene_end|>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Situation,
    Objects,
    Question,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub view: ViewId,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Image { view: ViewId, path: PathBuf },
    Special { token: SpecialToken },
    Text { kind: TextKind, text: String },
}

/// Coarse segment categories used to check a bundle against its mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SegmentClass {
    Image,
    ViewPlaceholder,
    ScenePlaceholder,
    Situation,
    CoordinateText,
    DirectionText,
    Question,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub mode: AblationMode,
    pub system_text: String,
    pub user_segments: Vec<Segment>,
    pub question: String,
    pub situation: Option<String>,
}

/// Object descriptions available for a scene.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectTexts {
    pub coordinate: Option<String>,
    pub directional: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AssembleOptions {
    /// Emit four view placeholders instead of one per view.
    pub four_view_placeholders: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("mode {mode} needs {expected} images, got {got}")]
    Images { mode: AblationMode, expected: usize, got: usize },
    #[error("mode {mode} needs a situation")]
    MissingSituation { mode: AblationMode },
    #[error("mode {mode} needs {what} text")]
    MissingText { mode: AblationMode, what: &'static str },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("image {path} is {bytes} bytes, over the {limit} byte limit")]
    ImageTooLarge { path: String, bytes: u64, limit: u64 },
    #[error("cannot read image {path}: {message}")]
    ImageRead { path: String, message: String },
}

pub fn assemble_prompt(
    question: &str,
    situation: Option<&str>,
    mode: AblationMode,
    texts: &ObjectTexts,
    views: &[ImageRef],
    opts: AssembleOptions,
) -> Result<PromptBundle, PromptError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let situation = situation.map(str::trim).filter(|s| !s.is_empty());
    let mut segs = Vec::new();
    let special = |token| Segment::Special { token };

    if mode.uses_images() {
        if views.len() != ViewId::ALL.len() {
            return Err(PromptError::Images { mode, expected: ViewId::ALL.len(), got: views.len() });
        }
        segs.push(special(SpecialToken::VisionStart));
        segs.extend(views.iter().map(|v| Segment::Image { view: v.view, path: v.path.clone() }));
        if mode.uses_hierarchy() {
            let n = if opts.four_view_placeholders { 4 } else { ViewId::ALL.len() };
            for _ in 0..n {
                segs.extend([special(SpecialToken::ViewStart), special(SpecialToken::View), special(SpecialToken::ViewEnd)]);
            }
            segs.extend([special(SpecialToken::SceneStart), special(SpecialToken::Scene), special(SpecialToken::SceneEnd)]);
        }
        segs.push(special(SpecialToken::VisionEnd));
    }

    if let Some(s) = situation {
        segs.push(Segment::Text { kind: TextKind::Situation, text: format!("Situation: {s}") });
    }
    match mode.object_text() {
        None => {}
        Some(DescriptionMode::Coordinate) => {
            let t = texts.coordinate.as_deref().ok_or(PromptError::MissingText { mode, what: "coordinate" })?;
            segs.push(Segment::Text { kind: TextKind::Objects, text: t.to_string() });
        }
        Some(DescriptionMode::CoordinateDirection) => {
            if situation.is_none() {
                return Err(PromptError::MissingSituation { mode });
            }
            let t = texts.directional.as_deref().ok_or(PromptError::MissingText { mode, what: "direction" })?;
            segs.push(Segment::Text { kind: TextKind::Objects, text: t.to_string() });
        }
    }
    segs.push(Segment::Text { kind: TextKind::Question, text: format!("Question: {question}") });

    Ok(PromptBundle {
        mode,
        system_text: SYSTEM_TEXT.to_string(),
        user_segments: segs,
        question: question.to_string(),
        situation: situation.map(str::to_string),
    })
}

impl PromptBundle {
    pub fn image_count(&self) -> usize {
        self.user_segments.iter().filter(|s| matches!(s, Segment::Image { .. })).count()
    }

    pub fn count_special(&self, token: SpecialToken) -> usize {
        self.user_segments.iter().filter(|s| matches!(s, Segment::Special { token: t } if *t == token)).count()
    }

    pub fn classes(&self) -> BTreeSet<SegmentClass> {
        let mut out = BTreeSet::new();
        for s in &self.user_segments {
            match s {
                Segment::Image { .. } => {
                    out.insert(SegmentClass::Image);
                }
                Segment::Special { token: SpecialToken::View } => {
                    out.insert(SegmentClass::ViewPlaceholder);
                }
                Segment::Special { token: SpecialToken::Scene } => {
                    out.insert(SegmentClass::ScenePlaceholder);
                }
                Segment::Special { .. } => {}
                Segment::Text { kind: TextKind::Situation, .. } => {
                    out.insert(SegmentClass::Situation);
                }
                Segment::Text { kind: TextKind::Question, .. } => {
                    out.insert(SegmentClass::Question);
                }
                Segment::Text { kind: TextKind::Objects, .. } => {
                    out.insert(match self.mode.object_text() {
                        Some(DescriptionMode::Coordinate) => SegmentClass::CoordinateText,
                        _ => SegmentClass::DirectionText,
                    });
                }
            }
        }
        out
    }

    /// Every start marker is closed before the next one opens.
    pub fn markers_balanced(&self) -> bool {
        let mut open: Vec<SpecialToken> = Vec::new();
        for s in &self.user_segments {
            let Segment::Special { token } = s else { continue };
            let closes = match token {
                SpecialToken::VisionEnd => Some(SpecialToken::VisionStart),
                SpecialToken::ViewEnd => Some(SpecialToken::ViewStart),
                SpecialToken::SceneEnd => Some(SpecialToken::SceneStart),
                _ => None,
            };
            match (token, closes) {
                (_, Some(start)) => {
                    if open.pop() != Some(start) {
                        return false;
                    }
                }
                (SpecialToken::VisionStart | SpecialToken::ViewStart | SpecialToken::SceneStart, None) => open.push(*token),
                _ => {}
            }
        }
        open.is_empty()
    }
}

/// `round(1.3 * words) + 500 * images + special-token segments`, with
/// words counted over the system text and every text segment.
pub fn estimate_tokens(bundle: &PromptBundle) -> usize {
    let mut words = bundle.system_text.split_whitespace().count();
    let mut special = 0;
    for s in &bundle.user_segments {
        match s {
            Segment::Text { text, .. } => words += text.split_whitespace().count(),
            Segment::Special { .. } => special += 1,
            Segment::Image { .. } => {}
        }
    }
    (words as f64 * WORD_TOKEN_RATIO).round() as usize + TOKENS_PER_IMAGE * bundle.image_count() + special
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageEncoding {
    /// `file:` URLs pointing at the rendered PNGs.
    #[default]
    File,
    /// `data:image/png;base64,...` URLs.
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestOptions {
    pub model: String,
    pub max_tokens: u32,
    pub image_encoding: ImageEncoding,
    pub max_image_bytes: u64,
}

impl Default for RequestOptions {
    fn default() -> Self {
        Self { model: "default".into(), max_tokens: 16, image_encoding: ImageEncoding::File, max_image_bytes: 8 << 20 }
    }
}

fn image_url(path: &Path, opts: &RequestOptions) -> Result<String, PromptError> {
    let shown = path.display().to_string();
    match opts.image_encoding {
        ImageEncoding::File if path.is_absolute() => Ok(format!("file://{shown}")),
        ImageEncoding::File => Ok(format!("file:{shown}")),
        ImageEncoding::Inline => {
            let read_err = |e: std::io::Error| PromptError::ImageRead { path: shown.clone(), message: e.to_string() };
            let len = std::fs::metadata(path).map_err(read_err)?.len();
            if len > opts.max_image_bytes {
                return Err(PromptError::ImageTooLarge { path: shown, bytes: len, limit: opts.max_image_bytes });
            }
            let bytes = std::fs::read(path).map_err(read_err)?;
            Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
        }
    }
}

/// Chat-completions body. Vision markers are dropped (the endpoint adds its
/// own around each image), images become `image_url` parts, and adjacent
/// text segments merge into one part with blank lines between text blocks.
pub fn render_chat_request(bundle: &PromptBundle, opts: &RequestOptions) -> Result<Value, PromptError> {
    let mut parts: Vec<Value> = Vec::new();
    let mut text = String::new();
    let flush = |text: &mut String, parts: &mut Vec<Value>| {
        if !text.is_empty() {
            parts.push(json!({"type": "text", "text": std::mem::take(text)}));
        }
    };
    for seg in &bundle.user_segments {
        match seg {
            Segment::Image { path, .. } => {
                flush(&mut text, &mut parts);
                parts.push(json!({"type": "image_url", "image_url": {"url": image_url(path, opts)?}}));
            }
            Segment::Special { token: SpecialToken::VisionStart | SpecialToken::VisionEnd } => {}
            Segment::Special { token } => text.push_str(token.as_str()),
            Segment::Text { text: t, .. } => {
                if !text.is_empty() {
                    text.push_str("\n\n");
                }
                text.push_str(t);
            }
        }
    }
    let content = if parts.is_empty() {
        Value::String(text)
    } else {
        flush(&mut text, &mut parts);
        Value::Array(parts)
    };
    Ok(json!({
        "model": opts.model,
        "temperature": 0,
        "max_tokens": opts.max_tokens,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": content},
        ],
    }))
}

/// Compact JSON with sorted keys.
pub fn serialize_request(body: &Value) -> Vec<u8> {
    serde_json::to_vec(body).expect("JSON values always serialize")
}
