//! Token vocabulary, instruction families, and sequence templates.
//!
//! The token side of the model is fully closed: a fixed word list (template
//! words, instruction words, attribute words, digits), per-object index
//! tokens, structural markers, and five special tokens whose final hidden
//! states are read out as embeddings. Image sequences follow one frame
//! template; text queries follow one sentence template per query kind.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Hard cap on proposals per image; the vocabulary carries one index token
/// per possible object block.
pub const NMAX: usize = 128;

pub const TOK_OBJECT: &str = "<|object|>";
pub const TOK_IOU: &str = "<|iou|>";
pub const TOK_GLOBAL: &str = "<|global|>";
pub const TOK_LOCAL_TEXT: &str = "<|local_text|>";
pub const TOK_GLOBAL_TEXT: &str = "<|global_text|>";
pub const TOK_VISION_START: &str = "<|vision_start|>";
pub const TOK_VISION_END: &str = "<|vision_end|>";
pub const TOK_PATCH: &str = "<|patch|>";

/// Attribute vocabulary shared with the scene generator.
pub const SHAPES: [&str; 10] =
    ["circle", "square", "triangle", "star", "cross", "ring", "diamond", "bar", "dot", "wedge"];
pub const COLORS: [&str; 8] =
    ["red", "blue", "green", "yellow", "orange", "purple", "black", "white"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const TEXTURES: [&str; 2] = ["solid", "striped"];
pub const LOCATION_WORDS: [&str; 5] = ["top", "bottom", "left", "right", "center"];

const TEMPLATE_WORDS: [&str; 8] =
    ["the", "coarse", "detailed", "global", "image", "is", "object", ":"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// Which task an instruction belongs to. Detection/referring condition the
/// image side; the text kinds are the two fixed query-sentence templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Referring,
    LocalText,
    GlobalText,
}

const DETECTION_FAMILY: [&str; 3] = [
    "detect all objects in the image .",
    "localize each object by its typical category form .",
    "find all instances of every object class .",
];
const REFERRING_FAMILY: [&str; 3] = [
    "locate the specific object being described .",
    "identify the object matching the given description .",
    "pinpoint the target object from its detailed description .",
];
const LOCAL_TEXT_FAMILY: [&str; 1] = ["find an object that matches the given caption ."];
const GLOBAL_TEXT_FAMILY: [&str; 1] = ["find an image that matches the given caption ."];

/// Instruction variants available for a task. Training samples a variant;
/// evaluation always uses variant 0.
pub fn instruction_family(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Detection => &DETECTION_FAMILY,
        TaskKind::Referring => &REFERRING_FAMILY,
        TaskKind::LocalText => &LOCAL_TEXT_FAMILY,
        TaskKind::GlobalText => &GLOBAL_TEXT_FAMILY,
    }
}

/// Whitespace-split word tokens of one instruction variant.
pub fn instruction_tokens(kind: TaskKind, variant: usize) -> Vec<&'static str> {
    let fam = instruction_family(kind);
    fam[variant % fam.len()].split_whitespace().collect()
}

/// How the per-object block spends its special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// `object i : <|object|> <|iou|> .` — classification token then IoU token.
    #[default]
    DualClsIou,
    /// `object i : <|iou|> <|object|> .` — IoU token first (it precedes the
    /// RoI override and therefore cannot attend to it).
    DualIouCls,
    /// `object i : <|object|> .` — no IoU token; hard 0/1 region targets.
    SingleLabelOne,
    /// `object i : <|object|> .` — no IoU token; region targets scaled by u*.
    SingleLabelIou,
}

impl TokenMode {
    /// Tokens consumed per object block.
    pub fn block_len(self) -> usize {
        match self {
            TokenMode::DualClsIou | TokenMode::DualIouCls => 6,
            TokenMode::SingleLabelOne | TokenMode::SingleLabelIou => 5,
        }
    }

    pub fn has_iou_token(self) -> bool {
        matches!(self, TokenMode::DualClsIou | TokenMode::DualIouCls)
    }
}

/// Template switches (mirrored in the encoder config and the checkpoint).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateCfg {
    pub token_mode: TokenMode,
    /// Collapse the two text-query terminals onto the local-text id.
    pub share_text_token: bool,
    /// 2 = coarse block before the object blocks plus detailed block after;
    /// 1 = only the trailing block (`the global image is <|global|> .`).
    pub global_tokens: u32,
}

impl Default for TemplateCfg {
    fn default() -> Self {
        Self { token_mode: TokenMode::default(), share_text_token: false, global_tokens: 2 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("object count {n} exceeds the template limit {max}")]
    TooManyObjects { n: usize, max: usize },
    #[error("expected one RoI feature per object block: {feats} features for {n} blocks")]
    RoiCountMismatch { feats: usize, n: usize },
    #[error("feature vectors must share one width: found {a} and {b}")]
    RaggedFeatures { a: usize, b: usize },
    #[error("at least one {0} is required")]
    Empty(&'static str),
    #[error("global_tokens must be 1 or 2, got {0}")]
    BadGlobalTokens(u32),
}

/// Closed token inventory with stable ids. Built deterministically; the
/// checkpoint stores the token list verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// The one canonical vocabulary: specials, structure, index tokens,
    /// digits, template words, instruction words, attribute words.
    pub fn build() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let push = |t: &str, tokens: &mut Vec<String>| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_string());
            }
        };
        for t in [TOK_OBJECT, TOK_IOU, TOK_GLOBAL, TOK_LOCAL_TEXT, TOK_GLOBAL_TEXT] {
            push(t, &mut tokens);
        }
        for t in [TOK_VISION_START, TOK_VISION_END, TOK_PATCH, ".", ":"] {
            push(t, &mut tokens);
        }
        for i in 0..NMAX {
            push(&format!("idx_{i}"), &mut tokens);
        }
        for t in DIGITS {
            push(t, &mut tokens);
        }
        for t in TEMPLATE_WORDS {
            push(t, &mut tokens);
        }
        for kind in [TaskKind::Detection, TaskKind::Referring, TaskKind::LocalText, TaskKind::GlobalText]
        {
            for variant in instruction_family(kind) {
                for w in variant.split_whitespace() {
                    push(w, &mut tokens);
                }
            }
        }
        for t in SHAPES.iter().chain(&COLORS).chain(&SIZES).chain(&TEXTURES).chain(&LOCATION_WORDS)
        {
            push(t, &mut tokens);
        }
        Self::from_tokens(tokens).expect("canonical vocabulary is well-formed")
    }

    /// Rebuild from a stored token list (checkpoint load path).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, LayoutError> {
        let mut lookup = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(LayoutError::UnknownToken(format!("duplicate token {t:?}")));
            }
        }
        for required in [TOK_OBJECT, TOK_IOU, TOK_GLOBAL, TOK_LOCAL_TEXT, TOK_GLOBAL_TEXT] {
            if !lookup.contains_key(required) {
                return Err(LayoutError::UnknownToken(required.to_string()));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<u32, LayoutError> {
        self.lookup.get(token).copied().ok_or_else(|| LayoutError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }
}

/// What an input-embedding override carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverrideKind {
    /// Flattened vision patch (projected by the patch projector).
    Patch,
    /// Pooled RoI feature (projected by the object projector).
    Roi,
}

/// One input-embedding replacement: at `pos`, the token-table entry is
/// ignored and `feat` (after projection) is used instead.
#[derive(Debug, Clone)]
pub struct Override {
    pub pos: usize,
    pub kind: OverrideKind,
    pub feat: Vec<f32>,
}

/// Positions of the special tokens whose hidden states are read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectSlots {
    pub object_pos: usize,
    pub iou_pos: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Local,
    Global,
}

#[derive(Debug, Clone, Default)]
pub struct SlotTable {
    /// Global-embedding positions in template order (coarse first when both
    /// are present; exactly one entry when `global_tokens = 1`).
    pub globals: Vec<usize>,
    pub objects: Vec<ObjectSlots>,
    pub text: Option<(usize, TextKind)>,
}

/// A ready-to-encode sequence: token ids, input overrides, readout slots.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub overrides: Vec<Override>,
    pub slots: SlotTable,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn uniform_width(feats: &[Vec<f32>]) -> Result<usize, LayoutError> {
    let w = feats[0].len();
    for f in feats {
        if f.len() != w {
            return Err(LayoutError::RaggedFeatures { a: w, b: f.len() });
        }
    }
    Ok(w)
}

/// Build the frame sequence for one image:
///
/// ```text
/// <|vision_start|> <|patch|>×P <|vision_end|>
/// <instruction words>
/// the coarse global image is <|global|> .          (global_tokens = 2 only)
/// object idx_i : <block specials> .                (one per proposal)
/// the detailed global image is <|global|> .        (or the single-global form)
/// ```
///
/// Patch positions and `<|object|>` positions carry input overrides. Length
/// is exactly affine in the proposal count: `2 + P + |instr| + k·N + tail`.
pub fn build_image_sequence(
    vocab: &Vocabulary,
    tcfg: &TemplateCfg,
    task: TaskKind,
    variant: usize,
    patch_feats: &[Vec<f32>],
    roi_feats: &[Vec<f32>],
) -> Result<TokenSequence, LayoutError> {
    if !matches!(tcfg.global_tokens, 1 | 2) {
        return Err(LayoutError::BadGlobalTokens(tcfg.global_tokens));
    }
    if patch_feats.is_empty() {
        return Err(LayoutError::Empty("vision patch"));
    }
    if roi_feats.is_empty() {
        return Err(LayoutError::Empty("object block"));
    }
    let n = roi_feats.len();
    if n > NMAX {
        return Err(LayoutError::TooManyObjects { n, max: NMAX });
    }
    uniform_width(patch_feats)?;
    uniform_width(roi_feats)?;

    let mut ids: Vec<u32> = Vec::new();
    let mut overrides: Vec<Override> = Vec::new();
    let mut slots = SlotTable::default();

    ids.push(vocab.id(TOK_VISION_START)?);
    let patch_id = vocab.id(TOK_PATCH)?;
    for f in patch_feats {
        overrides.push(Override { pos: ids.len(), kind: OverrideKind::Patch, feat: f.clone() });
        ids.push(patch_id);
    }
    ids.push(vocab.id(TOK_VISION_END)?);

    for w in instruction_tokens(task, variant) {
        ids.push(vocab.id(w)?);
    }

    let global_id = vocab.id(TOK_GLOBAL)?;
    let push_global_block =
        |ids: &mut Vec<u32>, slots: &mut SlotTable, words: &[&str]| -> Result<(), LayoutError> {
            for w in words {
                ids.push(vocab.id(w)?);
            }
            slots.globals.push(ids.len());
            ids.push(global_id);
            ids.push(vocab.id(".")?);
            Ok(())
        };

    if tcfg.global_tokens == 2 {
        push_global_block(&mut ids, &mut slots, &["the", "coarse", "global", "image", "is"])?;
    }

    let object_word = vocab.id("object")?;
    let colon = vocab.id(":")?;
    let dot = vocab.id(".")?;
    let obj_id = vocab.id(TOK_OBJECT)?;
    let iou_id = vocab.id(TOK_IOU)?;
    for (i, f) in roi_feats.iter().enumerate() {
        ids.push(object_word);
        ids.push(vocab.id(&format!("idx_{i}"))?);
        ids.push(colon);
        let (object_pos, iou_pos) = match tcfg.token_mode {
            TokenMode::DualClsIou => {
                let op = ids.len();
                ids.push(obj_id);
                let ip = ids.len();
                ids.push(iou_id);
                (op, Some(ip))
            }
            TokenMode::DualIouCls => {
                let ip = ids.len();
                ids.push(iou_id);
                let op = ids.len();
                ids.push(obj_id);
                (op, Some(ip))
            }
            TokenMode::SingleLabelOne | TokenMode::SingleLabelIou => {
                let op = ids.len();
                ids.push(obj_id);
                (op, None)
            }
        };
        overrides.push(Override { pos: object_pos, kind: OverrideKind::Roi, feat: f.clone() });
        slots.objects.push(ObjectSlots { object_pos, iou_pos });
        ids.push(dot);
    }

    if tcfg.global_tokens == 2 {
        push_global_block(&mut ids, &mut slots, &["the", "detailed", "global", "image", "is"])?;
    } else {
        push_global_block(&mut ids, &mut slots, &["the", "global", "image", "is"])?;
    }

    Ok(TokenSequence { ids, overrides, slots })
}

/// Expected image-sequence length for `p` patches, an instruction of
/// `instr_len` words, and `n` object blocks (the affine template property).
pub fn image_sequence_len(tcfg: &TemplateCfg, p: usize, instr_len: usize, n: usize) -> usize {
    let tail = if tcfg.global_tokens == 2 { 14 } else { 6 };
    2 + p + instr_len + tcfg.token_mode.block_len() * n + tail
}

fn build_text_sequence(
    vocab: &Vocabulary,
    tcfg: &TemplateCfg,
    kind: TextKind,
    caption: &[&str],
) -> Result<TokenSequence, LayoutError> {
    if caption.is_empty() {
        return Err(LayoutError::Empty("caption token"));
    }
    let task = match kind {
        TextKind::Local => TaskKind::LocalText,
        TextKind::Global => TaskKind::GlobalText,
    };
    let mut ids = Vec::new();
    for w in instruction_tokens(task, 0) {
        ids.push(vocab.id(w)?);
    }
    for w in caption {
        ids.push(vocab.id(w)?);
    }
    let terminal = match (kind, tcfg.share_text_token) {
        (TextKind::Local, _) | (TextKind::Global, true) => vocab.id(TOK_LOCAL_TEXT)?,
        (TextKind::Global, false) => vocab.id(TOK_GLOBAL_TEXT)?,
    };
    let slot = ids.len();
    ids.push(terminal);
    Ok(TokenSequence {
        ids,
        overrides: Vec::new(),
        slots: SlotTable { globals: Vec::new(), objects: Vec::new(), text: Some((slot, kind)) },
    })
}

/// Object-query sentence: fixed local-text template + caption + terminal.
/// The terminal's hidden state is the text embedding (always the final
/// position).
pub fn build_local_text_sequence(
    vocab: &Vocabulary,
    tcfg: &TemplateCfg,
    caption: &[&str],
) -> Result<TokenSequence, LayoutError> {
    build_text_sequence(vocab, tcfg, TextKind::Local, caption)
}

/// Image-query sentence: fixed global-text template + caption + terminal.
pub fn build_global_text_sequence(
    vocab: &Vocabulary,
    tcfg: &TemplateCfg,
    caption: &[&str],
) -> Result<TokenSequence, LayoutError> {
    build_text_sequence(vocab, tcfg, TextKind::Global, caption)
}
