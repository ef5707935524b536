//! The tag-delimited interleaved reasoning-trace grammar.
//!
//! A trace is a flat sequence of tagged blocks — `<reasoning>…</reasoning>`,
//! `<function>…</function>`, `<observation>…</observation>`,
//! `<answer>…</answer>` — with no nesting and no attributes; the tags act as
//! special tokens, matched literally and case-sensitively. Observation
//! bodies hold exactly the image placeholder literal [`IMAGE_PAD`]; the
//! actual pixels travel beside the text.
//!
//! Three layers live here:
//! * [`scan_stream`] — incremental event scanner used by the inference loop
//!   to detect closed `</function>` / `</answer>` pairs in a growing buffer;
//! * [`tokenize`] / [`parse_trace`] / [`parse_model_reply`] — strict
//!   segmentation and chain assembly for complete texts;
//! * [`serialize_chain`] — rendering a chain back to trace text
//!   (single-body training form) or to dialogue turns.
//!
//! Reasoning split rule: within a `<reasoning>` body, sentences end at
//! `.`/`!`/`?`; the suffix starting at the last sentence that names a tool
//! intent (contains one of `focus`, `zoom`, `reuse`, `crop`, `magnif`,
//! `look closer`, `closer look`, `examine`, case-insensitive) is the visual
//! plan `p_t`, the prefix is the atomic step `r_t`. If no sentence names an
//! intent — or the prefix would be empty — the whole body is the atomic step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    ChainError, CommandError, CoordinateConvention, ReasoningChain, ReasoningContent,
    ReasoningStep, ToolCommand,
};
use crate::dialogue::{Part, Role, Turn};
use crate::image_store::ImageState;

/// Placeholder literal standing in for an image's visual tokens.
pub const IMAGE_PAD: &str = "<|image_pad|>";

pub const REASONING_OPEN: &str = "<reasoning>";
pub const REASONING_CLOSE: &str = "</reasoning>";
pub const FUNCTION_OPEN: &str = "<function>";
pub const FUNCTION_CLOSE: &str = "</function>";
pub const OBSERVATION_OPEN: &str = "<observation>";
pub const OBSERVATION_CLOSE: &str = "</observation>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("malformed trace at byte {at}: {reason}")]
    Malformed { reason: String, at: usize },
    #[error("observation/image arity mismatch: {observations} observations, {images} images")]
    ArityMismatch { observations: usize, images: usize },
    #[error("function body is not valid object notation: {0}")]
    Parse(String),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("step {step} lacks its observation image")]
    IncompleteChain { step: usize },
}

fn malformed(reason: &str, at: usize) -> TraceError {
    TraceError::Malformed {
        reason: reason.to_string(),
        at,
    }
}

// ---------------------------------------------------------------------------
// Streaming scanner
// ---------------------------------------------------------------------------

/// Event produced by [`scan_stream`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    /// No complete event in the buffer yet; feed more bytes.
    NeedMore,
    /// A `<function>…</function>` pair closed; carries the raw command text
    /// and the byte span of the whole block.
    FunctionClosed { raw: String, span: (usize, usize) },
    /// An `<answer>…</answer>` pair closed.
    AnswerClosed { answer: String, span: (usize, usize) },
    /// The stream can never become well-formed past this point.
    Malformed { reason: String, at: usize },
}

fn find_any(hay: &[u8], from: usize, needles: &[&[u8]]) -> Option<(usize, usize)> {
    for p in from..hay.len() {
        for (i, n) in needles.iter().enumerate() {
            if hay.len() - p >= n.len() && &hay[p..p + n.len()] == *n {
                return Some((p, i));
            }
        }
    }
    None
}

/// Scans `buffer` from `cursor` for the earliest complete function or answer
/// event. Returns the event and the new cursor, which never advances past
/// the returned span (and does not move at all for `NeedMore`/`Malformed`).
///
/// The scanner is prefix-monotone: feeding a buffer byte by byte yields the
/// same event sequence as scanning it whole.
pub fn scan_stream(buffer: &[u8], cursor: usize) -> (StreamEvent, usize) {
    #[derive(Clone, Copy, PartialEq)]
    enum Block {
        Function,
        Answer,
    }
    let needles: [&[u8]; 4] = [
        FUNCTION_OPEN.as_bytes(),
        FUNCTION_CLOSE.as_bytes(),
        ANSWER_OPEN.as_bytes(),
        ANSWER_CLOSE.as_bytes(),
    ];
    let mut pos = cursor.min(buffer.len());
    let mut open: Option<(Block, usize, usize)> = None; // kind, open start, body start
    loop {
        let Some((p, idx)) = find_any(buffer, pos, &needles) else {
            return (StreamEvent::NeedMore, cursor);
        };
        let lit = needles[idx];
        match idx {
            0 | 2 => {
                // An opener.
                if open.is_some() {
                    return (
                        StreamEvent::Malformed {
                            reason: "nested opener".into(),
                            at: p,
                        },
                        cursor,
                    );
                }
                let kind = if idx == 0 { Block::Function } else { Block::Answer };
                open = Some((kind, p, p + lit.len()));
            }
            1 | 3 => {
                // A closer.
                let kind = if idx == 1 { Block::Function } else { Block::Answer };
                match open {
                    Some((k, open_start, body_start)) if k == kind => {
                        let body = String::from_utf8_lossy(&buffer[body_start..p]).into_owned();
                        let end = p + lit.len();
                        let event = match kind {
                            Block::Function => StreamEvent::FunctionClosed {
                                raw: body,
                                span: (open_start, end),
                            },
                            Block::Answer => StreamEvent::AnswerClosed {
                                answer: body,
                                span: (open_start, end),
                            },
                        };
                        return (event, end);
                    }
                    Some(_) => {
                        return (
                            StreamEvent::Malformed {
                                reason: "mismatched close".into(),
                                at: p,
                            },
                            cursor,
                        );
                    }
                    None => {
                        return (
                            StreamEvent::Malformed {
                                reason: "unmatched close".into(),
                                at: p,
                            },
                            cursor,
                        );
                    }
                }
            }
            _ => unreachable!(),
        }
        pos = p + lit.len();
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Reasoning,
    Function,
    Observation,
    Answer,
    PlainText,
}

/// One tagged block (or a run of untagged text) with its byte span in the
/// source. `image_slot` is populated by [`parse_trace`] for observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSegment {
    pub kind: SegmentKind,
    pub body: String,
    pub span: (usize, usize),
    pub image_slot: Option<ImageState>,
}

const TAG_TABLE: [(&str, SegmentKind, bool); 8] = [
    (REASONING_OPEN, SegmentKind::Reasoning, true),
    (REASONING_CLOSE, SegmentKind::Reasoning, false),
    (FUNCTION_OPEN, SegmentKind::Function, true),
    (FUNCTION_CLOSE, SegmentKind::Function, false),
    (OBSERVATION_OPEN, SegmentKind::Observation, true),
    (OBSERVATION_CLOSE, SegmentKind::Observation, false),
    (ANSWER_OPEN, SegmentKind::Answer, true),
    (ANSWER_CLOSE, SegmentKind::Answer, false),
];

/// Splits complete trace text into segments. Tags must pair and may not
/// nest; text outside tags becomes `PlainText` segments.
pub fn tokenize(text: &str) -> Result<Vec<TraceSegment>, TraceError> {
    let bytes = text.as_bytes();
    let needles: Vec<&[u8]> = TAG_TABLE.iter().map(|(l, _, _)| l.as_bytes()).collect();
    let mut segments = Vec::new();
    let mut pos = 0usize;
    let mut plain_anchor = 0usize;
    let mut open: Option<(SegmentKind, usize, usize)> = None; // kind, open start, body start
    loop {
        let found = find_any(bytes, pos, &needles);
        let Some((p, idx)) = found else {
            break;
        };
        let (lit, kind, is_open) = TAG_TABLE[idx];
        match (&open, is_open) {
            (None, true) => {
                if p > plain_anchor {
                    segments.push(TraceSegment {
                        kind: SegmentKind::PlainText,
                        body: text[plain_anchor..p].to_string(),
                        span: (plain_anchor, p),
                        image_slot: None,
                    });
                }
                open = Some((kind, p, p + lit.len()));
            }
            (None, false) => return Err(malformed("unmatched close", p)),
            (Some(_), true) => return Err(malformed("nested opener", p)),
            (Some((open_kind, open_start, body_start)), false) => {
                if *open_kind != kind {
                    return Err(malformed("mismatched close", p));
                }
                segments.push(TraceSegment {
                    kind,
                    body: text[*body_start..p].to_string(),
                    span: (*open_start, p + lit.len()),
                    image_slot: None,
                });
                open = None;
                plain_anchor = p + lit.len();
            }
        }
        pos = p + lit.len();
    }
    if let Some((_, open_start, _)) = open {
        return Err(malformed("unterminated block", open_start));
    }
    if bytes.len() > plain_anchor {
        segments.push(TraceSegment {
            kind: SegmentKind::PlainText,
            body: text[plain_anchor..].to_string(),
            span: (plain_anchor, bytes.len()),
            image_slot: None,
        });
    }
    Ok(segments)
}

// ---------------------------------------------------------------------------
// Reasoning split rule
// ---------------------------------------------------------------------------

const INTENT_MARKERS: [&str; 8] = [
    "focus",
    "zoom",
    "reuse",
    "crop",
    "magnif",
    "look closer",
    "closer look",
    "examine",
];

fn sentence_starts(body: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pending = true;
    for (i, c) in body.char_indices() {
        if pending && !c.is_whitespace() {
            starts.push(i);
            pending = false;
        }
        if matches!(c, '.' | '!' | '?') {
            pending = true;
        }
    }
    starts
}

/// Splits a reasoning body into `(atomic_step, visual_plan)` per the rule in
/// the module docs.
pub fn split_reasoning(body: &str) -> (String, String) {
    let starts = sentence_starts(body);
    let mut plan_start: Option<usize> = None;
    for (i, &s) in starts.iter().enumerate() {
        let end = starts.get(i + 1).copied().unwrap_or(body.len());
        let sentence = body[s..end].to_lowercase();
        if INTENT_MARKERS.iter().any(|m| sentence.contains(m)) {
            plan_start = Some(s);
        }
    }
    match plan_start {
        Some(s) if !body[..s].trim().is_empty() => (body[..s].to_string(), body[s..].to_string()),
        _ => (body.to_string(), String::new()),
    }
}

// ---------------------------------------------------------------------------
// Command extraction
// ---------------------------------------------------------------------------

/// Parses and validates the body between a paired `<function>` open/close.
/// Bbox coordinates are read under `convention` and normalized against
/// `image_dims` immediately.
pub fn extract_tool_command(
    raw: &str,
    convention: CoordinateConvention,
    image_dims: (u32, u32),
) -> Result<ToolCommand, TraceError> {
    let value: serde_json::Value =
        serde_json::from_str(raw.trim()).map_err(|e| TraceError::Parse(e.to_string()))?;
    Ok(ToolCommand::from_json_value(&value, convention, image_dims)?)
}

// ---------------------------------------------------------------------------
// Full-trace parsing
// ---------------------------------------------------------------------------

/// Per-trace context the assistant text alone does not carry.
#[derive(Debug, Clone)]
pub struct TraceContext {
    pub question: String,
    pub root_image: ImageState,
    pub convention: CoordinateConvention,
}

impl TraceContext {
    pub fn new(question: impl Into<String>, root_image: ImageState) -> Self {
        Self {
            question: question.into(),
            root_image,
            convention: CoordinateConvention::Normalized,
        }
    }

    fn root_dims(&self) -> (u32, u32) {
        (self.root_image.width(), self.root_image.height())
    }
}

/// Parses a complete assistant trace into a [`ReasoningChain`]. `images`
/// supplies one [`ImageState`] per observation placeholder, in order.
pub fn parse_trace(
    text: &str,
    images: &[ImageState],
    ctx: &TraceContext,
) -> Result<ReasoningChain, TraceError> {
    let segments = tokenize(text)?;
    let observations = segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Observation)
        .count();
    if observations != images.len() {
        return Err(TraceError::ArityMismatch {
            observations,
            images: images.len(),
        });
    }

    let mut steps: Vec<ReasoningStep> = Vec::new();
    let mut answer: Option<String> = None;
    let mut pending_reasoning: Option<ReasoningContent> = None;
    let mut pending_command: Option<(ReasoningContent, ToolCommand)> = None;
    let mut obs_idx = 0usize;

    for seg in segments {
        let at = seg.span.0;
        if answer.is_some() && seg.kind != SegmentKind::PlainText {
            return Err(malformed("content after answer", at));
        }
        match seg.kind {
            SegmentKind::PlainText => {
                if !seg.body.trim().is_empty() {
                    return Err(malformed("stray text outside tags", at));
                }
            }
            SegmentKind::Reasoning => {
                if pending_command.is_some() {
                    return Err(malformed("function missing observation", at));
                }
                if pending_reasoning.is_some() {
                    return Err(malformed("consecutive reasoning blocks", at));
                }
                let (atomic, plan) = split_reasoning(&seg.body);
                pending_reasoning = Some(ReasoningContent::new(atomic, plan)?);
            }
            SegmentKind::Function => {
                if pending_command.is_some() {
                    return Err(malformed(
                        "at most one function between observations",
                        at,
                    ));
                }
                let content = pending_reasoning
                    .take()
                    .ok_or_else(|| malformed("function without preceding reasoning", at))?;
                let cmd = extract_tool_command(&seg.body, ctx.convention, ctx.root_dims())?;
                pending_command = Some((content, cmd));
            }
            SegmentKind::Observation => {
                let (content, cmd) = pending_command
                    .take()
                    .ok_or_else(|| malformed("observation without function", at))?;
                if seg.body != IMAGE_PAD {
                    return Err(malformed("observation body must be the image pad", at));
                }
                let image = images[obs_idx].clone();
                obs_idx += 1;
                steps.push(ReasoningStep {
                    content,
                    command: Some(cmd),
                    observation: Some(image),
                });
            }
            SegmentKind::Answer => {
                if pending_command.is_some() {
                    return Err(malformed("function missing observation", at));
                }
                if let Some(content) = pending_reasoning.take() {
                    steps.push(ReasoningStep {
                        content,
                        command: None,
                        observation: None,
                    });
                }
                answer = Some(seg.body);
            }
        }
    }
    if pending_command.is_some() {
        return Err(malformed("function missing observation", text.len()));
    }
    if let Some(content) = pending_reasoning.take() {
        steps.push(ReasoningStep {
            content,
            command: None,
            observation: None,
        });
    }

    let chain = ReasoningChain {
        question: ctx.question.clone(),
        root_image: ctx.root_image.clone(),
        steps,
        answer,
    };
    chain.validate()?;
    Ok(chain)
}

// ---------------------------------------------------------------------------
// Single-reply parsing (generation and inference loops)
// ---------------------------------------------------------------------------

/// What one assistant reply asked for.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplyAction {
    ToolCall(ToolCommand),
    Answer(String),
    None,
}

/// One parsed assistant reply: optional reasoning plus at most one action.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReply {
    pub reasoning: Option<ReasoningContent>,
    pub action: ReplyAction,
}

/// Parses a single assistant reply of the shape
/// `<reasoning>…</reasoning>` followed by at most one `<function>` or
/// `<answer>` block. An answer co-occurring with a function call, or any
/// model-emitted `<observation>`, is rejected.
pub fn parse_model_reply(
    text: &str,
    convention: CoordinateConvention,
    image_dims: (u32, u32),
) -> Result<ModelReply, TraceError> {
    let segments = tokenize(text)?;
    let mut reasoning: Option<ReasoningContent> = None;
    let mut action = ReplyAction::None;
    for seg in segments {
        let at = seg.span.0;
        match seg.kind {
            SegmentKind::PlainText => {
                if !seg.body.trim().is_empty() {
                    return Err(malformed("stray text outside tags", at));
                }
            }
            SegmentKind::Reasoning => {
                if action != ReplyAction::None {
                    return Err(malformed("content after action", at));
                }
                if reasoning.is_some() {
                    return Err(malformed("consecutive reasoning blocks", at));
                }
                let (atomic, plan) = split_reasoning(&seg.body);
                reasoning = Some(ReasoningContent::new(atomic, plan)?);
            }
            SegmentKind::Function => {
                if action != ReplyAction::None {
                    return Err(malformed("at most one action per reply", at));
                }
                action = ReplyAction::ToolCall(extract_tool_command(
                    &seg.body,
                    convention,
                    image_dims,
                )?);
            }
            SegmentKind::Answer => {
                if action != ReplyAction::None {
                    return Err(malformed("at most one action per reply", at));
                }
                action = ReplyAction::Answer(seg.body);
            }
            SegmentKind::Observation => {
                return Err(malformed("model reply may not contain observation", at));
            }
        }
    }
    Ok(ModelReply { reasoning, action })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Per-turn messages: assistant text turns and tool observation turns.
    DialogueRender,
    /// One assistant body with observations inlined as image pads.
    TrainingRender,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rendered {
    Dialogue(Vec<Turn>),
    Training(String),
}

impl Rendered {
    pub fn into_training_body(self) -> String {
        match self {
            Rendered::Training(body) => body,
            Rendered::Dialogue(_) => panic!("rendered as dialogue, not training body"),
        }
    }

    pub fn into_turns(self) -> Vec<Turn> {
        match self {
            Rendered::Dialogue(turns) => turns,
            Rendered::Training(_) => panic!("rendered as training body, not dialogue"),
        }
    }
}

fn check_renderable(chain: &ReasoningChain) -> Result<(), TraceError> {
    for (i, step) in chain.steps.iter().enumerate() {
        if step.command.is_some() && step.observation.is_none() {
            return Err(TraceError::IncompleteChain { step: i });
        }
        if step.command.is_none() {
            let is_last = i + 1 == chain.steps.len();
            if step.observation.is_some() || !is_last {
                return Err(malformed("commandless step must be trailing", i));
            }
        }
    }
    Ok(())
}

/// `<reasoning>…</reasoning>` block for one step's content.
pub fn reasoning_block(content: &ReasoningContent) -> String {
    format!("{REASONING_OPEN}{}{REASONING_CLOSE}", content.body())
}

/// `<function>…</function>` block in canonical command form.
pub fn function_block(cmd: &ToolCommand) -> String {
    format!("{FUNCTION_OPEN}{}{FUNCTION_CLOSE}", cmd.to_canonical_text())
}

fn observation_block() -> String {
    format!("{OBSERVATION_OPEN}{IMAGE_PAD}{OBSERVATION_CLOSE}")
}

/// Serializes a chain back to trace form. `TrainingRender` yields a single
/// assistant body; `DialogueRender` yields assistant/tool turns.
pub fn serialize_chain(chain: &ReasoningChain, mode: RenderMode) -> Result<Rendered, TraceError> {
    check_renderable(chain)?;
    match mode {
        RenderMode::TrainingRender => {
            let mut body = String::new();
            for step in &chain.steps {
                body.push_str(&reasoning_block(&step.content));
                if let Some(cmd) = &step.command {
                    body.push_str(&function_block(cmd));
                    body.push_str(&observation_block());
                }
            }
            if let Some(answer) = &chain.answer {
                body.push_str(&format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"));
            }
            Ok(Rendered::Training(body))
        }
        RenderMode::DialogueRender => {
            let mut turns = Vec::new();
            let mut tail = String::new();
            for step in &chain.steps {
                match (&step.command, &step.observation) {
                    (Some(cmd), Some(obs)) => {
                        let text = format!(
                            "{}{}",
                            reasoning_block(&step.content),
                            function_block(cmd)
                        );
                        turns.push(Turn::text(Role::Assistant, text));
                        turns.push(Turn {
                            role: Role::Tool,
                            parts: vec![
                                Part::Text {
                                    text: OBSERVATION_OPEN.to_string(),
                                },
                                Part::Image { image: obs.clone() },
                                Part::Text {
                                    text: OBSERVATION_CLOSE.to_string(),
                                },
                            ],
                        });
                    }
                    (None, None) => tail.push_str(&reasoning_block(&step.content)),
                    _ => unreachable!("check_renderable guarantees pairing"),
                }
            }
            if let Some(answer) = &chain.answer {
                tail.push_str(&format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"));
            }
            if !tail.is_empty() {
                turns.push(Turn::text(Role::Assistant, tail));
            }
            Ok(Rendered::Dialogue(turns))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ToolName;
    use crate::image_store::ImageStore;
    use crate::BBox;
    use image::RgbImage;
    use proptest::prelude::*;

    fn flat(w: u32, h: u32, level: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([level, level, level]))
    }

    fn ctx_with_store() -> (ImageStore, TraceContext) {
        let store = ImageStore::new();
        let root = store.add_original(flat(64, 48, 128)).unwrap();
        let ctx = TraceContext::new("What is in the chart?", root);
        (store, ctx)
    }

    // -- scan_stream --------------------------------------------------------

    #[test]
    fn scan_finds_closed_function() {
        let buf = br#"<reasoning>look closer</reasoning><function>{"name":"reuse","params":{}}</function>"#;
        let (event, cursor) = scan_stream(buf, 0);
        match event {
            StreamEvent::FunctionClosed { raw, span } => {
                assert_eq!(raw, r#"{"name":"reuse","params":{}}"#);
                assert_eq!(span.1, buf.len());
                assert_eq!(cursor, buf.len());
            }
            other => panic!("expected FunctionClosed, got {other:?}"),
        }
    }

    #[test]
    fn scan_truncated_buffer_needs_more() {
        let buf = br#"<function>{"name":"#;
        assert_eq!(scan_stream(buf, 0), (StreamEvent::NeedMore, 0));
    }

    #[test]
    fn scan_unmatched_close_is_malformed() {
        let buf = b"</function>";
        let (event, cursor) = scan_stream(buf, 0);
        assert_eq!(
            event,
            StreamEvent::Malformed {
                reason: "unmatched close".into(),
                at: 0
            }
        );
        assert_eq!(cursor, 0);
    }

    #[test]
    fn scan_nested_opener_is_malformed() {
        let buf = b"<function>abc<function>";
        let (event, _) = scan_stream(buf, 0);
        assert!(matches!(event, StreamEvent::Malformed { reason, .. } if reason == "nested opener"));
    }

    #[test]
    fn scan_emits_events_in_order_with_increasing_spans() {
        let buf = br#"<reasoning>a</reasoning><function>{}</function>text<answer>B</answer>"#;
        let (e1, c1) = scan_stream(buf, 0);
        let StreamEvent::FunctionClosed { span: s1, .. } = e1 else {
            panic!("expected function first");
        };
        let (e2, c2) = scan_stream(buf, c1);
        let StreamEvent::AnswerClosed { answer, span: s2 } = e2 else {
            panic!("expected answer second");
        };
        assert_eq!(answer, "B");
        assert!(s1.1 <= s2.0, "spans must not overlap");
        assert!(c2 > c1);
        assert_eq!(scan_stream(buf, c2).0, StreamEvent::NeedMore);
    }

    fn collect_events(buf: &[u8]) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        let mut cursor = 0;
        loop {
            let (event, next) = scan_stream(buf, cursor);
            match event {
                StreamEvent::NeedMore => break,
                StreamEvent::Malformed { .. } => {
                    events.push(event);
                    break;
                }
                other => {
                    events.push(other);
                    cursor = next;
                }
            }
        }
        events
    }

    fn collect_events_incremental(buf: &[u8]) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        let mut cursor = 0;
        for n in 0..=buf.len() {
            loop {
                let (event, next) = scan_stream(&buf[..n], cursor);
                match event {
                    StreamEvent::NeedMore => break,
                    StreamEvent::Malformed { .. } => {
                        if n == buf.len() {
                            events.push(event);
                        }
                        break;
                    }
                    other => {
                        events.push(other);
                        cursor = next;
                    }
                }
            }
            if matches!(events.last(), Some(StreamEvent::Malformed { .. })) {
                break;
            }
        }
        events
    }

    proptest! {
        #[test]
        fn scan_is_prefix_monotone(parts in prop::collection::vec(
            prop::sample::select(vec![
                "<function>", "</function>", "<answer>", "</answer>",
                "{\"name\":\"reuse\",\"params\":{}}", "text", "<fun", "swer>", "42", "<reasoning>r</reasoning>",
            ]),
            0..12,
        )) {
            let buf: Vec<u8> = parts.concat().into_bytes();
            prop_assert_eq!(collect_events(&buf), collect_events_incremental(&buf));
        }
    }

    // -- extract_tool_command ----------------------------------------------

    #[test]
    fn extract_examples() {
        let conv = CoordinateConvention::Normalized;
        assert_eq!(
            extract_tool_command(r#"{"name":"reuse","params":{}}"#, conv, (1, 1)).unwrap(),
            ToolCommand::Reuse
        );
        let cmd =
            extract_tool_command(r#"{"name":"focus_area","params":{"bbox":[0.1,0.2,0.6,0.8]}}"#, conv, (1, 1))
                .unwrap();
        assert_eq!(cmd.bbox().unwrap().to_array(), [0.1, 0.2, 0.6, 0.8]);
        assert!(matches!(
            extract_tool_command(r#"{"name":"rotate","params":{}}"#, conv, (1, 1)),
            Err(TraceError::Command(CommandError::UnknownTool(_)))
        ));
        assert!(matches!(
            extract_tool_command("not json", conv, (1, 1)),
            Err(TraceError::Parse(_))
        ));
    }

    // -- split rule ----------------------------------------------------------

    #[test]
    fn split_takes_last_intent_sentence_as_plan() {
        let body = "The chart is dense. The legend is tiny. Let me zoom in for a better look.";
        let (atomic, plan) = split_reasoning(body);
        assert_eq!(atomic, "The chart is dense. The legend is tiny. ");
        assert_eq!(plan, "Let me zoom in for a better look.");
        assert_eq!(format!("{atomic}{plan}"), body);
    }

    #[test]
    fn split_without_intent_keeps_whole_body_atomic() {
        let (atomic, plan) = split_reasoning("The value is 42. That is the answer.");
        assert_eq!(plan, "");
        assert!(atomic.ends_with("answer."));
    }

    #[test]
    fn split_guards_empty_atomic() {
        let (atomic, plan) = split_reasoning("Let me zoom in.");
        assert_eq!(atomic, "Let me zoom in.");
        assert_eq!(plan, "");
    }

    // -- parse_trace ----------------------------------------------------------

    #[test]
    fn parse_one_step_trace() {
        let (store, ctx) = ctx_with_store();
        let obs = store
            .add_derived(flat(56, 56, 90), ToolName::Reuse, &ctx.root_image)
            .unwrap();
        let text = format!(
            "<reasoning>Hard to tell. Let me reuse the original image.</reasoning>\
             <function>{{\"name\":\"reuse\",\"params\":{{}}}}</function>\
             <observation>{IMAGE_PAD}</observation>\
             <reasoning>Now the value is clear.</reasoning><answer>42</answer>"
        );
        let chain = parse_trace(&text, &[obs.clone()], &ctx).unwrap();
        assert_eq!(chain.tool_step_count(), 1);
        assert_eq!(chain.answer.as_deref(), Some("42"));
        assert_eq!(chain.steps[0].observation.as_ref().unwrap(), &obs);
        assert_eq!(chain.steps[0].content.visual_plan, "Let me reuse the original image.");
        assert_eq!(chain.steps[1].command, None);
    }

    #[test]
    fn parse_direct_answer_trace() {
        let (_store, ctx) = ctx_with_store();
        let chain = parse_trace("<answer>B</answer>", &[], &ctx).unwrap();
        assert_eq!(chain.steps.len(), 0);
        assert_eq!(chain.answer.as_deref(), Some("B"));
    }

    #[test]
    fn parse_arity_mismatch() {
        let (store, ctx) = ctx_with_store();
        let obs = store
            .add_derived(flat(56, 56, 90), ToolName::Reuse, &ctx.root_image)
            .unwrap();
        let text = format!(
            "<reasoning>Check. Let me reuse the original image.</reasoning>\
             <function>{{\"name\":\"reuse\",\"params\":{{}}}}</function>\
             <observation>{IMAGE_PAD}</observation>\
             <reasoning>Again. Let me reuse the original image.</reasoning>\
             <function>{{\"name\":\"reuse\",\"params\":{{}}}}</function>\
             <observation>{IMAGE_PAD}</observation><answer>x</answer>"
        );
        assert_eq!(
            parse_trace(&text, &[obs], &ctx).unwrap_err(),
            TraceError::ArityMismatch {
                observations: 2,
                images: 1
            }
        );
    }

    #[test]
    fn parse_rejects_double_function() {
        let (_store, ctx) = ctx_with_store();
        let text = "<reasoning>a. Let me zoom in.</reasoning>\
                    <function>{\"name\":\"reuse\",\"params\":{}}</function>\
                    <function>{\"name\":\"reuse\",\"params\":{}}</function>";
        assert!(matches!(
            parse_trace(text, &[], &ctx).unwrap_err(),
            TraceError::Malformed { reason, .. } if reason.contains("one function")
        ));
    }

    #[test]
    fn parse_never_panics_on_arbitrary_text() {
        let (_store, ctx) = ctx_with_store();
        for garbage in [
            "",
            "<answer>",
            "</answer>",
            "<reasoning><function>",
            "plain text only",
            "<observation>pad</observation>",
            "\u{1F600}<answer>\u{1F600}</answer>",
        ] {
            let _ = parse_trace(garbage, &[], &ctx);
        }
    }

    proptest! {
        #[test]
        fn parse_is_total_on_random_strings(s in ".{0,200}") {
            let (_store, ctx) = ctx_with_store();
            let _ = parse_trace(&s, &[], &ctx);
        }

        #[test]
        fn parse_is_total_on_random_bytes(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let (_store, ctx) = ctx_with_store();
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let _ = parse_trace(&text, &[], &ctx);
        }
    }

    // -- serialize_chain -----------------------------------------------------

    #[test]
    fn serialize_zero_tool_step_chain() {
        let (_store, ctx) = ctx_with_store();
        let mut chain = ReasoningChain::new(ctx.question.clone(), ctx.root_image.clone());
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new("The answer is visible directly.", "").unwrap(),
            command: None,
            observation: None,
        });
        chain.answer = Some("B".into());
        let body = serialize_chain(&chain, RenderMode::TrainingRender)
            .unwrap()
            .into_training_body();
        assert_eq!(
            body,
            "<reasoning>The answer is visible directly.</reasoning><answer>B</answer>"
        );
    }

    #[test]
    fn serialize_one_step_has_one_function_and_observation() {
        let (store, ctx) = ctx_with_store();
        let obs = store
            .add_derived(flat(56, 56, 90), ToolName::Reuse, &ctx.root_image)
            .unwrap();
        let mut chain = ReasoningChain::new(ctx.question.clone(), ctx.root_image.clone());
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new("Unclear. ", "Let me reuse the original image.")
                .unwrap(),
            command: Some(ToolCommand::Reuse),
            observation: Some(obs),
        });
        chain.answer = Some("42".into());
        let body = serialize_chain(&chain, RenderMode::TrainingRender)
            .unwrap()
            .into_training_body();
        assert_eq!(body.matches(FUNCTION_OPEN).count(), 1);
        assert_eq!(body.matches(OBSERVATION_OPEN).count(), 1);
        assert!(body.contains(IMAGE_PAD));
        // Dialogue render: assistant, tool, assistant.
        let turns = serialize_chain(&chain, RenderMode::DialogueRender)
            .unwrap()
            .into_turns();
        assert_eq!(turns.len(), 3);
        assert_eq!(turns[0].role, Role::Assistant);
        assert_eq!(turns[1].role, Role::Tool);
        assert_eq!(turns[2].role, Role::Assistant);
        assert!(turns[2].flat_text().contains("<answer>42</answer>"));
    }

    #[test]
    fn serialize_incomplete_chain_errors() {
        let (_store, ctx) = ctx_with_store();
        let mut chain = ReasoningChain::new(ctx.question.clone(), ctx.root_image.clone());
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new("Unclear. ", "Let me zoom in.").unwrap(),
            command: Some(ToolCommand::ZoomIn { factor: None }),
            observation: None,
        });
        assert_eq!(
            serialize_chain(&chain, RenderMode::TrainingRender).unwrap_err(),
            TraceError::IncompleteChain { step: 0 }
        );
    }

    // -- round trip ------------------------------------------------------------

    #[derive(Debug, Clone)]
    enum StepSpec {
        Focus { bbox: [f64; 4], target: Option<String> },
        Zoom { factor: Option<f64> },
        Reuse,
    }

    fn arb_atomic() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "The chart shows several bars. ",
            "The legend is small and dense. ",
            "There are two lines in the plot. ",
            "The top row holds the header. ",
        ])
        .prop_map(str::to_string)
    }

    fn arb_plan(spec: &StepSpec) -> impl Strategy<Value = String> {
        let options: Vec<&str> = match spec {
            StepSpec::Focus { .. } => vec![
                "Let me focus on the region of interest.",
                "I should crop the area around the label.",
            ],
            StepSpec::Zoom { .. } => vec![
                "Let me zoom in for a better view.",
                "I will magnify the whole image.",
            ],
            StepSpec::Reuse => vec![
                "Let me reuse the original image.",
                "I should look closer at the original image.",
            ],
        };
        prop::sample::select(options).prop_map(str::to_string)
    }

    fn arb_step_spec() -> impl Strategy<Value = StepSpec> {
        prop_oneof![
            (0u32..20, 0u32..20, 1u32..20, 1u32..20, prop::option::of(Just("label".to_string())))
                .prop_map(|(x, y, w, h, target)| {
                    let x1 = f64::from(x) / 40.0;
                    let y1 = f64::from(y) / 40.0;
                    let x2 = x1 + f64::from(w) / 40.0;
                    let y2 = y1 + f64::from(h) / 40.0;
                    StepSpec::Focus {
                        bbox: [x1, y1, x2, y2],
                        target,
                    }
                }),
            prop::option::of(prop::sample::select(vec![1.5f64, 2.0, 3.25]))
                .prop_map(|factor| StepSpec::Zoom { factor }),
            Just(StepSpec::Reuse),
        ]
    }

    fn spec_to_command(spec: &StepSpec) -> ToolCommand {
        match spec {
            StepSpec::Focus { bbox, target } => ToolCommand::FocusArea {
                bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
                target: target.clone(),
            },
            StepSpec::Zoom { factor } => ToolCommand::ZoomIn { factor: *factor },
            StepSpec::Reuse => ToolCommand::Reuse,
        }
    }

    #[derive(Debug, Clone)]
    struct ChainSpec {
        steps: Vec<(StepSpec, String, String)>,
        trailing: Option<String>,
        answer: Option<String>,
    }

    fn arb_chain_spec() -> impl Strategy<Value = ChainSpec> {
        let step = arb_step_spec().prop_flat_map(|spec| {
            let plan = arb_plan(&spec);
            (Just(spec), arb_atomic(), plan)
        });
        (
            prop::collection::vec(step, 0..4),
            prop::option::of(arb_atomic()),
            prop::option::of(prop::sample::select(vec!["A", "B", "42", "blue"])),
        )
            .prop_map(|(steps, trailing, answer)| ChainSpec {
                steps,
                trailing,
                answer: answer.map(str::to_string),
            })
            .prop_filter("chain must end in something", |c| {
                c.answer.is_some() || c.trailing.is_some() || !c.steps.is_empty()
            })
    }

    fn build_chain(spec: &ChainSpec) -> (ImageStore, ReasoningChain) {
        let store = ImageStore::new();
        let root = store.add_original(flat(64, 48, 128)).unwrap();
        let mut chain = ReasoningChain::new("What is in the chart?", root.clone());
        for (i, (step_spec, atomic, plan)) in spec.steps.iter().enumerate() {
            let cmd = spec_to_command(step_spec);
            let obs = store
                .add_derived(flat(56, 56, 40 + i as u8), cmd.name(), &root)
                .unwrap();
            chain.steps.push(ReasoningStep {
                content: ReasoningContent::new(atomic.clone(), plan.clone()).unwrap(),
                command: Some(cmd),
                observation: Some(obs),
            });
        }
        if let Some(trailing) = &spec.trailing {
            chain.steps.push(ReasoningStep {
                content: ReasoningContent::new(trailing.clone(), "").unwrap(),
                command: None,
                observation: None,
            });
        }
        chain.answer = spec.answer.clone();
        (store, chain)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn training_render_round_trips(spec in arb_chain_spec()) {
            let (_store, chain) = build_chain(&spec);
            let body = serialize_chain(&chain, RenderMode::TrainingRender)
                .unwrap()
                .into_training_body();
            let images: Vec<ImageState> =
                chain.observations().into_iter().cloned().collect();
            let ctx = TraceContext::new(chain.question.clone(), chain.root_image.clone());
            let parsed = parse_trace(&body, &images, &ctx).unwrap();
            prop_assert_eq!(parsed, chain);
        }
    }
}
