//! Multi-turn inference: drive a model against a question and image,
//! executing visual tool calls until it answers or the round budget ends.
//!
//! Each backend reply is consumed stream-wise up to its first completed
//! action: a closed `<function>` block executes the tool (inference
//! semantics) and feeds the observation back as a tool turn; a closed
//! `<answer>` block ends the run. Rounds count tool *executions* only.
//! Once `max_rounds` tools have run, an additional function call is not
//! executed; depending on policy the run either returns partial or makes
//! one final forced-answer probe. Total backend calls are therefore
//! bounded by `max_rounds + 2`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{CoordinateConvention, ReasoningChain, ReasoningStep};
use crate::dialogue::{Dialogue, Part};
use crate::gateway::{complete, ChatBackend, GatewayError};
use crate::image_store::{ImageError, ImageState, ImageStore};
use crate::templates::TemplateSet;
use crate::toolbox::{apply_tool, PixelBudget, ToolMode, ToolOptions, ToolboxError};
use crate::trace::{
    parse_model_reply, scan_stream, ReplyAction, StreamEvent, OBSERVATION_CLOSE, OBSERVATION_OPEN,
};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("toolbox: {0}")]
    Toolbox(#[from] ToolboxError),
    #[error("eval manifest: {0}")]
    Eval(String),
}

/// What to do when the model asks for a tool beyond the round budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundLimitPolicy {
    /// Return the partial chain without an answer.
    ReturnPartial,
    /// Ask once more for a direct answer before giving up.
    ForceAnswerProbe,
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    /// Maximum tool executions per question.
    pub max_rounds: usize,
    pub on_round_limit: RoundLimitPolicy,
    pub budget: PixelBudget,
    pub convention: CoordinateConvention,
    /// Tool semantics for executed calls; inference wants `Infer`
    /// (crops), `Train` is an operator override.
    pub tool_mode: ToolMode,
    pub options: ToolOptions,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            max_rounds: 6,
            on_round_limit: RoundLimitPolicy::ForceAnswerProbe,
            budget: PixelBudget::med(),
            convention: CoordinateConvention::Normalized,
            tool_mode: ToolMode::Infer,
            options: ToolOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    /// The model answered; `forced` marks answers elicited by the probe.
    Answered { forced: bool },
    /// Round budget exhausted without an answer.
    RoundLimit,
    /// The model produced output the runtime could not act on.
    Malformed { reason: String },
}

#[derive(Debug)]
pub struct FinalResponse {
    /// The chain as far as it got; `answer` is `None` unless answered.
    pub chain: ReasoningChain,
    pub status: RunStatus,
    /// Tool executions performed.
    pub rounds_used: usize,
    /// Backend completions made (bounded by `max_rounds + 2`).
    pub calls: usize,
}

fn finish(
    mut chain: ReasoningChain,
    status: RunStatus,
    rounds_used: usize,
    calls: usize,
    answer: Option<String>,
    trailing: Option<ReasoningStep>,
) -> FinalResponse {
    if let Some(step) = trailing {
        chain.steps.push(step);
    }
    chain.answer = answer;
    FinalResponse {
        chain,
        status,
        rounds_used,
        calls,
    }
}

/// Runs the interleaved inference loop for one question over a prepared
/// root image.
pub fn run(
    store: &ImageStore,
    question: &str,
    root: &ImageState,
    cfg: &DriverConfig,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<FinalResponse, DriverError> {
    let mut dialogue = Dialogue::new(templates.inference_system);
    dialogue.push_user_parts(vec![
        Part::Text {
            text: question.to_string(),
        },
        Part::Image {
            image: root.clone(),
        },
    ]);
    let mut chain = ReasoningChain::new(question, root.clone());
    let mut rounds = 0usize;
    let mut calls = 0usize;
    let mut probed = false;

    loop {
        debug_assert!(calls < cfg.max_rounds + 2, "call budget exceeded");
        let reply = complete(&dialogue, backend)?;
        calls += 1;
        let (event, _) = scan_stream(reply.as_bytes(), 0);
        match event {
            StreamEvent::AnswerClosed { span, .. } => {
                let consumed = &reply[..span.1];
                let parsed = match parse_model_reply(
                    consumed,
                    cfg.convention,
                    (root.width(), root.height()),
                ) {
                    Ok(parsed) => parsed,
                    Err(e) => {
                        return Ok(finish(
                            chain,
                            RunStatus::Malformed {
                                reason: e.to_string(),
                            },
                            rounds,
                            calls,
                            None,
                            None,
                        ))
                    }
                };
                let ReplyAction::Answer(answer) = parsed.action else {
                    unreachable!("AnswerClosed always parses to an answer action");
                };
                let trailing = parsed.reasoning.map(|content| ReasoningStep {
                    content,
                    command: None,
                    observation: None,
                });
                return Ok(finish(
                    chain,
                    RunStatus::Answered { forced: probed },
                    rounds,
                    calls,
                    Some(answer),
                    trailing,
                ));
            }
            StreamEvent::FunctionClosed { span, .. } => {
                let consumed = &reply[..span.1];
                let parsed = match parse_model_reply(
                    consumed,
                    cfg.convention,
                    (root.width(), root.height()),
                ) {
                    Ok(parsed) => parsed,
                    Err(e) => {
                        return Ok(finish(
                            chain,
                            RunStatus::Malformed {
                                reason: e.to_string(),
                            },
                            rounds,
                            calls,
                            None,
                            None,
                        ))
                    }
                };
                let ReplyAction::ToolCall(cmd) = parsed.action else {
                    unreachable!("FunctionClosed always parses to a tool action");
                };
                let Some(content) = parsed.reasoning else {
                    return Ok(finish(
                        chain,
                        RunStatus::Malformed {
                            reason: "tool call without reasoning".into(),
                        },
                        rounds,
                        calls,
                        None,
                        None,
                    ));
                };
                if rounds >= cfg.max_rounds {
                    // Budget gone: this call is not executed.
                    if cfg.on_round_limit == RoundLimitPolicy::ForceAnswerProbe && !probed {
                        probed = true;
                        dialogue.push_assistant_text(consumed.to_string());
                        dialogue.push_user_text(templates.force_answer);
                        continue;
                    }
                    return Ok(finish(chain, RunStatus::RoundLimit, rounds, calls, None, None));
                }
                let observation = match apply_tool(
                    store,
                    root,
                    &cmd,
                    cfg.tool_mode,
                    &cfg.budget,
                    &cfg.options,
                ) {
                    Ok(obs) => obs,
                    Err(e) => {
                        return Ok(finish(
                            chain,
                            RunStatus::Malformed {
                                reason: format!("tool execution failed: {e}"),
                            },
                            rounds,
                            calls,
                            None,
                            None,
                        ))
                    }
                };
                dialogue.push_assistant_text(consumed.to_string());
                dialogue.push_tool_observation(
                    OBSERVATION_OPEN,
                    observation.clone(),
                    OBSERVATION_CLOSE,
                );
                chain.steps.push(ReasoningStep {
                    content,
                    command: Some(cmd),
                    observation: Some(observation),
                });
                rounds += 1;
            }
            StreamEvent::NeedMore => {
                return Ok(finish(
                    chain,
                    RunStatus::Malformed {
                        reason: "reply ended without a completed action".into(),
                    },
                    rounds,
                    calls,
                    None,
                    None,
                ));
            }
            StreamEvent::Malformed { reason, at } => {
                return Ok(finish(
                    chain,
                    RunStatus::Malformed {
                        reason: format!("{reason} at byte {at}"),
                    },
                    rounds,
                    calls,
                    None,
                    None,
                ));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Trimmed byte equality.
    Exact,
    /// Case-, whitespace- and punctuation-insensitive containment of the
    /// expected answer in the given one.
    ContainsNormalized,
}

fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Grades one run. A run without an answer (round limit, malformed) is
/// incorrect.
pub fn score_eval(expected: &str, answer: Option<&str>, matcher: Matcher) -> bool {
    let Some(answer) = answer else {
        return false;
    };
    match matcher {
        Matcher::Exact => answer.trim() == expected.trim(),
        Matcher::ContainsNormalized => normalize(answer).contains(&normalize(expected)),
    }
}

/// One evaluation item: a question about an image with the expected
/// answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub question: String,
    pub image: PathBuf,
    pub expected: String,
}

/// Loads a line-delimited JSON evaluation manifest.
pub fn load_eval(path: &Path) -> Result<Vec<EvalRecord>, DriverError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| DriverError::Eval(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(line)
            .map_err(|e| DriverError::Eval(format!("line {}: {e}", lineno + 1)))?;
        if !seen.insert(record.id.clone()) {
            return Err(DriverError::Eval(format!(
                "line {}: duplicate eval id {:?}",
                lineno + 1,
                record.id
            )));
        }
        records.push(record);
    }
    Ok(records)
}
