//! SFT data synthesis: seed-driven chain generation with immediate
//! verification.
//!
//! For each seed (question, image, ground-truth answer) a generator model
//! is driven turn by turn. Every tool step is verified the moment its
//! observation exists — region checks against an independent verifier box
//! for `focus_area`, a semantic yes/no for `zoom_in`/`reuse` — and the
//! final answer is graded against the ground truth. Any failed check
//! restarts the whole attempt; a seed gets [`GenConfig::max_attempts`]
//! attempts before it is rejected. Accepted chains carry the hash of the
//! prompt-template set that produced them.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    ChainError, CoordinateConvention, ReasoningChain, ReasoningChainRecord, ReasoningStep, ToolName,
};
use crate::dialogue::{Dialogue, Part};
use crate::gateway::{complete, ChatBackend, GatewayError};
use crate::geometry::BBox as GenericBBox;
use crate::image_store::{ImageError, ImageState, ImageStore};
use crate::templates::{fill, TemplateSet, BUILTIN};
use crate::trace::{
    function_block, parse_model_reply, reasoning_block, ReplyAction, OBSERVATION_CLOSE,
    OBSERVATION_OPEN,
};
use crate::toolbox::{
    apply_tool, load_prepared, PixelBudget, ToolMode, ToolOptions, ToolboxError,
};
use crate::BBox;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("toolbox: {0}")]
    Toolbox(#[from] ToolboxError),
    #[error("chain: {0}")]
    Chain(#[from] ChainError),
    #[error("seed manifest: {0}")]
    Seed(String),
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// One synthesis seed: a question about an image with a trusted answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedTriplet {
    pub id: String,
    pub question: String,
    /// Image path, resolved relative to the manifest location.
    pub image: PathBuf,
    pub answer: String,
    /// Corpus source tag used by curation; defaults to the manifest stem.
    #[serde(default)]
    pub source: Option<String>,
}

/// Loads a line-delimited JSON seed manifest. Blank lines are skipped;
/// ids must be unique and fields nonempty.
pub fn load_seeds(path: &Path) -> Result<Vec<SeedTriplet>, PipelineError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Seed(format!("cannot read {}: {e}", path.display())))?;
    let mut seeds = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seed: SeedTriplet = serde_json::from_str(line)
            .map_err(|e| PipelineError::Seed(format!("line {}: {e}", lineno + 1)))?;
        if seed.id.trim().is_empty() || seed.question.trim().is_empty() {
            return Err(PipelineError::Seed(format!(
                "line {}: id and question must be nonempty",
                lineno + 1
            )));
        }
        if !seen.insert(seed.id.clone()) {
            return Err(PipelineError::Seed(format!(
                "line {}: duplicate seed id {:?}",
                lineno + 1,
                seed.id
            )));
        }
        seeds.push(seed);
    }
    Ok(seeds)
}

// ---------------------------------------------------------------------------
// Configuration and outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Maximum tool steps per chain.
    pub max_steps: usize,
    /// Whole-chain attempts per seed before rejection.
    pub max_attempts: u32,
    /// IoU at or above which a focus box counts as matching the
    /// verifier's target box (containment also accepts).
    pub iou_match_threshold: f64,
    pub budget: PixelBudget,
    pub convention: CoordinateConvention,
    /// Tool semantics used while executing generated calls. Training data
    /// wants `Train` (markup preserves full context); `Infer` is an
    /// operator override for ablations.
    pub tool_mode: ToolMode,
    pub options: ToolOptions,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            max_attempts: 2,
            iou_match_threshold: 0.95,
            budget: PixelBudget::training(),
            convention: CoordinateConvention::Normalized,
            tool_mode: ToolMode::Train,
            options: ToolOptions::default(),
        }
    }
}

/// The three model roles used during synthesis.
pub struct PipelineBackends {
    pub generator: Arc<dyn ChatBackend>,
    pub tool_verifier: Arc<dyn ChatBackend>,
    pub answer_verifier: Arc<dyn ChatBackend>,
}

/// Verdict for one verified tool step, kept for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepVerdict {
    pub step_index: usize,
    pub tool: ToolName,
    pub passed: bool,
    pub reason: String,
}

/// An accepted, fully verified chain.
#[derive(Debug, Clone)]
pub struct VerifiedSample {
    pub seed_id: String,
    pub ground_truth: String,
    pub chain: ReasoningChain,
    pub attempts: u32,
    pub template_hash: String,
    pub tool_verdicts: Vec<StepVerdict>,
}

/// A seed that exhausted its attempt budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub seed_id: String,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug)]
pub enum GenOutcome {
    Accepted(Box<VerifiedSample>),
    Rejected(Rejection),
}

/// Serializable form of an accepted sample: the chain as an image-id
/// record plus generation metadata. Images live separately as
/// content-addressed files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed_id: String,
    pub source: String,
    pub ground_truth: String,
    pub attempts: u32,
    pub template_hash: String,
    pub tool_verdicts: Vec<StepVerdict>,
    pub chain: ReasoningChainRecord,
}

impl SampleRecord {
    pub fn of(sample: &VerifiedSample, source: &str) -> Self {
        Self {
            seed_id: sample.seed_id.clone(),
            source: source.to_string(),
            ground_truth: sample.ground_truth.clone(),
            attempts: sample.attempts,
            template_hash: sample.template_hash.clone(),
            tool_verdicts: sample.tool_verdicts.clone(),
            chain: ReasoningChainRecord::of(&sample.chain),
        }
    }

    /// Reloads the sample, verifying image content digests on the way.
    pub fn hydrate(
        &self,
        store: &ImageStore,
        image_dir: &Path,
    ) -> Result<VerifiedSample, ImageError> {
        let chain = self.chain.hydrate(store, image_dir)?;
        Ok(VerifiedSample {
            seed_id: self.seed_id.clone(),
            ground_truth: self.ground_truth.clone(),
            chain,
            attempts: self.attempts,
            template_hash: self.template_hash.clone(),
            tool_verdicts: self.tool_verdicts.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Dialogue assembly
// ---------------------------------------------------------------------------

/// Builds the generator dialogue for the next step: the question with the
/// root image, followed by the history of prior steps rendered exactly as
/// the dialogue form of the trace grammar.
pub fn gen_step(
    question: &str,
    root: &ImageState,
    history: &[ReasoningStep],
    templates: &TemplateSet,
) -> Dialogue {
    let mut dialogue = Dialogue::new(templates.generator_system);
    dialogue.push_user_parts(vec![
        Part::Text {
            text: question.to_string(),
        },
        Part::Image {
            image: root.clone(),
        },
    ]);
    for step in history {
        let mut text = reasoning_block(&step.content);
        if let Some(cmd) = &step.command {
            text.push_str(&function_block(cmd));
        }
        dialogue.push_assistant_text(text);
        if let Some(obs) = &step.observation {
            dialogue.push_tool_observation(OBSERVATION_OPEN, obs.clone(), OBSERVATION_CLOSE);
        }
    }
    dialogue
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

const VERIFIER_UNAVAILABLE: &str = "verifier-unavailable";

fn parse_verifier_bbox(reply: &str) -> Option<BBox> {
    let start = reply.find('[')?;
    let end = reply[start..].find(']')? + start;
    let raw: [f64; 4] = serde_json::from_str(&reply[start..=end]).ok()?;
    GenericBBox::clamp(raw).ok()
}

fn yes_no(reply: &str) -> Option<bool> {
    let norm = reply.trim().to_ascii_lowercase();
    if norm.starts_with("yes") {
        Some(true)
    } else if norm.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

/// Verifies one executed tool step. `focus_area` asks the verifier for the
/// target box on the root image and accepts if the model's box contains it
/// or overlaps with IoU at or above the threshold; `zoom_in` and `reuse`
/// ask a yes/no question about the observation versus the stated plan.
/// A verifier backend failure fails the step with reason
/// `verifier-unavailable`.
pub fn verify_tool_step(
    question: &str,
    step: &ReasoningStep,
    root: &ImageState,
    step_index: usize,
    cfg: &GenConfig,
    verifier: &dyn ChatBackend,
    templates: &TemplateSet,
) -> StepVerdict {
    let command = step
        .command
        .as_ref()
        .expect("verify_tool_step requires a tool step");
    let tool = command.name();
    let plan = if step.content.visual_plan.is_empty() {
        step.content.atomic_step.clone()
    } else {
        step.content.visual_plan.clone()
    };
    let verdict = |passed: bool, reason: &str| StepVerdict {
        step_index,
        tool,
        passed,
        reason: reason.to_string(),
    };
    match command.bbox() {
        Some(model_box) => {
            let prompt = fill(
                templates.tool_verifier_focus,
                &[("question", question), ("visual_plan", &plan)],
            );
            let mut dialogue = Dialogue::new("");
            dialogue.push_user_parts(vec![
                Part::Text { text: prompt },
                Part::Image {
                    image: root.clone(),
                },
            ]);
            let reply = match complete(&dialogue, verifier) {
                Ok(reply) => reply,
                Err(_) => return verdict(false, VERIFIER_UNAVAILABLE),
            };
            let Some(target) = parse_verifier_bbox(&reply) else {
                return verdict(false, "verifier-reply-malformed");
            };
            let iou = model_box.iou(&target);
            if model_box.contains(&target) {
                verdict(true, "target-contained")
            } else if iou >= cfg.iou_match_threshold {
                verdict(true, "iou-match")
            } else {
                verdict(false, &format!("target-missed (iou {iou:.3})"))
            }
        }
        None => {
            let observation = step
                .observation
                .as_ref()
                .expect("verify_tool_step requires an executed step");
            let prompt = fill(
                templates.tool_verifier_semantic,
                &[
                    ("question", question),
                    ("visual_plan", &plan),
                    ("tool", tool.as_str()),
                ],
            );
            let mut dialogue = Dialogue::new("");
            dialogue.push_user_parts(vec![
                Part::Text { text: prompt },
                Part::Image {
                    image: observation.clone(),
                },
            ]);
            let reply = match complete(&dialogue, verifier) {
                Ok(reply) => reply,
                Err(_) => return verdict(false, VERIFIER_UNAVAILABLE),
            };
            match yes_no(&reply) {
                Some(true) => verdict(true, "verifier-approved"),
                Some(false) => verdict(false, "verifier-rejected"),
                None => verdict(false, "verifier-reply-malformed"),
            }
        }
    }
}

/// Grades the final answer against the seed's ground truth. Returns the
/// failure reason when not accepted.
pub fn verify_answer(
    question: &str,
    ground_truth: &str,
    answer: &str,
    verifier: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<(), String> {
    let prompt = fill(
        templates.answer_verifier,
        &[
            ("question", question),
            ("ground_truth", ground_truth),
            ("answer", answer),
        ],
    );
    let mut dialogue = Dialogue::new("");
    dialogue.push_user_text(prompt);
    let reply = match complete(&dialogue, verifier) {
        Ok(reply) => reply,
        Err(_) => return Err(VERIFIER_UNAVAILABLE.to_string()),
    };
    match yes_no(&reply) {
        Some(true) => Ok(()),
        Some(false) => Err("answer-rejected".to_string()),
        None => Err("verifier-reply-malformed".to_string()),
    }
}

// ---------------------------------------------------------------------------
// Chain generation
// ---------------------------------------------------------------------------

enum AttemptEnd {
    Accepted(Box<VerifiedSample>),
    Failed(String),
}

fn run_attempt(
    store: &ImageStore,
    seed: &SeedTriplet,
    root: &ImageState,
    cfg: &GenConfig,
    backends: &PipelineBackends,
    templates: &TemplateSet,
    attempt: u32,
) -> Result<AttemptEnd, PipelineError> {
    let mut history: Vec<ReasoningStep> = Vec::new();
    let mut verdicts: Vec<StepVerdict> = Vec::new();
    loop {
        let dialogue = gen_step(&seed.question, root, &history, templates);
        let reply_text = complete(&dialogue, backends.generator.as_ref())?;
        let reply = match parse_model_reply(
            &reply_text,
            cfg.convention,
            (root.width(), root.height()),
        ) {
            Ok(reply) => reply,
            Err(e) => return Ok(AttemptEnd::Failed(format!("malformed-reply: {e}"))),
        };
        match reply.action {
            ReplyAction::ToolCall(cmd) => {
                if history.len() >= cfg.max_steps {
                    return Ok(AttemptEnd::Failed("step-budget-exhausted".into()));
                }
                let Some(content) = reply.reasoning else {
                    return Ok(AttemptEnd::Failed("missing-reasoning".into()));
                };
                let observation = match apply_tool(
                    store,
                    root,
                    &cmd,
                    cfg.tool_mode,
                    &cfg.budget,
                    &cfg.options,
                ) {
                    Ok(obs) => obs,
                    Err(e) => return Ok(AttemptEnd::Failed(format!("tool-error: {e}"))),
                };
                let step = ReasoningStep {
                    content,
                    command: Some(cmd),
                    observation: Some(observation),
                };
                let verdict = verify_tool_step(
                    &seed.question,
                    &step,
                    root,
                    history.len(),
                    cfg,
                    backends.tool_verifier.as_ref(),
                    templates,
                );
                if !verdict.passed {
                    return Ok(AttemptEnd::Failed(format!(
                        "step-{}-{}: {}",
                        verdict.step_index,
                        verdict.tool.as_str(),
                        verdict.reason
                    )));
                }
                verdicts.push(verdict);
                history.push(step);
            }
            ReplyAction::Answer(answer) => {
                if let Err(reason) = verify_answer(
                    &seed.question,
                    &seed.answer,
                    &answer,
                    backends.answer_verifier.as_ref(),
                    templates,
                ) {
                    return Ok(AttemptEnd::Failed(reason));
                }
                let mut chain = ReasoningChain::new(seed.question.clone(), root.clone());
                chain.steps = history;
                if let Some(content) = reply.reasoning {
                    chain.steps.push(ReasoningStep {
                        content,
                        command: None,
                        observation: None,
                    });
                }
                chain.answer = Some(answer);
                chain.validate_completed()?;
                return Ok(AttemptEnd::Accepted(Box::new(VerifiedSample {
                    seed_id: seed.id.clone(),
                    ground_truth: seed.answer.clone(),
                    chain,
                    attempts: attempt,
                    template_hash: templates.hash(),
                    tool_verdicts: verdicts,
                })));
            }
            ReplyAction::None => {
                return Ok(AttemptEnd::Failed("no-action".into()));
            }
        }
    }
}

/// Generates one verified chain for a seed whose root image is already
/// prepared (budget-conformant). Verification failures restart the whole
/// attempt; generator/backend hard failures propagate as errors.
pub fn generate_chain(
    store: &ImageStore,
    seed: &SeedTriplet,
    root: &ImageState,
    cfg: &GenConfig,
    backends: &PipelineBackends,
    templates: &TemplateSet,
) -> Result<GenOutcome, PipelineError> {
    let mut last_reason = String::from("no attempts configured");
    for attempt in 1..=cfg.max_attempts {
        match run_attempt(store, seed, root, cfg, backends, templates, attempt)? {
            AttemptEnd::Accepted(sample) => return Ok(GenOutcome::Accepted(sample)),
            AttemptEnd::Failed(reason) => last_reason = reason,
        }
    }
    Ok(GenOutcome::Rejected(Rejection {
        seed_id: seed.id.clone(),
        reason: last_reason,
        attempts: cfg.max_attempts,
    }))
}

/// Loads and budget-prepares a seed's image. Paths resolve relative to
/// `base_dir`.
pub fn prepare_seed(
    store: &ImageStore,
    seed: &SeedTriplet,
    base_dir: &Path,
    cfg: &GenConfig,
) -> Result<ImageState, PipelineError> {
    let path = if seed.image.is_absolute() {
        seed.image.clone()
    } else {
        base_dir.join(&seed.image)
    };
    Ok(load_prepared(store, &path, &cfg.budget, &cfg.options)?)
}

/// Convenience: prepare the seed image, then generate.
pub fn run_seed(
    store: &ImageStore,
    seed: &SeedTriplet,
    base_dir: &Path,
    cfg: &GenConfig,
    backends: &PipelineBackends,
) -> Result<GenOutcome, PipelineError> {
    let root = prepare_seed(store, seed, base_dir, cfg)?;
    generate_chain(store, seed, &root, cfg, backends, &BUILTIN)
}
