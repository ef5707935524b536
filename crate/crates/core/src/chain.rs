//! Reasoning chains: the domain form of a full trace.
//!
//! A chain is `S = {s_0 … s_t, A}`: ordered steps (each an atomic reasoning
//! move, an optional tool command, and the image the tool returned) plus a
//! final answer. Commands are held in canonical normalized coordinates;
//! pixel conventions exist only at the parse and export boundaries.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::image_store::{ImageError, ImageRecord, ImageState, ImageStore, Provenance};
use crate::BBox;

/// The closed visual tool set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    FocusArea,
    ZoomIn,
    Reuse,
}

impl ToolName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ToolName::FocusArea => "focus_area",
            ToolName::ZoomIn => "zoom_in",
            ToolName::Reuse => "reuse",
        }
    }

    pub const ALL: [ToolName; 3] = [ToolName::FocusArea, ToolName::ZoomIn, ToolName::Reuse];
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "focus_area" => Ok(ToolName::FocusArea),
            "zoom_in" => Ok(ToolName::ZoomIn),
            "reuse" => Ok(ToolName::Reuse),
            other => Err(CommandError::UnknownTool(other.to_string())),
        }
    }
}

/// Whether bbox literals in raw trace text are normalized `[0,1]` reals or
/// absolute pixel coordinates of the image the command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateConvention {
    Normalized,
    AbsolutePixels,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("command schema violation: {0}")]
    Schema(String),
    #[error("bad bbox: {0}")]
    Geometry(#[from] GeometryError),
}

/// A validated executable tool command `C_t = (name, params)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum ToolCommand {
    FocusArea {
        bbox: BBox,
        target: Option<String>,
    },
    ZoomIn {
        factor: Option<f64>,
    },
    Reuse,
}

impl ToolCommand {
    pub fn name(&self) -> ToolName {
        match self {
            ToolCommand::FocusArea { .. } => ToolName::FocusArea,
            ToolCommand::ZoomIn { .. } => ToolName::ZoomIn,
            ToolCommand::Reuse => ToolName::Reuse,
        }
    }

    pub fn bbox(&self) -> Option<&BBox> {
        match self {
            ToolCommand::FocusArea { bbox, .. } => Some(bbox),
            _ => None,
        }
    }

    /// Validates a parsed `{"name": …, "params": {…}}` object against the
    /// named tool's schema. Bbox literals are interpreted under
    /// `convention`; absolute coordinates are normalized against
    /// `image_dims` (width, height) immediately.
    pub fn from_json_value(
        value: &Value,
        convention: CoordinateConvention,
        image_dims: (u32, u32),
    ) -> Result<Self, CommandError> {
        let obj = value
            .as_object()
            .ok_or_else(|| CommandError::Schema("command must be an object".into()))?;
        for key in obj.keys() {
            if key != "name" && key != "params" {
                return Err(CommandError::Schema(format!("unexpected key `{key}`")));
            }
        }
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| CommandError::Schema("missing string `name`".into()))?;
        let tool: ToolName = name.parse()?;
        let params = obj
            .get("params")
            .ok_or_else(|| CommandError::Schema("missing `params` object".into()))?
            .as_object()
            .ok_or_else(|| CommandError::Schema("`params` must be an object".into()))?;

        match tool {
            ToolName::FocusArea => {
                check_keys(params, &["bbox", "target"], &["bbox"])?;
                let bbox = parse_bbox(params.get("bbox").expect("checked"), convention, image_dims)?;
                let target = match params.get("target") {
                    None => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(_) => {
                        return Err(CommandError::Schema("`target` must be a string".into()))
                    }
                };
                Ok(ToolCommand::FocusArea { bbox, target })
            }
            ToolName::ZoomIn => {
                check_keys(params, &["factor"], &[])?;
                let factor = match params.get("factor") {
                    None => None,
                    Some(v) => {
                        let f = v
                            .as_f64()
                            .ok_or_else(|| CommandError::Schema("`factor` must be a number".into()))?;
                        if !(f > 1.0) || !f.is_finite() {
                            return Err(CommandError::Schema(format!(
                                "`factor` must be a finite number > 1, got {f}"
                            )));
                        }
                        Some(f)
                    }
                };
                Ok(ToolCommand::ZoomIn { factor })
            }
            ToolName::Reuse => {
                check_keys(params, &[], &[])?;
                Ok(ToolCommand::Reuse)
            }
        }
    }

    /// Canonical object form under the given convention. `AbsolutePixels`
    /// rounds against `image_dims` — the budget-resized dimensions of the
    /// image the command operated on.
    pub fn to_json_value(&self, convention: CoordinateConvention, image_dims: (u32, u32)) -> Value {
        match self {
            ToolCommand::FocusArea { bbox, target } => {
                let coords: Value = match convention {
                    CoordinateConvention::Normalized => json!(bbox),
                    CoordinateConvention::AbsolutePixels => {
                        let (w, h) = (f64::from(image_dims.0), f64::from(image_dims.1));
                        let [x1, y1, x2, y2] = bbox.to_array();
                        json!([
                            (x1 * w).round() as i64,
                            (y1 * h).round() as i64,
                            (x2 * w).round() as i64,
                            (y2 * h).round() as i64,
                        ])
                    }
                };
                let mut params = Map::new();
                params.insert("bbox".into(), coords);
                if let Some(t) = target {
                    params.insert("target".into(), Value::String(t.clone()));
                }
                json!({"name": "focus_area", "params": params})
            }
            ToolCommand::ZoomIn { factor } => {
                let mut params = Map::new();
                if let Some(f) = factor {
                    params.insert("factor".into(), json!(f));
                }
                json!({"name": "zoom_in", "params": params})
            }
            ToolCommand::Reuse => json!({"name": "reuse", "params": {}}),
        }
    }

    /// Canonical serialized text (normalized coordinates), as emitted
    /// between `<function>` tags.
    pub fn to_canonical_text(&self) -> String {
        self.to_json_value(CoordinateConvention::Normalized, (1, 1))
            .to_string()
    }
}

// Serde round-trips through the canonical object form so records carry the
// same shape as trace text.
impl From<ToolCommand> for Value {
    fn from(cmd: ToolCommand) -> Value {
        cmd.to_json_value(CoordinateConvention::Normalized, (1, 1))
    }
}

impl TryFrom<Value> for ToolCommand {
    type Error = CommandError;

    fn try_from(value: Value) -> Result<Self, CommandError> {
        ToolCommand::from_json_value(&value, CoordinateConvention::Normalized, (1, 1))
    }
}

fn check_keys(
    params: &Map<String, Value>,
    allowed: &[&str],
    required: &[&str],
) -> Result<(), CommandError> {
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(CommandError::Schema(format!("unexpected param `{key}`")));
        }
    }
    for key in required {
        if !params.contains_key(*key) {
            return Err(CommandError::Schema(format!("missing param `{key}`")));
        }
    }
    Ok(())
}

fn parse_bbox(
    value: &Value,
    convention: CoordinateConvention,
    image_dims: (u32, u32),
) -> Result<BBox, CommandError> {
    let arr = value
        .as_array()
        .ok_or_else(|| CommandError::Schema("`bbox` must be a 4-array".into()))?;
    if arr.len() != 4 {
        return Err(CommandError::Schema(format!(
            "`bbox` must have 4 elements, got {}",
            arr.len()
        )));
    }
    let mut raw = [0f64; 4];
    for (i, v) in arr.iter().enumerate() {
        raw[i] = v
            .as_f64()
            .ok_or_else(|| CommandError::Schema("`bbox` elements must be numbers".into()))?;
    }
    if convention == CoordinateConvention::AbsolutePixels {
        let (w, h) = (f64::from(image_dims.0), f64::from(image_dims.1));
        raw = [raw[0] / w, raw[1] / h, raw[2] / w, raw[3] / h];
    }
    Ok(BBox::clamp(raw)?)
}

/// `R_t = (r_t, p_t)`: one atomic deduction plus the visual plan naming the
/// next intended image operation (empty when no tool follows).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningContent {
    pub atomic_step: String,
    pub visual_plan: String,
}

impl ReasoningContent {
    pub fn new(
        atomic_step: impl Into<String>,
        visual_plan: impl Into<String>,
    ) -> Result<Self, ChainError> {
        let content = Self {
            atomic_step: atomic_step.into(),
            visual_plan: visual_plan.into(),
        };
        content.validate()?;
        Ok(content)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.atomic_step.trim().is_empty() {
            return Err(ChainError::EmptyAtomicStep);
        }
        Ok(())
    }

    /// The reasoning body as it appears between `<reasoning>` tags.
    pub fn body(&self) -> String {
        if self.visual_plan.is_empty() {
            self.atomic_step.clone()
        } else {
            format!("{}{}", self.atomic_step, self.visual_plan)
        }
    }
}

/// `s_t = (R_t, C_t, I_t)`. The trailing reasoning before an `<answer>` is
/// carried as a step with no command; tool steps have both command and
/// observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReasoningStep {
    pub content: ReasoningContent,
    pub command: Option<ToolCommand>,
    pub observation: Option<ImageState>,
}

impl ReasoningStep {
    pub fn is_tool_step(&self) -> bool {
        self.command.is_some()
    }
}

/// `S = {s_0, …, s_t, A}` with the root image `I`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReasoningChain {
    pub question: String,
    pub root_image: ImageState,
    pub steps: Vec<ReasoningStep>,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("atomic reasoning step is empty")]
    EmptyAtomicStep,
    #[error("step {0}: observation present iff command present is violated")]
    ObservationCommandMismatch(usize),
    #[error("step {0}: observation provenance does not reach the root image")]
    UnreachableProvenance(usize),
    #[error("completed chain must have a nonempty answer")]
    MissingAnswer,
}

impl ReasoningChain {
    pub fn new(question: impl Into<String>, root_image: ImageState) -> Self {
        Self {
            question: question.into(),
            root_image,
            steps: Vec::new(),
            answer: None,
        }
    }

    /// Number of tool-executing steps (function segments).
    pub fn tool_step_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_tool_step()).count()
    }

    pub fn is_completed(&self) -> bool {
        self.answer.as_deref().is_some_and(|a| !a.trim().is_empty())
    }

    /// Structural validation: the observation/command pairing per step and
    /// provenance reachability of every observation from the root image
    /// (directly or through a prior observation).
    pub fn validate(&self) -> Result<(), ChainError> {
        let mut known_ids = vec![self.root_image.id().clone()];
        for (i, step) in self.steps.iter().enumerate() {
            step.content.validate()?;
            if step.command.is_some() != step.observation.is_some() {
                return Err(ChainError::ObservationCommandMismatch(i));
            }
            if let Some(obs) = &step.observation {
                match obs.provenance() {
                    Provenance::Derived { parent, .. } if known_ids.contains(parent) => {}
                    _ => return Err(ChainError::UnreachableProvenance(i)),
                }
                known_ids.push(obs.id().clone());
            }
        }
        Ok(())
    }

    /// Validation for accepted/terminal chains: structure plus a nonempty
    /// answer.
    pub fn validate_completed(&self) -> Result<(), ChainError> {
        self.validate()?;
        if !self.is_completed() {
            return Err(ChainError::MissingAnswer);
        }
        Ok(())
    }

    /// Observation images in step order.
    pub fn observations(&self) -> Vec<&ImageState> {
        self.steps
            .iter()
            .filter_map(|s| s.observation.as_ref())
            .collect()
    }
}

/// Serialized (deserializable) form of a step; see [`ReasoningChainRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStepRecord {
    pub content: ReasoningContent,
    pub command: Option<ToolCommand>,
    pub observation: Option<ImageRecord>,
}

/// Serialized form of a chain: image pixels live in the content-addressed
/// directory; rehydrate with [`ReasoningChainRecord::hydrate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChainRecord {
    pub question: String,
    pub root_image: ImageRecord,
    pub steps: Vec<ReasoningStepRecord>,
    pub answer: Option<String>,
}

impl ReasoningChainRecord {
    pub fn of(chain: &ReasoningChain) -> Self {
        Self {
            question: chain.question.clone(),
            root_image: ImageRecord::of(&chain.root_image),
            steps: chain
                .steps
                .iter()
                .map(|s| ReasoningStepRecord {
                    content: s.content.clone(),
                    command: s.command.clone(),
                    observation: s.observation.as_ref().map(ImageRecord::of),
                })
                .collect(),
            answer: chain.answer.clone(),
        }
    }

    pub fn hydrate(&self, store: &ImageStore, image_dir: &Path) -> Result<ReasoningChain, ImageError> {
        let root_image = store.hydrate(&self.root_image, image_dir)?;
        let mut steps = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let observation = match &step.observation {
                Some(rec) => Some(store.hydrate(rec, image_dir)?),
                None => None,
            };
            steps.push(ReasoningStep {
                content: step.content.clone(),
                command: step.command.clone(),
                observation,
            });
        }
        Ok(ReasoningChain {
            question: self.question.clone(),
            root_image,
            steps,
            answer: self.answer.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn flat(w: u32, h: u32, level: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([level, level, level]))
    }

    #[test]
    fn reuse_command_parses_and_round_trips() {
        let v: Value = serde_json::from_str(r#"{"name":"reuse","params":{}}"#).unwrap();
        let cmd =
            ToolCommand::from_json_value(&v, CoordinateConvention::Normalized, (1, 1)).unwrap();
        assert_eq!(cmd, ToolCommand::Reuse);
        assert_eq!(cmd.to_canonical_text(), r#"{"name":"reuse","params":{}}"#);
    }

    #[test]
    fn focus_area_parses_with_schema_validation() {
        let v: Value =
            serde_json::from_str(r#"{"name":"focus_area","params":{"bbox":[0.1,0.2,0.6,0.8]}}"#)
                .unwrap();
        let cmd =
            ToolCommand::from_json_value(&v, CoordinateConvention::Normalized, (1, 1)).unwrap();
        let bbox = cmd.bbox().unwrap();
        assert_eq!(bbox.to_array(), [0.1, 0.2, 0.6, 0.8]);
    }

    #[test]
    fn unknown_tool_is_rejected() {
        let v: Value = serde_json::from_str(r#"{"name":"rotate","params":{}}"#).unwrap();
        let err = ToolCommand::from_json_value(&v, CoordinateConvention::Normalized, (1, 1))
            .unwrap_err();
        assert!(matches!(err, CommandError::UnknownTool(name) if name == "rotate"));
    }

    #[test]
    fn extra_and_missing_params_are_schema_errors() {
        let extra: Value =
            serde_json::from_str(r#"{"name":"reuse","params":{"bbox":[0,0,1,1]}}"#).unwrap();
        assert!(matches!(
            ToolCommand::from_json_value(&extra, CoordinateConvention::Normalized, (1, 1)),
            Err(CommandError::Schema(_))
        ));
        let missing: Value = serde_json::from_str(r#"{"name":"focus_area","params":{}}"#).unwrap();
        assert!(matches!(
            ToolCommand::from_json_value(&missing, CoordinateConvention::Normalized, (1, 1)),
            Err(CommandError::Schema(_))
        ));
    }

    #[test]
    fn absolute_coordinates_normalize_against_image_dims() {
        let v: Value =
            serde_json::from_str(r#"{"name":"focus_area","params":{"bbox":[200,150,600,450]}}"#)
                .unwrap();
        let cmd =
            ToolCommand::from_json_value(&v, CoordinateConvention::AbsolutePixels, (800, 600))
                .unwrap();
        assert_eq!(cmd.bbox().unwrap().to_array(), [0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn absolute_serialization_rounds_to_integers() {
        let cmd = ToolCommand::FocusArea {
            bbox: BBox::new(0.5, 0.5, 1.0, 1.0).unwrap(),
            target: None,
        };
        let v = cmd.to_json_value(CoordinateConvention::AbsolutePixels, (896, 896));
        assert_eq!(v["params"]["bbox"], json!([448, 448, 896, 896]));
    }

    #[test]
    fn zoom_factor_must_exceed_one() {
        let bad: Value =
            serde_json::from_str(r#"{"name":"zoom_in","params":{"factor":1.0}}"#).unwrap();
        assert!(matches!(
            ToolCommand::from_json_value(&bad, CoordinateConvention::Normalized, (1, 1)),
            Err(CommandError::Schema(_))
        ));
        let ok: Value =
            serde_json::from_str(r#"{"name":"zoom_in","params":{"factor":2.5}}"#).unwrap();
        let cmd = ToolCommand::from_json_value(&ok, CoordinateConvention::Normalized, (1, 1))
            .unwrap();
        assert_eq!(cmd, ToolCommand::ZoomIn { factor: Some(2.5) });
    }

    #[test]
    fn degenerate_bbox_surfaces_geometry_error() {
        let v: Value =
            serde_json::from_str(r#"{"name":"focus_area","params":{"bbox":[0.5,0.5,0.5,0.9]}}"#)
                .unwrap();
        assert!(matches!(
            ToolCommand::from_json_value(&v, CoordinateConvention::Normalized, (1, 1)),
            Err(CommandError::Geometry(GeometryError::DegenerateBox))
        ));
    }

    #[test]
    fn chain_validation_enforces_step_pairing_and_provenance() {
        let store = ImageStore::new();
        let root = store.add_original(flat(64, 48, 128)).unwrap();
        let obs = store
            .add_derived(flat(56, 56, 90), ToolName::Reuse, &root)
            .unwrap();

        let mut chain = ReasoningChain::new("What is shown?", root.clone());
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new("Look again. ", "I will reuse the original image.")
                .unwrap(),
            command: Some(ToolCommand::Reuse),
            observation: Some(obs),
        });
        chain.answer = Some("a grid".into());
        chain.validate_completed().unwrap();
        assert_eq!(chain.tool_step_count(), 1);

        // Command without observation violates the iff pairing.
        chain.steps[0].observation = None;
        assert_eq!(
            chain.validate(),
            Err(ChainError::ObservationCommandMismatch(0))
        );
    }

    #[test]
    fn foreign_observation_fails_reachability() {
        let store = ImageStore::new();
        let root = store.add_original(flat(64, 48, 128)).unwrap();
        let stranger = store.add_original(flat(32, 32, 10)).unwrap();
        let foreign_obs = store
            .add_derived(flat(28, 28, 5), ToolName::FocusArea, &stranger)
            .unwrap();
        let mut chain = ReasoningChain::new("Q", root);
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new("Check the corner. ", "Let me focus on the corner.")
                .unwrap(),
            command: Some(ToolCommand::Reuse),
            observation: Some(foreign_obs),
        });
        assert_eq!(chain.validate(), Err(ChainError::UnreachableProvenance(0)));
    }

    #[test]
    fn chain_record_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new();
        let root = store.add_original(flat(64, 48, 128)).unwrap();
        let obs = store
            .add_derived(flat(56, 56, 90), ToolName::ZoomIn, &root)
            .unwrap();
        store.persist(&root, dir.path()).unwrap();
        store.persist(&obs, dir.path()).unwrap();

        let mut chain = ReasoningChain::new("How many squares?", root);
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new("Too small to count. ", "Zoom in to see the squares.")
                .unwrap(),
            command: Some(ToolCommand::ZoomIn { factor: Some(2.0) }),
            observation: Some(obs),
        });
        chain.answer = Some("16".into());

        let record = ReasoningChainRecord::of(&chain);
        let json = serde_json::to_string(&record).unwrap();
        let back: ReasoningChainRecord = serde_json::from_str(&json).unwrap();
        let fresh = ImageStore::new();
        let rehydrated = back.hydrate(&fresh, dir.path()).unwrap();
        assert_eq!(rehydrated, chain);
        rehydrated.validate_completed().unwrap();
    }
}
