//! Training-sequence export: modality masking, coordinate conversion, and
//! proportional corpus curation.
//!
//! A verified chain becomes one line-delimited record: a two-message
//! dialogue (user = question plus the root image pad, assistant = the full
//! training render), the images it references as relative files, and the
//! modality spans over the assistant body. The mask convention is the
//! supervised objective's: text positions carry mask 1 and enter the loss,
//! visual pad positions carry mask 0 and are excluded, so the loss is
//! `-sum_i m_i * log p_i`. Spans are byte ranges over the body; the
//! trainer maps them onto its own token ids.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{CoordinateConvention, ReasoningChain};
use crate::image_store::{ImageError, ImageRecord, ImageState, ImageStore};
use crate::pipeline::VerifiedSample;
use crate::scalar::Coord;
use crate::trace::{
    extract_tool_command, serialize_chain, tokenize, RenderMode, SegmentKind, TraceError,
    FUNCTION_CLOSE, FUNCTION_OPEN, IMAGE_PAD,
};

#[derive(Debug, Error)]
pub enum ExporterError {
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("record schema violation: {0}")]
    Schema(String),
    #[error("curation quota unsatisfiable: {0}")]
    Quota(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Modality masking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

/// One contiguous byte range of the assistant body with a single modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSegment {
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
}

/// A training body plus its modality segmentation. Segments tile the body:
/// the first starts at 0, each starts where the previous ended, the last
/// ends at the body's byte length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub body: String,
    pub segments: Vec<MaskSegment>,
}

impl TrainingSequence {
    pub fn new(body: String) -> Self {
        let segments = compute_mask(&body);
        Self { body, segments }
    }

    /// Per-byte mask: 1 for text positions, 0 for visual pad positions.
    pub fn mask_bits(&self) -> Vec<u8> {
        let mut bits = vec![0u8; self.body.len()];
        for seg in &self.segments {
            let bit = match seg.modality {
                Modality::Text => 1,
                Modality::Visual => 0,
            };
            bits[seg.start..seg.end].fill(bit);
        }
        bits
    }
}

/// Segments a body into text and visual ranges: every `<|image_pad|>`
/// occurrence is visual, everything else is text.
pub fn compute_mask(body: &str) -> Vec<MaskSegment> {
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    let bytes = body.as_bytes();
    let pad = IMAGE_PAD.as_bytes();
    let mut i = 0usize;
    while i + pad.len() <= bytes.len() {
        if &bytes[i..i + pad.len()] == pad {
            if cursor < i {
                segments.push(MaskSegment {
                    modality: Modality::Text,
                    start: cursor,
                    end: i,
                });
            }
            segments.push(MaskSegment {
                modality: Modality::Visual,
                start: i,
                end: i + pad.len(),
            });
            i += pad.len();
            cursor = i;
        } else {
            i += 1;
        }
    }
    if cursor < bytes.len() {
        segments.push(MaskSegment {
            modality: Modality::Text,
            start: cursor,
            end: bytes.len(),
        });
    }
    segments
}

/// Masked negative log-likelihood: `-sum_i m_i * log p_i` over aligned
/// per-position log-probabilities and a 0/1 mask.
pub fn masked_nll<T: Coord>(logprobs: &[T], mask: &[u8]) -> Result<T, ExporterError> {
    if logprobs.len() != mask.len() {
        return Err(ExporterError::Schema(format!(
            "logprobs ({}) and mask ({}) lengths differ",
            logprobs.len(),
            mask.len()
        )));
    }
    let mut total = T::zero();
    for (lp, &m) in logprobs.iter().zip(mask) {
        if m != 0 {
            total = total - *lp;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Coordinate conversion
// ---------------------------------------------------------------------------

/// Rewrites every `<function>` block of a training body from one
/// coordinate convention to the other, relative to the (resized) root
/// image dimensions. All other bytes are preserved verbatim.
pub fn convert_coordinates(
    body: &str,
    from: CoordinateConvention,
    to: CoordinateConvention,
    dims: (u32, u32),
) -> Result<String, ExporterError> {
    if from == to {
        return Ok(body.to_string());
    }
    let segments = tokenize(body)?;
    let mut out = String::with_capacity(body.len());
    for seg in segments {
        match seg.kind {
            SegmentKind::Function => {
                let cmd = extract_tool_command(&seg.body, from, dims)?;
                let rewritten = serde_json::to_string(&cmd.to_json_value(to, dims))
                    .expect("command value always serializes");
                out.push_str(FUNCTION_OPEN);
                out.push_str(&rewritten);
                out.push_str(FUNCTION_CLOSE);
            }
            _ => out.push_str(&body[seg.span.0..seg.span.1]),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Record schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// File name relative to the corpus image directory.
    pub file: String,
    #[serde(flatten)]
    pub record: ImageRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordProvenance {
    pub template_hash: String,
    pub attempts: u32,
    pub tool_steps: usize,
    pub convention: CoordinateConvention,
}

/// One exported training sample, written as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub seed_id: String,
    pub source: String,
    pub question: String,
    pub ground_truth: String,
    pub messages: Vec<MessageRecord>,
    pub images: Vec<ImageEntry>,
    pub spans: Vec<MaskSegment>,
    pub provenance: RecordProvenance,
}

fn count_pads(text: &str) -> usize {
    text.matches(IMAGE_PAD).count()
}

/// Consolidates a chain into the two-message training dialogue: the user
/// message is the question followed by the root image pad; the assistant
/// message is the training render of the whole chain.
pub fn consolidate(chain: &ReasoningChain) -> Result<(Vec<MessageRecord>, Vec<ImageState>), ExporterError> {
    let body = serialize_chain(chain, RenderMode::TrainingRender)?.into_training_body();
    let messages = vec![
        MessageRecord {
            role: "user".into(),
            content: format!("{}\n{IMAGE_PAD}", chain.question),
        },
        MessageRecord {
            role: "assistant".into(),
            content: body,
        },
    ];
    let mut images = vec![chain.root_image.clone()];
    images.extend(chain.observations().into_iter().cloned());
    Ok((messages, images))
}

/// Exports one verified sample: persists its images under `image_dir`
/// (content-addressed, idempotent) and emits the record under the given
/// coordinate convention.
pub fn export_sample(
    sample: &VerifiedSample,
    source: &str,
    store: &ImageStore,
    image_dir: &Path,
    convention: CoordinateConvention,
) -> Result<ExportRecord, ExporterError> {
    let (mut messages, images) = consolidate(&sample.chain)?;
    let dims = (
        sample.chain.root_image.width(),
        sample.chain.root_image.height(),
    );
    if convention == CoordinateConvention::AbsolutePixels {
        let assistant = messages
            .last_mut()
            .expect("consolidate always emits an assistant message");
        assistant.content = convert_coordinates(
            &assistant.content,
            CoordinateConvention::Normalized,
            convention,
            dims,
        )?;
    }
    let mut entries = Vec::with_capacity(images.len());
    for image in &images {
        let file = store.persist(image, image_dir)?;
        entries.push(ImageEntry {
            file,
            record: ImageRecord::of(image),
        });
    }
    let spans = compute_mask(&messages.last().expect("assistant message").content);
    let record = ExportRecord {
        seed_id: sample.seed_id.clone(),
        source: source.to_string(),
        question: sample.chain.question.clone(),
        ground_truth: sample.ground_truth.clone(),
        messages,
        images: entries,
        spans,
        provenance: RecordProvenance {
            template_hash: sample.template_hash.clone(),
            attempts: sample.attempts,
            tool_steps: sample.chain.tool_step_count(),
            convention,
        },
    };
    validate_record(&record)?;
    Ok(record)
}

/// Structural validation of an export record: message roles, pad/image
/// arity, and span tiling over the assistant body.
pub fn validate_record(record: &ExportRecord) -> Result<(), ExporterError> {
    if record.messages.len() != 2
        || record.messages[0].role != "user"
        || record.messages[1].role != "assistant"
    {
        return Err(ExporterError::Schema(
            "record must hold exactly [user, assistant] messages".into(),
        ));
    }
    let total_pads: usize = record.messages.iter().map(|m| count_pads(&m.content)).sum();
    if total_pads != record.images.len() {
        return Err(ExporterError::Schema(format!(
            "pad count {} does not match image count {}",
            total_pads,
            record.images.len()
        )));
    }
    let body = &record.messages[1].content;
    if record.spans != compute_mask(body) {
        return Err(ExporterError::Schema(
            "spans do not tile the assistant body as computed".into(),
        ));
    }
    let mut cursor = 0usize;
    for span in &record.spans {
        if span.start != cursor || span.end <= span.start {
            return Err(ExporterError::Schema("spans must tile contiguously".into()));
        }
        cursor = span.end;
    }
    if cursor != body.len() {
        return Err(ExporterError::Schema("spans must cover the full body".into()));
    }
    Ok(())
}

/// Verifies that every image referenced by a record exists under `dir`
/// with matching content digest.
pub fn validate_record_files(
    record: &ExportRecord,
    store: &ImageStore,
    dir: &Path,
) -> Result<(), ExporterError> {
    for entry in &record.images {
        store.hydrate(&entry.record, dir)?;
    }
    Ok(())
}

/// Writes records as line-delimited JSON.
pub fn write_corpus(records: &[ExportRecord], path: &Path) -> Result<(), ExporterError> {
    let mut out = String::new();
    for record in records {
        out.push_str(
            &serde_json::to_string(record).map_err(|e| ExporterError::Schema(e.to_string()))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads and structurally validates a line-delimited corpus.
pub fn read_corpus(path: &Path) -> Result<Vec<ExportRecord>, ExporterError> {
    let raw = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ExportRecord = serde_json::from_str(line)
            .map_err(|e| ExporterError::Schema(format!("line {}: {e}", lineno + 1)))?;
        validate_record(&record)
            .map_err(|e| ExporterError::Schema(format!("line {}: {e}", lineno + 1)))?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Curation
// ---------------------------------------------------------------------------

/// Weighted share of the curated corpus for one source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceQuota {
    pub source: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationPlan {
    pub total: usize,
    pub quotas: Vec<SourceQuota>,
}

/// Largest-remainder apportionment of `total` across positive weights.
/// Ties on fractional part resolve in input order.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| total as f64 * w / sum)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusItem {
    pub key: String,
    pub source: String,
}

/// Draws a curated subset: exclusions are dropped, each source receives
/// its largest-remainder share of `plan.total`, and members are picked
/// uniformly without replacement under the given seed. The selection is
/// returned in input order. Items from sources absent from the plan are
/// ignored; a quota larger than a source's available items is an error.
pub fn sample_corpus<'a>(
    items: &'a [CorpusItem],
    plan: &CurationPlan,
    exclusions: &HashSet<String>,
    seed: u64,
) -> Result<Vec<&'a CorpusItem>, ExporterError> {
    let weights: Vec<f64> = plan.quotas.iter().map(|q| q.weight).collect();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ExporterError::Quota("weights must be finite and >= 0".into()));
    }
    let counts = apportion(plan.total, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected_indices: Vec<usize> = Vec::with_capacity(plan.total);
    for (quota, want) in plan.quotas.iter().zip(&counts) {
        let mut pool: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, item)| item.source == quota.source && !exclusions.contains(&item.key))
            .map(|(i, _)| i)
            .collect();
        if pool.len() < *want {
            return Err(ExporterError::Quota(format!(
                "source {:?} has {} eligible items, quota is {}",
                quota.source,
                pool.len(),
                want
            )));
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng, *want);
        selected_indices.extend_from_slice(chosen);
    }
    selected_indices.sort_unstable();
    Ok(selected_indices.into_iter().map(|i| &items[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ReasoningContent, ReasoningStep, ToolCommand};
    use crate::geometry::BBox as GenericBBox;
    use crate::toolbox::{apply_tool, prepare_root, PixelBudget, ToolMode, ToolOptions};
    use crate::BBox;
    use image::RgbImage;
    use rand::Rng;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x % 251) as u8, (y % 241) as u8, ((x + y) % 233) as u8])
        })
    }

    fn sample_with_one_step(store: &ImageStore) -> VerifiedSample {
        let root = prepare_root(
            store,
            gradient(448, 448),
            &PixelBudget::training(),
            &ToolOptions::default(),
        )
        .unwrap();
        let bbox = BBox::new(0.125, 0.25, 0.625, 0.75).unwrap();
        let cmd = ToolCommand::FocusArea { bbox, target: None };
        let obs = apply_tool(
            store,
            &root,
            &cmd,
            ToolMode::Train,
            &PixelBudget::training(),
            &ToolOptions::default(),
        )
        .unwrap();
        let mut chain = crate::chain::ReasoningChain::new("How many vents are visible?", root);
        chain.steps.push(ReasoningStep {
            content: ReasoningContent::new(
                "The grille sits in the middle band. I will focus on that region.",
                "",
            )
            .unwrap(),
            command: Some(cmd),
            observation: Some(obs),
        });
        chain.answer = Some("three".into());
        chain.validate_completed().unwrap();
        VerifiedSample {
            seed_id: "seed-9".into(),
            ground_truth: "three".into(),
            chain,
            attempts: 1,
            template_hash: crate::templates::BUILTIN.hash(),
            tool_verdicts: vec![],
        }
    }

    // -- masking -------------------------------------------------------------

    #[test]
    fn mask_tiles_body_and_flags_pads_visual() {
        let body = format!("abc{IMAGE_PAD}def{IMAGE_PAD}");
        let seq = TrainingSequence::new(body.clone());
        assert_eq!(seq.segments.len(), 4);
        assert_eq!(seq.segments[0].modality, Modality::Text);
        assert_eq!(seq.segments[1].modality, Modality::Visual);
        assert_eq!(seq.segments[3].modality, Modality::Visual);
        // Tiling: contiguous from 0 to len.
        let mut cursor = 0;
        for seg in &seq.segments {
            assert_eq!(seg.start, cursor);
            cursor = seg.end;
        }
        assert_eq!(cursor, body.len());
        // Per-byte mask agrees with direct pad scanning.
        let bits = seq.mask_bits();
        for (i, bit) in bits.iter().enumerate() {
            let inside_pad = (3..3 + IMAGE_PAD.len()).contains(&i)
                || (6 + IMAGE_PAD.len()..6 + 2 * IMAGE_PAD.len()).contains(&i);
            assert_eq!(*bit == 0, inside_pad, "byte {i}");
        }
    }

    #[test]
    fn mask_of_pure_text_is_single_text_segment() {
        let segs = compute_mask("no pads here");
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].modality, Modality::Text);
    }

    #[test]
    fn masked_nll_matches_hand_computation() {
        let logprobs = [-0.5f64, -1.25, -2.0, -0.125];
        let mask = [1u8, 0, 1, 1];
        let nll = masked_nll(&logprobs, &mask).unwrap();
        assert!((nll - 2.625).abs() < 1e-12);

        let lp32 = [-0.5f32, -1.25, -2.0, -0.125];
        let nll32: f32 = masked_nll(&lp32, &mask).unwrap();
        assert!((nll32 - 2.625).abs() < 1e-6);

        assert!(masked_nll(&logprobs, &[1u8, 0]).is_err());
    }

    // -- coordinate conversion ------------------------------------------------

    #[test]
    fn convert_rewrites_functions_and_preserves_everything_else() {
        let body = "<reasoning>Look at the lower half. I will focus there.</reasoning><function>{\"name\":\"focus_area\",\"params\":{\"bbox\":[0.1,0.5,0.6,0.9]}}</function><observation><|image_pad|></observation><reasoning>Done.</reasoning><answer>ok</answer>";
        let abs = convert_coordinates(
            body,
            CoordinateConvention::Normalized,
            CoordinateConvention::AbsolutePixels,
            (800, 600),
        )
        .unwrap();
        assert!(abs.contains("[80,300,480,540]"), "abs body: {abs}");
        assert!(abs.contains("<observation><|image_pad|></observation>"));
        assert!(abs.starts_with("<reasoning>Look at the lower half."));
        let back = convert_coordinates(
            &abs,
            CoordinateConvention::AbsolutePixels,
            CoordinateConvention::Normalized,
            (800, 600),
        )
        .unwrap();
        assert_eq!(back, body);
    }

    #[test]
    fn coordinate_round_trip_error_is_bounded_by_pixel_quantum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = (640u32, 480u32);
        let quantum = 1.0 / dims.0.min(dims.1) as f64;
        for _ in 0..1000 {
            let x1: f64 = rng.random_range(0.0..0.9);
            let y1: f64 = rng.random_range(0.0..0.9);
            let x2: f64 = rng.random_range(x1 + 0.05..1.0);
            let y2: f64 = rng.random_range(y1 + 0.05..1.0);
            let bbox = GenericBBox::clamp([x1, y1, x2, y2]).unwrap();
            let cmd = ToolCommand::FocusArea { bbox, target: None };
            let abs = cmd.to_json_value(CoordinateConvention::AbsolutePixels, dims);
            let round =
                ToolCommand::from_json_value(&abs, CoordinateConvention::AbsolutePixels, dims)
                    .unwrap();
            let a = cmd.bbox().unwrap().to_array();
            let b = round.bbox().unwrap().to_array();
            for (orig, rt) in a.iter().zip(&b) {
                assert!(
                    (orig - rt).abs() <= quantum,
                    "coordinate drift {} exceeds {quantum}",
                    (orig - rt).abs()
                );
            }
        }
    }

    // -- records ---------------------------------------------------------------

    #[test]
    fn export_record_round_trips_and_validates() {
        let store = ImageStore::new();
        let sample = sample_with_one_step(&store);
        let dir = tempfile::tempdir().unwrap();
        let record = export_sample(
            &sample,
            "unit",
            &store,
            dir.path(),
            CoordinateConvention::Normalized,
        )
        .unwrap();
        assert_eq!(record.images.len(), 2); // root + one observation
        assert_eq!(
            record
                .messages
                .iter()
                .map(|m| count_pads(&m.content))
                .sum::<usize>(),
            2
        );
        validate_record(&record).unwrap();
        validate_record_files(&record, &store, dir.path()).unwrap();

        let corpus_path = dir.path().join("corpus.jsonl");
        write_corpus(std::slice::from_ref(&record), &corpus_path).unwrap();
        let read_back = read_corpus(&corpus_path).unwrap();
        assert_eq!(read_back.len(), 1);
        assert_eq!(read_back[0], record);
    }

    #[test]
    fn export_under_absolute_convention_emits_integer_boxes() {
        let store = ImageStore::new();
        let sample = sample_with_one_step(&store);
        let dir = tempfile::tempdir().unwrap();
        let record = export_sample(
            &sample,
            "unit",
            &store,
            dir.path(),
            CoordinateConvention::AbsolutePixels,
        )
        .unwrap();
        let body = &record.messages[1].content;
        // 448x448 root: [0.125,0.25,0.625,0.75] -> [56,112,280,336].
        assert!(body.contains("[56,112,280,336]"), "body: {body}");
        assert_eq!(record.provenance.convention, CoordinateConvention::AbsolutePixels);
    }

    #[test]
    fn validator_rejects_pad_image_arity_mismatch() {
        let store = ImageStore::new();
        let sample = sample_with_one_step(&store);
        let dir = tempfile::tempdir().unwrap();
        let mut record = export_sample(
            &sample,
            "unit",
            &store,
            dir.path(),
            CoordinateConvention::Normalized,
        )
        .unwrap();
        record.images.pop();
        assert!(matches!(
            validate_record(&record),
            Err(ExporterError::Schema(_))
        ));
    }

    #[test]
    fn validator_rejects_tampered_spans() {
        let store = ImageStore::new();
        let sample = sample_with_one_step(&store);
        let dir = tempfile::tempdir().unwrap();
        let mut record = export_sample(
            &sample,
            "unit",
            &store,
            dir.path(),
            CoordinateConvention::Normalized,
        )
        .unwrap();
        record.spans[0].end += 1;
        assert!(validate_record(&record).is_err());
    }

    // -- curation ----------------------------------------------------------------

    fn corpus_items() -> Vec<CorpusItem> {
        let mut items = Vec::new();
        for (source, n) in [("charts", 20), ("documents", 20), ("natural", 10)] {
            for i in 0..n {
                items.push(CorpusItem {
                    key: format!("{source}-{i}"),
                    source: source.to_string(),
                });
            }
        }
        items
    }

    fn plan(total: usize) -> CurationPlan {
        CurationPlan {
            total,
            quotas: vec![
                SourceQuota {
                    source: "charts".into(),
                    weight: 0.5,
                },
                SourceQuota {
                    source: "documents".into(),
                    weight: 0.3,
                },
                SourceQuota {
                    source: "natural".into(),
                    weight: 0.2,
                },
            ],
        }
    }

    #[test]
    fn apportion_exact_and_largest_remainder() {
        assert_eq!(apportion(10, &[0.5, 0.3, 0.2]), vec![5, 3, 2]);
        // 10 over equal thirds: 3.33 each, one remainder seat to the first.
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(0, &[1.0, 2.0]), vec![0, 0]);
        // Remainder seats go to the largest fractional parts.
        assert_eq!(apportion(7, &[0.55, 0.25, 0.2]), vec![4, 2, 1]);
    }

    #[test]
    fn sample_corpus_hits_quotas_exactly() {
        let items = corpus_items();
        let chosen = sample_corpus(&items, &plan(10), &HashSet::new(), 42).unwrap();
        assert_eq!(chosen.len(), 10);
        let count = |src: &str| chosen.iter().filter(|i| i.source == src).count();
        assert_eq!(count("charts"), 5);
        assert_eq!(count("documents"), 3);
        assert_eq!(count("natural"), 2);
    }

    #[test]
    fn sample_corpus_is_deterministic_and_seed_sensitive() {
        let items = corpus_items();
        let a = sample_corpus(&items, &plan(10), &HashSet::new(), 42).unwrap();
        let b = sample_corpus(&items, &plan(10), &HashSet::new(), 42).unwrap();
        assert_eq!(a, b);
        let c = sample_corpus(&items, &plan(10), &HashSet::new(), 43).unwrap();
        assert_ne!(a, c, "different seeds should pick different members");
    }

    #[test]
    fn sample_corpus_respects_exclusions() {
        let items = corpus_items();
        // Exclude most of "natural" so the survivors must be chosen.
        let exclusions: HashSet<String> = (0..8).map(|i| format!("natural-{i}")).collect();
        let chosen = sample_corpus(&items, &plan(10), &exclusions, 7).unwrap();
        let natural: Vec<_> = chosen.iter().filter(|i| i.source == "natural").collect();
        assert_eq!(natural.len(), 2);
        for item in natural {
            assert!(!exclusions.contains(&item.key));
        }
    }

    #[test]
    fn sample_corpus_errors_when_quota_unmeetable() {
        let items = corpus_items();
        let exclusions: HashSet<String> = (0..9).map(|i| format!("natural-{i}")).collect();
        assert!(matches!(
            sample_corpus(&items, &plan(10), &exclusions, 7),
            Err(ExporterError::Quota(_))
        ));
    }

    #[test]
    fn selection_preserves_input_order() {
        let items = corpus_items();
        let chosen = sample_corpus(&items, &plan(10), &HashSet::new(), 3).unwrap();
        let positions: Vec<usize> = chosen
            .iter()
            .map(|c| items.iter().position(|i| i.key == c.key).unwrap())
            .collect();
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        assert_eq!(positions, sorted);
    }
}
