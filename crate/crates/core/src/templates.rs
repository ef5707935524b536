//! Built-in prompt templates and their identity hash.
//!
//! Every generated sample records the hash of the template set that
//! produced it, so corpora remain attributable when prompts evolve.

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
pub struct TemplateSet {
    pub generator_system: &'static str,
    pub tool_verifier_focus: &'static str,
    pub tool_verifier_semantic: &'static str,
    pub answer_verifier: &'static str,
    pub inference_system: &'static str,
    pub force_answer: &'static str,
}

pub const BUILTIN: TemplateSet = TemplateSet {
    generator_system: include_str!("../templates/generator_system.txt"),
    tool_verifier_focus: include_str!("../templates/tool_verifier_focus.txt"),
    tool_verifier_semantic: include_str!("../templates/tool_verifier_semantic.txt"),
    answer_verifier: include_str!("../templates/answer_verifier.txt"),
    inference_system: include_str!("../templates/inference_system.txt"),
    force_answer: include_str!("../templates/force_answer.txt"),
};

impl TemplateSet {
    /// Content hash of the whole set (name-tagged, order-independent of
    /// call sites): first 16 hex chars of SHA-256.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, body) in [
            ("generator_system", self.generator_system),
            ("tool_verifier_focus", self.tool_verifier_focus),
            ("tool_verifier_semantic", self.tool_verifier_semantic),
            ("answer_verifier", self.answer_verifier),
            ("inference_system", self.inference_system),
            ("force_answer", self.force_answer),
        ] {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(body.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())[..16].to_string()
    }
}

/// Fills `{placeholder}` slots in order. Values are substituted
/// sequentially, so placeholders must not occur inside earlier values.
pub fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
