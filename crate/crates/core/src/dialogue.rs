//! Multi-turn chat dialogues exchanged with model backends.
//!
//! A [`Dialogue`] is the wire-neutral form of a user–assistant–tool
//! conversation: a system prompt plus ordered turns whose content interleaves
//! text and images. Backends render it to their own wire schema.

use serde::Serialize;
use thiserror::Error;

use crate::image_store::ImageState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    Tool,
}

/// One piece of turn content.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    Image { image: ImageState },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Turn {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Turn {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text { text: text.into() }],
        }
    }

    /// Concatenated text content; image parts render as the pad literal.
    pub fn flat_text(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Part::Text { text } => out.push_str(text),
                Part::Image { .. } => out.push_str(crate::trace::IMAGE_PAD),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialogueError {
    #[error("dialogue has no turns")]
    Empty,
    #[error("turn 0 must be a user turn")]
    MustStartWithUser,
    #[error("turns {0} and {1} are consecutive assistant turns")]
    ConsecutiveAssistant(usize, usize),
    #[error("turn {0}: tool turn not preceded by an assistant turn")]
    ToolWithoutAssistant(usize),
    #[error("last turn is an assistant turn; nothing to complete")]
    EndsWithAssistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Dialogue {
    pub system: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new(system: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            turns: Vec::new(),
        }
    }

    pub fn push_user_text(&mut self, text: impl Into<String>) {
        self.turns.push(Turn::text(Role::User, text));
    }

    pub fn push_user_parts(&mut self, parts: Vec<Part>) {
        self.turns.push(Turn {
            role: Role::User,
            parts,
        });
    }

    pub fn push_assistant_text(&mut self, text: impl Into<String>) {
        self.turns.push(Turn::text(Role::Assistant, text));
    }

    /// Appends a tool-role observation turn: the observation block text with
    /// the returned image in place of the pad literal.
    pub fn push_tool_observation(&mut self, prefix: &str, image: ImageState, suffix: &str) {
        self.turns.push(Turn {
            role: Role::Tool,
            parts: vec![
                Part::Text {
                    text: prefix.to_string(),
                },
                Part::Image { image },
                Part::Text {
                    text: suffix.to_string(),
                },
            ],
        });
    }

    /// Structural validation of role alternation.
    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.turns.is_empty() {
            return Err(DialogueError::Empty);
        }
        if self.turns[0].role != Role::User {
            return Err(DialogueError::MustStartWithUser);
        }
        for i in 1..self.turns.len() {
            if self.turns[i].role == Role::Assistant && self.turns[i - 1].role == Role::Assistant {
                return Err(DialogueError::ConsecutiveAssistant(i - 1, i));
            }
            if self.turns[i].role == Role::Tool && self.turns[i - 1].role != Role::Assistant {
                return Err(DialogueError::ToolWithoutAssistant(i));
            }
        }
        Ok(())
    }

    /// Validation for a dialogue about to be completed: structure plus the
    /// requirement that the next message is an assistant message.
    pub fn validate_for_completion(&self) -> Result<(), DialogueError> {
        self.validate()?;
        if self.turns.last().map(|t| t.role) == Some(Role::Assistant) {
            return Err(DialogueError::EndsWithAssistant);
        }
        Ok(())
    }

    pub fn images(&self) -> Vec<&ImageState> {
        self.turns
            .iter()
            .flat_map(|t| t.parts.iter())
            .filter_map(|p| match p {
                Part::Image { image } => Some(image),
                Part::Text { .. } => None,
            })
            .collect()
    }

    /// All text joined in order (system first); used by scripted backends
    /// for scenario matching and by tests for instrumentation.
    pub fn flat_text(&self) -> String {
        let mut out = self.system.clone();
        for turn in &self.turns {
            out.push('\n');
            out.push_str(&turn.flat_text());
        }
        out
    }
}
