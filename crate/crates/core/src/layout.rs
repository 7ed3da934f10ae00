//! Token layout of one multimodal prompt.
//!
//! Tokens are ordered `[system : vision : text]`. Every token gets a
//! persistent position id equal to its sequence index when the layout is
//! built; vision ids stay reserved even while the vision block is absent.
//! Text tokens carry a segment id per conversation turn (1-based; system and
//! vision tokens sit in segment 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Modality, TokenInfo};

pub type Token = TokenInfo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLayout {
    tokens: Vec<Token>,
    /// `live_at[l][t]`: token `t` takes part in layer `l` (0 = embeddings).
    /// Empty until a forward pass resolves it.
    #[serde(default)]
    live_at: Vec<Vec<bool>>,
}

impl SequenceLayout {
    pub fn new(system: usize, vision: usize, text_segments: &[usize]) -> Result<Self> {
        if text_segments.is_empty() || text_segments.iter().any(|&s| s == 0) {
            return Err(Error::param(
                "text_segments",
                "need at least one non-empty text segment",
            ));
        }
        let mut tokens = Vec::new();
        let mut push = |modality, segment| {
            let index = tokens.len();
            tokens.push(Token {
                index,
                modality,
                position_id: index,
                segment,
            });
        };
        (0..system).for_each(|_| push(Modality::System, 0));
        (0..vision).for_each(|_| push(Modality::Visual, 0));
        for (s, &len) in text_segments.iter().enumerate() {
            (0..len).for_each(|_| push(Modality::Textual, s + 1));
        }
        Ok(Self {
            tokens,
            live_at: Vec::new(),
        })
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        for (i, t) in tokens.iter().enumerate() {
            if t.index != i {
                return Err(Error::param("tokens", format!("token {i} has index {}", t.index)));
            }
        }
        Ok(Self {
            tokens,
            live_at: Vec::new(),
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn modality(&self, t: usize) -> Modality {
        self.tokens[t].modality
    }

    pub fn is_vision(&self, t: usize) -> bool {
        self.tokens[t].modality == Modality::Visual
    }

    pub fn is_text(&self, t: usize) -> bool {
        self.tokens[t].modality == Modality::Textual
    }

    pub fn vision_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices_of(Modality::Visual)
    }

    pub fn text_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices_of(Modality::Textual)
    }

    pub fn indices_of(&self, modality: Modality) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .filter(move |t| t.modality == modality)
            .map(|t| t.index)
    }

    pub fn num_vision(&self) -> usize {
        self.vision_tokens().count()
    }

    /// Last text token of every segment, in sequence order.
    pub fn segment_ends(&self) -> Vec<usize> {
        let text: Vec<&Token> = self
            .tokens
            .iter()
            .filter(|t| t.modality == Modality::Textual)
            .collect();
        text.iter()
            .enumerate()
            .filter(|(i, t)| text.get(i + 1).map_or(true, |n| n.segment != t.segment))
            .map(|(_, t)| t.index)
            .collect()
    }

    pub fn persistent_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position_id).collect()
    }

    pub fn live_at(&self) -> &[Vec<bool>] {
        &self.live_at
    }

    pub fn with_liveness(mut self, live_at: Vec<Vec<bool>>) -> Self {
        self.live_at = live_at;
        self
    }
}
