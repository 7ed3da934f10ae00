//! Position-id assignment under dynamic vision-token sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PeMode {
    /// Ids fixed at input, never reassigned.
    #[default]
    Persistent,
    /// Survivors renumbered consecutively after every prune.
    Compacted,
    /// Text ids count from 0, vision ids from `offset`.
    Group { offset: usize },
}

impl std::str::FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "persistent" => Ok(PeMode::Persistent),
            "compacted" => Ok(PeMode::Compacted),
            "group" => Ok(PeMode::Group { offset: 4096 }),
            _ => match lower.strip_prefix("group:").map(str::parse) {
                Some(Ok(offset)) => Ok(PeMode::Group { offset }),
                _ => Err(Error::param(
                    "pe",
                    format!("unknown PE mode `{s}`; expected persistent, compacted, group or group:<offset>"),
                )),
            },
        }
    }
}

/// Current position id of every token in a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionState {
    mode: PeMode,
    ids: Vec<usize>,
    vision_origin: usize,
}

impl PositionState {
    pub fn new(layout: &SequenceLayout, mode: PeMode) -> Self {
        let persistent = layout.persistent_ids();
        let vision_origin = layout
            .vision_tokens()
            .map(|v| persistent[v])
            .min()
            .unwrap_or_else(|| layout.text_tokens().map(|t| persistent[t]).min().unwrap_or(0));
        let ids = match mode {
            PeMode::Persistent | PeMode::Compacted => persistent,
            PeMode::Group { offset } => {
                let (mut text, mut vision) = (0, offset);
                (0..layout.len())
                    .map(|t| {
                        let slot = if layout.is_vision(t) { &mut vision } else { &mut text };
                        *slot += 1;
                        *slot - 1
                    })
                    .collect()
            }
        };
        Self {
            mode,
            ids,
            vision_origin,
        }
    }

    pub fn mode(&self) -> PeMode {
        self.mode
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, token: usize) -> usize {
        self.ids[token]
    }

    /// Applies a prune event. `live` is the liveness before the event and
    /// `survivors` the vision tokens that stay; the rest of the live vision
    /// tokens leave. Returns the liveness after the event.
    pub fn apply_prune(
        &mut self,
        layout: &SequenceLayout,
        live: &[bool],
        survivors: &[usize],
    ) -> Result<Vec<bool>> {
        let mut after = live.to_vec();
        for v in layout.vision_tokens() {
            after[v] = false;
        }
        for &s in survivors {
            if s >= layout.len() || !layout.is_vision(s) || !live[s] {
                return Err(Error::Invariant(format!(
                    "survivor {s} is not a live vision token"
                )));
            }
            after[s] = true;
        }
        if self.mode == PeMode::Compacted {
            let removed = layout
                .vision_tokens()
                .filter(|&v| live[v] && !after[v])
                .count();
            let mut next = self.vision_origin;
            for t in 0..layout.len() {
                if !after[t] {
                    continue;
                }
                if layout.is_vision(t) {
                    self.ids[t] = next;
                    next += 1;
                } else if layout.is_text(t) {
                    self.ids[t] -= removed;
                }
            }
        }
        self.check_unique(&after)?;
        Ok(after)
    }

    /// Id for a token appended after the current last token.
    pub fn append_text(&mut self) -> usize {
        let id = match self.mode {
            PeMode::Group { offset } => self
                .ids
                .iter()
                .copied()
                .filter(|&i| i < offset)
                .max()
                .map_or(0, |m| m + 1),
            _ => self.ids.last().map_or(0, |&m| m + 1),
        };
        self.ids.push(id);
        id
    }

    fn check_unique(&self, live: &[bool]) -> Result<()> {
        let mut seen: Vec<usize> = (0..self.ids.len())
            .filter(|&t| live[t])
            .map(|t| self.ids[t])
            .collect();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Invariant(format!(
                "position id {} assigned twice among live tokens",
                w[0]
            )));
        }
        Ok(())
    }
}
