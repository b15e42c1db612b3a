use serde::{Deserialize, Serialize};

use super::WireRle;
use crate::data::InteractionSet;

/// One request of a session and the mask it returned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub mask_id: String,
    pub interaction: InteractionSet,
    pub mask_rle: WireRle,
}

/// Append-only record of the interactions on one image. Results never
/// depend on it; it only lets a client list and replay what it did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub image_id: String,
    history: Vec<HistoryEntry>,
}

impl Session {
    pub fn new(session_id: String, image_id: String) -> Self {
        Session { session_id, image_id, history: Vec::new() }
    }

    /// Append and return the new mask id.
    pub fn push(&mut self, interaction: InteractionSet, mask_rle: WireRle) -> String {
        let mask_id = format!("{}/{}", self.session_id, self.history.len());
        self.history.push(HistoryEntry { mask_id: mask_id.clone(), interaction, mask_rle });
        mask_id
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn last(&self) -> Option<&HistoryEntry> {
        self.history.last()
    }
}
