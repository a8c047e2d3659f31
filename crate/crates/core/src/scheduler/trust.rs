use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrustMode {
    Normal,
    Conservative,
}

/// Recent misses (intervals predicted safe that turned out to violate QoS)
/// and the resulting trust mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    pub window: usize,
    pub max_misses: usize,
    pub mode: TrustMode,
    recent: VecDeque<bool>,
}

impl TrustState {
    pub fn new(window: usize, max_misses: usize) -> Self {
        TrustState {
            window,
            max_misses,
            mode: TrustMode::Normal,
            recent: VecDeque::with_capacity(window),
        }
    }

    pub fn misses(&self) -> usize {
        self.recent.iter().filter(|&&m| m).count()
    }

    fn clean_full_window(&self) -> bool {
        self.recent.len() == self.window && self.misses() == 0
    }
}

/// Records one interval's outcome. More than `max_misses` misses in the
/// window switch to conservative mode; a full window without misses
/// switches back.
pub fn update_trust(trust: &mut TrustState, predicted_safe: bool, observed_violation: bool) {
    trust.recent.push_back(predicted_safe && observed_violation);
    while trust.recent.len() > trust.window {
        trust.recent.pop_front();
    }
    match trust.mode {
        TrustMode::Normal if trust.misses() > trust.max_misses => trust.mode = TrustMode::Conservative,
        TrustMode::Conservative if trust.clean_full_window() => trust.mode = TrustMode::Normal,
        _ => {}
    }
}
