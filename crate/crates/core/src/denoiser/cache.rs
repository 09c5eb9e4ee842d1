use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Noisy,
    History,
    Reflect,
    Cond,
}

impl TokenRole {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            TokenRole::Noisy => 0,
            TokenRole::History => 1,
            TokenRole::Reflect => 2,
            TokenRole::Cond => 3,
        }
    }
}

/// Per-layer rotated keys and values of already-processed tokens.
///
/// Layout is `[cond | history... | reflect]`; the reflect block, when
/// present, is always last so it can be dropped and rebuilt each step.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    width: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    entries: Vec<(i64, TokenRole)>,
}

impl KVCache {
    pub fn new(layers: usize, width: usize) -> Self {
        Self {
            width,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn entries(&self) -> &[(i64, TokenRole)] {
        &self.entries
    }

    pub fn count(&self, role: TokenRole) -> usize {
        self.entries.iter().filter(|e| e.1 == role).count()
    }

    pub fn last_history_position(&self) -> Option<i64> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.1 == TokenRole::History)
            .map(|e| e.0)
    }

    pub fn has_reflect(&self) -> bool {
        self.entries.last().is_some_and(|e| e.1 == TokenRole::Reflect)
    }

    /// Appends one block; `kv[l]` holds that layer's `(keys, values)`.
    pub(crate) fn push_block(&mut self, kv: Vec<(Vec<f64>, Vec<f64>)>, positions: &[i64], role: TokenRole) -> Result<()> {
        if kv.len() != self.keys.len() {
            return Err(Error::shape("kv_cache", &[self.keys.len()], &[kv.len()]));
        }
        if role != TokenRole::Reflect && self.has_reflect() {
            return Err(Error::Invalid("reflect block must be cleared before appending".into()));
        }
        for (l, (k, v)) in kv.into_iter().enumerate() {
            if k.len() != positions.len() * self.width || v.len() != k.len() {
                return Err(Error::shape("kv_cache", &[positions.len(), self.width], &[k.len()]));
            }
            self.keys[l].extend(k);
            self.values[l].extend(v);
        }
        self.entries.extend(positions.iter().map(|&p| (p, role)));
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        for l in 0..self.keys.len() {
            self.keys[l].truncate(len * self.width);
            self.values[l].truncate(len * self.width);
        }
        self.entries.truncate(len);
    }

    pub fn clear_reflect(&mut self) {
        let keep = self.entries.iter().take_while(|e| e.1 != TokenRole::Reflect).count();
        self.truncate(keep);
    }

    /// Keeps only the condition prefix.
    pub fn reset(&mut self) {
        let keep = self.entries.iter().take_while(|e| e.1 == TokenRole::Cond).count();
        self.truncate(keep);
    }
}
