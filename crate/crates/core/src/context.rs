//! Rolling caches of previous source encodings and previous translations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// One cached sentence: its token ids and one final-layer state row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub tokens: Vec<TokenId>,
    pub states: Tensor,
}

impl CacheEntry {
    pub fn new(tokens: Vec<TokenId>, states: Tensor) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("cache entry with no tokens"));
        }
        if states.rank() != 2 || states.rows() != tokens.len() {
            return Err(Error::shape("cache entry", states.shape(), &[tokens.len()]));
        }
        Ok(CacheEntry { tokens, states })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Source-side and target-side context of the sentence being translated.
/// Entries are ordered oldest first and never exceed `capacity` per side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextState {
    capacity: usize,
    source: Vec<CacheEntry>,
    target: Vec<CacheEntry>,
}

impl ContextState {
    pub fn new(capacity: usize) -> Self {
        ContextState {
            capacity,
            source: Vec::new(),
            target: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn source(&self) -> &[CacheEntry] {
        &self.source
    }

    pub fn target(&self) -> &[CacheEntry] {
        &self.target
    }

    pub fn push_source(&mut self, entry: CacheEntry) {
        push_bounded(&mut self.source, entry, self.capacity);
    }

    pub fn push_target(&mut self, entry: CacheEntry) {
        push_bounded(&mut self.target, entry, self.capacity);
    }

    /// Called at every document boundary.
    pub fn clear(&mut self) {
        self.source.clear();
        self.target.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty() && self.target.is_empty()
    }
}

fn push_bounded(cache: &mut Vec<CacheEntry>, entry: CacheEntry, capacity: usize) {
    if capacity == 0 {
        return;
    }
    cache.push(entry);
    if cache.len() > capacity {
        let excess = cache.len() - capacity;
        cache.drain(..excess);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tag: u32, len: usize) -> CacheEntry {
        CacheEntry::new(vec![tag; len], Tensor::filled(&[len, 2], tag as f64)).unwrap()
    }

    #[test]
    fn evicts_oldest_at_capacity() {
        let mut c = ContextState::new(3);
        for k in 0..4 {
            c.push_target(entry(10 + k, 1));
        }
        let tags: Vec<u32> = c.target().iter().map(|e| e.tokens[0]).collect();
        assert_eq!(tags, [11, 12, 13]);
        assert!(c.source().is_empty());
    }

    #[test]
    fn clear_and_zero_capacity() {
        let mut c = ContextState::new(1);
        c.push_source(entry(5, 2));
        c.push_source(entry(6, 3));
        assert_eq!(c.source().len(), 1);
        assert_eq!(c.source()[0].len(), 3);
        c.clear();
        assert!(c.is_empty());

        let mut z = ContextState::new(0);
        z.push_source(entry(1, 1));
        assert!(z.is_empty());
    }

    #[test]
    fn entry_rows_must_match_tokens() {
        assert!(CacheEntry::new(vec![4, 5], Tensor::zeros(&[3, 2])).is_err());
        assert!(CacheEntry::new(vec![], Tensor::zeros(&[1, 2])).is_err());
    }
}
