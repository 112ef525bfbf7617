//! Posted-receive and unexpected-message queues with MPI matching rules.

use std::collections::VecDeque;

use super::comm::{Source, TagMatch};
use crate::transport::MessageEnvelope;

/// What a posted receive accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchPattern {
    pub context_id: u32,
    pub source: Source,
    pub tag: TagMatch,
}

impl MatchPattern {
    pub fn matches(&self, env: &MessageEnvelope) -> bool {
        self.context_id == env.context_id
            && match self.source {
                Source::Any => true,
                Source::Rank(r) => r as u64 == env.source as u64,
            }
            && match self.tag {
                TagMatch::Any => true,
                TagMatch::Tag(t) => t == env.tag,
            }
    }
}

/// Receives waiting for a message, in posting order.
#[derive(Debug)]
pub struct PostedQueue<T> {
    entries: VecDeque<(MatchPattern, T)>,
}

impl<T> Default for PostedQueue<T> {
    fn default() -> Self {
        PostedQueue { entries: VecDeque::new() }
    }
}

impl<T> PostedQueue<T> {
    pub fn push(&mut self, pattern: MatchPattern, item: T) {
        self.entries.push_back((pattern, item));
    }

    /// Removes the first posted receive (FIFO) that accepts `env`.
    pub fn take_match(&mut self, env: &MessageEnvelope) -> Option<(MatchPattern, T)> {
        let pos = self.entries.iter().position(|(p, _)| p.matches(env))?;
        self.entries.remove(pos)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = (MatchPattern, T)> + '_ {
        self.entries.drain(..)
    }
}

/// Arrived messages no receive has claimed yet, in arrival order.
#[derive(Debug)]
pub struct UnexpectedQueue<T> {
    entries: VecDeque<(MessageEnvelope, T)>,
}

impl<T> Default for UnexpectedQueue<T> {
    fn default() -> Self {
        UnexpectedQueue { entries: VecDeque::new() }
    }
}

impl<T> UnexpectedQueue<T> {
    pub fn push(&mut self, env: MessageEnvelope, item: T) {
        self.entries.push_back((env, item));
    }

    /// Removes the earliest arrival accepted by `pattern`.
    pub fn take_match(&mut self, pattern: &MatchPattern) -> Option<(MessageEnvelope, T)> {
        let pos = self.entries.iter().position(|(e, _)| pattern.matches(e))?;
        self.entries.remove(pos)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
