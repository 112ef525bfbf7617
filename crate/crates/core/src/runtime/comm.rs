use std::sync::Arc;

/// Receive-side source selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Any,
    Rank(usize),
}

/// Receive-side tag selector. Concrete tags are non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagMatch {
    Any,
    Tag(i32),
}

impl From<usize> for Source {
    fn from(r: usize) -> Self {
        Source::Rank(r)
    }
}

impl From<i32> for TagMatch {
    fn from(t: i32) -> Self {
        TagMatch::Tag(t)
    }
}

/// A group of ranks with its own matching context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Communicator {
    context_id: u32,
    ranks: Arc<Vec<usize>>,
    my_rank: usize,
}

impl Communicator {
    pub(crate) fn new(context_id: u32, ranks: Vec<usize>, my_rank: usize) -> Self {
        debug_assert!(my_rank < ranks.len());
        Communicator { context_id, ranks: Arc::new(ranks), my_rank }
    }

    pub fn context_id(&self) -> u32 {
        self.context_id
    }

    pub fn rank(&self) -> usize {
        self.my_rank
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    /// Process (world) rank of communicator rank `r`.
    pub fn world_rank(&self, r: usize) -> Option<usize> {
        self.ranks.get(r).copied()
    }

    pub(crate) fn with_context(&self, context_id: u32) -> Self {
        Communicator { context_id, ranks: self.ranks.clone(), my_rank: self.my_rank }
    }
}
