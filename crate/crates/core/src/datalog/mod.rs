//! Interaction logs: loading, validation, history/recent partition, splits
//! and a synthetic generator.

mod io;
mod split;
mod synth;

pub use io::{
    format_events, load_catalog, load_events, parse_events, write_catalog, write_events, Format,
};
pub use split::{partition_history_recent, split, SplitSpec, Splits};
pub use synth::{generate_synthetic, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;
pub type ActionId = u32;
pub type CategoryId = u32;

/// One timestamped event. `seq_pos` is the per-user ordinal in input order
/// and breaks timestamp ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub action: ActionId,
    pub ts: i64,
    pub seq_pos: u32,
}

impl Interaction {
    /// Recency key: later events compare greater.
    pub fn key(&self) -> (i64, u32) {
        (self.ts, self.seq_pos)
    }
}

/// Item to category association. Items that never occur in a log may have
/// an empty set; every observed item has at least one category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemCatalog {
    num_categories: usize,
    categories: Vec<Vec<CategoryId>>,
}

impl ItemCatalog {
    /// Sorts and deduplicates each set; rejects out-of-range categories.
    pub fn new(num_categories: usize, mut categories: Vec<Vec<CategoryId>>) -> Result<Self> {
        for (item, cats) in categories.iter_mut().enumerate() {
            cats.sort_unstable();
            cats.dedup();
            if let Some(&c) = cats.iter().find(|&&c| c as usize >= num_categories) {
                return Err(Error::Validation(format!(
                    "item {item} has category {c} >= {num_categories}"
                )));
            }
        }
        Ok(Self {
            num_categories,
            categories,
        })
    }

    /// Single-category catalog from an item -> category assignment.
    pub fn one_to_many(num_categories: usize, assignment: &[CategoryId]) -> Result<Self> {
        Self::new(
            num_categories,
            assignment.iter().map(|&c| vec![c]).collect(),
        )
    }

    pub fn num_items(&self) -> usize {
        self.categories.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn categories_of(&self, item: ItemId) -> Option<&[CategoryId]> {
        self.categories.get(item as usize).map(Vec::as_slice)
    }

    pub fn is_one_to_many(&self) -> bool {
        self.categories.iter().all(|c| c.len() <= 1)
    }

    /// Item ids carrying category `c`.
    pub fn items_in(&self, c: CategoryId) -> Vec<ItemId> {
        (0..self.categories.len() as ItemId)
            .filter(|&i| self.categories[i as usize].binary_search(&c).is_ok())
            .collect()
    }
}

/// A user's time-ordered events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: UserId,
    pub events: Vec<Interaction>,
}

impl UserSequence {
    /// Validates that all events belong to `user` and are strictly
    /// increasing in `(ts, seq_pos)`.
    pub fn new(user: UserId, events: Vec<Interaction>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.user != user) {
            return Err(Error::Validation(format!(
                "event of user {} in sequence of user {user}",
                e.user
            )));
        }
        if events.windows(2).any(|w| w[0].key() >= w[1].key()) {
            return Err(Error::Validation(format!(
                "events of user {user} are not strictly increasing in (ts, seq_pos)"
            )));
        }
        Ok(Self { user, events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Declared or inferred vocabulary sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub actions: usize,
    pub categories: usize,
    pub items: usize,
    pub users: usize,
}

/// A loaded or generated log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub sequences: Vec<UserSequence>,
    pub catalog: ItemCatalog,
}

impl Dataset {
    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(UserSequence::len).sum()
    }

    /// Keeps only events whose action is in `keep`. Users left without
    /// events are dropped; `seq_pos` values are preserved.
    pub fn filter_actions(&self, keep: &[ActionId]) -> Dataset {
        let sequences = self
            .sequences
            .iter()
            .filter_map(|s| {
                let events: Vec<_> = s
                    .events
                    .iter()
                    .copied()
                    .filter(|e| keep.contains(&e.action))
                    .collect();
                (!events.is_empty()).then_some(UserSequence {
                    user: s.user,
                    events,
                })
            })
            .collect();
        Dataset {
            vocab: self.vocab,
            sequences,
            catalog: self.catalog.clone(),
        }
    }

    /// Replaces the catalog (e.g. with an induced one). The item vocabulary
    /// must agree.
    pub fn with_catalog(&self, catalog: ItemCatalog) -> Result<Dataset> {
        if catalog.num_items() != self.vocab.items {
            return Err(Error::Validation(format!(
                "catalog covers {} items, dataset has {}",
                catalog.num_items(),
                self.vocab.items
            )));
        }
        let mut vocab = self.vocab;
        vocab.categories = catalog.num_categories();
        Ok(Dataset {
            vocab,
            sequences: self.sequences.clone(),
            catalog,
        })
    }
}
