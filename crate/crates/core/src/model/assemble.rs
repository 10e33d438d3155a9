use super::{AssemblyMode, ModelConfig};
use crate::compressor::{Bucket, BucketPlan};
use crate::datalog::{ActionId, CategoryId, Interaction, ItemCatalog, ItemId, UserId};
use crate::error::{Error, Result};

/// Rows of the special-token table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    SegUser = 0,
    SegHist = 1,
    SegRecent = 2,
    Pad = 3,
}

impl Special {
    pub const COUNT: usize = 4;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Special(Special),
    User(UserId),
    /// Index into [`TokenSequence::buckets`].
    History(usize),
    Item {
        item: ItemId,
        cats: Vec<CategoryId>,
    },
    Action(ActionId),
    Merged {
        item: ItemId,
        action: ActionId,
        cats: Vec<CategoryId>,
    },
}

impl Token {
    pub fn is_recent(&self) -> bool {
        matches!(
            self,
            Token::Item { .. } | Token::Action(_) | Token::Merged { .. }
        )
    }
}

/// Model input for one user with its loss targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub user: UserId,
    pub tokens: Vec<Token>,
    pub buckets: Vec<Bucket>,
    /// `(position, next item)` pairs.
    pub item_targets: Vec<(usize, ItemId)>,
    /// `(position, action)` pairs.
    pub action_targets: Vec<(usize, ActionId)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of history tokens.
    pub fn num_history(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, Token::History(_)))
            .count()
    }
}

fn cats_of(catalog: &ItemCatalog, item: ItemId) -> Result<Vec<CategoryId>> {
    match catalog.categories_of(item) {
        Some(c) if !c.is_empty() => Ok(c.to_vec()),
        _ => Err(Error::UnknownItem(item)),
    }
}

/// Lays out `[SEG_USER, user, SEG_HIST, history.., SEG_RECENT, recent..]`.
///
/// Interleaved: each interaction contributes an item token (target: its own
/// action) and an action token (target: the next item). Merged: one token
/// per interaction targeting the next item. The last interaction's next
/// item is `next_item`; without it that position has no item target.
/// `use_history = false` drops `SEG_HIST` and the history tokens.
pub fn assemble_sequence(
    cfg: &ModelConfig,
    user: UserId,
    plan: &BucketPlan,
    recent: &[Interaction],
    next_item: Option<ItemId>,
    catalog: &ItemCatalog,
) -> Result<TokenSequence> {
    if recent.len() > cfg.max_recent {
        return Err(Error::Config(format!(
            "recent window of {} exceeds iLen {}",
            recent.len(),
            cfg.max_recent
        )));
    }
    if plan.len() > cfg.max_buckets {
        return Err(Error::Config(format!(
            "plan of {} buckets exceeds V {}",
            plan.len(),
            cfg.max_buckets
        )));
    }
    let mut seq = TokenSequence {
        user,
        tokens: vec![Token::Special(Special::SegUser), Token::User(user)],
        buckets: Vec::new(),
        item_targets: Vec::new(),
        action_targets: Vec::new(),
    };
    if cfg.use_history {
        seq.tokens.push(Token::Special(Special::SegHist));
        for (j, b) in plan.buckets.iter().enumerate() {
            seq.tokens.push(Token::History(j));
            seq.buckets.push(b.clone());
        }
    }
    seq.tokens.push(Token::Special(Special::SegRecent));
    for (i, e) in recent.iter().enumerate() {
        let next = recent.get(i + 1).map(|n| n.item).or(next_item);
        let cats = cats_of(catalog, e.item)?;
        match cfg.mode {
            AssemblyMode::Interleaved => {
                seq.action_targets.push((seq.tokens.len(), e.action));
                seq.tokens.push(Token::Item { item: e.item, cats });
                if let Some(n) = next {
                    seq.item_targets.push((seq.tokens.len(), n));
                }
                seq.tokens.push(Token::Action(e.action));
            }
            AssemblyMode::Merged => {
                if let Some(n) = next {
                    seq.item_targets.push((seq.tokens.len(), n));
                }
                seq.tokens.push(Token::Merged {
                    item: e.item,
                    action: e.action,
                    cats,
                });
            }
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::compress;

    fn ev(item: u32, action: u32, ts: i64) -> Interaction {
        Interaction {
            user: 1,
            item,
            action,
            ts,
            seq_pos: ts as u32,
        }
    }

    fn cfg(mode: AssemblyMode) -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_heads: 2,
            item_vocab: 6,
            action_vocab: 2,
            user_vocab: 2,
            category_vocab: 3,
            max_recent: 4,
            max_buckets: 3,
            mode,
            ..ModelConfig::default()
        }
    }

    fn catalog() -> ItemCatalog {
        ItemCatalog::new(
            3,
            vec![vec![0], vec![1], vec![2], vec![0, 1], vec![1], vec![2]],
        )
        .unwrap()
    }

    #[test]
    fn interleaved_layout_and_targets() {
        let hist = [ev(0, 0, 1), ev(1, 1, 2)];
        let plan = compress(&hist, &catalog(), 3, 4).unwrap();
        let recent = [ev(3, 1, 3), ev(4, 0, 4), ev(5, 1, 5)];
        let seq = assemble_sequence(
            &cfg(AssemblyMode::Interleaved),
            1,
            &plan,
            &recent,
            Some(2),
            &catalog(),
        )
        .unwrap();
        // 3 + 1 + 2 + 2 * 3
        assert_eq!(seq.len(), 12);
        assert_eq!(seq.num_history(), 2);
        assert_eq!(seq.action_targets, vec![(6, 1), (8, 0), (10, 1)]);
        assert_eq!(seq.item_targets, vec![(7, 4), (9, 5), (11, 2)]);
        assert_eq!(
            seq.tokens[6],
            Token::Item {
                item: 3,
                cats: vec![0, 1]
            }
        );
    }

    #[test]
    fn merged_without_history() {
        let plan = BucketPlan::empty(3, 4);
        let recent = [ev(3, 1, 3), ev(4, 0, 4), ev(5, 1, 5)];
        let seq = assemble_sequence(
            &cfg(AssemblyMode::Merged),
            1,
            &plan,
            &recent,
            None,
            &catalog(),
        )
        .unwrap();
        // 3 + 1 + 0 + 3
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.item_targets, vec![(4, 4), (5, 5)]);
        assert!(seq.action_targets.is_empty());
    }

    #[test]
    fn history_switch_drops_segment() {
        let plan = compress(&[ev(0, 0, 1)], &catalog(), 3, 4).unwrap();
        let c = ModelConfig {
            use_history: false,
            ..cfg(AssemblyMode::Interleaved)
        };
        let seq = assemble_sequence(&c, 1, &plan, &[ev(3, 1, 3)], Some(1), &catalog()).unwrap();
        assert_eq!(seq.len(), 3 + 2);
        assert!(seq.buckets.is_empty());
        assert!(!seq.tokens.contains(&Token::Special(Special::SegHist)));
    }

    #[test]
    fn overlong_recent_is_rejected() {
        let recent: Vec<_> = (0..5).map(|t| ev(0, 0, t)).collect();
        let plan = BucketPlan::empty(3, 4);
        assert!(assemble_sequence(
            &cfg(AssemblyMode::Interleaved),
            1,
            &plan,
            &recent,
            None,
            &catalog()
        )
        .is_err());
    }
}
