//! Category-bucket compression of a long-term history.
//!
//! History events are grouped into one bucket per category (an item with
//! several categories lands in each of them). Buckets are ranked by the
//! recency of their newest member and the `V` most recent are kept; inside
//! a kept bucket only the `G` newest members survive. The resulting plan is
//! ordered oldest bucket first so time increases toward the recent segment.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datalog::{CategoryId, Interaction, ItemCatalog, ItemId, UserId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BucketEntry {
    pub item: ItemId,
    pub ts: i64,
    pub seq_pos: u32,
}

impl BucketEntry {
    pub fn key(&self) -> (i64, u32) {
        (self.ts, self.seq_pos)
    }
}

impl From<&Interaction> for BucketEntry {
    fn from(e: &Interaction) -> Self {
        Self {
            item: e.item,
            ts: e.ts,
            seq_pos: e.seq_pos,
        }
    }
}

/// History items sharing one category, time-ascending and never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub category: CategoryId,
    pub items: Vec<BucketEntry>,
}

impl Bucket {
    /// Key of the newest member.
    pub fn last_key(&self) -> (i64, u32) {
        self.items.last().expect("buckets are never empty").key()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketPlan {
    /// Ascending by `last_key`; equal keys put the higher category id first.
    pub buckets: Vec<Bucket>,
    pub max_buckets: usize,
    pub max_items: usize,
}

impl BucketPlan {
    pub fn empty(max_buckets: usize, max_items: usize) -> Self {
        Self {
            buckets: Vec::new(),
            max_buckets,
            max_items,
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Sum of bucket sizes; a multi-category item counts once per bucket.
    pub fn retained(&self) -> usize {
        self.buckets.iter().map(Bucket::len).sum()
    }
}

/// One bucket per category present in `history`, ordered by category id.
pub fn group_by_category(history: &[Interaction], catalog: &ItemCatalog) -> Result<Vec<Bucket>> {
    let mut groups: BTreeMap<CategoryId, Vec<BucketEntry>> = BTreeMap::new();
    for e in history {
        let cats = catalog
            .categories_of(e.item)
            .filter(|c| !c.is_empty())
            .ok_or(Error::UnknownItem(e.item))?;
        for &c in cats {
            groups.entry(c).or_default().push(BucketEntry::from(e));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(category, mut items)| {
            items.sort_by_key(BucketEntry::key);
            Bucket { category, items }
        })
        .collect())
}

/// Keeps the `max_buckets` buckets with the newest members (ties go to the
/// smaller category id) and the `max_items` newest members of each.
pub fn select_buckets(
    buckets: Vec<Bucket>,
    max_buckets: usize,
    max_items: usize,
) -> Result<BucketPlan> {
    if max_buckets == 0 || max_items == 0 {
        return Err(Error::Config(format!(
            "V and G must be >= 1 (got V={max_buckets}, G={max_items})"
        )));
    }
    let mut ranked = buckets;
    ranked.sort_by_key(|b| (Reverse(b.last_key()), b.category));
    ranked.truncate(max_buckets);
    for b in &mut ranked {
        if b.items.len() > max_items {
            b.items.drain(..b.items.len() - max_items);
        }
    }
    ranked.reverse();
    Ok(BucketPlan {
        buckets: ranked,
        max_buckets,
        max_items,
    })
}

pub fn compress(
    history: &[Interaction],
    catalog: &ItemCatalog,
    max_buckets: usize,
    max_items: usize,
) -> Result<BucketPlan> {
    select_buckets(group_by_category(history, catalog)?, max_buckets, max_items)
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PlanBucketRecord {
    pub cat: CategoryId,
    pub items: Vec<ItemId>,
    pub ts: Vec<i64>,
}

/// JSONL line for the `compress` command.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PlanRecord {
    pub user: UserId,
    pub buckets: Vec<PlanBucketRecord>,
}

impl PlanRecord {
    pub fn new(user: UserId, plan: &BucketPlan) -> Self {
        Self {
            user,
            buckets: plan
                .buckets
                .iter()
                .map(|b| PlanBucketRecord {
                    cat: b.category,
                    items: b.items.iter().map(|e| e.item).collect(),
                    ts: b.items.iter().map(|e| e.ts).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(item: u32, ts: i64) -> Interaction {
        Interaction {
            user: 0,
            item,
            action: 0,
            ts,
            seq_pos: ts as u32,
        }
    }

    fn items(b: &Bucket) -> Vec<u32> {
        b.items.iter().map(|e| e.item).collect()
    }

    #[test]
    fn grouping_follows_categories() {
        // i1 -> A(0), i2 -> B(1), i3 -> A
        let cat = ItemCatalog::new(2, vec![vec![], vec![0], vec![1], vec![0]]).unwrap();
        let b = group_by_category(&[ev(1, 1), ev(2, 2), ev(3, 3)], &cat).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].category, items(&b[0])), (0, vec![1, 3]));
        assert_eq!((b[1].category, items(&b[1])), (1, vec![2]));
    }

    #[test]
    fn multi_category_item_joins_every_bucket() {
        let cat = ItemCatalog::new(2, vec![vec![], vec![0, 1]]).unwrap();
        let b = group_by_category(&[ev(1, 1)], &cat).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| items(b) == vec![1]));
    }

    #[test]
    fn empty_history_and_unknown_item() {
        let cat = ItemCatalog::new(1, vec![vec![0]]).unwrap();
        assert!(group_by_category(&[], &cat).unwrap().is_empty());
        let err = group_by_category(&[ev(5, 1)], &cat).unwrap_err();
        assert!(matches!(err, Error::UnknownItem(5)));
    }

    #[test]
    fn oldest_bucket_dropped_and_order_ascending() {
        // A=0 @7, B=1 @5, C=2 @4, D=3 @6
        let cat = ItemCatalog::new(4, vec![vec![0], vec![1], vec![2], vec![3]]).unwrap();
        let hist = [ev(2, 4), ev(1, 5), ev(3, 6), ev(0, 7)];
        let plan = compress(&hist, &cat, 3, 32).unwrap();
        let order: Vec<u32> = plan.buckets.iter().map(|b| b.category).collect();
        assert_eq!(order, vec![1, 3, 0]);
    }

    #[test]
    fn keeps_newest_items_per_bucket() {
        let cat = ItemCatalog::new(1, vec![vec![0]; 8]).unwrap();
        let plan = compress(&[ev(1, 1), ev(3, 3), ev(7, 7)], &cat, 8, 2).unwrap();
        assert_eq!(items(&plan.buckets[0]), vec![3, 7]);
    }

    #[test]
    fn fewer_buckets_than_v_are_all_kept() {
        let cat = ItemCatalog::new(2, vec![vec![0], vec![1]]).unwrap();
        let plan = compress(&[ev(0, 1), ev(1, 2)], &cat, 8, 32).unwrap();
        assert_eq!(plan.len(), 2);
    }

    #[test]
    fn tie_on_shared_item_prefers_smaller_category() {
        let cat = ItemCatalog::new(3, vec![vec![0], vec![1, 2]]).unwrap();
        let plan = compress(&[ev(0, 1), ev(1, 2)], &cat, 1, 4).unwrap();
        assert_eq!(plan.buckets[0].category, 1);
        let plan = compress(&[ev(0, 1), ev(1, 2)], &cat, 2, 4).unwrap();
        let order: Vec<u32> = plan.buckets.iter().map(|b| b.category).collect();
        assert_eq!(order, vec![2, 1]);
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(select_buckets(Vec::new(), 0, 1).is_err());
        assert!(select_buckets(Vec::new(), 1, 0).is_err());
    }
}
