use serde::{Deserialize, Serialize};

use super::{Interaction, UserSequence};
use crate::error::{Error, Result};

/// Splits `events` into `(history, recent)` where `recent` holds the last
/// `min(i_len, len)` events.
pub fn partition_history_recent(
    events: &[Interaction],
    i_len: usize,
) -> Result<(&[Interaction], &[Interaction])> {
    if i_len == 0 {
        return Err(Error::Config("iLen must be >= 1".into()));
    }
    let cut = events.len().saturating_sub(i_len);
    Ok(events.split_at(cut))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SplitSpec {
    /// Last event is test, second to last validation, the rest training.
    LeaveOneOut,
    /// `ts < val_from` is training, `ts < test_from` validation, the rest test.
    Threshold { val_from: i64, test_from: i64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<UserSequence>,
    pub val: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
    /// Users dropped because they had too few events for the mode.
    pub skipped: usize,
}

impl Splits {
    pub fn train_of(&self, user: u32) -> Option<&UserSequence> {
        find(&self.train, user)
    }

    pub fn val_of(&self, user: u32) -> Option<&UserSequence> {
        find(&self.val, user)
    }

    pub fn test_of(&self, user: u32) -> Option<&UserSequence> {
        find(&self.test, user)
    }
}

fn find(seqs: &[UserSequence], user: u32) -> Option<&UserSequence> {
    seqs.binary_search_by_key(&user, |s| s.user)
        .ok()
        .map(|i| &seqs[i])
}

/// Per-user disjoint, exhaustive split. Output lists are sorted by user and
/// omit users with no events in that part.
pub fn split(seqs: &[UserSequence], spec: SplitSpec) -> Splits {
    let mut out = Splits::default();
    let mut sorted: Vec<&UserSequence> = seqs.iter().collect();
    sorted.sort_by_key(|s| s.user);
    for s in sorted {
        let (train, val, test): (Vec<_>, Vec<_>, Vec<_>) = match spec {
            SplitSpec::LeaveOneOut => {
                let n = s.events.len();
                if n < 3 {
                    out.skipped += 1;
                    continue;
                }
                (
                    s.events[..n - 2].to_vec(),
                    vec![s.events[n - 2]],
                    vec![s.events[n - 1]],
                )
            }
            SplitSpec::Threshold {
                val_from,
                test_from,
            } => {
                let mut parts = (Vec::new(), Vec::new(), Vec::new());
                for &e in &s.events {
                    if e.ts < val_from {
                        parts.0.push(e);
                    } else if e.ts < test_from {
                        parts.1.push(e);
                    } else {
                        parts.2.push(e);
                    }
                }
                parts
            }
        };
        for (dst, events) in [
            (&mut out.train, train),
            (&mut out.val, val),
            (&mut out.test, test),
        ] {
            if !events.is_empty() {
                dst.push(UserSequence {
                    user: s.user,
                    events,
                });
            }
        }
    }
    out
}
