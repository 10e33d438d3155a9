use std::ops::Range;

use super::{Model, Special, Token, TokenSequence};
use crate::compressor::Bucket;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{SeqLayout, Tape, Tensor, Var};

/// Model parameters placed on a tape, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Backbone output: row `b * layout.len + p` holds position `p` of
/// sequence `b`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h: Var,
    pub layout: SeqLayout,
}

impl Encoded {
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.layout.len + pos
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn check_id(what: &str, id: u32, vocab: usize) -> Result<usize> {
    if (id as usize) < vocab {
        Ok(id as usize)
    } else {
        Err(Error::Invalid(format!(
            "{what} id {id} outside vocabulary of {vocab}"
        )))
    }
}

impl<T: Scalar> Model<T> {
    /// Records every parameter on `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn item_table(&self, bound: &Bound) -> Var {
        bound.vars[self.idx.item]
    }

    pub fn action_head(&self, bound: &Bound) -> (Var, Var) {
        (bound.vars[self.idx.action_w], bound.vars[self.idx.action_b])
    }

    /// One pooled row per bucket: the mean over member items of
    /// `W_align · E_item + b_align` (identity map when alignment is off)
    /// plus the bucket category's embedding.
    pub fn history_embeddings(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        buckets: &[&Bucket],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let mut items = Vec::new();
        let mut groups: Vec<Range<usize>> = Vec::with_capacity(buckets.len());
        let mut cats = Vec::with_capacity(buckets.len());
        for b in buckets {
            if b.items.is_empty() {
                return Err(Error::Invalid(format!(
                    "empty bucket for category {}",
                    b.category
                )));
            }
            if b.items.len() > cfg.max_items_per_bucket {
                return Err(Error::Invalid(format!(
                    "bucket of {} items exceeds G {}",
                    b.items.len(),
                    cfg.max_items_per_bucket
                )));
            }
            let start = items.len();
            for e in &b.items {
                items.push(check_id("item", e.item, cfg.item_vocab)?);
            }
            groups.push(start..items.len());
            cats.push(check_id("category", b.category, cfg.category_vocab)?);
        }
        let mut x = tape.gather_rows(bound.vars[self.idx.item], items)?;
        if cfg.use_align {
            x = linear(
                tape,
                x,
                bound.vars[self.idx.align_w],
                bound.vars[self.idx.align_b],
            )?;
        }
        let pooled = tape.group_mean(x, groups)?;
        let offset = tape.gather_rows(bound.vars[self.idx.category], cats)?;
        tape.add(pooled, offset)
    }

    /// Pooled embedding of a single bucket, outside any training graph.
    pub fn aggregate_bucket(&self, bucket: &Bucket) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = self.history_embeddings(&mut tape, &bound, &[bucket])?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Runs the backbone over a right-padded batch.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &[TokenSequence],
    ) -> Result<Encoded> {
        let cfg = &self.cfg;
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let len = batch.iter().map(TokenSequence::len).max().unwrap_or(0);
        if len == 0 || len > cfg.max_len() {
            return Err(Error::Invalid(format!(
                "sequence length {len} outside 1..={}",
                cfg.max_len()
            )));
        }

        // Source rows: specials, actions, then gathered users, history
        // buckets and item tokens. `order` maps every padded position to
        // its source row.
        enum Src {
            Fixed(usize),
            User(usize),
            Hist(usize),
            Item(usize),
        }
        let mut srcs = Vec::with_capacity(batch.len() * len);
        let mut users = Vec::new();
        let mut buckets: Vec<&Bucket> = Vec::new();
        let mut items = Vec::new();
        let mut item_groups = Vec::new();
        let mut item_cats = Vec::new();
        let mut merged_actions = Vec::new();
        let mut valid = Vec::with_capacity(batch.len());
        let t_rows = cfg.action_vocab;
        for seq in batch {
            for tok in &seq.tokens {
                let src = match tok {
                    Token::Special(s) => Src::Fixed(*s as usize),
                    Token::Action(a) => {
                        Src::Fixed(Special::COUNT + check_id("action", *a, t_rows)?)
                    }
                    Token::User(u) => {
                        users.push(check_id("user", *u, cfg.user_vocab)?);
                        Src::User(users.len() - 1)
                    }
                    Token::History(j) => {
                        let b = seq.buckets.get(*j).ok_or_else(|| {
                            Error::Invalid(format!("history token {j} without bucket"))
                        })?;
                        buckets.push(b);
                        Src::Hist(buckets.len() - 1)
                    }
                    Token::Item { item, cats } | Token::Merged { item, cats, .. } => {
                        if cats.is_empty() {
                            return Err(Error::UnknownItem(*item));
                        }
                        items.push(check_id("item", *item, cfg.item_vocab)?);
                        let start = item_cats.len();
                        for &c in cats {
                            item_cats.push(check_id("category", c, cfg.category_vocab)?);
                        }
                        item_groups.push(start..item_cats.len());
                        if let Token::Merged { action, .. } = tok {
                            merged_actions.push(check_id("action", *action, t_rows)?);
                        }
                        Src::Item(items.len() - 1)
                    }
                };
                srcs.push(src);
            }
            valid.push(seq.len());
            srcs.extend((seq.len()..len).map(|_| Src::Fixed(Special::Pad as usize)));
        }
        if !merged_actions.is_empty() && merged_actions.len() != items.len() {
            return Err(Error::Invalid(
                "batch mixes merged and interleaved tokens".into(),
            ));
        }

        let mut blocks = vec![bound.vars[self.idx.special], bound.vars[self.idx.action]];
        let user_base = Special::COUNT + t_rows;
        let mut next_base = user_base;
        if !users.is_empty() {
            blocks.push(tape.gather_rows(bound.vars[self.idx.user], users.clone())?);
            next_base += users.len();
        }
        let hist_base = next_base;
        if !buckets.is_empty() {
            blocks.push(self.history_embeddings(tape, bound, &buckets)?);
            next_base += buckets.len();
        }
        let item_base = next_base;
        if !items.is_empty() {
            let c = tape.gather_rows(bound.vars[self.idx.category], item_cats)?;
            let c = tape.group_mean(c, item_groups)?;
            let e = tape.gather_rows(bound.vars[self.idx.item], items)?;
            let mut x = tape.add(e, c)?;
            if !merged_actions.is_empty() {
                let a = tape.gather_rows(bound.vars[self.idx.action], merged_actions)?;
                x = tape.add(x, a)?;
            }
            blocks.push(x);
        }
        let source = tape.concat(&blocks)?;
        let order: Vec<usize> = srcs
            .iter()
            .map(|s| match *s {
                Src::Fixed(r) => r,
                Src::User(i) => user_base + i,
                Src::Hist(i) => hist_base + i,
                Src::Item(i) => item_base + i,
            })
            .collect();
        let tokens = tape.gather_rows(source, order)?;
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(bound.vars[self.idx.position], positions)?;
        let mut x = tape.add(tokens, pos)?;

        let layout = SeqLayout {
            batch: batch.len(),
            len,
            valid,
        };
        for l in &self.idx.layers {
            let v = |i: usize| bound.vars[i];
            let n = tape.layer_norm(x, v(l.ln1_g), v(l.ln1_b))?;
            let q = linear(tape, n, v(l.wq), v(l.bq))?;
            let k = linear(tape, n, v(l.wk), v(l.bk))?;
            let val = linear(tape, n, v(l.wv), v(l.bv))?;
            let a = tape.causal_attention(q, k, val, &layout, cfg.num_heads)?;
            let a = linear(tape, a, v(l.wo), v(l.bo))?;
            x = tape.add(x, a)?;
            let n = tape.layer_norm(x, v(l.ln2_g), v(l.ln2_b))?;
            let f = linear(tape, n, v(l.w1), v(l.b1))?;
            let f = tape.gelu(f)?;
            let f = linear(tape, f, v(l.w2), v(l.b2))?;
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(
            x,
            bound.vars[self.idx.final_g],
            bound.vars[self.idx.final_b],
        )?;
        Ok(Encoded { h, layout })
    }

    /// Hidden state at the last token of each sequence: the query used to
    /// score the next item.
    pub fn encode_last(&self, batch: &[TokenSequence]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &bound, batch)?;
        let rows: Vec<usize> = batch
            .iter()
            .enumerate()
            .map(|(b, s)| enc.row(b, s.len() - 1))
            .collect();
        let h = tape.value(enc.h);
        Ok(Tensor::from_fn(rows.len(), h.cols(), |r, c| {
            h.at(rows[r], c)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::BucketEntry;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            item_vocab: 10,
            action_vocab: 3,
            user_vocab: 4,
            category_vocab: 5,
            max_recent: 6,
            max_buckets: 3,
            max_items_per_bucket: 4,
            ..ModelConfig::default()
        }
    }

    fn bucket(category: u32, items: &[u32]) -> Bucket {
        Bucket {
            category,
            items: items
                .iter()
                .enumerate()
                .map(|(i, &item)| BucketEntry {
                    item,
                    ts: i as i64,
                    seq_pos: i as u32,
                })
                .collect(),
        }
    }

    #[test]
    fn bucket_checks() {
        let m = Model::<f64>::new(cfg(), 0).unwrap();
        assert!(m.aggregate_bucket(&bucket(0, &[])).is_err());
        assert!(m.aggregate_bucket(&bucket(0, &[1, 2, 3, 4, 5])).is_err());
        assert!(m.aggregate_bucket(&bucket(9, &[1])).is_err());
        assert_eq!(m.aggregate_bucket(&bucket(1, &[1, 2])).unwrap().len(), 8);
    }

    #[test]
    fn out_of_vocab_tokens_are_rejected() {
        let m = Model::<f64>::new(cfg(), 0).unwrap();
        let seq = TokenSequence {
            user: 7,
            tokens: vec![Token::Special(Special::SegUser), Token::User(7)],
            buckets: vec![],
            item_targets: vec![],
            action_targets: vec![],
        };
        assert!(matches!(m.encode_last(&[seq]), Err(Error::Invalid(_))));
    }
}
