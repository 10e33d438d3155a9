//! Event and catalog file formats.
//!
//! Event JSONL, one object per line:
//! `{"action":0,"cats":[1,4],"item":7,"ts":1000,"user":3}`.
//! Event TSV: `user\titem\taction\tts\tcat1|cat2`.
//! Either format may open with `#meta {"actions":T,"categories":C,"items":N,"users":M}`
//! declaring vocabulary sizes; otherwise sizes are `max id + 1`.
//!
//! Catalog JSONL: optional `#meta {"categories":C,"items":N}` then
//! `{"cats":[..],"item":i}` per item.
//!
//! Any other line starting with `#` is a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CategoryId, Dataset, Interaction, ItemCatalog, UserSequence, Vocab};
use crate::error::{Error, Result};

const META: &str = "#meta";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Tsv,
}

impl Format {
    /// `.tsv` selects TSV, anything else JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Format::Tsv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    users: Option<usize>,
    items: Option<usize>,
    actions: Option<usize>,
    categories: Option<usize>,
}

// Field order is the serialized key order.
#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    action: u32,
    cats: Vec<u32>,
    item: u32,
    ts: i64,
    user: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogRecord {
    cats: Vec<u32>,
    item: u32,
}

#[derive(Serialize)]
struct CatalogMeta {
    categories: usize,
    items: usize,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_tsv(line: &str) -> std::result::Result<EventRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!(
            "expected 5 tab-separated fields, got {}",
            fields.len()
        ));
    }
    let num = |s: &str, what: &str| s.trim().parse::<u32>().map_err(|e| format!("{what}: {e}"));
    let cats = fields[4]
        .split('|')
        .map(|c| num(c, "category"))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(EventRecord {
        user: num(fields[0], "user")?,
        item: num(fields[1], "item")?,
        action: num(fields[2], "action")?,
        ts: fields[3].trim().parse().map_err(|e| format!("ts: {e}"))?,
        cats,
    })
}

/// Parses an event log held in memory. `path` only labels errors.
pub fn parse_events(text: &str, format: Format, path: &Path) -> Result<Dataset> {
    let mut meta = Meta::default();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(META) {
            if !records.is_empty() {
                return Err(parse_err(path, lineno, "#meta header must precede records"));
            }
            meta = serde_json::from_str(rest.trim())
                .map_err(|e| parse_err(path, lineno, e.to_string()))?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let rec = match format {
            Format::Jsonl => serde_json::from_str::<EventRecord>(line).map_err(|e| e.to_string()),
            Format::Tsv => parse_tsv(line),
        }
        .map_err(|m| parse_err(path, lineno, m))?;
        if rec.cats.is_empty() {
            return Err(parse_err(path, lineno, "record has no categories"));
        }
        records.push((lineno, rec));
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} has no records",
            path.display()
        )));
    }

    let max_of = |f: &dyn Fn(&EventRecord) -> usize| {
        records.iter().map(|(_, r)| f(r)).max().unwrap_or(0) + 1
    };
    let vocab = Vocab {
        users: meta.users.unwrap_or_else(|| max_of(&|r| r.user as usize)),
        items: meta.items.unwrap_or_else(|| max_of(&|r| r.item as usize)),
        actions: meta
            .actions
            .unwrap_or_else(|| max_of(&|r| r.action as usize)),
        categories: meta
            .categories
            .unwrap_or_else(|| max_of(&|r| r.cats.iter().copied().max().unwrap_or(0) as usize)),
    };

    let mut categories: Vec<Vec<CategoryId>> = vec![Vec::new(); vocab.items];
    let mut per_user: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for (lineno, r) in records {
        let bad = |what: &str, v: usize, bound: usize| {
            Error::Validation(format!(
                "{}:{lineno}: {what} {v} out of bounds (< {bound})",
                path.display()
            ))
        };
        if r.user as usize >= vocab.users {
            return Err(bad("user", r.user as usize, vocab.users));
        }
        if r.item as usize >= vocab.items {
            return Err(bad("item", r.item as usize, vocab.items));
        }
        if r.action as usize >= vocab.actions {
            return Err(bad("action", r.action as usize, vocab.actions));
        }
        if let Some(&c) = r.cats.iter().find(|&&c| c as usize >= vocab.categories) {
            return Err(bad("category", c as usize, vocab.categories));
        }
        categories[r.item as usize].extend_from_slice(&r.cats);
        let events = per_user.entry(r.user).or_default();
        let seq_pos = events.len() as u32;
        events.push(Interaction {
            user: r.user,
            item: r.item,
            action: r.action,
            ts: r.ts,
            seq_pos,
        });
    }

    let catalog = ItemCatalog::new(vocab.categories, categories)?;
    let sequences = per_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(Interaction::key);
            UserSequence::new(user, events)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        vocab,
        sequences,
        catalog,
    })
}

pub fn load_events(path: &Path, format: Format) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_events(&text, format, path)
}

/// Serialises a dataset. Users in id order, events in sequence order, keys
/// sorted, `\n` line endings.
pub fn format_events(ds: &Dataset, format: Format) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{META} {}", serde_json::to_string(&ds.vocab)?).ok();
    for seq in &ds.sequences {
        for e in &seq.events {
            let cats = ds.catalog.categories_of(e.item).unwrap_or(&[]).to_vec();
            match format {
                Format::Jsonl => {
                    let rec = EventRecord {
                        action: e.action,
                        cats,
                        item: e.item,
                        ts: e.ts,
                        user: e.user,
                    };
                    writeln!(out, "{}", serde_json::to_string(&rec)?).ok();
                }
                Format::Tsv => {
                    let cats: Vec<String> = cats.iter().map(u32::to_string).collect();
                    writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{}",
                        e.user,
                        e.item,
                        e.action,
                        e.ts,
                        cats.join("|")
                    )
                    .ok();
                }
            }
        }
    }
    Ok(out)
}

pub fn write_events(path: &Path, ds: &Dataset, format: Format) -> Result<()> {
    fs::write(path, format_events(ds, format)?)?;
    Ok(())
}

pub fn write_catalog(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    let mut out = String::new();
    let meta = CatalogMeta {
        categories: catalog.num_categories(),
        items: catalog.num_items(),
    };
    writeln!(out, "{META} {}", serde_json::to_string(&meta)?).ok();
    for item in 0..catalog.num_items() as u32 {
        let rec = CatalogRecord {
            cats: catalog.categories_of(item).unwrap_or(&[]).to_vec(),
            item,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).ok();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let text = fs::read_to_string(path)?;
    let mut meta = Meta::default();
    let mut recs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(META) {
            meta = serde_json::from_str(rest.trim())
                .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let r: CatalogRecord =
            serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        recs.push(r);
    }
    if recs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} has no catalog records",
            path.display()
        )));
    }
    let items = meta
        .items
        .unwrap_or_else(|| recs.iter().map(|r| r.item as usize + 1).max().unwrap_or(0));
    let cats = meta.categories.unwrap_or_else(|| {
        recs.iter()
            .flat_map(|r| r.cats.iter().map(|&c| c as usize + 1))
            .max()
            .unwrap_or(0)
    });
    let mut table = vec![Vec::new(); items];
    for r in recs {
        let slot = table
            .get_mut(r.item as usize)
            .ok_or_else(|| Error::Validation(format!("catalog item {} >= {items}", r.item)))?;
        slot.extend(r.cats);
    }
    ItemCatalog::new(cats, table)
}
