use std::path::Path;

use cause::datalog::{
    format_events, generate_synthetic, load_catalog, parse_events, write_catalog, Dataset, Format,
    ItemCatalog, SynthConfig,
};
use proptest::prelude::*;

/// Category histogram of a slice of events, each item's unit mass split
/// evenly across its categories.
fn histogram(ds: &Dataset, events: &[cause::datalog::Interaction]) -> Vec<f64> {
    let mut h = vec![0.0; ds.vocab.categories];
    for e in events {
        let cats = ds.catalog.categories_of(e.item).unwrap();
        for &c in cats {
            h[c as usize] += 1.0 / cats.len() as f64;
        }
    }
    let total: f64 = h.iter().sum();
    h.iter().map(|x| x / total).collect()
}

fn mean_half_split_tv(strength: f64) -> f64 {
    let cfg = SynthConfig {
        num_users: 100,
        events_per_user: 1024,
        long_range_interest_strength: strength,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let tvs: Vec<f64> = ds
        .sequences
        .iter()
        .map(|s| {
            let (a, b) = s.events.split_at(s.len() / 2);
            let (ha, hb) = (histogram(&ds, a), histogram(&ds, b));
            0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
        })
        .collect();
    tvs.iter().sum::<f64>() / tvs.len() as f64
}

#[test]
fn stable_interest_keeps_early_and_late_category_mix_close() {
    let stable = mean_half_split_tv(1.0);
    let drifting = mean_half_split_tv(0.0);
    assert!(stable < 0.15, "stable users drift too much: {stable}");
    assert!(drifting > stable, "drift {drifting} vs stable {stable}");
}

#[test]
fn catalog_round_trip() {
    let catalog = ItemCatalog::new(4, vec![vec![0, 3], vec![], vec![2]]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.jsonl");
    write_catalog(&path, &catalog).unwrap();
    assert_eq!(load_catalog(&path).unwrap(), catalog);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn event_log_round_trips(seed in any::<u64>(), users in 1usize..6, events in 1usize..40, tsv in any::<bool>()) {
        let cfg = SynthConfig {
            num_users: users,
            num_items: 16,
            num_categories: 4,
            num_actions: 3,
            events_per_user: events,
            seed,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let format = if tsv { Format::Tsv } else { Format::Jsonl };
        let text = format_events(&ds, format).unwrap();
        let back = parse_events(&text, format, Path::new("mem")).unwrap();
        prop_assert_eq!(&back.vocab, &ds.vocab);
        prop_assert_eq!(&back.sequences, &ds.sequences);
        for e in ds.sequences.iter().flat_map(|s| &s.events) {
            prop_assert_eq!(back.catalog.categories_of(e.item), ds.catalog.categories_of(e.item));
        }
        prop_assert_eq!(format_events(&back, format).unwrap(), text);
    }
}
