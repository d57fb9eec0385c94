//! Brute-force metric oracles and random record sets shared by the metric tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use basm_core::metrics::ScoredRecord;
use rand::Rng;

/// AUC by enumerating every positive/negative pair; ties count one half.
pub fn pairwise_auc(records: &[ScoredRecord]) -> Option<f64> {
    let pos: Vec<f64> = records.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
    let neg: Vec<f64> = records.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Σ_g n_g·AUC_g / Σ_g n_g over groups holding both classes.
pub fn grouped_oracle(records: &[ScoredRecord], key: impl Fn(&ScoredRecord) -> u32) -> Option<f64> {
    let mut by: BTreeMap<u32, Vec<ScoredRecord>> = BTreeMap::new();
    for r in records {
        by.entry(key(r)).or_default().push(r.clone());
    }
    let (mut num, mut den) = (0.0, 0.0);
    for rs in by.values() {
        if let Some(a) = pairwise_auc(rs) {
            num += rs.len() as f64 * a;
            den += rs.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Per-request NDCG@k from the textbook sum, averaged over requests with a click.
pub fn ndcg_oracle(records: &[ScoredRecord], k: usize) -> Option<f64> {
    let mut by: BTreeMap<u64, Vec<ScoredRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.request_id).or_default().push(r.clone());
    }
    let mut values = Vec::new();
    for rs in by.values_mut() {
        // Insertion sort keeps the comparator in plain sight.
        let mut ranked: Vec<ScoredRecord> = Vec::new();
        for r in rs.drain(..) {
            let at = ranked
                .iter()
                .position(|q| r.score > q.score || (r.score == q.score && r.item_id < q.item_id))
                .unwrap_or(ranked.len());
            ranked.insert(at, r);
        }
        let mut ideal: Vec<u8> = ranked.iter().map(|r| r.label).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let gain = |labels: &[u8]| -> f64 {
            let mut s = 0.0;
            for (i, y) in labels.iter().enumerate().take(k) {
                let position = (i + 1) as f64;
                s += (2f64.powi(i32::from(*y)) - 1.0) / (position + 1.0).log2();
            }
            s
        };
        let idcg = gain(&ideal);
        if idcg > 0.0 {
            values.push(gain(&ranked.iter().map(|r| r.label).collect::<Vec<_>>()) / idcg);
        }
    }
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// A record set with heavy score ties, a few periods, cities and requests, and
/// unique item ids inside each request.
pub fn random_records(rng: &mut impl Rng) -> Vec<ScoredRecord> {
    let n = rng.random_range(2..80);
    let levels = rng.random_range(2..12);
    let requests = rng.random_range(1..10u64);
    let mut out: Vec<ScoredRecord> = (0..n)
        .map(|i| ScoredRecord {
            request_id: rng.random_range(0..requests),
            time_period_id: rng.random_range(0..5),
            city_id: rng.random_range(0..4),
            label: u8::from(rng.random_bool(0.3)),
            score: f64::from(rng.random_range(0..levels)) / f64::from(levels),
            item_id: i as u64,
        })
        .collect();
    // Both classes somewhere, so the overall AUC is defined.
    out[0].label = 1;
    out[1].label = 0;
    out
}
