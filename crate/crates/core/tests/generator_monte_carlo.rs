//! Monte-Carlo checks of the click generator against its planted probabilities.

use basm_core::numcore::sigmoid;
use basm_core::synthgen::{cell_stats, generate, GenConfig};

#[test]
fn dominant_bias_sets_the_cell_ctr() {
    let cfg = GenConfig {
        time_periods: 2,
        cities: 2,
        bias_amp: 6.0,
        phi: vec![vec![0.0; 4]; 2],
        period_weights: vec![1.0, 1.0],
        requests: 10_000,
        ..GenConfig::default()
    };
    let g = generate(&cfg).unwrap();
    assert!(g.impressions.len() >= 50_000);
    for s in cell_stats(&g) {
        let b = g.truth.bias[s.time_period as usize][s.city as usize];
        assert!(s.impressions >= 10_000, "{s:?}");
        assert!((s.mean_planted_ctr - sigmoid(b)).abs() < 1e-12);
        assert!((s.empirical_ctr - sigmoid(b)).abs() <= 0.02, "{s:?}");
    }
}

/// Clicks are Bernoulli given the planted probability, so a cell's deviation from
/// its mean planted rate has standard error `sqrt(Σ p(1−p)) / n`. The ±0.02 band
/// is checked on every cell where it spans at least four standard errors; the
/// thinnest default cells (under 1000 impressions) have a standard error near
/// 0.016, where the band is not a meaningful test, so every cell also gets a
/// four-standard-error bound.
#[test]
fn default_cells_track_their_planted_rate() {
    let g = generate(&GenConfig::default()).unwrap();
    assert_eq!(g.impressions.len(), 1_000_000);
    let mut var = std::collections::BTreeMap::<(u32, u32), f64>::new();
    for (imp, p) in g.impressions.iter().zip(&g.planted) {
        *var.entry((imp.context.time_period, imp.context.city)).or_default() += p * (1.0 - p);
    }
    let stats = cell_stats(&g);
    assert_eq!(stats.len(), 100);
    let mut banded = 0;
    for s in &stats {
        let se = var[&(s.time_period, s.city)].sqrt() / s.impressions as f64;
        let dev = (s.empirical_ctr - s.mean_planted_ctr).abs();
        assert!(dev <= 4.0 * se, "{s:?} se {se}");
        if 4.0 * se <= 0.02 {
            banded += 1;
            assert!(dev <= 0.02, "{s:?}");
        }
    }
    assert!(banded > 0);
}
