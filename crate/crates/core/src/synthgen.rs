//! Synthetic click logs with a planted per-(time-period, city) bias and
//! per-period field importance.
//!
//! Each impression's click probability is
//! `sigmoid(b[t][c] + Σ_f Φ[t][f] · s_f)` where the four field scores are bounded
//! by `field_amp`:
//! - user: `A·tanh(z_u·w_user/√d)`
//! - behavior: `A·tanh(q̄_all + q̄_near)`, the mean category quality over all of
//!   the user's past clicks plus the mean over those made in the same
//!   time-period and geohash cell (all past clicks when none match; 0 without
//!   history)
//! - item: `A·tanh(z_v·w_item/√d)`
//! - combine: `A·tanh(z_u·z_v/√d)` snapped to the centre of one of
//!   `combine_buckets` equal bins; the bin is the combine feature.
//!
//! Requests are processed in id order, which is also time order, so behavior
//! sequences only ever contain strictly earlier clicks.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    filtered_events, time_period_names, BehaviorEvent, Context, ContextSpec, Impression, VocabEntry, VocabFile,
};
use crate::numcore::sigmoid;

/// Planted fields in score order.
pub const FIELDS: [&str; 4] = ["user", "behavior", "item", "combine"];

const GEOHASH_ALPHABET: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub time_periods: u32,
    pub cities: u32,
    pub users: u32,
    pub items: u32,
    pub categories: u32,
    pub latent_dim: usize,
    /// Half-width of the uniform per-(period, city) logit bias.
    pub bias_amp: f64,
    /// Bound `A` of every field score.
    pub field_amp: f64,
    /// `Φ[t][f]`, fields ordered as [`FIELDS`]; rows are max-normalized on use.
    pub phi: Vec<Vec<f64>>,
    /// Relative request volume of each time-period.
    pub period_weights: Vec<f64>,
    pub zipf_exponent: f64,
    pub cells_per_city: u32,
    /// Probability that a request comes from the user's home cell.
    pub home_cell_prob: f64,
    /// Probability that a candidate is drawn from the user's preferred category for
    /// the period rather than uniformly.
    pub preferred_draw_prob: f64,
    pub combine_buckets: u32,
    pub max_behaviors: usize,
    pub geohash_prefix: usize,
    pub geohash_buckets: u32,
    pub impressions_per_request: u32,
    pub requests: u64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            time_periods: 5,
            cities: 20,
            users: 5000,
            items: 2000,
            categories: 8,
            latent_dim: 8,
            bias_amp: 1.0,
            field_amp: 2.5,
            phi: default_phi(),
            period_weights: vec![1.0, 3.0, 1.5, 3.0, 1.0],
            zipf_exponent: 1.2,
            cells_per_city: 4,
            home_cell_prob: 0.8,
            preferred_draw_prob: 0.5,
            combine_buckets: 16,
            max_behaviors: 20,
            geohash_prefix: 4,
            geohash_buckets: 128,
            impressions_per_request: 10,
            requests: 100_000,
            seed: 7,
        }
    }
}

/// Each period emphasizes a different field and every field peaks at least once.
/// Rows are arranged so that each field's exposure-weighted mean importance is
/// about the same (0.48 to 0.49 under the default period weights): gate values
/// are only identified relative to a field's own average, so balanced columns keep
/// per-period gate rankings comparable across fields.
pub fn default_phi() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, 0.55, 0.3, 0.1],
        vec![0.3, 1.0, 0.1, 0.55],
        vec![0.55, 0.1, 0.3, 1.0],
        vec![0.55, 0.3, 1.0, 0.1],
        vec![0.3, 0.1, 0.55, 1.0],
    ]
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.time_periods < 2 || self.cities < 2 {
            return bad("need at least 2 time-periods and 2 cities".into());
        }
        if self.users == 0 || self.items == 0 || self.categories == 0 || self.latent_dim == 0 {
            return bad("users, items, categories and latent_dim must be positive".into());
        }
        if self.phi.len() != self.time_periods as usize || self.phi.iter().any(|r| r.len() != FIELDS.len()) {
            return bad(format!(
                "phi must be {}×{}",
                self.time_periods,
                FIELDS.len()
            ));
        }
        if self.phi.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("phi entries must be finite and non-negative".into());
        }
        if self.period_weights.len() != self.time_periods as usize
            || self.period_weights.iter().any(|w| !(w.is_finite() && *w > 0.0))
        {
            return bad("period_weights needs one positive weight per time-period".into());
        }
        for (name, v) in [
            ("home_cell_prob", self.home_cell_prob),
            ("preferred_draw_prob", self.preferred_draw_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.bias_amp >= 0.0 && self.field_amp >= 0.0 && self.zipf_exponent >= 0.0) {
            return bad("amplitudes and zipf exponent must be non-negative".into());
        }
        if self.cells_per_city == 0 || self.cells_per_city as usize > GEOHASH_ALPHABET.len() {
            return bad("cells_per_city must be in 1..=32".into());
        }
        if self.combine_buckets == 0 || self.geohash_buckets == 0 || self.impressions_per_request == 0 {
            return bad("bucket counts and impressions_per_request must be positive".into());
        }
        if self.geohash_prefix != 4 {
            return bad("generated geohashes encode the cell in their first 4 characters".into());
        }
        Ok(())
    }

    /// Φ with each row scaled so its maximum is 1 (all-zero rows stay zero).
    pub fn normalized_phi(&self) -> Vec<Vec<f64>> {
        self.phi
            .iter()
            .map(|row| {
                let m = row.iter().copied().fold(0.0, f64::max);
                row.iter().map(|v| if m > 0.0 { v / m } else { 0.0 }).collect()
            })
            .collect()
    }

    pub fn vocab(&self) -> VocabFile {
        BTreeMap::from([
            ("user".to_string(), VocabEntry::Count(1 + self.users as usize)),
            (
                "item".to_string(),
                VocabEntry::Count(1 + (self.items + self.categories) as usize),
            ),
            (
                "combine".to_string(),
                VocabEntry::Count(1 + self.combine_buckets as usize),
            ),
            (
                "context".to_string(),
                VocabEntry::Context(ContextSpec {
                    time_periods: self.time_periods,
                    cities: self.cities,
                    geohash_buckets: self.geohash_buckets,
                }),
            ),
        ])
    }

    /// Feature slots per field as the generator emits them.
    pub fn slots(&self) -> BTreeMap<String, usize> {
        BTreeMap::from([
            ("user".to_string(), 1),
            ("item".to_string(), 2),
            ("combine".to_string(), 1),
        ])
    }
}

/// Everything needed to recompute click probabilities; never given to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub field_amp: f64,
    pub combine_buckets: u32,
    pub geohash_prefix: usize,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub user_direction: Vec<f64>,
    pub item_direction: Vec<f64>,
    pub item_category: Vec<u32>,
    /// Quality `q_k` of each category, read through past clicks.
    pub category_quality: Vec<f64>,
    pub user_city: Vec<u32>,
    pub user_cell: Vec<u32>,
    /// Preferred category per user and period.
    pub user_preference: Vec<Vec<u32>>,
    /// `b[t][c]`.
    pub bias: Vec<Vec<f64>>,
    /// Row-normalized `Φ[t][f]`.
    pub phi: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn sample(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.latent_dim;
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
        let user_direction = gauss(&mut rng);
        let item_direction = gauss(&mut rng);
        let user_latent = (0..cfg.users).map(|_| gauss(&mut rng)).collect();
        let item_latent = (0..cfg.items).map(|_| gauss(&mut rng)).collect();
        let item_category = (0..cfg.items).map(|_| rng.random_range(0..cfg.categories)).collect();
        let category_quality = (0..cfg.categories).map(|_| rng.sample(StandardNormal)).collect();
        let zipf: Vec<f64> = (1..=cfg.cities)
            .map(|k| (k as f64).powf(-cfg.zipf_exponent))
            .collect();
        let city_dist = WeightedIndex::new(&zipf).expect("positive weights");
        let user_city = (0..cfg.users).map(|_| city_dist.sample(&mut rng) as u32).collect();
        let user_cell = (0..cfg.users)
            .map(|_| rng.random_range(0..cfg.cells_per_city))
            .collect();
        let user_preference = (0..cfg.users)
            .map(|_| {
                (0..cfg.time_periods)
                    .map(|_| rng.random_range(0..cfg.categories))
                    .collect()
            })
            .collect();
        let bias = (0..cfg.time_periods)
            .map(|_| {
                (0..cfg.cities)
                    .map(|_| {
                        if cfg.bias_amp > 0.0 {
                            rng.random_range(-cfg.bias_amp..=cfg.bias_amp)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            field_amp: cfg.field_amp,
            combine_buckets: cfg.combine_buckets,
            geohash_prefix: cfg.geohash_prefix,
            user_latent,
            item_latent,
            user_direction,
            item_direction,
            item_category,
            category_quality,
            user_city,
            user_cell,
            user_preference,
            bias,
            phi: cfg.normalized_phi(),
        })
    }

    fn bounded(&self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        self.field_amp * (dot / (a.len() as f64).sqrt()).tanh()
    }

    /// Combine bucket of a user–item pair and that bucket's centre score.
    pub fn combine(&self, user: usize, item: usize) -> (u32, f64) {
        let s = self.bounded(&self.user_latent[user], &self.item_latent[item]);
        let n = self.combine_buckets;
        let a = self.field_amp;
        if a == 0.0 {
            return (0, 0.0);
        }
        let b = (((s + a) / (2.0 * a)) * f64::from(n)).floor().clamp(0.0, f64::from(n - 1)) as u32;
        let centre = -a + (f64::from(b) + 0.5) * 2.0 * a / f64::from(n);
        (b, centre)
    }

    /// Field scores `[user, behavior, item, combine]` of one impression.
    /// `behaviors` uses the data's category ids (item-field local ids).
    pub fn field_scores(&self, user: usize, item: usize, imp: &Impression) -> [f64; 4] {
        let first_category = 1 + self.item_latent.len() as u32;
        let quality = |events: &[usize]| -> f64 {
            events
                .iter()
                .map(|&e| self.category_quality[(imp.behaviors[e].category - first_category) as usize])
                .sum::<f64>()
                / events.len() as f64
        };
        let behavior = if imp.behaviors.is_empty() {
            0.0
        } else {
            let all: Vec<usize> = (0..imp.behaviors.len()).collect();
            let near = filtered_events(imp, self.geohash_prefix);
            self.field_amp * (quality(&all) + quality(&near)).tanh()
        };
        [
            self.bounded(&self.user_latent[user], &self.user_direction),
            behavior,
            self.bounded(&self.item_latent[item], &self.item_direction),
            self.combine(user, item).1,
        ]
    }

    fn category_local_id(&self, category: u32) -> u32 {
        1 + self.item_latent.len() as u32 + category
    }
}

/// `sigmoid(b[t][c] + Σ_f Φ[t][f]·s_f)`.
pub fn planted_ctr(truth: &GroundTruth, t: usize, c: usize, scores: &[f64; 4]) -> f64 {
    let signal: f64 = truth.phi[t].iter().zip(scores).map(|(p, s)| p * s).sum();
    sigmoid(truth.bias[t][c] + signal)
}

/// Hour range `[start, start+len)` (mod 24) of each meal period; evenly split
/// when the period count differs from five.
fn hour_window(t: u32, periods: u32) -> (u32, u32) {
    if periods == 5 {
        [(6, 4), (10, 4), (14, 3), (17, 4), (21, 9)][t as usize]
    } else {
        let len = (24 / periods).max(1);
        ((t * len) % 24, len)
    }
}

fn geohash(city: u32, cell: u32, jitter: [u8; 2]) -> String {
    let a = GEOHASH_ALPHABET;
    let n = a.len() as u32;
    let chars = [
        a[(city / n % n) as usize],
        a[(city % n) as usize],
        b'0',
        a[cell as usize],
        a[jitter[0] as usize % a.len()],
        a[jitter[1] as usize % a.len()],
    ];
    String::from_utf8(chars.to_vec()).expect("ascii")
}

/// Generated dataset with the planted click probability of every impression.
#[derive(Clone, Debug)]
pub struct Generated {
    pub impressions: Vec<Impression>,
    pub planted: Vec<f64>,
    pub truth: GroundTruth,
}

/// Deterministic generation. Per-request randomness comes from a ChaCha stream
/// indexed by the request id, so a request's draws do not depend on how many
/// values earlier requests consumed.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    let truth = GroundTruth::sample(cfg)?;
    let period_dist = WeightedIndex::new(&cfg.period_weights).expect("validated");
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); cfg.categories as usize];
    for (v, &k) in truth.item_category.iter().enumerate() {
        by_category[k as usize].push(v);
    }
    let mut history: Vec<VecDeque<BehaviorEvent>> = vec![VecDeque::new(); cfg.users as usize];
    let per = cfg.impressions_per_request as usize;
    let total = cfg.requests as usize * per;
    let mut impressions = Vec::with_capacity(total);
    let mut planted = Vec::with_capacity(total);
    let empty: Arc<[BehaviorEvent]> = Arc::from(Vec::new());
    for req in 0..cfg.requests {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(req.wrapping_add(1));
        let u = rng.random_range(0..cfg.users) as usize;
        let t = period_dist.sample(&mut rng) as u32;
        let (start, len) = hour_window(t, cfg.time_periods);
        let hour = (start + rng.random_range(0..len)) % 24;
        let city = truth.user_city[u];
        let cell = if rng.random_bool(cfg.home_cell_prob) {
            truth.user_cell[u]
        } else {
            rng.random_range(0..cfg.cells_per_city)
        };
        let context = Context {
            time_period: t,
            hour,
            city,
            geohash: geohash(city, cell, [rng.random(), rng.random()]),
        };
        let behaviors: Arc<[BehaviorEvent]> = if history[u].is_empty() {
            empty.clone()
        } else {
            history[u].iter().cloned().collect::<Vec<_>>().into()
        };
        let preferred = &by_category[truth.user_preference[u][t as usize] as usize];
        let mut clicks = Vec::new();
        for _ in 0..per {
            let v = if !preferred.is_empty() && rng.random_bool(cfg.preferred_draw_prob) {
                preferred[rng.random_range(0..preferred.len())]
            } else {
                rng.random_range(0..cfg.items) as usize
            };
            let (bucket, _) = truth.combine(u, v);
            let mut imp = Impression {
                request_id: req,
                user: vec![1 + u as u32],
                behaviors: behaviors.clone(),
                item: vec![1 + v as u32, truth.category_local_id(truth.item_category[v])],
                context: context.clone(),
                combine: vec![1 + bucket],
                extra: BTreeMap::new(),
                label: 0,
            };
            let scores = truth.field_scores(u, v, &imp);
            let p = planted_ctr(&truth, t as usize, city as usize, &scores);
            imp.label = u8::from(rng.random_bool(p));
            if imp.label == 1 {
                clicks.push(BehaviorEvent {
                    item: imp.item[0],
                    category: imp.item[1],
                    time_period: t,
                    hour,
                    city,
                    geohash: context.geohash.clone(),
                });
            }
            impressions.push(imp);
            planted.push(p);
        }
        let h = &mut history[u];
        for e in clicks {
            if cfg.max_behaviors == 0 {
                break;
            }
            if h.len() == cfg.max_behaviors {
                h.pop_front();
            }
            h.push_back(e);
        }
    }
    Ok(Generated {
        impressions,
        planted,
        truth,
    })
}

/// Per-(period, city) exposure and click-rate summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub time_period: u32,
    pub city: u32,
    pub impressions: usize,
    pub clicks: usize,
    pub empirical_ctr: f64,
    pub mean_planted_ctr: f64,
    pub bias_ctr: f64,
}

pub fn cell_stats(g: &Generated) -> Vec<CellStat> {
    let mut acc: BTreeMap<(u32, u32), (usize, usize, f64)> = BTreeMap::new();
    for (imp, p) in g.impressions.iter().zip(&g.planted) {
        let e = acc.entry((imp.context.time_period, imp.context.city)).or_default();
        e.0 += 1;
        e.1 += usize::from(imp.label);
        e.2 += p;
    }
    acc.into_iter()
        .map(|((t, c), (n, k, p))| CellStat {
            time_period: t,
            city: c,
            impressions: n,
            clicks: k,
            empirical_ctr: k as f64 / n as f64,
            mean_planted_ctr: p / n as f64,
            bias_ctr: sigmoid(g.truth.bias[t as usize][c as usize]),
        })
        .collect()
}

/// Writes `dataset.jsonl`, `truth.json`, `vocab.json` and `stats.csv` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &GenConfig, g: &Generated) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::features::write_jsonl(&dir.join("dataset.jsonl"), &g.impressions)?;
    write_json(&dir.join("truth.json"), &g.truth)?;
    write_json(&dir.join("vocab.json"), &cfg.vocab())?;
    let path = dir.join("stats.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let names = time_period_names(cfg.time_periods);
    let io = |e| Error::io(&path, e);
    writeln!(w, "time_period,time_period_name,city,impressions,clicks,empirical_ctr,mean_planted_ctr,bias_ctr").map_err(io)?;
    for s in cell_stats(g) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.time_period,
            names[s.time_period as usize],
            s.city,
            s.impressions,
            s.clicks,
            s.empirical_ctr,
            s.mean_planted_ctr,
            s.bias_ctr
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
