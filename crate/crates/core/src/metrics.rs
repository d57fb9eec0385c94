//! Ranking and classification metrics: midrank AUC, impression-weighted group AUC
//! over time-periods and cities, per-request NDCG@k and logloss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::bce_term;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub request_id: u64,
    pub time_period_id: u32,
    pub city_id: u32,
    pub label: u8,
    pub score: f64,
    /// Deterministic tie-break key for NDCG.
    #[serde(default)]
    pub item_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    TimePeriod,
    City,
}

impl GroupKey {
    pub fn of(self, r: &ScoredRecord) -> u32 {
        match self {
            GroupKey::TimePeriod => r.time_period_id,
            GroupKey::City => r.city_id,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupKey::TimePeriod => "time_period",
            GroupKey::City => "city",
        }
    }
}

fn check(records: &[ScoredRecord]) -> Result<()> {
    for r in records {
        if r.label > 1 {
            return Err(Error::Data(format!("label {} is not 0 or 1", r.label)));
        }
        if !r.score.is_finite() {
            return Err(Error::Data(format!("non-finite score in request {}", r.request_id)));
        }
    }
    Ok(())
}

/// Mann–Whitney AUC with midranks for tied scores.
pub fn auc(records: &[ScoredRecord]) -> Result<f64> {
    check(records)?;
    auc_of(records.iter().map(|r| (r.score, r.label == 1)))
}

/// AUC of `(score, is_positive)` pairs.
pub fn auc_of(pairs: impl IntoIterator<Item = (f64, bool)>) -> Result<f64> {
    let mut v: Vec<(f64, bool)> = pairs.into_iter().collect();
    let pos = v.iter().filter(|p| p.1).count();
    let neg = v.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1].0 == v[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_pos = v[i..=j].iter().filter(|p| p.1).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub key: u32,
    pub impressions: usize,
    pub positives: usize,
    /// `None` for single-class groups, which are left out of the weighted mean.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedAuc {
    pub value: f64,
    pub groups: Vec<GroupStat>,
}

impl GroupedAuc {
    /// Keys of the groups excluded for having one class only.
    pub fn excluded(&self) -> Vec<u32> {
        self.groups.iter().filter(|g| g.auc.is_none()).map(|g| g.key).collect()
    }
}

/// Weighted mean of per-group AUCs with weight `impressions_g / Σ impressions`
/// over the groups where AUC is defined.
pub fn recombine(groups: &[GroupStat]) -> Result<f64> {
    let total: usize = groups.iter().filter(|g| g.auc.is_some()).map(|g| g.impressions).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("no group has both classes".into()));
    }
    Ok(groups
        .iter()
        .filter_map(|g| g.auc.map(|a| g.impressions as f64 / total as f64 * a))
        .sum())
}

/// TAUC (`GroupKey::TimePeriod`) or CAUC (`GroupKey::City`).
pub fn grouped_auc(records: &[ScoredRecord], key: GroupKey) -> Result<GroupedAuc> {
    check(records)?;
    let mut by: BTreeMap<u32, Vec<&ScoredRecord>> = BTreeMap::new();
    for r in records {
        by.entry(key.of(r)).or_default().push(r);
    }
    let groups: Vec<GroupStat> = by
        .into_iter()
        .map(|(k, rs)| GroupStat {
            key: k,
            impressions: rs.len(),
            positives: rs.iter().filter(|r| r.label == 1).count(),
            auc: auc_of(rs.iter().map(|r| (r.score, r.label == 1))).ok(),
        })
        .collect();
    Ok(GroupedAuc {
        value: recombine(&groups)?,
        groups,
    })
}

/// Discount-weighted gain of binary labels in ranked order, cut at `k`.
fn dcg(labels: impl Iterator<Item = u8>, k: usize) -> f64 {
    labels
        .take(k)
        .enumerate()
        .map(|(pos, y)| f64::from(y) / ((pos + 2) as f64).log2())
        .sum()
}

/// Mean NDCG@k over requests with at least one positive. Items are ranked by
/// descending score, ties by ascending item id, then input order.
pub fn ndcg_at_k(records: &[ScoredRecord], k: usize) -> Result<f64> {
    check(records)?;
    if k == 0 {
        return Err(Error::Usage("NDCG cut-off must be positive".into()));
    }
    let mut by: BTreeMap<u64, Vec<&ScoredRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.request_id).or_default().push(r);
    }
    let mut sum = 0.0;
    let mut kept = 0usize;
    for rs in by.values_mut() {
        let positives = rs.iter().filter(|r| r.label == 1).count();
        if positives == 0 {
            continue;
        }
        rs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
        let ideal = dcg(std::iter::repeat_n(1, positives), k);
        sum += dcg(rs.iter().map(|r| r.label), k) / ideal;
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::UndefinedMetric("no request has a positive".into()));
    }
    Ok(sum / kept as f64)
}

/// Mean binary cross-entropy with scores clamped to `[1e-7, 1 − 1e-7]`.
pub fn logloss(records: &[ScoredRecord]) -> Result<f64> {
    check(records)?;
    if records.is_empty() {
        return Err(Error::UndefinedMetric("logloss of no records".into()));
    }
    // Summed in sorted order so the value does not depend on record order.
    let mut terms: Vec<f64> = records.iter().map(|r| bce_term(r.score, f64::from(r.label))).collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / records.len() as f64)
}

/// 1-based ranks, tied values sharing their mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as f64 / 2.0;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks). Undefined when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage(format!("spearman needs two equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in rank correlation".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() + 1) as f64 / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean).powi(2);
        sbb += (y - mean).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("rank correlation of a constant sequence".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: usize,
    pub auc: f64,
    pub tauc: f64,
    pub cauc: f64,
    /// `None` when no request has a positive.
    pub ndcg3: Option<f64>,
    pub ndcg10: Option<f64>,
    pub logloss: f64,
    pub time_period_groups: Vec<GroupStat>,
    pub city_groups: Vec<GroupStat>,
}

impl MetricReport {
    pub fn compute(records: &[ScoredRecord]) -> Result<Self> {
        let tauc = grouped_auc(records, GroupKey::TimePeriod)?;
        let cauc = grouped_auc(records, GroupKey::City)?;
        Ok(Self {
            records: records.len(),
            auc: auc(records)?,
            tauc: tauc.value,
            cauc: cauc.value,
            ndcg3: ndcg_at_k(records, 3).ok(),
            ndcg10: ndcg_at_k(records, 10).ok(),
            logloss: logloss(records)?,
            time_period_groups: tauc.groups,
            city_groups: cauc.groups,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per group: `key_type, key, impressions, positives, auc, included`.
    pub fn write_group_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["key_type", "key", "impressions", "positives", "auc", "included"])
            .map_err(|e| csv_err(path, e))?;
        for (kind, groups) in [
            (GroupKey::TimePeriod, &self.time_period_groups),
            (GroupKey::City, &self.city_groups),
        ] {
            for g in groups {
                w.write_record([
                    kind.name().to_string(),
                    g.key.to_string(),
                    g.impressions.to_string(),
                    g.positives.to_string(),
                    g.auc.map(|a| a.to_string()).unwrap_or_default(),
                    g.auc.is_some().to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

/// Reads `request_id,time_period_id,city_id,label,score[,item_id]` rows.
pub fn read_predictions(path: &Path) -> Result<Vec<ScoredRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let records = r
        .deserialize()
        .collect::<std::result::Result<Vec<ScoredRecord>, _>>()
        .map_err(|e| csv_err(path, e))?;
    check(&records)?;
    Ok(records)
}

pub fn write_predictions(path: &Path, records: &[ScoredRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for rec in records {
        w.serialize(rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
