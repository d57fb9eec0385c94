//! Evaluation, ablation runs, gate heatmaps and whole-model gradient checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::TrainConfig;
use super::train::train;
use crate::error::{Error, Result};
use crate::features::{EncodedBatch, Impression};
use crate::metrics::{spearman, MetricReport, ScoredRecord};
use crate::model::{BasmModel, ModelConfig, Variant};
use crate::numcore::{grad_check, GradCheckReport, Graph};
use crate::stabt::Mode;

/// Rows per eval-mode forward pass.
pub const EVAL_CHUNK: usize = 4096;

/// Splits by request id: the last `eval_fraction` of distinct requests (in id
/// order) form the evaluation set.
pub fn split_by_request(data: &[Impression], eval_fraction: f64) -> Result<(Vec<Impression>, Vec<Impression>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
    }
    let mut ids: Vec<u64> = data.iter().map(|i| i.request_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let keep = ids.len() - (ids.len() as f64 * eval_fraction).round() as usize;
    let cutoff = ids.get(keep).copied().unwrap_or(u64::MAX);
    Ok(data.iter().cloned().partition(|i| i.request_id < cutoff))
}

/// Eval-mode scores of every impression.
pub fn score(model: &BasmModel, data: &[Impression]) -> Result<Vec<ScoredRecord>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&Impression> = chunk.iter().collect();
        let probs = model.predict(&EncodedBatch::encode(&model.vocab, &refs))?;
        out.extend(chunk.iter().zip(probs).map(|(imp, p)| ScoredRecord {
            request_id: imp.request_id,
            time_period_id: imp.context.time_period,
            city_id: imp.context.city,
            label: imp.label,
            score: p,
            item_id: imp.item.first().copied().map(u64::from).unwrap_or(0),
        }));
    }
    Ok(out)
}

pub fn evaluate(model: &BasmModel, data: &[Impression]) -> Result<(MetricReport, Vec<ScoredRecord>)> {
    let records = score(model, data)?;
    Ok((MetricReport::compute(&records)?, records))
}

/// Metrics of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub repeat: u64,
    pub auc: f64,
    pub tauc: f64,
    pub cauc: f64,
    pub logloss: f64,
}

/// Repeat-averaged row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub auc: f64,
    pub tauc: f64,
    pub cauc: f64,
    pub logloss: f64,
}

/// Trains one variant with the repeat's seeds.
pub fn train_variant(
    base: &ModelConfig,
    variant: Variant,
    tcfg: &TrainConfig,
    repeat: u64,
    train_data: &[Impression],
    eval_data: &[Impression],
) -> Result<(BasmModel, AblationRun)> {
    let mut cfg = base.clone().with_variant(variant);
    cfg.seed = base.seed.wrapping_add(repeat);
    let t = TrainConfig {
        seed: tcfg.seed.wrapping_add(repeat),
        eval_every: 0,
        ..tcfg.clone()
    };
    let out = train(Checkpoint::init(cfg, t.adagrad_init)?, &t, train_data, &[])?;
    let model = out.checkpoint.model()?;
    let (r, _) = evaluate(&model, eval_data)?;
    log::info!("{} repeat {repeat}: auc {:.4} tauc {:.4} cauc {:.4}", variant.label(), r.auc, r.tauc, r.cauc);
    Ok((
        model,
        AblationRun {
            variant,
            repeat,
            auc: r.auc,
            tauc: r.tauc,
            cauc: r.cauc,
            logloss: r.logloss,
        },
    ))
}

/// Averages runs per variant in [`Variant::ALL`] order.
pub fn summarize(runs: &[AblationRun]) -> Vec<AblationRow> {
    Variant::ALL
        .into_iter()
        .filter_map(|v| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            if rs.is_empty() {
                return None;
            }
            let mean = |f: fn(&AblationRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            Some(AblationRow {
                variant: v,
                auc: mean(|r| r.auc),
                tauc: mean(|r| r.tauc),
                cauc: mean(|r| r.cauc),
                logloss: mean(|r| r.logloss),
            })
        })
        .collect()
}

/// Trains all five variants `repeats` times with identical budgets.
pub fn ablate(
    base: &ModelConfig,
    tcfg: &TrainConfig,
    repeats: u64,
    train_data: &[Impression],
    eval_data: &[Impression],
) -> Result<(Vec<AblationRow>, Vec<AblationRun>)> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut runs = Vec::new();
    for repeat in 0..repeats {
        for v in Variant::ALL {
            runs.push(train_variant(base, v, tcfg, repeat, train_data, eval_data)?.1);
        }
    }
    Ok((summarize(&runs), runs))
}

/// CSV with columns `variant,AUC,TAUC,CAUC,Logloss`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,AUC,TAUC,CAUC,Logloss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.variant.label(), r.auc, r.tauc, r.cauc, r.logloss));
    }
    out
}

/// Gate values of every impression, `(time_period, city, α per field)`.
pub fn gate_log(model: &BasmModel, data: &[Impression]) -> Result<Vec<(u32, u32, Vec<f64>)>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&Impression> = chunk.iter().collect();
        let alphas = model.gate_values(&EncodedBatch::encode(&model.vocab, &refs))?;
        for (r, imp) in chunk.iter().enumerate() {
            out.push((imp.context.time_period, imp.context.city, alphas.row_slice(r).to_vec()));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    /// `time_period:<id>` or `city:<id>`.
    pub context_key: String,
    pub field_name: String,
    pub mean_alpha: f64,
    pub count: usize,
}

/// Mean gate value per (time-period, field) and per (city, field).
pub fn export_gate_heatmap(model: &BasmModel, data: &[Impression]) -> Result<Vec<HeatmapRow>> {
    let log = gate_log(model, data)?;
    let names: Vec<String> = model.config.gated_fields().into_iter().map(|(n, _)| n).collect();
    let mut rows = Vec::new();
    for (kind, key_of) in [
        ("time_period", (|e: &(u32, u32, Vec<f64>)| e.0) as fn(&(u32, u32, Vec<f64>)) -> u32),
        ("city", |e| e.1),
    ] {
        let mut acc: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
        for e in &log {
            let slot = acc.entry(key_of(e)).or_insert_with(|| (0, vec![0.0; names.len()]));
            slot.0 += 1;
            for (s, a) in slot.1.iter_mut().zip(&e.2) {
                *s += a;
            }
        }
        for (key, (count, sums)) in acc {
            for (name, s) in names.iter().zip(sums) {
                rows.push(HeatmapRow {
                    context_key: format!("{kind}:{key}"),
                    field_name: name.clone(),
                    mean_alpha: s / count as f64,
                    count,
                });
            }
        }
    }
    Ok(rows)
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("context_key,field_name,mean_alpha,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.context_key, r.field_name, r.mean_alpha, r.count));
    }
    out
}

/// Spearman correlation, per time-period, between a planted importance row
/// `phi[t]` (columns named by `fields`) and the exported mean gate values.
pub fn gate_recovery(rows: &[HeatmapRow], phi: &[Vec<f64>], fields: &[&str]) -> Result<Vec<(u32, f64)>> {
    let mut out = Vec::with_capacity(phi.len());
    for (t, row) in phi.iter().enumerate() {
        if row.len() != fields.len() {
            return Err(Error::Usage(format!("importance row {t} has {} columns for {} fields", row.len(), fields.len())));
        }
        let key = format!("time_period:{t}");
        let alphas = fields
            .iter()
            .map(|f| {
                rows.iter()
                    .find(|r| r.context_key == key && r.field_name == *f)
                    .map(|r| r.mean_alpha)
                    .ok_or_else(|| Error::Data(format!("heatmap has no row for {key}, field {f}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((t as u32, spearman(row, &alphas)?));
    }
    Ok(out)
}

/// Gradient-check batch: every `stride`-th impression that carries behavior
/// history, walking back from the end of the data. With `stride` equal to the
/// impressions per request this takes recent, distinct requests, so no input
/// column is constant across the batch.
pub fn history_batch(data: &[Impression], rows: usize, stride: usize) -> Result<Vec<&Impression>> {
    if stride == 0 || rows < 2 {
        return Err(Error::Usage("gradient-check batch needs stride >= 1 and at least 2 rows".into()));
    }
    let batch: Vec<&Impression> = data
        .iter()
        .rev()
        .filter(|i| !i.behaviors.is_empty())
        .step_by(stride)
        .take(rows)
        .collect();
    if batch.len() < rows {
        return Err(Error::Data(format!("only {} history-bearing impressions for a batch of {rows}", batch.len())));
    }
    Ok(batch)
}

/// Finite-difference check of every parameter entry on one train-mode batch.
pub fn gradcheck_model(model: &BasmModel, batch: &[&Impression], eps: f64) -> Result<GradCheckReport> {
    let enc = EncodedBatch::encode(&model.vocab, batch);
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &enc, Mode::Train)?;
    let loss = g.bce_with_logits(pass.logits, &enc.labels)?;
    grad_check(&mut g, loss, eps)
}
