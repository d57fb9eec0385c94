//! Mini-batch training with shuffled epochs, warm-up Adagrad and periodic
//! evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::evaluate::evaluate;
use super::optim::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{EncodedBatch, Impression};
use crate::model::BasmModel;
use crate::numcore::{param_grads, Graph};
use crate::stabt::{update_running, Mode};

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    /// Mean batch loss since the previous point; `None` before the first step.
    pub train_loss: Option<f64>,
    pub eval_auc: Option<f64>,
    pub eval_tauc: Option<f64>,
    pub eval_cauc: Option<f64>,
    pub eval_logloss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Steps skipped for non-finite gradients.
    pub skipped_steps: u64,
}

/// Shuffled batch order of one epoch.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// One forward/backward pass; returns the batch loss and whether the update was
/// applied.
pub fn train_step(ck: &mut Checkpoint, model: &mut BasmModel, batch: &[&Impression], lr: f64) -> Result<(f64, bool)> {
    let enc = EncodedBatch::encode(&model.vocab, batch);
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &enc, Mode::Train)?;
    let loss = g.bce_with_logits(pass.logits, &enc.labels)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let named = param_grads(&g, &mut grads);
    let applied = ck.optimizer.step(&mut model.params, &named, lr)?;
    if applied {
        update_running(&g, &pass.tower, &mut model.running);
    }
    Ok((value, applied))
}

/// Continues training `start` until `cfg.total_steps`.
pub fn train(start: Checkpoint, cfg: &TrainConfig, train_data: &[Impression], eval_data: &[Impression]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train_data.len();
    if n < 2 {
        return Err(Error::Data(format!("training needs at least 2 impressions, got {n}")));
    }
    let mut model = start.model()?;
    for imp in train_data.iter().chain(eval_data) {
        model.vocab.validate_impression(imp).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("request {}: {m}", imp.request_id)),
            other => other,
        })?;
    }
    let mut ck = start;
    let batch = cfg.batch_size.min(n);
    let per_epoch = (n / batch) as u64;
    let evaluate_point = |model: &BasmModel, step: u64, loss: Option<f64>| -> Result<CurvePoint> {
        let report = if eval_data.is_empty() {
            None
        } else {
            Some(evaluate(model, eval_data)?.0)
        };
        Ok(CurvePoint {
            step,
            lr: lr_at(step, cfg),
            train_loss: loss,
            eval_auc: report.as_ref().map(|r| r.auc),
            eval_tauc: report.as_ref().map(|r| r.tauc),
            eval_cauc: report.as_ref().map(|r| r.cauc),
            eval_logloss: report.as_ref().map(|r| r.logloss),
        })
    };
    let mut curve = vec![evaluate_point(&model, ck.step, None)?];
    let mut order: Option<(u64, Vec<usize>)> = None;
    let (mut loss_sum, mut loss_count, mut skipped) = (0.0, 0u64, 0u64);
    while ck.step < cfg.total_steps {
        let epoch = ck.step / per_epoch;
        if order.as_ref().map(|o| o.0) != Some(epoch) {
            order = Some((epoch, epoch_order(n, cfg.seed, epoch)));
        }
        let idx = &order.as_ref().expect("set above").1;
        let pos = (ck.step % per_epoch) as usize * batch;
        let rows: Vec<&Impression> = idx[pos..pos + batch].iter().map(|&i| &train_data[i]).collect();
        let lr = lr_at(ck.step, cfg);
        let (loss, applied) = train_step(&mut ck, &mut model, &rows, lr)?;
        if applied {
            loss_sum += loss;
            loss_count += 1;
        } else {
            skipped += 1;
        }
        ck.step += 1;
        let at_cadence = cfg.eval_every > 0 && ck.step.is_multiple_of(cfg.eval_every);
        if at_cadence || ck.step == cfg.total_steps {
            let mean = (loss_count > 0).then(|| loss_sum / loss_count as f64);
            curve.push(evaluate_point(&model, ck.step, mean)?);
            log::info!("step {} loss {:?} eval auc {:?}", ck.step, mean, curve.last().and_then(|c| c.eval_auc));
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    ck.params = model.params;
    ck.running = model.running;
    Ok(TrainOutcome {
        checkpoint: ck,
        curve,
        skipped_steps: skipped,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with columns `step,lr,train_loss,eval_auc,eval_tauc,eval_cauc,eval_logloss`.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,lr,train_loss,eval_auc,eval_tauc,eval_cauc,eval_logloss\n");
    for c in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.step,
            c.lr,
            opt(c.train_loss),
            opt(c.eval_auc),
            opt(c.eval_tauc),
            opt(c.eval_cauc),
            opt(c.eval_logloss)
        ));
    }
    out
}
