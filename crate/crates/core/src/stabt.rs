//! Spatiotemporal adaptive bias tower: per layer a fusion batch norm, a fusion
//! fully-connected layer and a leaky ReLU, followed by the sigmoid head.
//!
//! In the adaptive variant the context embedding `h_c` drives four small
//! modulation nets per layer. Multiplicative modulators (the FC gain and the BN
//! scale) use `2·sigmoid`, additive ones (the FC shift and the BN shift) are plain
//! affine maps, so zero-initialized modulators leave the static tower unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{bce_term, sigmoid, Graph, NodeId, Tensor};
use crate::params::{he_uniform, normal, Binding, ParamStore};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const HEAD_W: &str = "stabt.head.w";
pub const HEAD_B: &str = "stabt.head.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter names for hidden layer `m` (0-based).
#[derive(Clone, Debug)]
pub struct LayerNames {
    pub gamma: String,
    pub beta: String,
    pub bn_gain_w: String,
    pub bn_gain_b: String,
    pub bn_shift_w: String,
    pub bn_shift_b: String,
    pub fc_w: String,
    pub fc_b: String,
    pub fc_gain_w: String,
    pub fc_gain_b: String,
    pub fc_shift_w: String,
    pub fc_shift_b: String,
}

impl LayerNames {
    pub fn new(m: usize) -> Self {
        let n = |s: &str| format!("stabt.l{m}.{s}");
        Self {
            gamma: n("bn.gamma"),
            beta: n("bn.beta"),
            bn_gain_w: n("bn_gain.w"),
            bn_gain_b: n("bn_gain.b"),
            bn_shift_w: n("bn_shift.w"),
            bn_shift_b: n("bn_shift.b"),
            fc_w: n("fc.w"),
            fc_b: n("fc.b"),
            fc_gain_w: n("fc_gain.w"),
            fc_gain_b: n("fc_gain.b"),
            fc_shift_w: n("fc_shift.w"),
            fc_shift_b: n("fc_shift.b"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub input_width: usize,
    pub context_width: usize,
    pub widths: Vec<usize>,
    /// Context modulation on; off gives the static tower.
    pub adaptive: bool,
    /// Negative-side slope of every hidden activation.
    pub leaky_slope: f64,
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.input_width == 0 {
            return Err(Error::Config(format!(
                "tower needs positive widths, got input {} and hidden {:?}",
                self.input_width, self.widths
            )));
        }
        Ok(())
    }

    /// `(in, out)` width of each hidden layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut prev = self.input_width;
        self.widths
            .iter()
            .map(|&w| {
                let d = (prev, w);
                prev = w;
                d
            })
            .collect()
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &TowerConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let c = cfg.context_width;
    for (m, (d_in, d_out)) in cfg.layer_dims().into_iter().enumerate() {
        let n = LayerNames::new(m);
        store.insert(n.gamma.clone(), Tensor::full(&[1, d_in], 1.0));
        store.insert(n.beta.clone(), Tensor::zeros(&[1, d_in]));
        store.insert(n.fc_w.clone(), he_uniform(seed, &n.fc_w, d_in, d_out));
        store.insert(n.fc_b.clone(), Tensor::zeros(&[1, d_out]));
        if cfg.adaptive {
            store.insert(n.bn_gain_w, Tensor::zeros(&[c, d_in]));
            store.insert(n.bn_gain_b, Tensor::zeros(&[1, d_in]));
            store.insert(n.bn_shift_w, Tensor::zeros(&[c, d_in]));
            store.insert(n.bn_shift_b, Tensor::zeros(&[1, d_in]));
            store.insert(n.fc_gain_w, Tensor::zeros(&[c, d_out]));
            store.insert(n.fc_gain_b, Tensor::zeros(&[1, d_out]));
            store.insert(n.fc_shift_w, Tensor::zeros(&[c, d_out]));
            store.insert(n.fc_shift_b, Tensor::zeros(&[1, d_out]));
        }
    }
    let last = *cfg.widths.last().expect("validated");
    let std = (1.0 / last as f64).sqrt();
    store.insert(HEAD_W, normal(seed, HEAD_W, &[last, 1], std));
    store.insert(HEAD_B, Tensor::zeros(&[1, 1]));
    Ok(())
}

/// Running batch-norm statistics, one mean/variance vector per hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    pub fn new(cfg: &TowerConfig) -> Self {
        let dims = cfg.layer_dims();
        Self {
            mean: dims.iter().map(|(d, _)| vec![0.0; *d]).collect(),
            var: dims.iter().map(|(d, _)| vec![1.0; *d]).collect(),
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, layer: usize, batch_mean: &[f64], batch_var: &[f64]) {
        let blend = |run: &mut [f64], batch: &[f64]| {
            for (r, b) in run.iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        };
        blend(&mut self.mean[layer], batch_mean);
        blend(&mut self.var[layer], batch_var);
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.var).flatten().all(|v| v.is_finite())
    }
}

fn row_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if w.rows() != x.len() || b.len() != w.cols() {
        return Err(dim_err!(
            "affine map {:?} + {:?} applied to input of length {}",
            w.shape(),
            b.shape(),
            x.len()
        ));
    }
    Ok((0..w.cols())
        .map(|j| (0..x.len()).map(|k| x[k] * w.get(k, j)).sum::<f64>() + b.data()[j])
        .collect())
}

/// One fusion FC layer for a single impression: `act((gain ⊙ W_t)·h_in + b_t + shift)`.
/// `slope == None` skips the leaky ReLU. `Mode` has no effect on this layer.
pub fn fusion_fc_forward(
    h_in: &[f64],
    h_c: &[f64],
    store: &ParamStore,
    layer: usize,
    adaptive: bool,
    slope: Option<f64>,
) -> Result<Vec<f64>> {
    let n = LayerNames::new(layer);
    let w = store.get(&n.fc_w)?;
    let b = store.get(&n.fc_b)?;
    let (gain, shift) = if adaptive {
        let g = row_affine(h_c, store.get(&n.fc_gain_w)?, store.get(&n.fc_gain_b)?)?;
        let s = row_affine(h_c, store.get(&n.fc_shift_w)?, store.get(&n.fc_shift_b)?)?;
        (g.into_iter().map(|z| 2.0 * sigmoid(z)).collect(), s)
    } else {
        (vec![1.0; w.cols()], vec![0.0; w.cols()])
    };
    if w.rows() != h_in.len() || gain.len() != w.cols() {
        return Err(dim_err!(
            "FC weight {:?} for input of length {}",
            w.shape(),
            h_in.len()
        ));
    }
    Ok((0..w.cols())
        .map(|j| {
            let z = (0..h_in.len())
                .map(|k| gain[j] * w.get(k, j) * h_in[k])
                .sum::<f64>()
                + b.data()[j]
                + shift[j];
            match slope {
                Some(a) if z < 0.0 => a * z,
                _ => z,
            }
        })
        .collect())
}

/// One fusion BN layer over a batch. Train mode normalizes with the batch
/// statistics and folds them into `running`; eval mode uses `running` as is.
pub fn fusion_bn_forward(
    x: &Tensor,
    h_c: &Tensor,
    store: &ParamStore,
    layer: usize,
    adaptive: bool,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<Tensor> {
    let n = LayerNames::new(layer);
    let (rows, cols) = (x.rows(), x.cols());
    if h_c.rows() != rows {
        return Err(dim_err!("{} context rows for a batch of {rows}", h_c.rows()));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::Usage(
                    "batch normalization in train mode needs at least 2 rows".into(),
                ));
            }
            let mut mean = vec![0.0; cols];
            let mut var = vec![0.0; cols];
            for c in 0..cols {
                mean[c] = (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64;
                var[c] = (0..rows).map(|r| (x.get(r, c) - mean[c]).powi(2)).sum::<f64>() / rows as f64;
            }
            running.update(layer, &mean, &var);
            (mean, var)
        }
        Mode::Eval => (running.mean[layer].clone(), running.var[layer].clone()),
    };
    let gamma = store.get(&n.gamma)?.data();
    let beta = store.get(&n.beta)?.data();
    if gamma.len() != cols || mean.len() != cols {
        return Err(dim_err!("BN layer of width {} for input width {cols}", gamma.len()));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (g_bias, b_bias) = if adaptive {
            let hc = h_c.row_slice(r);
            let g = row_affine(hc, store.get(&n.bn_gain_w)?, store.get(&n.bn_gain_b)?)?;
            let s = row_affine(hc, store.get(&n.bn_shift_w)?, store.get(&n.bn_shift_b)?)?;
            (g.into_iter().map(|z| 2.0 * sigmoid(z)).collect(), s)
        } else {
            (vec![1.0; cols], vec![0.0; cols])
        };
        for c in 0..cols {
            let xhat = (x.get(r, c) - mean[c]) / (var[c] + BN_EPS).sqrt();
            out.push(g_bias[c] * gamma[c] * xhat + beta[c] + b_bias[c]);
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// `ŷ = sigmoid(W_o·x̂ + b_o)`.
pub fn predict(x: &[f64], w_o: &[f64], b_o: f64) -> Result<f64> {
    if x.len() != w_o.len() {
        return Err(dim_err!("head of width {} for input {}", w_o.len(), x.len()));
    }
    Ok(sigmoid(x.iter().zip(w_o).map(|(a, b)| a * b).sum::<f64>() + b_o))
}

/// Mean binary cross-entropy with predictions clamped away from 0 and 1.
pub fn bce_loss(pred: &[f64], labels: &[f64]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(dim_err!("{} predictions for {} labels", pred.len(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data(format!("label {bad} is not 0 or 1")));
    }
    Ok(pred.iter().zip(labels).map(|(p, y)| bce_term(*p, *y)).sum::<f64>() / pred.len() as f64)
}

/// Tower nodes recorded on a graph.
#[derive(Clone, Debug)]
pub struct TowerOutput {
    /// `[rows × 1]` head logits.
    pub logits: NodeId,
    /// Train-mode batch-norm nodes, one per layer; their batch statistics feed
    /// [`RunningStats::update`]. Empty in eval mode.
    pub bn_nodes: Vec<NodeId>,
    /// Inputs of each layer's leaky ReLU.
    pub pre_activations: Vec<NodeId>,
}

fn modulators(
    graph: &mut Graph,
    binding: &Binding,
    h_c: NodeId,
    gain: (&str, &str),
    shift: (&str, &str),
) -> Result<(NodeId, NodeId)> {
    let z = graph.matmul(h_c, binding.get(gain.0)?)?;
    let z = graph.add_row(z, binding.get(gain.1)?)?;
    let s = graph.sigmoid(z)?;
    let g = graph.scale(s, 2.0)?;
    let z = graph.matmul(h_c, binding.get(shift.0)?)?;
    let sh = graph.add_row(z, binding.get(shift.1)?)?;
    Ok((g, sh))
}

/// Records the tower on `graph` and returns head logits.
pub fn forward(
    graph: &mut Graph,
    binding: &Binding,
    cfg: &TowerConfig,
    input: NodeId,
    h_c: NodeId,
    mode: Mode,
    running: &RunningStats,
) -> Result<TowerOutput> {
    let mut h = input;
    let mut bn_nodes = Vec::new();
    let mut pre_activations = Vec::new();
    for m in 0..cfg.widths.len() {
        let n = LayerNames::new(m);
        let xhat = match mode {
            Mode::Train => {
                let id = graph.batch_norm(h, BN_EPS)?;
                bn_nodes.push(id);
                id
            }
            Mode::Eval => graph.normalize(h, &running.mean[m], &running.var[m], BN_EPS)?,
        };
        let mut y = graph.mul_row(xhat, binding.get(&n.gamma)?)?;
        let bn_mod = if cfg.adaptive {
            let (g, s) = modulators(
                graph,
                binding,
                h_c,
                (&n.bn_gain_w, &n.bn_gain_b),
                (&n.bn_shift_w, &n.bn_shift_b),
            )?;
            y = graph.hadamard(y, g)?;
            Some(s)
        } else {
            None
        };
        y = graph.add_row(y, binding.get(&n.beta)?)?;
        if let Some(s) = bn_mod {
            y = graph.add(y, s)?;
        }

        let mut z = graph.matmul(y, binding.get(&n.fc_w)?)?;
        let fc_mod = if cfg.adaptive {
            let (g, s) = modulators(
                graph,
                binding,
                h_c,
                (&n.fc_gain_w, &n.fc_gain_b),
                (&n.fc_shift_w, &n.fc_shift_b),
            )?;
            z = graph.hadamard(z, g)?;
            Some(s)
        } else {
            None
        };
        z = graph.add_row(z, binding.get(&n.fc_b)?)?;
        if let Some(s) = fc_mod {
            z = graph.add(z, s)?;
        }
        pre_activations.push(z);
        h = graph.leaky_relu(z, cfg.leaky_slope)?;
    }
    let logit = graph.matmul(h, binding.get(HEAD_W)?)?;
    let logits = graph.add_row(logit, binding.get(HEAD_B)?)?;
    Ok(TowerOutput {
        logits,
        bn_nodes,
        pre_activations,
    })
}

/// Folds the batch statistics saved on a train-mode graph into `running`.
pub fn update_running(graph: &Graph, out: &TowerOutput, running: &mut RunningStats) {
    for (m, &id) in out.bn_nodes.iter().enumerate() {
        if let Some((mean, var)) = graph.batch_stats(id) {
            running.update(m, mean, var);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(adaptive: bool) -> TowerConfig {
        TowerConfig {
            input_width: 5,
            context_width: 3,
            widths: vec![4, 3],
            adaptive,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    fn randomize_modulators(store: &mut ParamStore, seed: u64) {
        let names: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.contains("_gain") || n.contains("_shift") || n.contains("bn."))
            .map(|(n, _)| n.clone())
            .collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            let mut t = normal(seed, &n, &shape, 0.5);
            if n.ends_with("gamma") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
            store.insert(n, t);
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_modulation_matches_plain_fc() {
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg(true), 3).unwrap();
        let h = [0.1, -0.4, 0.9, 2.0, -1.0];
        let a = fusion_fc_forward(&h, &[5.0, -5.0, 1.0], &store, 0, true, Some(DEFAULT_LEAKY_SLOPE)).unwrap();
        let b = fusion_fc_forward(&h, &[0.0; 3], &store, 0, false, Some(DEFAULT_LEAKY_SLOPE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vanishing_gain_leaves_bias_and_shift() {
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg(true), 3).unwrap();
        let n = LayerNames::new(0);
        store.insert(n.fc_gain_b.clone(), Tensor::full(&[1, 4], -800.0));
        store.insert(n.fc_b.clone(), Tensor::row(&[0.5, -0.5, 1.0, -2.0]));
        store.insert(n.fc_shift_b.clone(), Tensor::row(&[0.25, 0.0, -3.0, 1.0]));
        let out = fusion_fc_forward(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 3], &store, 0, true, Some(DEFAULT_LEAKY_SLOPE)).unwrap();
        let expect = [0.75, -0.005, -0.02, -0.01];
        for (a, e) in out.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn random_fc_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = TowerConfig {
            input_width: 4,
            context_width: 2,
            widths: vec![4],
            adaptive: true,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &c, 1).unwrap();
        randomize_modulators(&mut store, 2);
        let n = LayerNames::new(0);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hc = [0.3, -0.8];
        let get = |s: &str| store.get(s).unwrap().clone();
        let (w, b) = (get(&n.fc_w), get(&n.fc_b));
        let (gw, gb, sw, sb) = (get(&n.fc_gain_w), get(&n.fc_gain_b), get(&n.fc_shift_w), get(&n.fc_shift_b));
        let out = fusion_fc_forward(&h, &hc, &store, 0, true, Some(DEFAULT_LEAKY_SLOPE)).unwrap();
        for j in 0..4 {
            let gl = gb.data()[j] + hc[0] * gw.get(0, j) + hc[1] * gw.get(1, j);
            let gain = 2.0 / (1.0 + (-gl).exp());
            let shift = sb.data()[j] + hc[0] * sw.get(0, j) + hc[1] * sw.get(1, j);
            let mut z = b.data()[j] + shift;
            for k in 0..4 {
                z += gain * w.get(k, j) * h[k];
            }
            let expect = if z > 0.0 { z } else { 0.01 * z };
            assert!((out[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_bn_standardizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = TowerConfig {
            input_width: 2,
            context_width: 1,
            widths: vec![1],
            adaptive: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        let mut store = ParamStore::new();
        init_params(&mut store, &c, 1).unwrap();
        let n = LayerNames::new(0);
        store.insert(n.gamma.clone(), Tensor::row(&[2.0, 0.5]));
        store.insert(n.beta.clone(), Tensor::row(&[1.0, -3.0]));
        let rows = 64;
        let mut x = random(&mut rng, rows, 2);
        // Rescale each column to exactly unit variance so the only gap is ε.
        for col in 0..2 {
            let m = (0..rows).map(|r| x.get(r, col)).sum::<f64>() / rows as f64;
            let v = (0..rows).map(|r| (x.get(r, col) - m).powi(2)).sum::<f64>() / rows as f64;
            for r in 0..rows {
                x.data_mut()[r * 2 + col] = (x.get(r, col) - m) / v.sqrt();
            }
        }
        let hc = Tensor::zeros(&[rows, 1]);
        let mut running = RunningStats::new(&c);
        let out = fusion_bn_forward(&x, &hc, &store, 0, false, Mode::Train, &mut running).unwrap();
        for (col, (g, b)) in [(2.0, 1.0), (0.5, -3.0)].into_iter().enumerate() {
            let m = (0..rows).map(|r| out.get(r, col)).sum::<f64>() / rows as f64;
            let s = ((0..rows).map(|r| (out.get(r, col) - m).powi(2)).sum::<f64>() / rows as f64).sqrt();
            assert!((m - b).abs() < 1e-12);
            let delta = s / g - 1.0;
            // Unit variance gives δ = 1/√(1+ε) − 1 ≈ −ε/2.
            let exact = 1.0 / (1.0 + BN_EPS).sqrt() - 1.0;
            assert!((delta - exact).abs() < 1e-12);
            assert!(delta.abs() < BN_EPS);
        }
        assert!((running.mean[0][0] - 0.01 * 0.0).abs() < 1e-12);
        assert!((running.var[0][0] - (0.99 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn constant_column_maps_to_shift() {
        let c = cfg(true);
        let mut store = ParamStore::new();
        init_params(&mut store, &c, 1).unwrap();
        randomize_modulators(&mut store, 4);
        let rows = 3;
        let x = Tensor::full(&[rows, 5], 7.5);
        let hc = Tensor::matrix(rows, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let mut running = RunningStats::new(&c);
        let out = fusion_bn_forward(&x, &hc, &store, 0, true, Mode::Train, &mut running).unwrap();
        let n = LayerNames::new(0);
        for r in 0..rows {
            let s = row_affine(hc.row_slice(r), store.get(&n.bn_shift_w).unwrap(), store.get(&n.bn_shift_b).unwrap()).unwrap();
            for col in 0..5 {
                let beta = store.get(&n.beta).unwrap().data()[col];
                assert!((out.get(r, col) - (beta + s[col])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_train_batch_is_usage_error() {
        let c = cfg(false);
        let mut store = ParamStore::new();
        init_params(&mut store, &c, 1).unwrap();
        let mut running = RunningStats::new(&c);
        let r = fusion_bn_forward(&Tensor::zeros(&[1, 5]), &Tensor::zeros(&[1, 3]), &store, 0, false, Mode::Train, &mut running);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn head_and_loss_examples() {
        assert_eq!(predict(&[1.0, 2.0], &[0.0, 0.0], 0.0).unwrap(), 0.5);
        assert!((predict(&[1.0], &[0.0], 20.0).unwrap() - 1.0).abs() < 1e-8);
        let (x, w, b) = ([0.3, -1.2, 0.8], [0.7, 0.1, -0.4], 0.25);
        let z: f64 = 0.3 * 0.7 + -1.2 * 0.1 + 0.8 * -0.4 + 0.25;
        assert!((predict(&x, &w, b).unwrap() - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);

        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let floor = -(1.0f64 - 1e-7).ln();
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= floor + 1e-18);
        let p: [f64; 4] = [0.1, 0.8, 0.45, 0.99];
        let y = [0.0, 1.0, 1.0, 0.0];
        let mut s = 0.0;
        for i in 0..4 {
            s -= y[i] * p[i].ln() + (1.0 - y[i]) * (1.0 - p[i]).ln();
        }
        assert!((bce_loss(&p, &y).unwrap() - s / 4.0).abs() < 1e-12);
        assert!(matches!(bce_loss(&[0.5], &[2.0]), Err(Error::Data(_))));
    }

    #[test]
    fn graph_tower_matches_pure_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [Mode::Train, Mode::Eval] {
            let c = cfg(true);
            let mut store = ParamStore::new();
            init_params(&mut store, &c, 1).unwrap();
            randomize_modulators(&mut store, 6);
            let rows = 6;
            let x = random(&mut rng, rows, 5);
            let hc = random(&mut rng, rows, 3);
            let mut running = RunningStats::new(&c);
            running.mean[0] = vec![0.1; 5];
            running.var[0] = vec![0.7; 5];
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let xi = g.input(x.clone());
            let hi = g.input(hc.clone());
            let out = forward(&mut g, &binding, &c, xi, hi, mode, &running).unwrap();

            let mut pure_running = running.clone();
            let mut h = x;
            for m in 0..2 {
                let bn = fusion_bn_forward(&h, &hc, &store, m, true, mode, &mut pure_running).unwrap();
                let rows_out: Vec<Vec<f64>> = (0..rows)
                    .map(|r| fusion_fc_forward(bn.row_slice(r), hc.row_slice(r), &store, m, true, Some(DEFAULT_LEAKY_SLOPE)).unwrap())
                    .collect();
                h = Tensor::from_rows(&rows_out).unwrap();
            }
            let w = store.get(HEAD_W).unwrap().data().to_vec();
            for r in 0..rows {
                let p = predict(h.row_slice(r), &w, 0.0).unwrap();
                let logit = g.value(out.logits).data()[r];
                assert!((sigmoid(logit) - p).abs() < 1e-12, "{mode:?}");
            }
            let mut graph_running = running.clone();
            update_running(&g, &out, &mut graph_running);
            if mode == Mode::Train {
                for m in 0..2 {
                    for (a, b) in graph_running.mean[m].iter().zip(&pure_running.mean[m]) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            } else {
                assert_eq!(graph_running, running);
            }
        }
    }

    #[test]
    fn zero_modulation_tower_is_bitwise_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut full = ParamStore::new();
        init_params(&mut full, &cfg(true), 9).unwrap();
        let mut plain = ParamStore::new();
        init_params(&mut plain, &cfg(false), 9).unwrap();
        let x = random(&mut rng, 7, 5);
        let hc = random(&mut rng, 7, 3);
        for mode in [Mode::Train, Mode::Eval] {
            let mut logits = Vec::new();
            for (store, c) in [(&full, cfg(true)), (&plain, cfg(false))] {
                let mut g = Graph::new();
                let binding = store.bind(&mut g);
                let xi = g.input(x.clone());
                let hi = g.input(hc.clone());
                let out = forward(&mut g, &binding, &c, xi, hi, mode, &RunningStats::new(&c)).unwrap();
                logits.push(g.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
            assert_eq!(logits[0], logits[1]);
        }
    }

    #[test]
    fn logit_gradient_is_residual_over_batch() {
        let mut g = Graph::new();
        let z = vec![0.3, -2.0, 1.5, 0.0];
        let y = [1.0, 0.0, 0.0, 1.0];
        let logits = g.param("z", Tensor::matrix(4, 1, z.clone()).unwrap());
        let loss = g.bce_with_logits(logits, &y).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, gz) in grads.get(logits).unwrap().data().iter().enumerate() {
            assert!((gz - (sigmoid(z[i]) - y[i]) / 4.0).abs() < 1e-10);
        }
    }
}
