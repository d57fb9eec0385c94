//! Spatiotemporal semantic transformation: a meta network maps the context
//! embedding and the filtered behavior embedding to a per-impression affine map
//! `h* = W_stl·ĥ + b_stl`.
//!
//! Full-rank mode generates `W_stl` directly and starts as the exact identity
//! (zero meta weights, bias = flattened `I`). Low-rank mode generates factors
//! `U[d×r]`, `V[r×d]` and computes `h* = ĥ + U·V·ĥ + b_stl`; the identity skip is
//! fixed, and `U` starts at zero so the map also begins as the identity.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::params::{normal, Binding, ParamStore};

pub const W_W: &str = "ststl.meta.w_w";
pub const B_W: &str = "ststl.meta.b_w";
pub const W_U: &str = "ststl.meta.w_u";
pub const B_U: &str = "ststl.meta.b_u";
pub const W_V: &str = "ststl.meta.w_v";
pub const B_V: &str = "ststl.meta.b_v";
pub const W_B: &str = "ststl.meta.w_b";
pub const B_B: &str = "ststl.meta.b_b";
pub const STATIC_W: &str = "ststl.static.w";
pub const STATIC_B: &str = "ststl.static.b";

/// Largest input width for which the full-rank meta head is allowed.
pub const MAX_FULL_RANK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RankMode {
    Full,
    LowRank { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Width of `ĥ`.
    pub d_in: usize,
    pub d_out: usize,
    /// Width of the meta input `[h_c; h_ui]`.
    pub meta_in: usize,
}

impl Dims {
    pub fn check(&self, mode: RankMode) -> Result<()> {
        match mode {
            RankMode::Full if self.d_in > MAX_FULL_RANK => Err(Error::Config(format!(
                "full-rank meta network needs d_in <= {MAX_FULL_RANK}, got {}",
                self.d_in
            ))),
            RankMode::LowRank { rank: 0 } => {
                Err(Error::Config("low-rank mode needs rank >= 1".into()))
            }
            RankMode::LowRank { .. } if self.d_out != self.d_in => Err(Error::Config(
                "low-rank mode keeps an identity skip and needs d_out == d_in".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Meta-network parameters. The static ablation replaces them with an
/// identity-initialized affine layer of the same output width.
pub fn init_params(store: &mut ParamStore, dims: Dims, mode: RankMode, dynamic: bool, seed: u64) -> Result<()> {
    dims.check(mode)?;
    let Dims {
        d_in,
        d_out,
        meta_in,
    } = dims;
    if !dynamic {
        let mut w = Tensor::zeros(&[d_in, d_out]);
        for i in 0..d_in.min(d_out) {
            w.data_mut()[i * d_out + i] = 1.0;
        }
        store.insert(STATIC_W, w);
        store.insert(STATIC_B, Tensor::zeros(&[1, d_out]));
        return Ok(());
    }
    match mode {
        RankMode::Full => {
            store.insert(W_W, Tensor::zeros(&[meta_in, d_out * d_in]));
            let mut eye = Tensor::zeros(&[1, d_out * d_in]);
            for i in 0..d_in.min(d_out) {
                eye.data_mut()[i * d_in + i] = 1.0;
            }
            store.insert(B_W, eye);
        }
        RankMode::LowRank { rank } => {
            store.insert(W_U, Tensor::zeros(&[meta_in, d_out * rank]));
            store.insert(B_U, Tensor::zeros(&[1, d_out * rank]));
            store.insert(W_V, Tensor::zeros(&[meta_in, rank * d_in]));
            // A non-zero V keeps U's gradient alive while U·V is still exactly zero.
            let std = 1.0 / (d_in as f64).sqrt();
            store.insert(B_V, normal(seed, B_V, &[1, rank * d_in], std));
        }
    }
    store.insert(W_B, Tensor::zeros(&[meta_in, d_out]));
    store.insert(B_B, Tensor::zeros(&[1, d_out]));
    Ok(())
}

/// Dynamic parameters for one impression: `W_stl` as `[d_out × d_in]` and `b_stl`.
///
/// In low-rank mode the returned matrix is the effective map `I + U·V`.
pub fn meta_generate(
    h_c: &[f64],
    h_ui: &[f64],
    store: &ParamStore,
    dims: Dims,
    mode: RankMode,
) -> Result<(Tensor, Vec<f64>)> {
    let input: Vec<f64> = h_c.iter().chain(h_ui).copied().collect();
    if input.len() != dims.meta_in {
        return Err(dim_err!(
            "meta input of width {} (expected {})",
            input.len(),
            dims.meta_in
        ));
    }
    let x = Tensor::row(&input);
    let affine = |w: &str, b: &str| -> Result<Vec<f64>> {
        let mut out = x.matmul(store.get(w)?)?.into_data();
        for (o, v) in out.iter_mut().zip(store.get(b)?.data()) {
            *o += v;
        }
        Ok(out)
    };
    let bias = affine(W_B, B_B)?;
    let w = match mode {
        RankMode::Full => Tensor::matrix(dims.d_out, dims.d_in, affine(W_W, B_W)?)?,
        RankMode::LowRank { rank } => {
            let u = Tensor::matrix(dims.d_out, rank, affine(W_U, B_U)?)?;
            let v = Tensor::matrix(rank, dims.d_in, affine(W_V, B_V)?)?;
            let mut uv = u.matmul(&v)?;
            for i in 0..dims.d_in {
                uv.data_mut()[i * dims.d_in + i] += 1.0;
            }
            uv
        }
    };
    Ok((w, bias))
}

/// `h* = W_stl·ĥ + b_stl` for one impression.
pub fn transform(h_hat: &[f64], w_stl: &Tensor, b_stl: &[f64]) -> Result<Vec<f64>> {
    if w_stl.cols() != h_hat.len() || w_stl.rows() != b_stl.len() {
        return Err(dim_err!(
            "W_stl {:?} cannot map input {} to bias {}",
            w_stl.shape(),
            h_hat.len(),
            b_stl.len()
        ));
    }
    Ok((0..w_stl.rows())
        .map(|o| {
            w_stl
                .row_slice(o)
                .iter()
                .zip(h_hat)
                .map(|(w, h)| w * h)
                .sum::<f64>()
                + b_stl[o]
        })
        .collect())
}

/// Records the semantic transformation for a batch. `meta_input` is `[h_c; h_ui]`
/// per row; it is ignored by the static variant.
pub fn forward(
    graph: &mut Graph,
    binding: &Binding,
    h_hat: NodeId,
    meta_input: NodeId,
    mode: RankMode,
    dynamic: bool,
) -> Result<NodeId> {
    if !dynamic {
        let z = graph.matmul(h_hat, binding.get(STATIC_W)?)?;
        return graph.add_row(z, binding.get(STATIC_B)?);
    }
    let affine = |graph: &mut Graph, w: &str, b: &str| -> Result<NodeId> {
        let z = graph.matmul(meta_input, binding.get(w)?)?;
        graph.add_row(z, binding.get(b)?)
    };
    let bias = affine(graph, W_B, B_B)?;
    match mode {
        RankMode::Full => {
            let w = affine(graph, W_W, B_W)?;
            let wh = graph.batch_matvec(w, h_hat)?;
            graph.add(wh, bias)
        }
        RankMode::LowRank { .. } => {
            let u = affine(graph, W_U, B_U)?;
            let v = affine(graph, W_V, B_V)?;
            let vh = graph.batch_matvec(v, h_hat)?;
            let uvh = graph.batch_matvec(u, vh)?;
            let skip = graph.add(h_hat, uvh)?;
            graph.add(skip, bias)
        }
    }
}
