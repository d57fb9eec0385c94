//! Spatiotemporal-aware embedding layer: one scalar gate `α_j ∈ (0, 2)` per field,
//! computed from the field embedding and the context embedding.
//!
//! Gate parameters start at zero, so every gate opens at exactly 1 and the layer is
//! the identity until training moves it. The context field feeds every gate but is
//! itself passed through ungated.

use crate::error::{dim_err, Result};
use crate::numcore::{sigmoid, Graph, NodeId, Tensor};
use crate::params::{Binding, ParamStore};

pub fn weight_name(field: &str) -> String {
    format!("stael.{field}.w")
}

pub fn bias_name(field: &str) -> String {
    format!("stael.{field}.b")
}

/// Zero-initialized gate parameters for every field: `W_p` is `[len(x_j)+len(x_c), 1]`.
pub fn init_params(store: &mut ParamStore, fields: &[(String, usize)], context_width: usize) {
    for (name, width) in fields {
        store.insert(weight_name(name), Tensor::zeros(&[width + context_width, 1]));
        store.insert(bias_name(name), Tensor::zeros(&[1, 1]));
    }
}

/// `α = 2·sigmoid(W_p·[x_j; x_c] + b_p)` for a single impression.
pub fn gate_weight(x_j: &[f64], x_c: &[f64], w_p: &[f64], b_p: f64) -> Result<f64> {
    if w_p.len() != x_j.len() + x_c.len() {
        return Err(dim_err!(
            "gate weight of length {} for inputs of length {}",
            w_p.len(),
            x_j.len() + x_c.len()
        ));
    }
    let logit: f64 = x_j
        .iter()
        .chain(x_c)
        .zip(w_p)
        .map(|(x, w)| x * w)
        .sum::<f64>()
        + b_p;
    Ok(2.0 * sigmoid(logit))
}

/// Gate stage output on the graph.
#[derive(Clone, Debug)]
pub struct GateOutput {
    /// `h_j = α_j · x_j`, one node per field.
    pub gated: Vec<NodeId>,
    /// `α_j` as `[rows × 1]` nodes; empty when the layer is disabled.
    pub alphas: Vec<NodeId>,
    /// `ĥ = [h_0; …; h_{n-1}; x_c]`.
    pub concat: NodeId,
}

/// Applies the field gates. With `enabled == false` every `α_j ≡ 1` and the fields
/// pass through untouched.
pub fn apply_gates(
    graph: &mut Graph,
    binding: &Binding,
    field_names: &[String],
    fields: &[NodeId],
    context: NodeId,
    enabled: bool,
) -> Result<GateOutput> {
    let mut gated = Vec::with_capacity(fields.len());
    let mut alphas = Vec::new();
    for (name, &x) in field_names.iter().zip(fields) {
        if enabled {
            let input = graph.concat(&[x, context], 1)?;
            let w = binding.get(&weight_name(name))?;
            let b = binding.get(&bias_name(name))?;
            let z = graph.matmul(input, w)?;
            let z = graph.add_row(z, b)?;
            let s = graph.sigmoid(z)?;
            let alpha = graph.scale(s, 2.0)?;
            gated.push(graph.scale_rows(x, alpha)?);
            alphas.push(alpha);
        } else {
            gated.push(x);
        }
    }
    let mut parts = gated.clone();
    parts.push(context);
    let concat = graph.concat(&parts, 1)?;
    Ok(GateOutput {
        gated,
        alphas,
        concat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_open_gate_at_one() {
        assert_eq!(gate_weight(&[0.3, -1.0], &[2.0], &[0.0; 3], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn large_logit_saturates_near_two() {
        let a = gate_weight(&[1.0], &[0.0], &[0.0, 0.0], 20.0).unwrap();
        assert!((a - 2.0).abs() < 1e-8);
        assert!(a < 2.0);
    }

    #[test]
    fn random_params_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let xj: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xc: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let mut logit = b;
            for k in 0..6 {
                logit += w[k] * xj[k];
            }
            for k in 0..4 {
                logit += w[6 + k] * xc[k];
            }
            let expect = 2.0 / (1.0 + (-logit).exp());
            assert!((gate_weight(&xj, &xc, &w, b).unwrap() - expect).abs() < 1e-12);
        }
        assert!(gate_weight(&[1.0], &[1.0], &[1.0], 0.0).is_err());
    }

    fn setup(enabled: bool, bias: f64) -> (Graph, GateOutput, Vec<NodeId>, NodeId) {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut store = ParamStore::new();
        init_params(&mut store, &[("a".into(), 2), ("b".into(), 3)], 1);
        store.insert(bias_name("a"), Tensor::matrix(1, 1, vec![bias]).unwrap());
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let xa = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let xb = g.input(Tensor::matrix(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let xc = g.input(Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap());
        let out = apply_gates(&mut g, &binding, &names, &[xa, xb], xc, enabled).unwrap();
        (g, out, vec![xa, xb], xc)
    }

    #[test]
    fn neutral_gates_reproduce_raw_concatenation() {
        for enabled in [true, false] {
            let (mut g, out, xs, xc) = setup(enabled, 0.0);
            let raw = g.concat(&[xs[0], xs[1], xc], 1).unwrap();
            assert_eq!(g.value(out.concat), g.value(raw));
        }
    }

    #[test]
    fn half_gate_scales_only_its_slice() {
        // 2·sigmoid(-ln 3) = 0.5
        let (g, out, xs, _) = setup(true, -(3.0f64).ln());
        let a = g.value(out.alphas[0]).data()[0];
        assert!((a - 0.5).abs() < 1e-15);
        for (h, x) in g.value(out.gated[0]).data().iter().zip(g.value(xs[0]).data()) {
            assert!((h - 0.5 * x).abs() < 1e-15);
        }
        assert_eq!(g.value(out.gated[1]), g.value(xs[1]));
    }
}
