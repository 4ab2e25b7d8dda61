//! Adaptive gating over experts, gated fusion and the forecasting head.
//!
//! Expert outputs have different token counts, so each is flattened and
//! projected into a shared fusion space of width `H_f` before the gate
//! weights are applied. A single linear head maps the fused vector to the
//! horizon.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experts::linear_init;
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::preprocess::NormStats;

/// How expert outputs are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Gating {
    /// Softmax weights from the gating MLP.
    #[default]
    Adaptive,
    /// Fixed `1/n` weights; the gating MLP is not instantiated.
    Uniform,
}

impl Gating {
    pub fn as_str(self) -> &'static str {
        match self {
            Gating::Adaptive => "adaptive",
            Gating::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Gating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "adaptive" => Ok(Gating::Adaptive),
            "uniform" => Ok(Gating::Uniform),
            other => Err(Error::Config(format!("unknown gating `{other}`"))),
        }
    }
}

/// Gate source for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateOverride {
    /// Whatever the model's [`Gating`] says.
    Model,
    /// All weight on expert `j`.
    OneHot(usize),
}

/// Registers the three-layer gate MLP `L → h → h → n`.
pub fn init_gate(store: &mut ParamStore, seq_len: usize, hidden: usize, experts: usize, rng: &mut ChaCha8Rng) {
    store.insert("gate.l1.w", linear_init(rng, seq_len, hidden), true);
    store.insert("gate.l1.b", Tensor::zeros(&[hidden]), true);
    store.insert("gate.l2.w", linear_init(rng, hidden, hidden), true);
    store.insert("gate.l2.b", Tensor::zeros(&[hidden]), true);
    store.insert("gate.l3.w", linear_init(rng, hidden, experts), true);
    store.insert("gate.l3.b", Tensor::zeros(&[experts]), true);
}

/// Registers the projection of expert `j`'s flattened output into `H_f`.
pub fn init_projection(store: &mut ParamStore, j: usize, flat_width: usize, fusion_dim: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("fusion.{j}.w"), linear_init(rng, flat_width, fusion_dim), true);
    store.insert(format!("fusion.{j}.b"), Tensor::zeros(&[fusion_dim]), true);
}

pub fn init_head(store: &mut ParamStore, fusion_dim: usize, pred_len: usize, rng: &mut ChaCha8Rng) {
    store.insert("head.w", linear_init(rng, fusion_dim, pred_len), true);
    store.insert("head.b", Tensor::zeros(&[pred_len]), true);
}

fn dense(graph: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = graph.matmul(x, w)?;
    graph.add(y, b)
}

/// Softmax expert weights from normalized windows `x_norm: [B, L]`.
pub fn gate_weights(graph: &mut Graph, bound: &Bound, x_norm: Var) -> Result<Var> {
    let h = dense(graph, x_norm, bound.get("gate.l1.w"), bound.get("gate.l1.b"))?;
    let h = graph.gelu(h);
    let h = dense(graph, h, bound.get("gate.l2.w"), bound.get("gate.l2.b"))?;
    let h = graph.gelu(h);
    let logits = dense(graph, h, bound.get("gate.l3.w"), bound.get("gate.l3.b"))?;
    Ok(graph.softmax(logits))
}

/// Fixed gate matrix `[B, n]` holding `row` in every row.
pub fn constant_gates(graph: &mut Graph, batch: usize, row: &[Real]) -> Var {
    let data = row.iter().copied().cycle().take(batch * row.len()).collect();
    graph.constant(Tensor::new(vec![batch, row.len()], data).expect("consistent gate shape"))
}

/// Flattens expert `j`'s `[B, N, D]` output and projects it to `[B, H_f]`.
pub fn project_expert(graph: &mut Graph, bound: &Bound, j: usize, features: Var) -> Result<Var> {
    let s = graph.value(features).shape().to_vec();
    let flat = graph.reshape(features, &[s[0], s[1..].iter().product()])?;
    dense(
        graph,
        flat,
        bound.get(&format!("fusion.{j}.w")),
        bound.get(&format!("fusion.{j}.b")),
    )
}

/// `Σ_j gates[:, j] · projected_j` over `[B, H_f]` projections.
pub fn fuse(graph: &mut Graph, projected: &[Var], gates: Var) -> Result<Var> {
    let gshape = graph.value(gates).shape().to_vec();
    if gshape.len() != 2 || gshape[1] != projected.len() || projected.is_empty() {
        return Err(Error::Contract(format!(
            "{} expert outputs but gate matrix {gshape:?}",
            projected.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (j, &p) in projected.iter().enumerate() {
        let g = graph.column(gates, j)?;
        let weighted = graph.scale_rows(p, g)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => graph.add(acc, weighted)?,
        });
    }
    Ok(total.expect("at least one expert"))
}

/// Linear head `[B, H_f] → [B, K]` in normalized space.
pub fn predict_head(graph: &mut Graph, bound: &Bound, fused: Var) -> Result<Var> {
    dense(graph, fused, bound.get("head.w"), bound.get("head.b"))
}

/// Maps a normalized-space forecast back to the window's scale.
pub fn denormalize_forecast(normalized: &[Real], stats: &NormStats) -> Vec<f64> {
    normalized.iter().map(|&v| stats.denormalize_value(v as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn gate_store(l: usize, h: usize, n: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_gate(&mut s, l, h, n, &mut rng());
        s
    }

    fn random_rows(b: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
        linear_init(r, b, w).map(|v| v * 3.0)
    }

    #[test]
    fn zero_final_layer_gives_uniform_gates() {
        let mut store = gate_store(6, 5, 4);
        *store.get_mut("gate.l3.w").unwrap() = Tensor::zeros(&[5, 4]);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(random_rows(3, 6, &mut rng()));
        let w = gate_weights(&mut g, &bound, x).unwrap();
        assert!(g.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_expert_gate_is_one() {
        let store = gate_store(6, 5, 1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(random_rows(4, 6, &mut rng()));
        let w = gate_weights(&mut g, &bound, x).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_hot_gates_select_projection() {
        let mut r = rng();
        let mut g = Graph::new();
        let a = g.constant(random_rows(2, 3, &mut r));
        let b = g.constant(random_rows(2, 3, &mut r));
        let gates = constant_gates(&mut g, 2, &[0.0, 1.0]);
        let y = fuse(&mut g, &[a, b], gates).unwrap();
        assert_eq!(g.value(y), g.value(b));
    }

    #[test]
    fn zero_outputs_fuse_to_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let gates = constant_gates(&mut g, 2, &[0.3, 0.7]);
        let y = fuse(&mut g, &[a, b], gates).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_gates_average_identity_projections() {
        // Two experts with D·N = 6, identity projections into H_f = 6.
        let mut r = rng();
        let mut store = ParamStore::new();
        for j in 0..2 {
            store.insert(format!("fusion.{j}.w"), Tensor::identity(6), true);
            store.insert(format!("fusion.{j}.b"), Tensor::zeros(&[6]), true);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let e0 = linear_init(&mut r, 1, 6).reshaped(&[1, 3, 2]).unwrap();
        let e1 = linear_init(&mut r, 1, 6).reshaped(&[1, 3, 2]).unwrap();
        let v0 = g.constant(e0.clone());
        let v1 = g.constant(e1.clone());
        let p0 = project_expert(&mut g, &bound, 0, v0).unwrap();
        let p1 = project_expert(&mut g, &bound, 1, v1).unwrap();
        let gates = constant_gates(&mut g, 1, &[0.5, 0.5]);
        let y = fuse(&mut g, &[p0, p1], gates).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            let mean = 0.5 * (e0.data()[i] + e1.data()[i]);
            assert!((v - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_rejects_count_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let gates = constant_gates(&mut g, 2, &[0.5, 0.5]);
        assert!(matches!(fuse(&mut g, &[a], gates), Err(Error::Contract(_))));
    }

    #[test]
    fn superposition_in_each_expert() {
        let mut r = rng();
        let mut g = Graph::new();
        let gates = constant_gates(&mut g, 2, &[0.2, 0.8]);
        let e1 = g.constant(random_rows(2, 4, &mut r));
        let e2 = g.constant(random_rows(2, 4, &mut r));
        let other = g.constant(random_rows(2, 4, &mut r));
        let (a, b) = (1.7, -0.4);
        let s1 = g.scale(e1, a);
        let s2 = g.scale(e2, b);
        let combo = g.add(s1, s2).unwrap();
        let lhs = fuse(&mut g, &[combo, other], gates).unwrap();
        let zero = g.constant(Tensor::zeros(&[2, 4]));
        let f1 = fuse(&mut g, &[e1, zero], gates).unwrap();
        let f2 = fuse(&mut g, &[e2, zero], gates).unwrap();
        let f0 = fuse(&mut g, &[zero, other], gates).unwrap();
        for i in 0..8 {
            let rhs = a * g.value(f1).data()[i] + b * g.value(f2).data()[i] + g.value(f0).data()[i];
            assert!((g.value(lhs).data()[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_predicts_window_mean() {
        let mut store = ParamStore::new();
        store.insert("head.w", Tensor::zeros(&[4, 3]), true);
        store.insert("head.b", Tensor::zeros(&[3]), true);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let fused = g.constant(random_rows(1, 4, &mut rng()));
        let y = predict_head(&mut g, &bound, fused).unwrap();
        let stats = NormStats {
            mean: 12.5,
            std: 3.0,
            eps: 1e-5,
        };
        assert_eq!(denormalize_forecast(g.value(y).data(), &stats), vec![12.5; 3]);
    }

    #[test]
    fn head_output_length_and_linearity() {
        let mut r = rng();
        for k in [24, 96, 192, 336, 720] {
            let mut store = ParamStore::new();
            init_head(&mut store, 8, k, &mut r);
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let f1 = g.constant(random_rows(1, 8, &mut r));
            let f2 = g.constant(random_rows(1, 8, &mut r));
            let y1 = predict_head(&mut g, &bound, f1).unwrap();
            assert_eq!(g.value(y1).shape(), &[1, k]);
            let y2 = predict_head(&mut g, &bound, f2).unwrap();
            let a = g.scale(f1, 2.0);
            let b = g.scale(f2, -3.0);
            let combo = g.add(a, b).unwrap();
            let yc = predict_head(&mut g, &bound, combo).unwrap();
            for i in 0..k {
                let rhs = 2.0 * g.value(y1).data()[i] - 3.0 * g.value(y2).data()[i];
                assert!((g.value(yc).data()[i] - rhs).abs() < 1e-9);
            }
        }
    }
}
