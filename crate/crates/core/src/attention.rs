//! Additive soft attention and cross-modal fusion.
//!
//! Scoring is the additive form `v . tanh(W_f x_k + W_q q)`: a learned
//! projection of each attended feature plus a projection of the query,
//! squashed and reduced to one scalar score per position. Fusion projects
//! per-source contexts into a shared dimension, scores them with the same
//! additive machinery to get simplex weights, and squashes the weighted
//! sum through tanh.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive-attention parameters sized `att x feat`, `att x query`, `1 x att`.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_feat: T,
    pub w_query: T,
    /// Score vector reducing the squashed sum to one scalar per position.
    pub score: T,
}

impl AttentionParams<Tensor> {
    pub fn init(rng: &mut ChaCha8Rng, feat_dim: usize, query_dim: usize, att_dim: usize, range: f64) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let values = (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect();
            Tensor::new(vec![rows, cols], values).expect("positive dims")
        };
        AttentionParams {
            w_feat: uniform(att_dim, feat_dim),
            w_query: uniform(att_dim, query_dim),
            score: uniform(1, att_dim),
        }
    }
}

impl<T> AttentionParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w_feat"), &self.w_feat));
        out.push((format!("{prefix}.w_query"), &self.w_query));
        out.push((format!("{prefix}.score"), &self.score));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w_feat"), &mut self.w_feat));
        out.push((format!("{prefix}.w_query"), &mut self.w_query));
        out.push((format!("{prefix}.score"), &mut self.score));
    }

    pub fn map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<AttentionParams<U>, E> {
        Ok(AttentionParams {
            w_feat: f(&format!("{prefix}.w_feat"), &self.w_feat)?,
            w_query: f(&format!("{prefix}.w_query"), &self.w_query)?,
            score: f(&format!("{prefix}.score"), &self.score)?,
        })
    }
}

/// Attention output: the context row and the simplex weights over positions.
pub struct Attended {
    /// `1 x feat` convex combination of the attended rows.
    pub context: Var,
    /// `1 x n` weights, nonnegative and summing to 1.
    pub weights: Var,
}

/// Simplex weights over the rows of `features` for the given query.
pub fn attention_weights(query: &Var, features: &Var, params: &AttentionParams<Var>) -> Result<Var> {
    let squashed = features
        .matmul_nt(&params.w_feat)?
        .add(&query.matmul_nt(&params.w_query)?)?
        .tanh();
    let scores = squashed.matmul_nt(&params.score)?.transpose();
    Ok(scores.softmax_rows())
}

/// Soft attention over the rows of an `n x feat` matrix.
///
/// The context is the weight-averaged feature row; weights are returned for
/// inspection and trace dumps.
pub fn soft_attention(query: &Var, features: &Var, params: &AttentionParams<Var>) -> Result<Attended> {
    let weights = attention_weights(query, features, params)?;
    let context = weights.matmul(features)?;
    Ok(Attended { context, weights })
}

/// Cross-modal fusion parameters: one projection per fused context source,
/// a bias, and an additive scorer over the projected contexts.
#[derive(Debug, Clone)]
pub struct FusionParams<T> {
    /// Per-source projections into the fusion dimension, in source order.
    pub projections: Vec<T>,
    /// `1 x fusion` bias.
    pub bias: T,
    /// Scores the projected contexts to produce the fusion weights.
    pub scorer: AttentionParams<T>,
}

impl FusionParams<Tensor> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        context_dims: &[usize],
        fusion_dim: usize,
        query_dim: usize,
        range: f64,
    ) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let values = (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect();
            Tensor::new(vec![rows, cols], values).expect("positive dims")
        };
        let projections = context_dims.iter().map(|&d| uniform(fusion_dim, d)).collect();
        let bias = uniform(1, fusion_dim);
        let scorer = AttentionParams::init(rng, fusion_dim, query_dim, query_dim, range);
        FusionParams {
            projections,
            bias,
            scorer,
        }
    }
}

impl<T> FusionParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, labels: &[String], out: &mut Vec<(String, &'a T)>) {
        for (p, label) in self.projections.iter().zip(labels) {
            out.push((format!("{prefix}.proj.{label}"), p));
        }
        out.push((format!("{prefix}.bias"), &self.bias));
        self.scorer.visit(&format!("{prefix}.scorer"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, labels: &[String], out: &mut Vec<(String, &'a mut T)>) {
        for (p, label) in self.projections.iter_mut().zip(labels) {
            out.push((format!("{prefix}.proj.{label}"), p));
        }
        out.push((format!("{prefix}.bias"), &mut self.bias));
        self.scorer.visit_mut(&format!("{prefix}.scorer"), out);
    }

    pub fn map<U, E>(
        &self,
        prefix: &str,
        labels: &[String],
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<FusionParams<U>, E> {
        let mut projections = Vec::with_capacity(self.projections.len());
        for (p, label) in self.projections.iter().zip(labels) {
            projections.push(f(&format!("{prefix}.proj.{label}"), p)?);
        }
        Ok(FusionParams {
            projections,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
            scorer: self.scorer.map(&format!("{prefix}.scorer"), f)?,
        })
    }
}

/// Fusion output: the squashed mixed context and the simplex mixing weights.
pub struct Fused {
    /// `1 x fusion`, entries in `(-1, 1)`.
    pub context: Var,
    /// `1 x k` weights over the fused sources.
    pub weights: Var,
}

/// Mixes per-source contexts into one fusion context.
///
/// Each context is projected into the fusion dimension; the projected rows
/// are scored against the query to get simplex weights; the context is
/// `tanh(sum_i w_i proj_i + bias)`.
pub fn cross_modal_fuse(contexts: &[Var], query: &Var, params: &FusionParams<Var>) -> Result<Fused> {
    if contexts.len() != params.projections.len() {
        return Err(Error::shape(
            "cross_modal_fuse",
            format!("{} contexts", params.projections.len()),
            format!("{} contexts", contexts.len()),
        ));
    }
    let g = query.graph();
    let mut projected = Vec::with_capacity(contexts.len());
    for (c, w) in contexts.iter().zip(&params.projections) {
        projected.push(c.matmul_nt(w)?);
    }
    let stacked = g.concat_rows(&projected)?;
    let weights = attention_weights(query, &stacked, &params.scorer)?;
    let mixed = weights.matmul(&stacked)?;
    let context = mixed.add(&params.bias)?.tanh();
    Ok(Fused { context, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn bind_att(g: &Graph, p: &AttentionParams<Tensor>) -> AttentionParams<Var> {
        p.map::<_, crate::error::Error>("att", &mut |_, t| Ok(g.leaf(t.clone(), true)))
            .unwrap()
    }

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn single_feature_gets_weight_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::init(&mut rng, 3, 2, 4, 0.08);
        let g = Graph::new();
        let pv = bind_att(&g, &p);
        let feat = Tensor::row(vec![0.5, -0.25, 0.75]).unwrap();
        let features = g.constant(feat.clone());
        let query = g.constant(Tensor::row(vec![0.1, 0.2]).unwrap());
        let att = soft_attention(&query, &features, &pv).unwrap();
        assert_eq!(att.weights.values(), vec![1.0]);
        assert_eq!(att.context.values(), feat.values());
    }

    #[test]
    fn identical_features_reproduce_the_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(&mut rng, 3, 2, 4, 0.08);
        let g = Graph::new();
        let pv = bind_att(&g, &p);
        let u = vec![0.9, -0.3, 0.45];
        let features = g.constant(Tensor::from_rows(&[u.clone(), u.clone(), u.clone()]).unwrap());
        let query = g.constant(Tensor::row(vec![-0.8, 0.6]).unwrap());
        let att = soft_attention(&query, &features, &pv).unwrap();
        for (c, e) in att.context.values().iter().zip(&u) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn context_matches_explicit_score_softmax_sum_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::init(&mut rng, 3, 2, 4, 0.08);
        let rows = rand_rows(&mut rng, 3, 3);
        let q = vec![0.3, -0.7];

        // hand recomputation with plain loops
        let score = |x: &[f64]| -> f64 {
            let mut s = 0.0;
            for a in 0..4 {
                let mut z = 0.0;
                for (j, xv) in x.iter().enumerate() {
                    z += p.w_feat.values()[a * 3 + j] * xv;
                }
                for (j, qv) in q.iter().enumerate() {
                    z += p.w_query.values()[a * 2 + j] * qv;
                }
                s += p.score.values()[a] * z.tanh();
            }
            s
        };
        let scores: Vec<f64> = rows.iter().map(|r| score(r)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alphas: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut expect = vec![0.0; 3];
        for (a, r) in alphas.iter().zip(&rows) {
            for (e, x) in expect.iter_mut().zip(r) {
                *e += a * x;
            }
        }

        let g = Graph::new();
        let pv = bind_att(&g, &p);
        let features = g.constant(Tensor::from_rows(&rows).unwrap());
        let query = g.constant(Tensor::row(q).unwrap());
        let att = soft_attention(&query, &features, &pv).unwrap();
        for (got, want) in att.weights.values().iter().zip(&alphas) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in att.context.values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_features_permutes_weights_and_keeps_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::init(&mut rng, 3, 2, 4, 0.08);
        let rows = rand_rows(&mut rng, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

        let run = |rows: &[Vec<f64>]| {
            let g = Graph::new();
            let pv = bind_att(&g, &p);
            let features = g.constant(Tensor::from_rows(rows).unwrap());
            let query = g.constant(Tensor::row(vec![0.4, 0.1]).unwrap());
            let att = soft_attention(&query, &features, &pv).unwrap();
            (att.weights.values(), att.context.values())
        };
        let (w0, c0) = run(&rows);
        let (w1, c1) = run(&permuted);
        for (k, &src) in perm.iter().enumerate() {
            assert!((w1[k] - w0[src]).abs() < 1e-12);
        }
        for (a, b) in c0.iter().zip(&c1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_fusion_parameters_give_zero_context() {
        let g = Graph::new();
        let p = FusionParams {
            projections: vec![g.constant(Tensor::zeros(3, 2)), g.constant(Tensor::zeros(3, 4))],
            bias: g.constant(Tensor::zeros(1, 3)),
            scorer: AttentionParams {
                w_feat: g.constant(Tensor::zeros(2, 3)),
                w_query: g.constant(Tensor::zeros(2, 2)),
                score: g.constant(Tensor::zeros(1, 2)),
            },
        };
        let contexts = [
            g.constant(Tensor::row(vec![5.0, -2.0]).unwrap()),
            g.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        ];
        let query = g.constant(Tensor::row(vec![0.9, -0.9]).unwrap());
        let fused = cross_modal_fuse(&contexts, &query, &p).unwrap();
        assert_eq!(fused.context.values(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_projected_contexts_make_fusion_weight_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::new();
        // two sources sharing one projection and one context value
        let proj = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let bias = Tensor::row(vec![0.1, -0.2, 0.3]).unwrap();
        let p = FusionParams {
            projections: vec![g.constant(proj.clone()), g.constant(proj.clone())],
            bias: g.constant(bias.clone()),
            scorer: {
                let s = AttentionParams::init(&mut rng, 3, 2, 3, 0.08);
                s.map::<_, crate::error::Error>("s", &mut |_, t| Ok(g.constant(t.clone()))).unwrap()
            },
        };
        let ctx = Tensor::row(vec![0.7, -0.4]).unwrap();
        let contexts = [g.constant(ctx.clone()), g.constant(ctx.clone())];
        let query = g.constant(Tensor::row(vec![0.2, 0.5]).unwrap());
        let fused = cross_modal_fuse(&contexts, &query, &p).unwrap();

        // convexity: identical projections mean the mix equals the projection
        let mut expect = vec![0.0; 3];
        for i in 0..3 {
            for j in 0..2 {
                expect[i] += proj.values()[i * 2 + j] * ctx.values()[j];
            }
            expect[i] = (expect[i] + bias.values()[i]).tanh();
        }
        for (got, want) in fused.context.values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn fusion_matches_hand_composed_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FusionParams::init(&mut rng, &[2, 3, 2], 3, 2, 0.08);
        let contexts_data = [
            Tensor::row(vec![0.4, -0.6]).unwrap(),
            Tensor::row(vec![0.2, 0.9, -0.1]).unwrap(),
            Tensor::row(vec![-0.8, 0.3]).unwrap(),
        ];
        let q = Tensor::row(vec![0.25, -0.5]).unwrap();

        // hand pipeline
        let project = |w: &Tensor, c: &Tensor| -> Vec<f64> {
            (0..3)
                .map(|i| {
                    c.values()
                        .iter()
                        .enumerate()
                        .map(|(j, cv)| w.values()[i * c.numel() + j] * cv)
                        .sum()
                })
                .collect()
        };
        let projected: Vec<Vec<f64>> = p
            .projections
            .iter()
            .zip(&contexts_data)
            .map(|(w, c)| project(w, c))
            .collect();
        let score = |x: &[f64]| -> f64 {
            let att = 2;
            let mut s = 0.0;
            for a in 0..att {
                let mut z = 0.0;
                for (j, xv) in x.iter().enumerate() {
                    z += p.scorer.w_feat.values()[a * 3 + j] * xv;
                }
                for (j, qv) in q.values().iter().enumerate() {
                    z += p.scorer.w_query.values()[a * 2 + j] * qv;
                }
                s += p.scorer.score.values()[a] * z.tanh();
            }
            s
        };
        let scores: Vec<f64> = projected.iter().map(|r| score(r)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let zsum: f64 = exps.iter().sum();
        let betas: Vec<f64> = exps.iter().map(|e| e / zsum).collect();
        let mut expect = vec![0.0; 3];
        for (b, row) in betas.iter().zip(&projected) {
            for (e, v) in expect.iter_mut().zip(row) {
                *e += b * v;
            }
        }
        for (e, bia) in expect.iter_mut().zip(p.bias.values()) {
            *e = (*e + bia).tanh();
        }

        let g = Graph::new();
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let pv = p
            .map::<_, crate::error::Error>("f", &labels, &mut |_, t| Ok(g.constant(t.clone())))
            .unwrap();
        let contexts: Vec<Var> = contexts_data.iter().map(|c| g.constant(c.clone())).collect();
        let query = g.constant(q);
        let fused = cross_modal_fuse(&contexts, &query, &pv).unwrap();
        let beta_sum: f64 = fused.weights.values().iter().sum();
        assert!((beta_sum - 1.0).abs() < 1e-12);
        for (got, want) in fused.weights.values().iter().zip(&betas) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in fused.context.values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zeroed_projection_makes_fusion_ignore_that_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = FusionParams::init(&mut rng, &[2, 2], 3, 2, 0.08);
        p.projections[1] = Tensor::zeros(3, 2);

        let run = |second: Vec<f64>| {
            let g = Graph::new();
            let labels: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
            let pv = p
                .map::<_, crate::error::Error>("f", &labels, &mut |_, t| Ok(g.constant(t.clone())))
                .unwrap();
            let contexts = [
                g.constant(Tensor::row(vec![0.3, -0.2]).unwrap()),
                g.constant(Tensor::row(second).unwrap()),
            ];
            let query = g.constant(Tensor::row(vec![0.1, 0.8]).unwrap());
            cross_modal_fuse(&contexts, &query, &pv).unwrap().context.values()
        };
        let a = run(vec![0.0, 0.0]);
        let b = run(vec![123.0, -55.0]);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn weights_lie_on_the_simplex_and_context_in_convex_hull(
            seed in 0u64..1000,
            n in 1usize..7,
            d in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AttentionParams::init(&mut rng, d, 2, 3, 0.5);
            let rows = rand_rows(&mut rng, n, d);
            let g = Graph::new();
            let pv = bind_att(&g, &p);
            let features = g.constant(Tensor::from_rows(&rows).unwrap());
            let query = g.constant(Tensor::row(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap());
            let att = soft_attention(&query, &features, &pv).unwrap();
            let w = att.weights.values();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let c = att.context.values();
            for j in 0..d {
                let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c[j] >= lo - 1e-12 && c[j] <= hi + 1e-12);
            }
        }
    }
}
