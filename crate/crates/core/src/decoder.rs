//! Cross-modal attentive decoders and the per-variant wiring plans.
//!
//! A decoder step gathers one context per configured source (encoder low or
//! high outputs, or the decoder's own hidden history), mixes them through
//! cross-modal fusion when more than one source is wired, and advances an
//! LSTM on `[context, word embedding, optional upstream output]`. The full
//! model runs either one such decoder or an aligned global/local pair.

use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_modal_fuse, soft_attention, AttentionParams, FusionParams};
use crate::autodiff::Var;
use crate::encoder::EncodedModality;
use crate::error::{Error, Result};
use crate::lstm::{lstm_step, LstmParams};
use crate::tensor::Tensor;

/// The ablation family: which encoders, contexts, and decoders exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// Single decoder attending to visual features only.
    AttV,
    /// Single decoder over fused visual and audio contexts.
    CmAttVa,
    /// As `CmAttVa` plus decoder self-attention in the fusion.
    CmAttVad,
    /// Hierarchical encoders; one decoder receives high and low contexts.
    HacaNoAlign,
    /// Hierarchical encoders; aligned global and local decoders.
    Haca,
}

pub const ALL_VARIANTS: [ModelVariant; 5] = [
    ModelVariant::AttV,
    ModelVariant::CmAttVa,
    ModelVariant::CmAttVad,
    ModelVariant::HacaNoAlign,
    ModelVariant::Haca,
];

impl ModelVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::AttV => "att_v",
            ModelVariant::CmAttVa => "cm_att_va",
            ModelVariant::CmAttVad => "cm_att_vad",
            ModelVariant::HacaNoAlign => "haca_no_align",
            ModelVariant::Haca => "haca",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "att_v" => Ok(ModelVariant::AttV),
            "cm_att_va" => Ok(ModelVariant::CmAttVa),
            "cm_att_vad" => Ok(ModelVariant::CmAttVad),
            "haca_no_align" => Ok(ModelVariant::HacaNoAlign),
            "haca" => Ok(ModelVariant::Haca),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected att_v, cm_att_va, cm_att_vad, haca_no_align, haca)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where one attended context comes from. Encoder sources are indexed by
/// modality position (0 = visual, 1 = audio).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    EncoderLow(usize),
    EncoderHigh(usize),
    DecoderHistory,
}

impl ContextSource {
    pub fn label(&self, modality_names: &[String]) -> String {
        match self {
            ContextSource::EncoderLow(m) => format!("{}_low", modality_names[*m]),
            ContextSource::EncoderHigh(m) => format!("{}_high", modality_names[*m]),
            ContextSource::DecoderHistory => "self".to_string(),
        }
    }
}

/// Context wiring of one decoder.
#[derive(Debug, Clone)]
pub struct DecoderPlan {
    pub sources: Vec<ContextSource>,
    /// With a single source the context feeds the LSTM directly; otherwise
    /// the sources pass through cross-modal fusion.
    pub fused: bool,
}

impl DecoderPlan {
    pub fn has_self_attention(&self) -> bool {
        self.sources.contains(&ContextSource::DecoderHistory)
    }
}

/// Complete wiring for a variant.
#[derive(Debug, Clone)]
pub struct VariantPlan {
    pub variant: ModelVariant,
    /// Number of modality encoders (1 = visual only).
    pub modalities: usize,
    /// Whether encoders carry the high-level pass.
    pub hierarchical: bool,
    /// The aligned global decoder, present only for the full architecture.
    pub global: Option<DecoderPlan>,
    /// The word-producing decoder.
    pub local: DecoderPlan,
}

impl VariantPlan {
    /// The local decoder consumes the global decoder's output as an extra
    /// LSTM input when both decoders exist.
    pub fn aligned(&self) -> bool {
        self.global.is_some()
    }
}

pub fn plan(variant: ModelVariant) -> VariantPlan {
    use ContextSource::*;
    match variant {
        ModelVariant::AttV => VariantPlan {
            variant,
            modalities: 1,
            hierarchical: false,
            global: None,
            local: DecoderPlan {
                sources: vec![EncoderLow(0)],
                fused: false,
            },
        },
        ModelVariant::CmAttVa => VariantPlan {
            variant,
            modalities: 2,
            hierarchical: false,
            global: None,
            local: DecoderPlan {
                sources: vec![EncoderLow(0), EncoderLow(1)],
                fused: true,
            },
        },
        ModelVariant::CmAttVad => VariantPlan {
            variant,
            modalities: 2,
            hierarchical: false,
            global: None,
            local: DecoderPlan {
                sources: vec![EncoderLow(0), EncoderLow(1), DecoderHistory],
                fused: true,
            },
        },
        ModelVariant::HacaNoAlign => VariantPlan {
            variant,
            modalities: 2,
            hierarchical: true,
            global: None,
            local: DecoderPlan {
                sources: vec![
                    EncoderHigh(0),
                    EncoderLow(0),
                    EncoderHigh(1),
                    EncoderLow(1),
                    DecoderHistory,
                ],
                fused: true,
            },
        },
        ModelVariant::Haca => VariantPlan {
            variant,
            modalities: 2,
            hierarchical: true,
            global: Some(DecoderPlan {
                sources: vec![EncoderHigh(0), EncoderHigh(1), DecoderHistory],
                fused: true,
            }),
            local: DecoderPlan {
                sources: vec![EncoderLow(0), EncoderLow(1), DecoderHistory],
                fused: true,
            },
        },
    }
}

/// Parameters of one decoder: per-source attentions aligned with the plan's
/// source list, optional fusion, and the recurrent cell.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub attentions: Vec<AttentionParams<T>>,
    pub fusion: Option<FusionParams<T>>,
    pub lstm: LstmParams<T>,
}

impl<T> DecoderParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, labels: &[String], out: &mut Vec<(String, &'a T)>) {
        for (att, label) in self.attentions.iter().zip(labels) {
            att.visit(&format!("{prefix}.attention.{label}"), out);
        }
        if let Some(fusion) = &self.fusion {
            fusion.visit(&format!("{prefix}.fusion"), labels, out);
        }
        self.lstm.visit(&format!("{prefix}.lstm"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, labels: &[String], out: &mut Vec<(String, &'a mut T)>) {
        for (att, label) in self.attentions.iter_mut().zip(labels) {
            att.visit_mut(&format!("{prefix}.attention.{label}"), out);
        }
        if let Some(fusion) = &mut self.fusion {
            fusion.visit_mut(&format!("{prefix}.fusion"), labels, out);
        }
        self.lstm.visit_mut(&format!("{prefix}.lstm"), out);
    }

    pub fn map<U, E>(
        &self,
        prefix: &str,
        labels: &[String],
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<DecoderParams<U>, E> {
        let mut attentions = Vec::with_capacity(self.attentions.len());
        for (att, label) in self.attentions.iter().zip(labels) {
            attentions.push(att.map(&format!("{prefix}.attention.{label}"), f)?);
        }
        Ok(DecoderParams {
            attentions,
            fusion: match &self.fusion {
                Some(fu) => Some(fu.map(&format!("{prefix}.fusion"), labels, f)?),
                None => None,
            },
            lstm: self.lstm.map(&format!("{prefix}.lstm"), f)?,
        })
    }
}

/// Recurrent state of one decoder. `history` holds the hidden states of all
/// completed steps, so at step `t` it has `t - 1` entries.
#[derive(Clone)]
pub struct RecurrentState {
    pub hidden: Var,
    pub cell: Var,
    pub history: Vec<Var>,
}

impl RecurrentState {
    pub fn fresh(reference: &Var, hidden_dim: usize) -> Self {
        let hidden = reference.constant_like(Tensor::zeros(1, hidden_dim));
        RecurrentState {
            cell: hidden.clone(),
            hidden,
            history: Vec::new(),
        }
    }
}

/// Full decoding state across both decoders.
#[derive(Clone)]
pub struct DecoderState {
    pub global: Option<RecurrentState>,
    pub local: RecurrentState,
    /// The word consumed by the most recent step (BOS before the first).
    pub prev_word: u32,
    /// Number of completed steps.
    pub step: usize,
}

/// Attention over the decoder's own prior hidden states. The empty history
/// at the first step yields a zero context (empty-sum convention) and no
/// weights.
pub fn decoder_self_attention(
    history: &[Var],
    query: &Var,
    params: &AttentionParams<Var>,
    context_dim: usize,
) -> Result<(Var, Option<Var>)> {
    if history.is_empty() {
        return Ok((query.constant_like(Tensor::zeros(1, context_dim)), None));
    }
    let stacked = query.graph().concat_rows(history)?;
    let att = soft_attention(query, &stacked, params)?;
    Ok((att.context, Some(att.weights)))
}

/// Next-word distribution: row-softmax of the projected decoder output.
/// `projection` is `|V| x d_out`; the result is `1 x |V|` and sums to 1.
pub fn project_vocab(output: &Var, projection: &Var) -> Result<Var> {
    if output.cols() != projection.cols() {
        return Err(Error::shape(
            "project_vocab",
            format!("[1, {}] decoder output", projection.cols()),
            format!("[{}, {}]", output.rows(), output.cols()),
        ));
    }
    Ok(output.matmul_nt(projection)?.softmax_rows())
}

/// Per-step attention and fusion weight log: (name, weights) pairs.
pub type StepTrace = Vec<(String, Vec<f64>)>;

/// Output of one decoder's step.
pub struct DecoderStepOut {
    pub output: Var,
    pub state: RecurrentState,
    /// Attention and fusion weights for trace dumps, in plan order.
    pub trace: StepTrace,
}

/// Advances one decoder by a step.
///
/// `encoded` is indexed by modality; `extra_input` carries the global
/// decoder's output into the aligned local decoder. `trace_prefix` names
/// this decoder in weight logs.
#[allow(clippy::too_many_arguments)]
pub fn run_decoder(
    plan: &DecoderPlan,
    params: &DecoderParams<Var>,
    state: &RecurrentState,
    encoded: &[EncodedModality],
    word_embedding: &Var,
    extra_input: Option<&Var>,
    labels: &[String],
    trace_prefix: &str,
    dropout_p: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<DecoderStepOut> {
    let query = &state.hidden;
    let hidden_dim = query.cols();
    let mut trace = Vec::new();
    let mut contexts = Vec::with_capacity(plan.sources.len());
    for ((source, att), label) in plan.sources.iter().zip(&params.attentions).zip(labels) {
        let context = match source {
            ContextSource::EncoderLow(m) => {
                let att_out = soft_attention(query, &encoded[*m].low, att)?;
                trace.push((format!("alpha.{trace_prefix}.{label}"), att_out.weights.values()));
                att_out.context
            }
            ContextSource::EncoderHigh(m) => {
                let high = encoded[*m].high.as_ref().ok_or_else(|| {
                    Error::Graph(format!(
                        "decoder plan reads high-level outputs of `{}` but the encoder is not hierarchical",
                        encoded[*m].name
                    ))
                })?;
                let att_out = soft_attention(query, high, att)?;
                trace.push((format!("alpha.{trace_prefix}.{label}"), att_out.weights.values()));
                att_out.context
            }
            ContextSource::DecoderHistory => {
                let (context, weights) = decoder_self_attention(&state.history, query, att, hidden_dim)?;
                if let Some(w) = weights {
                    trace.push((format!("alpha.{trace_prefix}.{label}"), w.values()));
                }
                context
            }
        };
        contexts.push(context);
    }

    let mixed = if plan.fused {
        let fusion = params.fusion.as_ref().ok_or_else(|| {
            Error::Graph("decoder plan requires fusion but no fusion parameters exist".into())
        })?;
        let fused = cross_modal_fuse(&contexts, query, fusion)?;
        trace.push((format!("beta.{trace_prefix}"), fused.weights.values()));
        fused.context
    } else {
        contexts.into_iter().next().expect("plan has at least one source")
    };

    let g = query.graph();
    let mut inputs = vec![mixed, word_embedding.clone()];
    if let Some(extra) = extra_input {
        inputs.push(extra.clone());
    }
    let mut x = g.concat_cols(&inputs)?;
    if dropout_p > 0.0 {
        let rng = rng.take().ok_or_else(|| {
            Error::Graph("dropout requested without an rng; inference must run with dropout 0".into())
        })?;
        x = x.dropout(dropout_p, rng);
    }
    let step = lstm_step(&x, &state.hidden, &state.cell, &params.lstm)?;
    let mut history = state.history.clone();
    history.push(step.hidden.clone());
    Ok(DecoderStepOut {
        output: step.output,
        state: RecurrentState {
            hidden: step.hidden,
            cell: step.cell,
            history,
        },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};

    #[test]
    fn variant_names_round_trip() {
        for v in ALL_VARIANTS {
            let parsed: ModelVariant = v.as_str().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert!("resnet".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn plans_match_the_ablation_family() {
        assert_eq!(plan(ModelVariant::AttV).modalities, 1);
        assert!(!plan(ModelVariant::AttV).local.fused);
        assert!(!plan(ModelVariant::CmAttVa).local.has_self_attention());
        assert!(plan(ModelVariant::CmAttVad).local.has_self_attention());
        assert_eq!(plan(ModelVariant::HacaNoAlign).local.sources.len(), 5);
        assert!(plan(ModelVariant::Haca).aligned());
        assert!(!plan(ModelVariant::HacaNoAlign).aligned());
    }

    #[test]
    fn empty_history_gives_zero_context_and_no_weights() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::init(&mut rng, 3, 3, 3, 0.08);
        let pv = p
            .map::<_, crate::error::Error>("a", &mut |_, t| Ok(g.constant(t.clone())))
            .unwrap();
        let query = g.constant(Tensor::row(vec![0.5, -0.5, 0.25]).unwrap());
        let (ctx, w) = decoder_self_attention(&[], &query, &pv, 3).unwrap();
        assert_eq!(ctx.values(), vec![0.0; 3]);
        assert!(w.is_none());
    }

    #[test]
    fn single_history_entry_is_returned_whole() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(&mut rng, 3, 3, 3, 0.08);
        let pv = p
            .map::<_, crate::error::Error>("a", &mut |_, t| Ok(g.constant(t.clone())))
            .unwrap();
        let h1 = g.constant(Tensor::row(vec![0.3, 0.1, -0.7]).unwrap());
        let query = g.constant(Tensor::row(vec![0.5, -0.5, 0.25]).unwrap());
        let (ctx, w) = decoder_self_attention(&[h1.clone()], &query, &pv, 3).unwrap();
        assert_eq!(ctx.values(), h1.values());
        assert_eq!(w.unwrap().values(), vec![1.0]);
    }

    #[test]
    fn history_attention_matches_explicit_recomputation() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::init(&mut rng, 2, 2, 3, 0.08);
        let pv = p
            .map::<_, crate::error::Error>("a", &mut |_, t| Ok(g.constant(t.clone())))
            .unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let history: Vec<Var> = rows.iter().map(|r| g.constant(Tensor::row(r.clone()).unwrap())).collect();
        let q = vec![0.4, -0.9];
        let query = g.constant(Tensor::row(q.clone()).unwrap());
        let (ctx, w) = decoder_self_attention(&history, &query, &pv, 2).unwrap();

        // explicit per-position scoring
        let score = |x: &[f64]| -> f64 {
            (0..3)
                .map(|a| {
                    let mut z = 0.0;
                    for (j, xv) in x.iter().enumerate() {
                        z += p.w_feat.values()[a * 2 + j] * xv;
                    }
                    for (j, qv) in q.iter().enumerate() {
                        z += p.w_query.values()[a * 2 + j] * qv;
                    }
                    p.score.values()[a] * z.tanh()
                })
                .sum()
        };
        let scores: Vec<f64> = rows.iter().map(|r| score(r)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alphas: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut expect = vec![0.0; 2];
        for (a, r) in alphas.iter().zip(&rows) {
            for (e, x) in expect.iter_mut().zip(r) {
                *e += a * x;
            }
        }
        for (got, want) in w.unwrap().values().iter().zip(&alphas) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in ctx.values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_distribution() {
        let g = Graph::new();
        let w = g.constant(Tensor::zeros(5, 3));
        let o = g.constant(Tensor::row(vec![0.2, -0.8, 0.5]).unwrap());
        let dist = project_vocab(&o, &w).unwrap();
        for v in dist.values() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_row_projection_gives_certainty() {
        let g = Graph::new();
        let w = g.constant(Tensor::new(vec![1, 3], vec![0.3, 0.1, -0.2]).unwrap());
        let o = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        let dist = project_vocab(&o, &w).unwrap();
        assert_eq!(dist.values(), vec![1.0]);
    }

    #[test]
    fn projection_matches_explicit_matmul_softmax() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let o_data: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = g.constant(Tensor::new(vec![4, 3], w_data.clone()).unwrap());
        let o = g.constant(Tensor::row(o_data.clone()).unwrap());
        let dist = project_vocab(&o, &w).unwrap();

        let logits: Vec<f64> = (0..4)
            .map(|i| (0..3).map(|j| w_data[i * 3 + j] * o_data[j]).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, want) in dist.values().iter().zip(exps.iter().map(|e| e / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((dist.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let bad = g.constant(Tensor::row(vec![1.0, 2.0]).unwrap());
        assert!(project_vocab(&bad, &w).is_err());
    }
}
