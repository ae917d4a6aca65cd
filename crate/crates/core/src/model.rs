//! Model assembly: configuration, parameter initialization, naming, and the
//! full forward pass (encode both modalities, unroll the decoders).
//!
//! Parameters are stored as plain tensors and bound onto a fresh graph for
//! every forward pass; decode lengths vary per sample, so graphs are never
//! reused. One seeded rng drives initialization; draw order is the
//! construction order below (embedding, encoders in modality order, global
//! decoder, local decoder, projection) and is stable for a fixed config.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, FusionParams};
use crate::autodiff::{Graph, Var};
use crate::data::{Sample, BOS};
use crate::decoder::{
    plan, run_decoder, project_vocab, ContextSource, DecoderParams, DecoderPlan, DecoderState,
    ModelVariant, RecurrentState, StepTrace, VariantPlan,
};
use crate::encoder::{encode, EncodedModality, HierEncoderConfig, HierParams, ModalityEncoderParams};
use crate::error::{Error, Result};
use crate::gradcheck::GradMap;
use crate::lstm::LstmParams;
use crate::tensor::Tensor;

/// Every architectural hyperparameter of the captioner.
#[derive(Debug, Clone, PartialEq)]
pub struct HacaConfig {
    pub visual: HierEncoderConfig,
    pub audio: HierEncoderConfig,
    /// Hidden size of the global (high-level) decoder.
    pub global_hidden: usize,
    /// Hidden size of the local (word-producing) decoder.
    pub local_hidden: usize,
    pub embed_dim: usize,
    pub max_decode_steps: usize,
    pub vocab_size: usize,
    pub variant: ModelVariant,
    /// Half-width of the uniform init interval.
    pub init_range: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl HacaConfig {
    /// Desk-scale configuration: every dimension small enough for exhaustive
    /// gradient checks, wired exactly like the full architecture.
    pub fn micro(variant: ModelVariant, vocab_size: usize, seed: u64) -> Self {
        HacaConfig {
            visual: HierEncoderConfig {
                name: "visual".into(),
                feature_dim: 5,
                low_hidden: 4,
                high_hidden: 4,
                chunk_size: 3,
                max_len: 50,
            },
            audio: HierEncoderConfig {
                name: "audio".into(),
                feature_dim: 3,
                low_hidden: 4,
                high_hidden: 4,
                chunk_size: 2,
                max_len: 20,
            },
            global_hidden: 4,
            local_hidden: 8,
            embed_dim: 6,
            max_decode_steps: 16,
            vocab_size,
            variant,
            init_range: 0.08,
            dropout: 0.5,
            seed,
        }
    }

    /// The published full-scale dimensions (feature dims and vocabulary are
    /// corpus-dependent and must be supplied).
    pub fn paper_scale(variant: ModelVariant, vocab_size: usize, visual_dim: usize, audio_dim: usize, seed: u64) -> Self {
        HacaConfig {
            visual: HierEncoderConfig {
                name: "visual".into(),
                feature_dim: visual_dim,
                low_hidden: 512,
                high_hidden: 256,
                chunk_size: 10,
                max_len: 50,
            },
            audio: HierEncoderConfig {
                name: "audio".into(),
                feature_dim: audio_dim,
                low_hidden: 128,
                high_hidden: 64,
                chunk_size: 4,
                max_len: 20,
            },
            global_hidden: 256,
            local_hidden: 1024,
            embed_dim: 512,
            max_decode_steps: 16,
            vocab_size,
            variant,
            init_range: 0.08,
            dropout: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.audio.validate()?;
        if self.global_hidden == 0 || self.local_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("decoder and embedding dims must be positive".into()));
        }
        if self.max_decode_steps == 0 {
            return Err(Error::Config("max decode steps must be >= 1".into()));
        }
        if self.vocab_size <= crate::data::RESERVED as usize {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves no room for real tokens",
                self.vocab_size
            )));
        }
        if self.init_range <= 0.0 || self.init_range.is_nan() {
            return Err(Error::Config("init range must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn encoder_configs(&self) -> [&HierEncoderConfig; 2] {
        [&self.visual, &self.audio]
    }
}

/// All parameter tensors of a model, generic over the value holder.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub embedding: T,
    pub encoders: Vec<ModalityEncoderParams<T>>,
    pub global: Option<DecoderParams<T>>,
    pub local: DecoderParams<T>,
    pub projection: T,
}

struct Labels {
    encoder_names: Vec<String>,
    global: Vec<String>,
    local: Vec<String>,
}

impl<T> ModelParams<T> {
    fn visit<'a>(&'a self, labels: &Labels, out: &mut Vec<(String, &'a T)>) {
        out.push(("embedding".to_string(), &self.embedding));
        for (enc, name) in self.encoders.iter().zip(&labels.encoder_names) {
            enc.visit(&format!("encoder.{name}"), out);
        }
        if let Some(gd) = &self.global {
            gd.visit("decoder.global", &labels.global, out);
        }
        self.local.visit("decoder.local", &labels.local, out);
        out.push(("projection".to_string(), &self.projection));
    }

    fn visit_mut<'a>(&'a mut self, labels: &Labels, out: &mut Vec<(String, &'a mut T)>) {
        out.push(("embedding".to_string(), &mut self.embedding));
        for (enc, name) in self.encoders.iter_mut().zip(&labels.encoder_names) {
            enc.visit_mut(&format!("encoder.{name}"), out);
        }
        if let Some(gd) = &mut self.global {
            gd.visit_mut("decoder.global", &labels.global, out);
        }
        self.local.visit_mut("decoder.local", &labels.local, out);
        out.push(("projection".to_string(), &mut self.projection));
    }

    fn map<U, E>(
        &self,
        labels: &Labels,
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModelParams<U>, E> {
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for (enc, name) in self.encoders.iter().zip(&labels.encoder_names) {
            encoders.push(enc.map(&format!("encoder.{name}"), f)?);
        }
        Ok(ModelParams {
            embedding: f("embedding", &self.embedding)?,
            encoders,
            global: match &self.global {
                Some(gd) => Some(gd.map("decoder.global", &labels.global, f)?),
                None => None,
            },
            local: self.local.map("decoder.local", &labels.local, f)?,
            projection: f("projection", &self.projection)?,
        })
    }
}

/// A built model: configuration, wiring plan, and stored parameters.
pub struct Model {
    pub config: HacaConfig,
    plan: VariantPlan,
    pub params: ModelParams<Tensor>,
    labels: Labels,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f64) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.gen_range(-range..=range)).collect();
    Tensor::new(vec![rows, cols], values).expect("positive dims")
}

impl Model {
    /// Initializes every parameter uniformly in `[-init_range, init_range]`
    /// (forget-gate biases are then set to 1.0) using the config seed.
    pub fn build(config: HacaConfig) -> Result<Model> {
        config.validate()?;
        let plan = plan(config.variant);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let range = config.init_range;

        let embedding = uniform(&mut rng, config.vocab_size, config.embed_dim, range);

        let mut encoders = Vec::with_capacity(plan.modalities);
        for cfg in config.encoder_configs().into_iter().take(plan.modalities) {
            let low_fwd = LstmParams::init(&mut rng, cfg.feature_dim, cfg.low_hidden, range);
            let low_bwd = LstmParams::init(&mut rng, cfg.feature_dim, cfg.low_hidden, range);
            let hier = plan.hierarchical.then(|| HierParams {
                chunk_attention: AttentionParams::init(
                    &mut rng,
                    cfg.low_output_dim(),
                    cfg.high_hidden,
                    cfg.high_hidden,
                    range,
                ),
                high: LstmParams::init(&mut rng, cfg.low_output_dim(), cfg.high_hidden, range),
            });
            encoders.push(ModalityEncoderParams {
                low_fwd,
                low_bwd,
                hier,
            });
        }

        let global = plan
            .global
            .as_ref()
            .map(|gplan| init_decoder(&mut rng, &config, gplan, config.global_hidden, 0));
        let extra = if plan.aligned() { config.global_hidden } else { 0 };
        let local = init_decoder(&mut rng, &config, &plan.local, config.local_hidden, extra);

        let projection = uniform(&mut rng, config.vocab_size, config.local_hidden, range);

        let encoder_names: Vec<String> = config
            .encoder_configs()
            .into_iter()
            .take(plan.modalities)
            .map(|c| c.name.clone())
            .collect();
        let labels = Labels {
            global: plan
                .global
                .as_ref()
                .map(|p| source_labels(p, &encoder_names))
                .unwrap_or_default(),
            local: source_labels(&plan.local, &encoder_names),
            encoder_names,
        };

        Ok(Model {
            config,
            plan,
            params: ModelParams {
                embedding,
                encoders,
                global,
                local,
                projection,
            },
            labels,
        })
    }

    pub fn plan(&self) -> &VariantPlan {
        &self.plan
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.params.visit(&self.labels, &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.params.visit_mut(&self.labels, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Flat snapshot of all parameters by name.
    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Overwrites parameters from a flat map; names and shapes must match
    /// the built model exactly.
    pub fn set_param_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0usize;
        for (name, tensor) in self.named_params_mut() {
            let src = map
                .get(&name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from snapshot")))?;
            if src.shape() != tensor.shape() {
                return Err(Error::shape(
                    "set_param_map",
                    format!("{:?} for `{name}`", tensor.shape()),
                    format!("{:?}", src.shape()),
                ));
            }
            *tensor = src.clone();
            seen += 1;
        }
        if seen != map.len() {
            return Err(Error::Config(format!(
                "snapshot has {} parameters, model has {seen}",
                map.len()
            )));
        }
        Ok(())
    }

    /// Human-readable parameter table: one `name shape count` line per
    /// tensor plus a total.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("variant: {}\n", self.config.variant));
        let mut total = 0usize;
        for (name, t) in self.named_params() {
            out.push_str(&format!("{name}  {:?}  {}\n", t.shape(), t.numel()));
            total += t.numel();
        }
        out.push_str(&format!("total parameters: {total}\n"));
        out
    }

    /// Binds all parameters onto a fresh graph for one forward pass.
    pub fn bind(&self) -> BoundModel<'_> {
        let graph = Graph::new();
        let mut named = Vec::new();
        let params = self
            .params
            .map::<Var, Error>(&self.labels, &mut |name, t| {
                let var = graph.leaf(t.clone(), true);
                named.push((name.to_string(), var.clone()));
                Ok(var)
            })
            .expect("binding cannot fail");
        BoundModel {
            model: self,
            graph,
            params,
            named,
        }
    }
}

fn source_labels(plan_part: &DecoderPlan, names: &[String]) -> Vec<String> {
    plan_part.sources.iter().map(|s| s.label(names)).collect()
}

fn source_dim(config: &HacaConfig, source: &ContextSource, decoder_hidden: usize) -> usize {
    match source {
        ContextSource::EncoderLow(m) => config.encoder_configs()[*m].low_output_dim(),
        ContextSource::EncoderHigh(m) => config.encoder_configs()[*m].high_hidden,
        ContextSource::DecoderHistory => decoder_hidden,
    }
}

fn init_decoder(
    rng: &mut ChaCha8Rng,
    config: &HacaConfig,
    plan_part: &DecoderPlan,
    hidden: usize,
    extra_in: usize,
) -> DecoderParams<Tensor> {
    let range = config.init_range;
    let dims: Vec<usize> = plan_part
        .sources
        .iter()
        .map(|s| source_dim(config, s, hidden))
        .collect();
    let attentions = dims
        .iter()
        .map(|&d| AttentionParams::init(rng, d, hidden, hidden, range))
        .collect();
    let fusion = plan_part
        .fused
        .then(|| FusionParams::init(rng, &dims, hidden, hidden, range));
    let context_dim = if plan_part.fused { hidden } else { dims[0] };
    let lstm = LstmParams::init(rng, context_dim + config.embed_dim + extra_in, hidden, range);
    DecoderParams {
        attentions,
        fusion,
        lstm,
    }
}

/// Forward-pass controls. Evaluation runs with dropout 0 and pure teacher
/// forcing; training supplies the dropout probability, the scheduled
/// sampling probability, and the rng that drives both.
pub struct ForwardOpts<'r> {
    pub dropout: f64,
    /// Probability of feeding the ground-truth previous word.
    pub teacher_forcing: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOpts<'static> {
    pub fn eval() -> Self {
        ForwardOpts {
            dropout: 0.0,
            teacher_forcing: 1.0,
            rng: None,
        }
    }
}

/// One teacher-forced (or scheduled) unroll.
pub struct ForwardPass {
    /// Per-step next-word distributions, `1 x |V|` each.
    pub dists: Vec<Var>,
    /// Per-step attention/fusion weight logs.
    pub traces: Vec<StepTrace>,
    /// Total high-level encoder steps consumed (0 for flat variants).
    pub high_steps: usize,
}

/// A model bound onto one recording graph.
pub struct BoundModel<'m> {
    pub model: &'m Model,
    pub graph: Graph,
    pub params: ModelParams<Var>,
    /// Bound parameter leaves by name, for gradient harvesting.
    pub named: Vec<(String, Var)>,
}

impl BoundModel<'_> {
    /// Encodes every modality the variant consumes. The sample must carry a
    /// stream for each configured modality name.
    pub fn encode_sample(&self, sample: &Sample) -> Result<Vec<EncodedModality>> {
        let mut encoded = Vec::with_capacity(self.model.plan.modalities);
        for (cfg, params) in self
            .model
            .config
            .encoder_configs()
            .into_iter()
            .zip(&self.params.encoders)
        {
            let stream = sample.stream(&cfg.name).ok_or_else(|| {
                Error::Data(format!("sample {} has no `{}` stream", sample.id, cfg.name))
            })?;
            let features = self.graph.constant(stream.features.clone());
            encoded.push(encode(&features, cfg, params)?);
        }
        Ok(encoded)
    }

    pub fn initial_state(&self) -> DecoderState {
        let reference = &self.params.projection;
        DecoderState {
            global: self
                .model
                .plan
                .global
                .as_ref()
                .map(|_| RecurrentState::fresh(reference, self.model.config.global_hidden)),
            local: RecurrentState::fresh(reference, self.model.config.local_hidden),
            prev_word: BOS,
            step: 0,
        }
    }

    /// One decode step: global decoder (when aligned), local decoder, vocab
    /// projection. Returns the next-word distribution, the advanced state,
    /// and the step's weight logs.
    pub fn decode_step(
        &self,
        encoded: &[EncodedModality],
        state: &DecoderState,
        w_prev: u32,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, DecoderState, StepTrace)> {
        let word_embedding = self.params.embedding.embed_rows(&[w_prev])?;
        let mut trace = Vec::new();

        let (global_state, global_output) = if let Some(gplan) = &self.model.plan.global {
            let gparams = self.params.global.as_ref().expect("aligned model has global params");
            let gstate = state.global.as_ref().expect("aligned state has global half");
            let out = run_decoder(
                gplan,
                gparams,
                gstate,
                encoded,
                &word_embedding,
                None,
                &self.model.labels.global,
                "global",
                dropout,
                rng.as_deref_mut(),
            )?;
            trace.extend(out.trace);
            (Some(out.state), Some(out.output))
        } else {
            (None, None)
        };

        let local_out = run_decoder(
            &self.model.plan.local,
            &self.params.local,
            &state.local,
            encoded,
            &word_embedding,
            global_output.as_ref(),
            &self.model.labels.local,
            "local",
            dropout,
            rng.as_deref_mut(),
        )?;
        trace.extend(local_out.trace);

        let mut output = local_out.output;
        if dropout > 0.0 {
            let rng = rng.take().ok_or_else(|| {
                Error::Graph("dropout requested without an rng".into())
            })?;
            output = output.dropout(dropout, rng);
        }
        let dist = project_vocab(&output, &self.params.projection)?;

        Ok((
            dist,
            DecoderState {
                global: global_state,
                local: local_out.state,
                prev_word: w_prev,
                step: state.step + 1,
            },
            trace,
        ))
    }

    /// Unrolls `targets.len()` decode steps. Under pure teacher forcing
    /// (probability 1) step `t` consumes `targets[t-1]`; otherwise each step
    /// draws whether to consume the ground-truth word or the model's own
    /// previous argmax.
    pub fn forward_teacher_forced(
        &self,
        sample: &Sample,
        targets: &[u32],
        mut opts: ForwardOpts<'_>,
    ) -> Result<ForwardPass> {
        if targets.is_empty() {
            return Err(Error::Data(format!("sample {}: empty target sequence", sample.id)));
        }
        let encoded = self.encode_sample(sample)?;
        let high_steps = encoded.iter().map(|e| e.high_len()).sum();
        let mut state = self.initial_state();
        let mut dists: Vec<Var> = Vec::with_capacity(targets.len());
        let mut traces = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let w_prev = if t == 0 {
                BOS
            } else if self.use_ground_truth(&mut opts)? {
                targets[t - 1]
            } else {
                argmax_token(&dists[t - 1])
            };
            let (dist, next, trace) =
                self.decode_step(&encoded, &state, w_prev, opts.dropout, opts.rng.as_deref_mut())?;
            dists.push(dist);
            traces.push(trace);
            state = next;
        }
        Ok(ForwardPass {
            dists,
            traces,
            high_steps,
        })
    }

    fn use_ground_truth(&self, opts: &mut ForwardOpts<'_>) -> Result<bool> {
        if opts.teacher_forcing >= 1.0 {
            return Ok(true);
        }
        let rng = opts.rng.as_deref_mut().ok_or_else(|| {
            Error::Graph("scheduled sampling requires an rng".into())
        })?;
        Ok(rng.gen::<f64>() < opts.teacher_forcing)
    }

    /// Gradients of all named parameters after a backward pass; parameters
    /// untouched by the loss report zeros.
    pub fn grads(&self) -> GradMap {
        self.named
            .iter()
            .map(|(name, var)| {
                let g = var
                    .grad()
                    .unwrap_or_else(|| vec![0.0; var.value().numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Highest-probability token id; ties break toward the lower id.
pub fn argmax_token(dist: &Var) -> u32 {
    let values = dist.values();
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ModalityStream, EOS};
    use crate::decoder::ALL_VARIANTS;

    fn micro_sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |n: usize, d: usize| {
            Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        Sample {
            id: format!("s-{seed}"),
            streams: vec![
                ModalityStream::new("visual", rows(7, 5)),
                ModalityStream::new("audio", rows(4, 3)),
            ],
            captions: vec![vec![4, 5, 6, EOS]],
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 5)).unwrap();
        let b = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 5)).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values());
        }
        let c = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 6)).unwrap();
        assert_ne!(
            a.named_params()[0].1.values(),
            c.named_params()[0].1.values()
        );
    }

    #[test]
    fn init_respects_range_except_forget_biases() {
        let m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 1)).unwrap();
        for (name, t) in m.named_params() {
            for (i, v) in t.values().iter().enumerate() {
                if name.ends_with(".b") {
                    let h = t.numel() / 4;
                    if (h..2 * h).contains(&i) {
                        assert_eq!(*v, 1.0, "{name}[{i}]");
                        continue;
                    }
                }
                assert!(v.abs() <= 0.08, "{name}[{i}] = {v}");
            }
        }
    }

    #[test]
    fn micro_parameter_count_matches_hand_arithmetic() {
        // lstm(in, h) = 4h(in + h + 1); att(f, q, a) = a(f + q + 1);
        // fusion(d.., fus, q) = fus * sum(d) + fus + att(fus, q, q).
        // embedding 12*6 = 72
        // visual enc: lstm(5,4)*2 = 320; att(8,4,4) = 52; lstm(8,4) = 208
        // audio enc: lstm(3,4)*2 = 256; att(8,4,4) = 52; lstm(8,4) = 208
        // global dec: 3*att(4,4,4) = 108; fusion = 48+4+36 = 88; lstm(10,4) = 240
        // local dec: 3*att(8,8,8) = 408; fusion = 192+8+136 = 336; lstm(18,8) = 864
        // projection 12*8 = 96
        let expected = 72 + (320 + 52 + 208) + (256 + 52 + 208) + (108 + 88 + 240) + (408 + 336 + 864) + 96;
        let m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 0)).unwrap();
        assert_eq!(m.param_count(), expected);
        assert_eq!(expected, 3308);
    }

    #[test]
    fn variant_parameter_counts_are_strictly_monotone() {
        let counts: Vec<usize> = ALL_VARIANTS
            .iter()
            .map(|&v| Model::build(HacaConfig::micro(v, 12, 0)).unwrap().param_count())
            .collect();
        for w in counts.windows(2) {
            assert!(w[0] < w[1], "{counts:?}");
        }
    }

    #[test]
    fn parameter_names_are_stable_across_seeds() {
        let names = |seed: u64| -> Vec<String> {
            Model::build(HacaConfig::micro(ModelVariant::Haca, 12, seed))
                .unwrap()
                .named_params()
                .into_iter()
                .map(|(n, _)| n)
                .collect()
        };
        assert_eq!(names(1), names(99));
    }

    #[test]
    fn zero_parameters_give_uniform_next_word_distribution() {
        let mut m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 0)).unwrap();
        for (_, t) in m.named_params_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        let bound = m.bind();
        let sample = micro_sample(1);
        let pass = bound
            .forward_teacher_forced(&sample, &sample.captions[0], ForwardOpts::eval())
            .unwrap();
        for dist in &pass.dists {
            for v in dist.values() {
                assert!((v - 1.0 / 12.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn every_variant_runs_forward_and_distributions_sum_to_one() {
        let sample = micro_sample(2);
        for &variant in &ALL_VARIANTS {
            let m = Model::build(HacaConfig::micro(variant, 12, 3)).unwrap();
            let bound = m.bind();
            let pass = bound
                .forward_teacher_forced(&sample, &sample.captions[0], ForwardOpts::eval())
                .unwrap();
            assert_eq!(pass.dists.len(), 4);
            for dist in &pass.dists {
                let sum: f64 = dist.values().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{variant}");
            }
            if plan(variant).hierarchical {
                // ceil(7/3) + ceil(4/2)
                assert_eq!(pass.high_steps, 3 + 2, "{variant}");
            } else {
                assert_eq!(pass.high_steps, 0, "{variant}");
            }
        }
    }

    #[test]
    fn att_v_output_ignores_the_audio_stream() {
        let m = Model::build(HacaConfig::micro(ModelVariant::AttV, 12, 4)).unwrap();
        let mut sample = micro_sample(3);
        let bound = m.bind();
        let before = bound
            .forward_teacher_forced(&sample, &sample.captions[0], ForwardOpts::eval())
            .unwrap();
        // perturb audio wildly
        let audio = sample.streams.iter_mut().find(|s| s.name == "audio").unwrap();
        for v in audio.features.values_mut() {
            *v = 1000.0 - *v;
        }
        let bound2 = m.bind();
        let after = bound2
            .forward_teacher_forced(&sample, &sample.captions[0], ForwardOpts::eval())
            .unwrap();
        for (a, b) in before.dists.iter().zip(&after.dists) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn distribution_at_step_t_ignores_future_targets() {
        let m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 5)).unwrap();
        let sample = micro_sample(4);
        let run = |targets: Vec<u32>| {
            let bound = m.bind();
            bound
                .forward_teacher_forced(&sample, &targets, ForwardOpts::eval())
                .unwrap()
                .dists
                .iter()
                .map(|d| d.values())
                .collect::<Vec<_>>()
        };
        let base = run(vec![4, 5, 6, EOS]);
        let perturbed = run(vec![4, 5, 9, 10]);
        // steps 0..=2 consume only BOS, 4, 5; they must match exactly
        for t in 0..3 {
            for (a, b) in base[t].iter().zip(&perturbed[t]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn histories_grow_by_one_per_step() {
        let m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 6)).unwrap();
        let sample = micro_sample(5);
        let bound = m.bind();
        let encoded = bound.encode_sample(&sample).unwrap();
        let mut state = bound.initial_state();
        for t in 0..4 {
            assert_eq!(state.local.history.len(), t);
            assert_eq!(state.global.as_ref().unwrap().history.len(), t);
            assert_eq!(state.step, t);
            let (_, next, _) = bound.decode_step(&encoded, &state, BOS, 0.0, None).unwrap();
            state = next;
        }
        assert_eq!(state.local.history.len(), 4);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 7)).unwrap();
        let sample = micro_sample(6);
        let run = || {
            m.bind()
                .forward_teacher_forced(&sample, &sample.captions[0], ForwardOpts::eval())
                .unwrap()
                .dists
                .iter()
                .flat_map(|d| d.values())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_word_id_is_rejected() {
        let m = Model::build(HacaConfig::micro(ModelVariant::Haca, 12, 8)).unwrap();
        let sample = micro_sample(7);
        let bound = m.bind();
        let encoded = bound.encode_sample(&sample).unwrap();
        let state = bound.initial_state();
        assert!(bound.decode_step(&encoded, &state, 12, 0.0, None).is_err());
    }

    #[test]
    fn set_param_map_round_trips() {
        let m = Model::build(HacaConfig::micro(ModelVariant::CmAttVad, 12, 9)).unwrap();
        let snapshot = m.param_map();
        let mut other = Model::build(HacaConfig::micro(ModelVariant::CmAttVad, 12, 77)).unwrap();
        other.set_param_map(&snapshot).unwrap();
        for ((_, a), (_, b)) in m.named_params().iter().zip(other.named_params().iter()) {
            assert_eq!(a.values(), b.values());
        }
    }
}
