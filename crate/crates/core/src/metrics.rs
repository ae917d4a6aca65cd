//! BLEU-4 corpus scoring, token accuracy, and the evaluation harness.
//!
//! BLEU is the strict corpus-level form: modified n-gram precision with
//! per-reference clipping aggregated over the whole corpus, a brevity
//! penalty against the closest reference length (ties prefer the shorter
//! reference), and a geometric mean over n = 1..4 with no smoothing; any
//! zero precision zeroes the score.

use std::collections::HashMap;

use crate::data::{Sample, EOS};
use crate::error::{Error, Result};
use crate::infer::{beam_search, greedy_decode, DecodeSession};
use crate::model::{argmax_token, ForwardOpts, Model};

/// Corpus BLEU with its components.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub bleu4: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over token-id sequences. Hypotheses and references must be
/// surface sequences (no BOS/EOS). Every sample needs at least one
/// reference and the counts must line up.
pub fn bleu4(hypotheses: &[Vec<u32>], references: &[Vec<Vec<u32>>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Eval(format!(
            "bleu4: {} hypotheses vs {} reference lists",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Eval("bleu4: empty reference list".into()));
        }
        hyp_len += hyp.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| {
                let diff = len.abs_diff(hyp.len());
                (diff, len)
            })
            .unwrap();
        ref_len += closest;

        for n in 1..=4usize {
            let hyp_counts = ngram_counts(hyp, n);
            if hyp_counts.is_empty() {
                continue;
            }
            let ref_counts: Vec<HashMap<&[u32], usize>> =
                refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }

    let mut precisions = [0.0f64; 4];
    let mut log_sum = 0.0f64;
    let mut zero = false;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            zero = true;
            precisions[n] = 0.0;
        } else {
            precisions[n] = matched[n] as f64 / total[n] as f64;
            log_sum += precisions[n].ln();
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu4 = if zero {
        0.0
    } else {
        brevity_penalty * (log_sum / 4.0).exp()
    };
    Ok(BleuReport {
        bleu4,
        precisions,
        brevity_penalty,
    })
}

/// Teacher-forced next-token accuracy over every (sample, reference) pair.
pub fn token_accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Eval("token accuracy of an empty sample set".into()));
    }
    let mut correct = 0usize;
    let mut totals = 0usize;
    for sample in samples {
        for caption in &sample.captions {
            let bound = model.bind();
            let pass = bound.forward_teacher_forced(sample, caption, ForwardOpts::eval())?;
            for (dist, &target) in pass.dists.iter().zip(caption) {
                if target == crate::data::PAD {
                    continue;
                }
                if argmax_token(dist) == target {
                    correct += 1;
                }
                totals += 1;
            }
        }
    }
    Ok(correct as f64 / totals as f64)
}

/// Full evaluation of one split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub bleu4: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    /// Teacher-forced next-token accuracy.
    pub token_accuracy: f64,
    /// Fraction of samples whose generated first word (the audio-determined
    /// modifier position) matches a reference.
    pub modifier_accuracy: f64,
    /// Fraction of reference event positions (1..) reproduced exactly.
    pub event_accuracy: f64,
    pub samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "bleu4,p1,p2,p3,p4,brevity_penalty,token_accuracy,modifier_accuracy,event_accuracy,samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.bleu4,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.token_accuracy,
            self.modifier_accuracy,
            self.event_accuracy,
            self.samples
        )
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples:            {}", self.samples)?;
        writeln!(
            f,
            "BLEU-4:             {:.4} (p1 {:.4}, p2 {:.4}, p3 {:.4}, p4 {:.4}, bp {:.4})",
            self.bleu4,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty
        )?;
        writeln!(f, "token accuracy:     {:.4}", self.token_accuracy)?;
        writeln!(f, "modifier accuracy:  {:.4}", self.modifier_accuracy)?;
        write!(f, "event accuracy:     {:.4}", self.event_accuracy)
    }
}

/// Strips the trailing EOS from a reference caption.
pub fn surface(caption: &[u32]) -> Vec<u32> {
    caption.iter().copied().take_while(|&t| t != EOS).collect()
}

/// Decodes every sample (greedy when `beam_size <= 1`) and scores the
/// hypotheses against all references.
pub fn evaluate(model: &Model, samples: &[Sample], beam_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Eval("evaluation of an empty sample set".into()));
    }
    let max_steps = model.config.max_decode_steps;
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    let mut modifier_hits = 0usize;
    let mut event_hits = 0usize;
    let mut event_total = 0usize;
    for sample in samples {
        let session = DecodeSession::new(model, sample)?;
        let tokens = if beam_size <= 1 {
            greedy_decode(&session, max_steps)?
        } else {
            beam_search(&session, beam_size, max_steps, 1)?
                .remove(0)
                .tokens
        };
        let surfaces: Vec<Vec<u32>> = sample.captions.iter().map(|c| surface(c)).collect();
        if surfaces
            .iter()
            .any(|r| !r.is_empty() && r.first() == tokens.first())
        {
            modifier_hits += 1;
        }
        let primary = &surfaces[0];
        for (pos, expected) in primary.iter().enumerate().skip(1) {
            event_total += 1;
            if tokens.get(pos) == Some(expected) {
                event_hits += 1;
            }
        }
        hyps.push(tokens);
        refs.push(surfaces);
    }
    let bleu = bleu4(&hyps, &refs)?;
    Ok(EvalReport {
        bleu4: bleu.bleu4,
        precisions: bleu.precisions,
        brevity_penalty: bleu.brevity_penalty,
        token_accuracy: token_accuracy(model, samples)?,
        modifier_accuracy: modifier_hits as f64 / samples.len() as f64,
        event_accuracy: if event_total == 0 {
            0.0
        } else {
            event_hits as f64 / event_total as f64
        },
        samples: samples.len(),
    })
}
