//! Hierarchical attentive encoder: a bidirectional low-level pass over raw
//! features, chunked attention, and a unidirectional high-level pass that
//! advances once per chunk of `s` low-level steps.

use crate::attention::{soft_attention, AttentionParams};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::lstm::{bilstm_run, lstm_step, LstmParams};
use crate::tensor::Tensor;

/// Architecture of one modality's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct HierEncoderConfig {
    pub name: String,
    pub feature_dim: usize,
    /// Low-level hidden size per direction; outputs are `2 x` this.
    pub low_hidden: usize,
    pub high_hidden: usize,
    /// Stride of the high-level recurrence over low-level steps.
    pub chunk_size: usize,
    /// Longest feature sequence the encoder accepts.
    pub max_len: usize,
}

impl HierEncoderConfig {
    pub fn low_output_dim(&self) -> usize {
        2 * self.low_hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config(format!("{}: chunk size must be >= 1", self.name)));
        }
        if self.feature_dim == 0 || self.low_hidden == 0 || self.high_hidden == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("{}: all encoder dims must be positive", self.name)));
        }
        Ok(())
    }
}

/// High-level half of the encoder parameters. Absent for model variants
/// that use only the low-level pass.
#[derive(Debug, Clone)]
pub struct HierParams<T> {
    pub chunk_attention: AttentionParams<T>,
    pub high: LstmParams<T>,
}

impl<T> HierParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.chunk_attention.visit(&format!("{prefix}.chunk_attention"), out);
        self.high.visit(&format!("{prefix}.high"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.chunk_attention.visit_mut(&format!("{prefix}.chunk_attention"), out);
        self.high.visit_mut(&format!("{prefix}.high"), out);
    }

    pub fn map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<HierParams<U>, E> {
        Ok(HierParams {
            chunk_attention: self.chunk_attention.map(&format!("{prefix}.chunk_attention"), f)?,
            high: self.high.map(&format!("{prefix}.high"), f)?,
        })
    }
}

/// Full parameter set of one modality encoder.
#[derive(Debug, Clone)]
pub struct ModalityEncoderParams<T> {
    pub low_fwd: LstmParams<T>,
    pub low_bwd: LstmParams<T>,
    pub hier: Option<HierParams<T>>,
}

impl<T> ModalityEncoderParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.low_fwd.visit(&format!("{prefix}.low.fwd"), out);
        self.low_bwd.visit(&format!("{prefix}.low.bwd"), out);
        if let Some(h) = &self.hier {
            h.visit(prefix, out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.low_fwd.visit_mut(&format!("{prefix}.low.fwd"), out);
        self.low_bwd.visit_mut(&format!("{prefix}.low.bwd"), out);
        if let Some(h) = &mut self.hier {
            h.visit_mut(prefix, out);
        }
    }

    pub fn map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModalityEncoderParams<U>, E> {
        Ok(ModalityEncoderParams {
            low_fwd: self.low_fwd.map(&format!("{prefix}.low.fwd"), f)?,
            low_bwd: self.low_bwd.map(&format!("{prefix}.low.bwd"), f)?,
            hier: match &self.hier {
                Some(h) => Some(h.map(prefix, f)?),
                None => None,
            },
        })
    }
}

/// Encoder outputs for one modality.
pub struct EncodedModality {
    pub name: String,
    /// `n x 2h_low` low-level output sequence.
    pub low: Var,
    /// `ceil(n/s) x h_high` high-level output sequence, when hierarchical.
    pub high: Option<Var>,
    /// Per-chunk attention weights (logged); entry `j` covers exactly the
    /// low-level indices of chunk `j`.
    pub chunk_weights: Vec<Vec<f64>>,
}

impl EncodedModality {
    pub fn low_len(&self) -> usize {
        self.low.rows()
    }

    pub fn high_len(&self) -> usize {
        self.high.as_ref().map(|h| h.rows()).unwrap_or(0)
    }
}

/// Runs the hierarchical encoder over an `n x feature_dim` feature matrix.
///
/// The low pass is a bidirectional LSTM over all frames. When high-level
/// parameters are present, frames are grouped into `ceil(n/s)` chunks (the
/// last chunk may be shorter; it is attended as-is rather than padded) and
/// each chunk is summarized by attention queried with the previous
/// high-level hidden state, then fed to the high-level LSTM.
pub fn encode(features: &Var, config: &HierEncoderConfig, params: &ModalityEncoderParams<Var>) -> Result<EncodedModality> {
    let n = features.rows();
    if n > config.max_len {
        return Err(Error::Data(format!(
            "{}: sequence of {n} frames exceeds the configured maximum {}",
            config.name, config.max_len
        )));
    }
    if features.cols() != config.feature_dim {
        return Err(Error::shape(
            "encode",
            format!("[n, {}] features for {}", config.feature_dim, config.name),
            format!("[{n}, {}]", features.cols()),
        ));
    }
    let low = bilstm_run(features, &params.low_fwd, &params.low_bwd)?;

    let Some(hier) = &params.hier else {
        return Ok(EncodedModality {
            name: config.name.clone(),
            low,
            high: None,
            chunk_weights: Vec::new(),
        });
    };

    let g = features.graph();
    let s = config.chunk_size;
    let chunks = n.div_ceil(s);
    let mut hidden = features.constant_like(Tensor::zeros(1, config.high_hidden));
    let mut cell = hidden.clone();
    let mut outputs = Vec::with_capacity(chunks);
    let mut chunk_weights = Vec::with_capacity(chunks);
    for j in 0..chunks {
        let start = j * s;
        let len = s.min(n - start);
        let chunk = low.slice_rows(start, len)?;
        let att = soft_attention(&hidden, &chunk, &hier.chunk_attention)?;
        chunk_weights.push(att.weights.values());
        let step = lstm_step(&att.context, &hidden, &cell, &hier.high)?;
        hidden = step.hidden;
        cell = step.cell;
        outputs.push(step.output);
    }
    let high = g.concat_rows(&outputs)?;
    Ok(EncodedModality {
        name: config.name.clone(),
        low,
        high: Some(high),
        chunk_weights,
    })
}
