use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sliding window of `window` samples advanced by `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub step: usize,
}

impl WindowSpec {
    pub fn new(window: usize, step: usize) -> Result<Self> {
        if step == 0 || window == 0 || step > window {
            return Err(Error::invalid(format!(
                "window spec needs 1 <= step <= window, got window {window} step {step}"
            )));
        }
        Ok(Self { window, step })
    }

    /// Quarter-window step used by the seq2seq blocks.
    pub fn quarter(window: usize) -> Result<Self> {
        Self::new(window, (window / 4).max(1))
    }
}

/// Start indices `0, s, 2s, ..` up to `len - W`, plus a final window clamped
/// to the end when the steps do not land on it exactly.
pub fn slide_windows(len: usize, spec: &WindowSpec) -> Result<Vec<usize>> {
    let spec = WindowSpec::new(spec.window, spec.step)?;
    if len < spec.window {
        return Err(Error::invalid(format!(
            "sequence of length {len} is shorter than window {}",
            spec.window
        )));
    }
    let last = len - spec.window;
    let mut starts: Vec<usize> = (0..=last).step_by(spec.step).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.model_dim == 0 {
            return Err(Error::invalid("attention dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "attention dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

/// One prediction per window, read from the window midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2OneConfig {
    pub window: usize,
    pub n_layers: usize,
    pub attention: AttentionConfig,
    /// Feed-forward hidden size as a multiple of `model_dim`; 0 disables it.
    pub ffn_expansion: f64,
    pub n_roi: usize,
    pub n_outputs: usize,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

impl Default for Seq2OneConfig {
    fn default() -> Self {
        Self {
            window: 32,
            n_layers: 1,
            attention: AttentionConfig {
                n_heads: 8,
                head_dim: 60,
                dropout: 0.3,
                model_dim: 480,
            },
            ffn_expansion: 1.0,
            n_roi: 497,
            n_outputs: 1,
            positional_encoding: true,
        }
    }
}

/// Stacked windowed-attention blocks with overlap averaging; one prediction
/// per input time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub block_windows: Vec<usize>,
    /// `model_dim` must equal `feature_dim`.
    pub attention: AttentionConfig,
    pub feature_dim: usize,
    pub ffn_expansion: f64,
    pub n_roi: usize,
    pub n_outputs: usize,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            block_windows: vec![4, 8, 12, 16, 20],
            attention: AttentionConfig {
                n_heads: 20,
                head_dim: 100,
                dropout: 0.3,
                model_dim: 500,
            },
            feature_dim: 500,
            ffn_expansion: 0.0,
            n_roi: 497,
            n_outputs: 1,
            positional_encoding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Seq2one(Seq2OneConfig),
    Seq2seq(Seq2SeqConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Seq2one(Seq2OneConfig::default())
    }
}

pub(crate) fn ffn_hidden(expansion: f64, d: usize) -> Result<usize> {
    if !(expansion >= 0.0 && expansion.is_finite()) {
        return Err(Error::invalid(format!(
            "ffn_expansion must be >= 0, got {expansion}"
        )));
    }
    Ok((expansion * d as f64).round() as usize)
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Seq2one(_) => "seq2one",
            ModelConfig::Seq2seq(_) => "seq2seq",
        }
    }

    pub fn n_roi(&self) -> usize {
        match self {
            ModelConfig::Seq2one(c) => c.n_roi,
            ModelConfig::Seq2seq(c) => c.n_roi,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            ModelConfig::Seq2one(c) => c.n_outputs,
            ModelConfig::Seq2seq(c) => c.n_outputs,
        }
    }

    pub fn set_io(&mut self, n_roi: usize, n_outputs: usize) {
        match self {
            ModelConfig::Seq2one(c) => {
                c.n_roi = n_roi;
                c.n_outputs = n_outputs;
            }
            ModelConfig::Seq2seq(c) => {
                c.n_roi = n_roi;
                c.n_outputs = n_outputs;
            }
        }
    }

    /// Shortest input the model accepts.
    pub fn min_len(&self) -> usize {
        match self {
            ModelConfig::Seq2one(c) => c.window,
            ModelConfig::Seq2seq(c) => c.block_windows.iter().copied().max().unwrap_or(1),
        }
    }

    /// `(offset, len)`: prediction `i` aligns with input time `offset + i`.
    pub fn output_span(&self, input_len: usize) -> Result<(usize, usize)> {
        if input_len < self.min_len() {
            return Err(Error::invalid(format!(
                "{} needs at least {} time points, got {input_len}",
                self.name(),
                self.min_len()
            )));
        }
        Ok(match self {
            ModelConfig::Seq2one(c) => (c.window / 2, input_len - c.window + 1),
            ModelConfig::Seq2seq(_) => (0, input_len),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let io = |n_roi: usize, n_outputs: usize| {
            if n_roi == 0 {
                return Err(Error::invalid("n_roi must be positive"));
            }
            if !(1..=2).contains(&n_outputs) {
                return Err(Error::invalid(format!(
                    "n_outputs must be 1 or 2, got {n_outputs}"
                )));
            }
            Ok(())
        };
        match self {
            ModelConfig::Seq2one(c) => {
                io(c.n_roi, c.n_outputs)?;
                c.attention.validate()?;
                ffn_hidden(c.ffn_expansion, c.attention.model_dim)?;
                if c.window < 2 || c.window % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "seq2one window must be even, got {}",
                        c.window
                    )));
                }
                if c.n_layers == 0 {
                    return Err(Error::invalid("seq2one needs at least one layer"));
                }
            }
            ModelConfig::Seq2seq(c) => {
                io(c.n_roi, c.n_outputs)?;
                c.attention.validate()?;
                ffn_hidden(c.ffn_expansion, c.feature_dim)?;
                if c.attention.model_dim != c.feature_dim {
                    return Err(Error::invalid(format!(
                        "seq2seq attention model_dim {} differs from feature_dim {}",
                        c.attention.model_dim, c.feature_dim
                    )));
                }
                if c.block_windows.is_empty() {
                    return Err(Error::invalid("seq2seq needs at least one block"));
                }
                for &w in &c.block_windows {
                    WindowSpec::quarter(w)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_enumeration() {
        assert_eq!(
            slide_windows(266, &WindowSpec::new(32, 1).unwrap())
                .unwrap()
                .len(),
            235
        );
        assert_eq!(
            slide_windows(10, &WindowSpec::new(4, 1).unwrap()).unwrap(),
            (0..=6).collect::<Vec<_>>()
        );
        assert_eq!(
            slide_windows(11, &WindowSpec::new(4, 2).unwrap()).unwrap(),
            vec![0, 2, 4, 6, 7]
        );
        assert_eq!(
            slide_windows(4, &WindowSpec::new(4, 3).unwrap()).unwrap(),
            vec![0]
        );
        assert!(slide_windows(3, &WindowSpec::new(4, 1).unwrap()).is_err());
        assert!(WindowSpec::new(4, 5).is_err());
        assert!(WindowSpec::new(4, 0).is_err());
    }

    #[test]
    fn quarter_steps() {
        let steps: Vec<usize> = [4, 8, 12, 16, 20]
            .iter()
            .map(|&w| WindowSpec::quarter(w).unwrap().step)
            .collect();
        assert_eq!(steps, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn config_json_round_trip() {
        for cfg in [
            ModelConfig::Seq2one(Seq2OneConfig::default()),
            ModelConfig::Seq2seq(Seq2SeqConfig::default()),
        ] {
            cfg.validate().unwrap();
            let s = serde_json::to_string(&cfg).unwrap();
            let back: ModelConfig = serde_json::from_str(&s).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn output_spans() {
        let s2o = ModelConfig::Seq2one(Seq2OneConfig::default());
        assert_eq!(s2o.output_span(266).unwrap(), (16, 235));
        assert_eq!(s2o.output_span(32).unwrap(), (16, 1));
        assert!(s2o.output_span(31).is_err());
        let s2s = ModelConfig::Seq2seq(Seq2SeqConfig::default());
        assert_eq!(s2s.output_span(20).unwrap(), (0, 20));
        assert!(s2s.output_span(19).is_err());
    }
}
