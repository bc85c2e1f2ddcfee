//! Pairwise preference prediction by cross-attention between two samples'
//! naturalness latents.
//!
//! Each side attends to the other through the same stack of cross-attention
//! layers; the two attended sequences are mean-pooled into `p_a` and `p_b`.
//! A small MLP over `(p_a, p_b, p_a - p_b)` yields the three class logits and
//! a bias-free linear map of `p_a - p_b` yields the CMOS scalar, which is
//! therefore exactly antisymmetric in the pair order.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::ampm::GroupLatent;
use crate::error::{Error, Result};
use crate::nn::{key_bias, masked_mean, to_vec_f32, AttentionLayer, LayerNorm, Mode, ParamStore};
use crate::pairs::Preference;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcpmConfig {
    pub layers: usize,
    /// Hidden width of the class head.
    pub hidden: usize,
}

impl Default for NcpmConfig {
    fn default() -> Self {
        NcpmConfig { layers: 2, hidden: 256 }
    }
}

impl NcpmConfig {
    pub fn desk() -> Self {
        NcpmConfig { layers: 2, hidden: 32 }
    }
}

/// Logits ordered (A wins, tie, B wins) and the predicted score difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceOutput {
    pub logits: [f64; 3],
    pub cmos: Option<f64>,
}

pub struct Ncpm {
    layers: Vec<AttentionLayer>,
    norm: LayerNorm,
    hidden: Linear,
    classes: Linear,
    cmos: Linear,
    d_model: usize,
}

/// Batched NCPM output: `(B, 3)` logits and `(B,)` CMOS.
pub struct NcpmBatchOutput {
    pub logits: Tensor,
    pub cmos: Tensor,
}

impl Ncpm {
    pub fn new(store: &mut ParamStore, config: &NcpmConfig, d_model: usize, heads: usize, ffn: usize) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::Config("NCPM needs at least one layer and a positive hidden width".into()));
        }
        let layers = (0..config.layers)
            .map(|i| AttentionLayer::new(store, &format!("ncpm.layer{i}"), d_model, heads, ffn, true))
            .collect::<Result<_>>()?;
        Ok(Ncpm {
            layers,
            norm: store.layer_norm("ncpm.norm", d_model)?,
            hidden: store.linear("ncpm.class.hidden", 3 * d_model, config.hidden, true)?,
            classes: store.linear("ncpm.class.out", config.hidden, 3, true)?,
            cmos: store.linear("ncpm.cmos", d_model, 1, false)?,
            d_model,
        })
    }

    fn attend(&self, x: &Tensor, x_len: &[usize], memory: &Tensor, mem_len: &[usize], mode: &Mode) -> Result<Tensor> {
        let bias = key_bias(mem_len, memory.dim(1)?, memory.device())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, Some(memory), &bias, mode)?;
        }
        masked_mean(&self.norm.forward(&h)?, x_len)
    }

    /// Compares padded latents `a` (`(B, La, d)`) and `b` (`(B, Lb, d)`).
    pub fn forward_batch(
        &self,
        a: &Tensor,
        a_len: &[usize],
        b: &Tensor,
        b_len: &[usize],
        mode: &Mode,
    ) -> Result<NcpmBatchOutput> {
        for t in [a, b] {
            let d = t.dim(2)?;
            if d != self.d_model {
                return Err(Error::WidthMismatch {
                    expected: self.d_model,
                    got: d,
                });
            }
        }
        let p_a = self.attend(a, a_len, b, b_len, mode)?;
        let p_b = self.attend(b, b_len, a, a_len, mode)?;
        let diff = p_a.sub(&p_b)?;
        let joint = Tensor::cat(&[&p_a, &p_b, &diff], 1)?;
        let h = mode.dropout(&self.hidden.forward(&joint)?.gelu()?)?;
        let logits = self.classes.forward(&h)?;
        let cmos = self.cmos.forward(&diff)?.squeeze(1)?;
        Ok(NcpmBatchOutput { logits, cmos })
    }

    pub fn compare(&self, a: &GroupLatent, b: &GroupLatent) -> Result<PreferenceOutput> {
        let out = self.forward_batch(
            &a.frames.unsqueeze(0)?,
            &[a.l()],
            &b.frames.unsqueeze(0)?,
            &[b.l()],
            &Mode::Eval,
        )?;
        let l = to_vec_f32(&out.logits)?;
        let c = to_vec_f32(&out.cmos)?;
        Ok(PreferenceOutput {
            logits: [l[0] as f64, l[1] as f64, l[2] as f64],
            cmos: Some(c[0] as f64),
        })
    }
}

/// Argmax over the logits; exact ties go to TIE, then to A wins.
pub fn predict_preference(output: &PreferenceOutput) -> Preference {
    argmax_class(&output.logits)
}

pub fn argmax_class(logits: &[f64; 3]) -> Preference {
    let [a, t, b] = *logits;
    let best = a.max(t).max(b);
    if t == best {
        Preference::Tie
    } else if a == best {
        Preference::AWins
    } else {
        Preference::BWins
    }
}
