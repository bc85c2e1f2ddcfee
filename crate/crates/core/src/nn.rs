//! Neural building blocks on top of candle.
//!
//! Parameters are created through [`ParamStore`], which draws initial values
//! from a seeded host-side generator so that two stores built from the same
//! seed are bit-identical. Dropout masks come from the same kind of seeded
//! stream via [`Mode`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv1d, Conv1dConfig, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable variables plus the generator used to initialize them.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` defined twice")));
        }
        let var = Var::from_vec(values, shape, &self.device)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[outputs, inputs], bound)?;
        let b = if bias {
            Some(self.uniform(&format!("{name}.bias"), &[outputs], bound)?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    pub fn conv1d(
        &mut self,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
    ) -> Result<Conv1d> {
        let bound = 1.0 / ((inputs * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[outputs, inputs, kernel], bound)?;
        let b = self.uniform(&format!("{name}.bias"), &[outputs], bound)?;
        let cfg = Conv1dConfig {
            padding: kernel / 2,
            ..Default::default()
        };
        Ok(Conv1d::new(w, Some(b), cfg))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: self.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Whether a forward pass is training (dropout active) or inference.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout: f64,
        rng: &'a RefCell<ChaCha8Rng>,
    },
}

impl Mode<'_> {
    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train { dropout, .. } if *dropout <= 0.0 => Ok(x.clone()),
            Mode::Train { dropout, rng } => {
                let keep = 1.0 - dropout;
                let scale = (1.0 / keep) as f32;
                let mut rng = rng.borrow_mut();
                let mask: Vec<f32> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
                Ok(x.mul(&mask)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head attention with separate query and key/value inputs, so the same
/// block serves self- and cross-attention.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: store.linear(&format!("{name}.q"), dim, dim, true)?,
            k: store.linear(&format!("{name}.k"), dim, dim, true)?,
            v: store.linear(&format!("{name}.v"), dim, dim, true)?,
            out: store.linear(&format!("{name}.out"), dim, dim, true)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query`: (B, Tq, d); `memory`: (B, Tk, d); `key_bias`: (B, 1, 1, Tk)
    /// additive mask, 0 for valid keys and a large negative value for padding.
    pub fn forward(
        &self,
        query: &Tensor,
        memory: &Tensor,
        key_bias: &Tensor,
        mode: &Mode,
    ) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(key_bias)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let weights = mode.dropout(&weights)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        Ok(self.out.forward(&ctx)?)
    }
}

pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: store.linear(&format!("{name}.up"), dim, hidden, true)?,
            down: store.linear(&format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let h = self.up.forward(x)?.gelu()?;
        let h = mode.dropout(&h)?;
        Ok(self.down.forward(&h)?)
    }
}

/// Pre-norm transformer layer. With `memory = None` it is a self-attention
/// encoder layer; otherwise queries attend to `memory`.
pub struct AttentionLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    norm_q: LayerNorm,
    norm_kv: Option<LayerNorm>,
    norm_ffn: LayerNorm,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        cross: bool,
    ) -> Result<Self> {
        Ok(AttentionLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn)?,
            norm_q: store.layer_norm(&format!("{name}.norm_q"), dim)?,
            norm_kv: if cross {
                Some(store.layer_norm(&format!("{name}.norm_kv"), dim)?)
            } else {
                None
            },
            norm_ffn: store.layer_norm(&format!("{name}.norm_ffn"), dim)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: Option<&Tensor>,
        key_bias: &Tensor,
        mode: &Mode,
    ) -> Result<Tensor> {
        let q = self.norm_q.forward(x)?;
        let attended = match (memory, &self.norm_kv) {
            (Some(m), Some(norm)) => {
                let kv = norm.forward(m)?;
                self.attn.forward(&q, &kv, key_bias, mode)?
            }
            _ => self.attn.forward(&q, &q, key_bias, mode)?,
        };
        let x = (x + mode.dropout(&attended)?)?;
        let h = self.ffn.forward(&self.norm_ffn.forward(&x)?, mode)?;
        Ok((&x + mode.dropout(&h)?)?)
    }
}

const MASKED: f32 = -1.0e9;

/// Additive key mask of shape (B, 1, 1, T).
pub fn key_bias(lengths: &[usize], t_max: usize, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; lengths.len() * t_max];
    for (b, &len) in lengths.iter().enumerate() {
        for t in len..t_max {
            v[b * t_max + t] = MASKED;
        }
    }
    Ok(Tensor::from_vec(v, (lengths.len(), 1, 1, t_max), device)?)
}

/// Multiplicative time mask of shape (B, T, 1).
pub fn time_mask(lengths: &[usize], t_max: usize, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; lengths.len() * t_max];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(t_max) {
            v[b * t_max + t] = 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (lengths.len(), t_max, 1), device)?)
}

/// Mean over valid frames: (B, T, d) -> (B, d).
pub fn masked_mean(x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (b, t, _) = x.dims3()?;
    if lengths.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} lengths for a batch of {b}",
            lengths.len()
        )));
    }
    if lengths.iter().any(|&l| l == 0 || l > t) {
        return Err(Error::EmptyInput("pooling needs at least one valid frame"));
    }
    let mask = time_mask(lengths, t, x.device())?;
    let sums = x.broadcast_mul(&mask)?.sum(1)?;
    let counts: Vec<f32> = lengths.iter().map(|&l| l as f32).collect();
    let counts = Tensor::from_vec(counts, (b, 1), x.device())?;
    Ok(sums.broadcast_div(&counts)?)
}

/// Fixed sinusoidal position encodings of shape (T, d).
pub fn sinusoidal_positions(t: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; t * dim];
    for pos in 0..t {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            v[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(v, (t, dim), device)?)
}

/// Flattens a tensor into host `f32` values.
pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(5);
        let mut b = ParamStore::new(5);
        let la = a.linear("l", 4, 3, true).unwrap();
        let lb = b.linear("l", 4, 3, true).unwrap();
        assert_eq!(
            to_vec_f32(la.weight()).unwrap(),
            to_vec_f32(lb.weight()).unwrap()
        );
        assert_eq!(a.parameter_count(), 15);
        assert!(a.linear("l", 4, 3, true).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut s = ParamStore::new(0);
        let ln = s.layer_norm("n", 4).unwrap();
        let x = Tensor::new(&[[1f32, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y = to_vec_f32(&ln.forward(&x).unwrap()).unwrap();
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        let var: f32 = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn masked_mean_ignores_padding() {
        let x = Tensor::new(&[[[1f32], [3.], [100.]], [[2.], [4.], [6.]]], &Device::Cpu).unwrap();
        let m = to_vec_f32(&masked_mean(&x, &[2, 3]).unwrap()).unwrap();
        assert_eq!(m, [2.0, 4.0]);
        assert!(masked_mean(&x, &[0, 3]).is_err());
    }

    #[test]
    fn padding_does_not_change_attention() {
        let mut s = ParamStore::new(1);
        let layer = AttentionLayer::new(&mut s, "l", 8, 2, 16, false).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1., (1, 5, 8), &dev).unwrap();
        let pad = Tensor::zeros((1, 3, 8), DType::F32, &dev).unwrap();
        let xp = Tensor::cat(&[&x, &pad], 1).unwrap();
        let y = layer
            .forward(&x, None, &key_bias(&[5], 5, &dev).unwrap(), &Mode::Eval)
            .unwrap();
        let yp = layer
            .forward(&xp, None, &key_bias(&[5], 8, &dev).unwrap(), &Mode::Eval)
            .unwrap()
            .narrow(1, 0, 5)
            .unwrap();
        let diff = (y - yp).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn dropout_is_seeded() {
        let x = Tensor::ones((4, 16), DType::F32, &Device::Cpu).unwrap();
        let run = || {
            let rng = RefCell::new(ChaCha8Rng::seed_from_u64(9));
            let mode = Mode::Train { dropout: 0.5, rng: &rng };
            to_vec_f32(&mode.dropout(&x).unwrap()).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.contains(&0.0) && a.contains(&2.0));
        assert_eq!(to_vec_f32(&Mode::Eval.dropout(&x).unwrap()).unwrap(), vec![1.0; 64]);
    }
}
