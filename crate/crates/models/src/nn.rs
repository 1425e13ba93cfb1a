//! Shared building blocks: seeded parameter store, layer norm, attention and
//! pre-norm transformer blocks.

use std::sync::Mutex;

use candle_core::{DType, Device, Module, Result, Shape, Tensor, Var, D};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Linear, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

/// Additive attention bias for blocked positions.
pub const NEG_INF: f32 = -1e9;

/// A [`VarMap`] whose fresh variables are drawn from a seeded generator.
pub struct SeededStore {
    pub map: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededStore {
    pub fn new(seed: u64) -> Self {
        Self { map: VarMap::new(), rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn sample(&self, init: Init, shape: &Shape) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().unwrap();
        let normal = |mean: f64, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let d = Normal::new(mean, std.max(0.0)).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let uniform = |lo: f64, up: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            if up <= lo {
                return vec![lo; n];
            }
            let d = Uniform::new(lo, up).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => normal(mean, stdev, &mut rng),
            Init::Uniform { lo, up } => uniform(lo, up, &mut rng),
            Init::Kaiming { dist, fan, non_linearity } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(0.0, std, &mut rng),
                    NormalOrUniform::Uniform => {
                        let b = 3f64.sqrt() * std;
                        uniform(-b, b, &mut rng)
                    }
                }
            }
        }
    }

    pub fn builder(&self, dtype: DType, dev: &Device) -> VarBuilder<'_> {
        VarBuilder::from_backend(Box::new(StoreRef(self)), dtype, dev.clone())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.map.all_vars()
    }

    /// Variables sorted by name.
    pub fn named(&self) -> Vec<(String, Var)> {
        let data = self.map.data().lock().unwrap();
        let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// SHA-256 over names, shapes and raw values of every variable.
    pub fn weight_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.named() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for x in flat {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites existing variables from a name → tensor map; every variable must be present.
    pub fn load_from(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let data = self.map.data().lock().unwrap();
        for (name, var) in data.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("checkpoint is missing {name}")))?;
            if t.dims() != var.dims() {
                candle_core::bail!("{name}: checkpoint shape {:?} vs model {:?}", t.dims(), var.dims());
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

struct StoreRef<'a>(&'a SeededStore);

impl SimpleBackend for StoreRef<'_> {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut data = self.0.map.data().lock().unwrap();
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", v.shape(), s);
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.0.sample(h, &s);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> Result<Tensor> {
        candle_core::bail!("unknown variable {name}")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.0.map.data().lock().unwrap().contains_key(name)
    }
}

/// Layer norm over the last dimension built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub fn linear(i: usize, o: usize, vb: VarBuilder) -> Result<Linear> {
    candle_nn::linear(i, o, vb)
}

/// Applies a linear layer to a tensor of any rank ≥ 2.
pub fn apply_linear(l: &Linear, x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = dims[dims.len() - 1];
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = l.forward(&x.reshape((lead, last))?)?;
    let mut out = dims.clone();
    let n = out.len();
    out[n - 1] = y.dim(1)?;
    y.reshape(out)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self { fc1: linear(dim, hidden, vb.pp("fc1"))?, fc2: linear(hidden, dim, vb.pp("fc2"))? })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        apply_linear(&self.fc2, &apply_linear(&self.fc1, x)?.gelu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(dim: usize, kv_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if dim % heads != 0 {
            candle_core::bail!("model dim {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q: linear(dim, dim, vb.pp("q"))?,
            k: linear(kv_dim, dim, vb.pp("k"))?,
            v: linear(kv_dim, dim, vb.pp("v"))?,
            o: linear(dim, dim, vb.pp("o"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        x.reshape((b, s, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// `bias` broadcasts to `(B, H, Sq, Sk)`; use [`NEG_INF`] for blocked pairs.
    pub fn forward(&self, x: &Tensor, kv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let q = self.split(&apply_linear(&self.q, x)?)?;
        let k = self.split(&apply_linear(&self.k, kv)?)?;
        let v = self.split(&apply_linear(&self.v, kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut att = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            att = att.broadcast_add(bias)?;
        }
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        apply_linear(&self.o, &y)
    }
}

/// Pre-norm block: self-attention, optional cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(dim: usize, heads: usize, cross_dim: Option<usize>, vb: VarBuilder) -> Result<Self> {
        let cross = match cross_dim {
            Some(cd) => Some((LayerNorm::new(dim, vb.pp("ln_x"))?, Attention::new(dim, cd, heads, vb.pp("xattn"))?)),
            None => None,
        };
        Ok(Self {
            ln1: LayerNorm::new(dim, vb.pp("ln1"))?,
            attn: Attention::new(dim, dim, heads, vb.pp("attn"))?,
            cross,
            ln2: LayerNorm::new(dim, vb.pp("ln2"))?,
            mlp: Mlp::new(dim, 4 * dim, vb.pp("mlp"))?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: Option<&Tensor>,
        memory: Option<(&Tensor, Option<&Tensor>)>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let mut x = (x + self.attn.forward(&h, &h, self_bias)?)?;
        if let (Some((ln, attn)), Some((mem, mem_bias))) = (&self.cross, memory) {
            let h = ln.forward(&x)?;
            x = (&x + attn.forward(&h, mem, mem_bias)?)?;
        }
        let h = self.ln2.forward(&x)?;
        &x + self.mlp.forward(&h)?
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Stack {
    pub fn new(layers: usize, dim: usize, heads: usize, cross_dim: Option<usize>, vb: VarBuilder) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::new(dim, heads, cross_dim, vb.pp(format!("block{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, ln_f: LayerNorm::new(dim, vb.pp("ln_f"))? })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: Option<&Tensor>,
        memory: Option<(&Tensor, Option<&Tensor>)>,
    ) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x, self_bias, memory)?;
        }
        self.ln_f.forward(&x)
    }
}

/// `(S, S)` additive bias from a visibility predicate `allowed(query, key)`.
pub fn bias_from_fn(s: usize, dev: &Device, allowed: impl Fn(usize, usize) -> bool) -> Result<Tensor> {
    let v: Vec<f32> = (0..s * s).map(|i| if allowed(i / s, i % s) { 0.0 } else { NEG_INF }).collect();
    Tensor::from_vec(v, (s, s), dev)
}

/// `(B, 1, 1, Sk)` additive bias hiding keys where `valid` is false.
pub fn key_padding_bias(valid: &[Vec<bool>], dev: &Device) -> Result<Tensor> {
    let b = valid.len();
    let s = valid.first().map_or(0, |v| v.len());
    let v: Vec<f32> = valid.iter().flat_map(|row| row.iter().map(|&ok| if ok { 0.0 } else { NEG_INF })).collect();
    Tensor::from_vec(v, (b, 1, 1, s), dev)
}

/// Sinusoidal embedding of scalars in `[0, 1]`, shape `(B, dim)`.
pub fn sinusoidal(t: &[f32], dim: usize, dev: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &x in t {
        let x = x as f64 * 1000.0;
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((x * f).sin() as f32);
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((x * f).cos() as f32);
        }
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::from_vec(out, (t.len(), dim), dev)
}

/// Learned table `(n, dim)` initialised with small normal values.
pub fn table(n: usize, dim: usize, name: &str, vb: &VarBuilder) -> Result<Tensor> {
    vb.get_with_hints((n, dim), name, Init::Randn { mean: 0.0, stdev: 0.02 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_store_is_reproducible() {
        let dev = Device::Cpu;
        let a = SeededStore::new(3);
        let b = SeededStore::new(3);
        let c = SeededStore::new(4);
        for s in [&a, &b, &c] {
            let vb = s.builder(DType::F32, &dev);
            linear(8, 4, vb.pp("l")).unwrap();
            crate::conv::Conv1d::new(4, 4, 3, 1, 1, vb.pp("c")).unwrap();
        }
        assert_eq!(a.weight_hash().unwrap(), b.weight_hash().unwrap());
        assert_ne!(a.weight_hash().unwrap(), c.weight_hash().unwrap());
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let dev = Device::Cpu;
        let s = SeededStore::new(0);
        let ln = LayerNorm::new(4, s.builder(DType::F64, &dev)).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &dev).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean = 3.0;
        let var: f64 = [4.0, 1.0, 0.0, 9.0].iter().sum::<f64>() / 4.0;
        for (i, xi) in [1.0, 2.0, 3.0, 6.0].iter().enumerate() {
            assert!((y[0][i] - (xi - mean) / (var + 1e-5f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_has_gradients() {
        let dev = Device::Cpu;
        let s = SeededStore::new(0);
        let ln = LayerNorm::new(3, s.builder(DType::F32, &dev)).unwrap();
        let x = Tensor::new(&[[1.0f32, -2.0, 0.5]], &dev).unwrap();
        let y = (ln.forward(&x).unwrap() * Tensor::new(&[[1f32, 2.0, 3.0]], &dev).unwrap()).unwrap();
        let grads = y.sum_all().unwrap().backward().unwrap();
        for v in s.vars() {
            assert!(grads.get(v.as_tensor()).is_some());
        }
    }

    #[test]
    fn blocked_keys_are_ignored() {
        let dev = Device::Cpu;
        let s = SeededStore::new(1);
        let attn = Attention::new(8, 8, 2, s.builder(DType::F32, &dev)).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 3, 8), &dev).unwrap();
        let bias = bias_from_fn(3, &dev, |q, k| k <= q).unwrap();
        let y1 = attn.forward(&x, &x, Some(&bias)).unwrap();
        let x2 = Tensor::cat(&[x.narrow(1, 0, 2).unwrap(), (x.narrow(1, 2, 1).unwrap() + 5.0).unwrap()], 1).unwrap();
        let y2 = attn.forward(&x2, &x2, Some(&bias)).unwrap();
        let a = y1.narrow(1, 0, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = y2.narrow(1, 0, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
