//! Temporal convolutional encoder and decoder shared by the tokenizer and the VAE.

use candle_core::{Module, Result, Tensor};
use candle_nn::{init, VarBuilder};

use crate::nn::LayerNorm;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub res_blocks: usize,
}

/// 1-D convolution on `(B, C, N)` as unfold + matmul, so every op on the path has a plain backward.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(i: usize, o: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((o, i, k), "weight", init::DEFAULT_KAIMING_NORMAL)?;
        let bound = 1.0 / ((i * k) as f64).sqrt();
        let bias = vb.get_with_hints(o, "bias", init::Init::Uniform { lo: -bound, up: bound })?;
        Ok(Self { weight, bias, stride, padding })
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (o, c, k) = self.weight.dims3()?;
        let x = if self.padding > 0 { x.pad_with_zeros(2, self.padding, self.padding)? } else { x.clone() };
        let (b, _, n) = x.dims3()?;
        if n < k {
            candle_core::bail!("conv1d: input length {n} shorter than kernel {k}");
        }
        let len = (n - k) / self.stride + 1;
        let taps = (0..k)
            .map(|j| {
                let t = x.narrow(2, j, (len - 1) * self.stride + 1)?;
                if self.stride == 1 {
                    return Ok(t);
                }
                // every stride-th frame: pad to len * stride, fold, keep the first of each group
                t.pad_with_zeros(2, 0, self.stride - 1)?.reshape((b, c, len, self.stride))?.narrow(3, 0, 1)?.squeeze(3)
            })
            .collect::<Result<Vec<_>>>()?;
        // (B, C, L, k) -> (B, L, C * k), matching the (O, C, k) weight layout
        let cols = Tensor::stack(&taps, 3)?.permute((0, 2, 1, 3))?.reshape((b, len, c * k))?;
        let w = self.weight.reshape((o, c * k))?.t()?;
        cols.broadcast_matmul(&w)?.broadcast_add(&self.bias)?.transpose(1, 2)
    }
}

fn conv(i: usize, o: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv1d> {
    Conv1d::new(i, o, k, stride, if stride == 1 { k / 2 } else { 0 }, vb)
}

/// Channel layer norm then ReLU on `(B, C, N)`; keeps units from all going silent under L1 training.
#[derive(Debug, Clone)]
struct NormAct(LayerNorm);

impl NormAct {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self(LayerNorm::new(dim, vb)?))
    }
}

impl Module for NormAct {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?.relu()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    na: NormAct,
    a: Conv1d,
    nb: NormAct,
    b: Conv1d,
}

impl ResBlock {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            na: NormAct::new(dim, vb.pp("na"))?,
            a: conv(dim, dim, 3, 1, vb.pp("a"))?,
            nb: NormAct::new(dim, vb.pp("nb"))?,
            b: conv(dim, dim, 1, 1, vb.pp("b"))?,
        })
    }
}

impl Module for ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b.forward(&self.nb.forward(&self.a.forward(&self.na.forward(x)?)?)?)?;
        x + h
    }
}

/// `(B, N, C)` → `(B, N / ds, out)`; `N` must be a multiple of the downsample factor.
#[derive(Debug, Clone)]
pub struct Encoder {
    inp: Conv1d,
    blocks: Vec<ResBlock>,
    down: Option<(NormAct, Conv1d)>,
    norm_out: NormAct,
    out: Conv1d,
}

impl Encoder {
    pub fn new(shape: &CodecShape, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        let h = shape.hidden;
        Ok(Self {
            inp: conv(shape.input_dim, h, 3, 1, vb.pp("in"))?,
            blocks: (0..shape.res_blocks)
                .map(|i| ResBlock::new(h, vb.pp(format!("res{i}"))))
                .collect::<Result<_>>()?,
            down: if shape.downsample > 1 {
                Some((NormAct::new(h, vb.pp("norm_down"))?, conv(h, h, shape.downsample, shape.downsample, vb.pp("down"))?))
            } else {
                None
            },
            norm_out: NormAct::new(h, vb.pp("norm_out"))?,
            out: conv(h, out_dim, 3, 1, vb.pp("out"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.inp.forward(&x.transpose(1, 2)?.contiguous()?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        if let Some((n, d)) = &self.down {
            h = d.forward(&n.forward(&h)?)?;
        }
        self.out.forward(&self.norm_out.forward(&h)?)?.transpose(1, 2)?.contiguous()
    }
}

/// `(N, N * ds)` matrix of half-pixel linear interpolation weights, edges clamped.
fn linear_upsample(n: usize, ds: usize, dtype: candle_core::DType, dev: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0f32; n * n * ds];
    for t in 0..n * ds {
        let u = ((t as f64 + 0.5) / ds as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let a = (u - lo as f64) as f32;
        m[lo * n * ds + t] += 1.0 - a;
        m[hi * n * ds + t] += a;
    }
    Tensor::from_vec(m, (n, n * ds), dev)?.to_dtype(dtype)
}

/// `(B, N1, latent)` → `(B, N1 * ds, C)` via linear upsampling and convolution.
#[derive(Debug, Clone)]
pub struct Decoder {
    inp: Conv1d,
    blocks: Vec<ResBlock>,
    up: Option<(usize, NormAct, Conv1d)>,
    norm_out: NormAct,
    out: Conv1d,
}

impl Decoder {
    pub fn new(shape: &CodecShape, vb: VarBuilder) -> Result<Self> {
        let h = shape.hidden;
        Ok(Self {
            inp: conv(shape.latent_dim, h, 3, 1, vb.pp("in"))?,
            blocks: (0..shape.res_blocks)
                .map(|i| ResBlock::new(h, vb.pp(format!("res{i}"))))
                .collect::<Result<_>>()?,
            up: if shape.downsample > 1 {
                Some((shape.downsample, NormAct::new(h, vb.pp("norm_up"))?, conv(h, h, 3, 1, vb.pp("up"))?))
            } else {
                None
            },
            norm_out: NormAct::new(h, vb.pp("norm_out"))?,
            out: conv(h, shape.input_dim, 3, 1, vb.pp("out"))?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.inp.forward(&z.transpose(1, 2)?.contiguous()?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        if let Some((ds, norm, c)) = &self.up {
            let up = h.broadcast_matmul(&linear_upsample(h.dim(2)?, *ds, h.dtype(), h.device())?)?;
            h = c.forward(&norm.forward(&up)?)?;
        }
        self.out.forward(&self.norm_out.forward(&h)?)?.transpose(1, 2)?.contiguous()
    }
}

/// Pads `(B, N, C)` along time by repeating the last frame up to a multiple of `ds`.
pub fn pad_to_multiple(x: &Tensor, ds: usize) -> Result<(Tensor, usize)> {
    let n = x.dim(1)?;
    let pad = (ds - n % ds) % ds;
    if pad == 0 {
        return Ok((x.clone(), 0));
    }
    let last = x.narrow(1, n - 1, 1)?;
    let reps: Vec<Tensor> = std::iter::once(x.clone()).chain(std::iter::repeat_n(last, pad)).collect();
    Ok((Tensor::cat(&reps, 1)?, pad))
}
