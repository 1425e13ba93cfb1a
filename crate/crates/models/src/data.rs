//! Feature normalisation and batching.

use candle_core::{Device, Result, Tensor};
use egomotion_core::HeadCentricSequence;
use serde::{Deserialize, Serialize};

/// Per-channel mean and standard deviation of head-centric features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    /// Channels with (near) zero spread keep unit scale.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a HeadCentricSequence>) -> Self {
        let mut width = 0;
        let mut rows = Vec::new();
        for s in seqs {
            width = s.width();
            rows.extend((0..s.num_frames()).map(|t| s.frame(t)));
        }
        Self::fit_rows(width, rows)
    }

    pub fn fit_rows<'a>(width: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut sum = vec![0f64; width];
        let mut sq = vec![0f64; width];
        let mut count = 0usize;
        for r in rows {
            for (c, &x) in r.iter().enumerate() {
                sum[c] += x as f64;
                sq[c] += x as f64 * x as f64;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n - m * m).max(0.0).sqrt();
                if v < 1e-4 {
                    1.0
                } else {
                    v as f32
                }
            })
            .collect();
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, data: &[f32]) -> Vec<f32> {
        let w = self.width();
        data.iter().enumerate().map(|(i, x)| (x - self.mean[i % w]) / self.std[i % w]).collect()
    }

    pub fn denormalize(&self, data: &[f32]) -> Vec<f32> {
        let w = self.width();
        data.iter().enumerate().map(|(i, x)| x * self.std[i % w] + self.mean[i % w]).collect()
    }
}

/// Normalised `(B, N, C)` batch; all sequences must share a shape.
pub fn feature_batch(seqs: &[&HeadCentricSequence], stats: &FeatureStats, dev: &Device) -> Result<Tensor> {
    let n = seqs[0].num_frames();
    let c = seqs[0].width();
    let mut v = Vec::with_capacity(seqs.len() * n * c);
    for s in seqs {
        if s.num_frames() != n || s.width() != c {
            candle_core::bail!("ragged batch: {}x{} vs {}x{}", s.num_frames(), s.width(), n, c);
        }
        v.extend(stats.normalize(&s.data));
    }
    Tensor::from_vec(v, (seqs.len(), n, c), dev)
}

/// Splits a `(B, N, C)` normalised tensor back into sequences.
pub fn unbatch(x: &Tensor, stats: &FeatureStats, num_joints: usize) -> Result<Vec<HeadCentricSequence>> {
    let (b, _, _) = x.dims3()?;
    (0..b)
        .map(|i| {
            let data = x.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            HeadCentricSequence::new(num_joints, stats.denormalize(&data))
                .map_err(|e| candle_core::Error::Msg(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_round_trip() {
        let a = HeadCentricSequence::new(2, (0..28).map(|i| i as f32).collect()).unwrap();
        let b = HeadCentricSequence::new(2, (0..28).map(|i| (i % 5) as f32).collect()).unwrap();
        let stats = FeatureStats::fit([&a, &b]);
        let x = feature_batch(&[&a, &b], &stats, &Device::Cpu).unwrap();
        let back = unbatch(&x, &stats, 2).unwrap();
        for (u, v) in back[0].data.iter().zip(&a.data) {
            assert!((u - v).abs() < 1e-4);
        }
    }
}
