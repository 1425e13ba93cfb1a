//! Token selection from logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    /// `0` selects greedily.
    pub temperature: f64,
    /// Restrict sampling to the `k` most likely tokens; `0` keeps all.
    pub top_k: usize,
}

impl Sampling {
    pub const GREEDY: Sampling = Sampling { temperature: 0.0, top_k: 0 };
}

impl Default for Sampling {
    fn default() -> Self {
        Self::GREEDY
    }
}

/// Picks an index in `0..allowed` from `logits[..allowed]`; returns it with its softmax probability.
pub fn pick(logits: &[f32], allowed: usize, s: Sampling, rng: &mut impl Rng) -> (u32, f64) {
    let l = &logits[..allowed];
    let max = l.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = l.iter().map(|&x| (x as f64 - max).exp()).sum();
    let prob = |i: usize| (l[i] as f64 - max).exp() / z;
    if s.temperature <= 0.0 {
        let mut best = 0;
        for i in 1..allowed {
            if l[i] > l[best] {
                best = i;
            }
        }
        return (best as u32, prob(best));
    }
    let mut idx: Vec<usize> = (0..allowed).collect();
    if s.top_k > 0 && s.top_k < allowed {
        idx.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        idx.truncate(s.top_k);
    }
    let w: Vec<f64> = idx.iter().map(|&i| ((l[i] as f64 - max) / s.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (j, &i) in idx.iter().enumerate() {
        if u < w[j] {
            return (i as u32, prob(i));
        }
        u -= w[j];
    }
    let last = *idx.last().unwrap();
    (last as u32, prob(last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn greedy_and_top1() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let l = [0.1, 2.0, 2.0, -1.0, 9.0];
        assert_eq!(pick(&l, 4, Sampling::GREEDY, &mut rng).0, 1);
        let s = Sampling { temperature: 1.0, top_k: 1 };
        for _ in 0..20 {
            assert_eq!(pick(&l, 5, s, &mut rng).0, 4);
        }
    }
}
