//! Residual token grids and the delayed multi-stream layout.
//!
//! With `L` levels and `N1` timesteps, level `l` (0-based) of the delayed grid is
//!
//! ```text
//! [PAD x l, m_l[0..N1], PAD x (L-1-l)]
//! ```
//!
//! so every delayed row has `N1 + L - 1` cells and, at delayed step `n`, head `l`
//! predicts `m_l[n - l]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary layout on top of a codebook of size `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub codebook_size: usize,
}

impl Vocab {
    pub fn new(codebook_size: usize) -> Self {
        Self { codebook_size }
    }
    pub fn pad(&self) -> u32 {
        self.codebook_size as u32
    }
    pub fn bos(&self) -> u32 {
        self.codebook_size as u32 + 1
    }
    pub fn eos(&self) -> u32 {
        self.codebook_size as u32 + 2
    }
    /// Codebook entries plus PAD, BOS and EOS.
    pub fn size(&self) -> usize {
        self.codebook_size + 3
    }
}

/// `L x N1` codebook indices, row-major by level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub levels: usize,
    pub len: usize,
    pub codebook_size: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(levels: usize, len: usize, codebook_size: usize, tokens: Vec<u32>) -> Result<Self> {
        let g = Self { levels, len, codebook_size, tokens };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.levels * self.len {
            return Err(Error::Shape(format!(
                "{} tokens for a {} x {} grid",
                self.tokens.len(),
                self.levels,
                self.len
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= self.codebook_size) {
            return Err(Error::TokenRange { token: t, size: self.codebook_size });
        }
        Ok(())
    }

    pub fn get(&self, level: usize, n: usize) -> u32 {
        self.tokens[level * self.len + n]
    }

    pub fn row(&self, level: usize) -> &[u32] {
        &self.tokens[level * self.len..(level + 1) * self.len]
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.codebook_size)
    }
}

/// `L x (N1 + L - 1)` delayed layout including PAD cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    pub levels: usize,
    pub len: usize,
    pub codebook_size: usize,
    pub tokens: Vec<u32>,
}

impl DelayedGrid {
    pub fn steps(&self) -> usize {
        delayed_len(self.len, self.levels)
    }

    pub fn get(&self, level: usize, step: usize) -> u32 {
        self.tokens[level * self.steps() + step]
    }

    pub fn row(&self, level: usize) -> &[u32] {
        let s = self.steps();
        &self.tokens[level * s..(level + 1) * s]
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.codebook_size)
    }
}

pub fn delayed_len(len: usize, levels: usize) -> usize {
    len + levels - 1
}

pub fn delay(grid: &TokenGrid) -> DelayedGrid {
    let (l, n1) = (grid.levels, grid.len);
    let steps = delayed_len(n1, l);
    let pad = grid.vocab().pad();
    let mut tokens = vec![pad; l * steps];
    for level in 0..l {
        let start = level * steps + level;
        tokens[start..start + n1].copy_from_slice(grid.row(level));
    }
    DelayedGrid { levels: l, len: n1, codebook_size: grid.codebook_size, tokens }
}

pub fn undelay(d: &DelayedGrid) -> Result<TokenGrid> {
    let (l, n1) = (d.levels, d.len);
    let steps = d.steps();
    if d.tokens.len() != l * steps {
        return Err(Error::Shape(format!("{} cells for {} x {}", d.tokens.len(), l, steps)));
    }
    let pad = d.vocab().pad();
    let mut tokens = Vec::with_capacity(l * n1);
    for level in 0..l {
        for (step, &tok) in d.row(level).iter().enumerate() {
            let inside = is_valid(level, step, n1);
            if inside {
                if tok as usize >= d.codebook_size {
                    return Err(Error::MalformedDelay(format!(
                        "level {level} step {step}: expected a codebook token, found {tok}"
                    )));
                }
                tokens.push(tok);
            } else if tok != pad {
                return Err(Error::MalformedDelay(format!(
                    "level {level} step {step}: expected PAD, found {tok}"
                )));
            }
        }
    }
    TokenGrid::new(l, n1, d.codebook_size, tokens)
}

#[inline]
pub fn is_valid(level: usize, step: usize, len: usize) -> bool {
    step >= level && step < level + len
}

/// Row-major `L x (N1 + L - 1)` mask of supervised cells.
pub fn valid_mask(levels: usize, len: usize) -> Vec<bool> {
    let steps = delayed_len(len, levels);
    (0..levels)
        .flat_map(|l| (0..steps).map(move |s| is_valid(l, s, len)))
        .collect()
}

/// Tokens visible strictly before delayed step `step`, per level, in original indexing.
pub fn visible_before(d: &DelayedGrid, step: usize) -> Vec<Vec<u32>> {
    (0..d.levels)
        .map(|l| {
            d.row(l)[..step.min(d.steps())]
                .iter()
                .enumerate()
                .filter(|(s, _)| is_valid(l, *s, d.len))
                .map(|(_, &t)| t)
                .collect()
        })
        .collect()
}
