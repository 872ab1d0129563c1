//! Discrete code grids.
//!
//! A [`CodeGrid`] is the L×D array of codes produced by the residual
//! quantizer and consumed by the diffusion process: one code per time frame
//! and codebook depth, each in `0..K`, plus the distinguished mask symbol
//! `M = K`. Grids fresh out of the encoder are mask-free; partially absorbed
//! grids during corruption and sampling carry masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("code {code} at (frame {frame}, depth {depth}) outside 0..={max} (mask = {max})")]
    CodeOutOfRange {
        frame: usize,
        depth: usize,
        code: u16,
        max: u16,
    },
    #[error("expected {expected} codes for a {frames}x{depths} grid, got {actual}")]
    ShapeMismatch {
        frames: usize,
        depths: usize,
        expected: usize,
        actual: usize,
    },
}

/// L×D grid of discrete codes in `0..K`, with `K` itself acting as the mask
/// symbol. Stored row-major: frame-by-frame, depths contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    frames: usize,
    depths: usize,
    codebook_size: usize,
    codes: Vec<u16>,
}

impl CodeGrid {
    /// Grid with every position set to `fill`.
    pub fn filled(frames: usize, depths: usize, codebook_size: usize, fill: u16) -> Self {
        assert!(codebook_size >= 1 && codebook_size < u16::MAX as usize);
        assert!(fill as usize <= codebook_size);
        CodeGrid {
            frames,
            depths,
            codebook_size,
            codes: vec![fill; frames * depths],
        }
    }

    /// The fully absorbed grid: every position masked.
    pub fn all_masked(frames: usize, depths: usize, codebook_size: usize) -> Self {
        let mask = codebook_size as u16;
        Self::filled(frames, depths, codebook_size, mask)
    }

    /// Build from raw codes (row-major frame→depth), validating range.
    pub fn from_codes(
        frames: usize,
        depths: usize,
        codebook_size: usize,
        codes: Vec<u16>,
    ) -> Result<Self, GridError> {
        if codes.len() != frames * depths {
            return Err(GridError::ShapeMismatch {
                frames,
                depths,
                expected: frames * depths,
                actual: codes.len(),
            });
        }
        let mask = codebook_size as u16;
        for (pos, &c) in codes.iter().enumerate() {
            if c > mask {
                return Err(GridError::CodeOutOfRange {
                    frame: pos / depths,
                    depth: pos % depths,
                    code: c,
                    max: mask,
                });
            }
        }
        Ok(CodeGrid {
            frames,
            depths,
            codebook_size,
            codes,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn depths(&self) -> usize {
        self.depths
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// The mask symbol for this grid's alphabet (`K` in 0-indexed codes).
    pub fn mask_value(&self) -> u16 {
        self.codebook_size as u16
    }

    pub fn get(&self, frame: usize, depth: usize) -> u16 {
        self.codes[frame * self.depths + depth]
    }

    pub fn set(&mut self, frame: usize, depth: usize, code: u16) {
        debug_assert!(code as usize <= self.codebook_size);
        self.codes[frame * self.depths + depth] = code;
    }

    pub fn is_masked(&self, frame: usize, depth: usize) -> bool {
        self.get(frame, depth) == self.mask_value()
    }

    pub fn mask_count(&self) -> usize {
        let mask = self.mask_value();
        self.codes.iter().filter(|&&c| c == mask).count()
    }

    pub fn contains_mask(&self) -> bool {
        let mask = self.mask_value();
        self.codes.iter().any(|&c| c == mask)
    }

    /// Raw codes, row-major frame→depth.
    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    /// Number of positions (L·D).
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Positions in row-major (frame, depth) order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let depths = self.depths;
        (0..self.frames).flat_map(move |i| (0..depths).map(move |j| (i, j)))
    }

    /// Fraction of positions where both grids hold the same code.
    pub fn agreement(&self, other: &CodeGrid) -> f64 {
        assert_eq!(self.codes.len(), other.codes.len());
        if self.codes.is_empty() {
            return 0.0;
        }
        let hits = self
            .codes
            .iter()
            .zip(&other.codes)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / self.codes.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masking_bookkeeping() {
        let mut g = CodeGrid::filled(2, 3, 4, 0);
        assert_eq!(g.mask_count(), 0);
        assert!(!g.contains_mask());
        g.set(1, 2, g.mask_value());
        assert_eq!(g.mask_count(), 1);
        assert!(g.is_masked(1, 2));
        assert!(!g.is_masked(0, 0));
    }

    #[test]
    fn all_masked_grid() {
        let g = CodeGrid::all_masked(3, 2, 5);
        assert_eq!(g.mask_count(), 6);
        assert_eq!(g.mask_value(), 5);
    }

    #[test]
    fn from_codes_rejects_out_of_range() {
        let err = CodeGrid::from_codes(1, 2, 3, vec![0, 4]).unwrap_err();
        match err {
            GridError::CodeOutOfRange { code, max, .. } => {
                assert_eq!(code, 4);
                assert_eq!(max, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn row_major_layout() {
        let g = CodeGrid::from_codes(2, 2, 9, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(g.get(0, 0), 0);
        assert_eq!(g.get(0, 1), 1);
        assert_eq!(g.get(1, 0), 2);
        assert_eq!(g.get(1, 1), 3);
        let order: Vec<_> = g.positions().collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }
}
