//! Dense integer label grids shared by the segmenter, evaluator and synthetic generator.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Ground-truth pixels carrying this value are excluded from evaluation.
pub const IGNORE_LABEL: u32 = 255;

/// Row-major 2D grid of integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    /// Sorted distinct labels, optionally skipping `ignore`.
    pub fn distinct(&self, ignore: Option<u32>) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .data
            .iter()
            .copied()
            .filter(|&l| Some(l) != ignore)
            .collect();
        set.into_iter().collect()
    }

    /// Relabel to `0..K` in order of first occurrence (row-major).
    ///
    /// Returns the compacted map and, for every new id, the original label.
    pub fn compact(&self) -> (LabelMap, Vec<u32>) {
        let mut originals: Vec<u32> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let data = self
            .data
            .iter()
            .map(|&l| {
                *lookup.entry(l).or_insert_with(|| {
                    originals.push(l);
                    (originals.len() - 1) as u32
                })
            })
            .collect();
        (
            LabelMap {
                height: self.height,
                width: self.width,
                data,
            },
            originals,
        )
    }

    /// Nearest-neighbour resize using pixel centres: `src = floor((dst + 0.5) * in / out)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rows = nearest_table(self.height, height);
        let cols = nearest_table(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for &r in &rows {
            data.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        LabelMap {
            height,
            width,
            data,
        }
    }

    /// Block majority vote down to `side × side`; ties go to the smallest label.
    ///
    /// Requires a square map whose side is a multiple of `side`.
    pub fn majority_downsample(&self, side: usize) -> Result<LabelMap> {
        if self.height != self.width {
            return Err(Error::Shape(format!(
                "majority downsampling needs a square map, got {}x{}",
                self.height, self.width
            )));
        }
        if side == 0 || !self.height.is_multiple_of(side) {
            return Err(Error::Shape(format!(
                "target side {side} does not divide label map side {}",
                self.height
            )));
        }
        let f = self.height / side;
        if f == 1 {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(side * side);
        let mut votes: Vec<(u32, usize)> = Vec::new();
        for bi in 0..side {
            for bj in 0..side {
                votes.clear();
                for r in bi * f..(bi + 1) * f {
                    for c in bj * f..(bj + 1) * f {
                        let l = self.get(r, c);
                        match votes.iter_mut().find(|(v, _)| *v == l) {
                            Some(entry) => entry.1 += 1,
                            None => votes.push((l, 1)),
                        }
                    }
                }
                let winner = votes
                    .iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|v| v.0)
                    .unwrap_or(0);
                data.push(winner);
            }
        }
        Ok(LabelMap {
            height: side,
            width: side,
            data,
        })
    }
}

fn nearest_table(input: usize, output: usize) -> Vec<usize> {
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize;
            s.min(input - 1)
        })
        .collect()
}
