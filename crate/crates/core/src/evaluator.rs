//! Unsupervised segmentation scoring: per-image Hungarian matching of predicted
//! segments to ground-truth classes, then pixel accuracy and mean IoU.
//!
//! Predictions that stay unmatched (more segments than classes) contribute no
//! correct pixels, so they count as errors in both metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Pixel co-occurrence counts between predicted labels and ground-truth classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    /// Row labels, sorted.
    pub pred_labels: Vec<u32>,
    /// Column classes, sorted.
    pub gt_classes: Vec<u32>,
    /// `counts[p][g]`, indexed by position in `pred_labels` / `gt_classes`.
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    /// Pixels counted (ignore-labelled ground truth excluded).
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn pred_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    fn gt_totals(&self) -> Vec<u64> {
        (0..self.gt_classes.len())
            .map(|g| self.counts.iter().map(|row| row[g]).sum())
            .collect()
    }
}

/// Tally `(pred, gt)` label pairs, skipping pixels whose ground truth equals `ignore`.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, ignore: Option<u32>) -> Result<Confusion> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut pairs: Vec<(u32, u32)> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(_, &g)| Some(g) != ignore)
        .map(|(&p, &g)| (p, g))
        .collect();
    pairs.sort_unstable();

    let mut pred_labels: Vec<u32> = pairs.iter().map(|p| p.0).collect();
    pred_labels.dedup();
    let mut gt_classes: Vec<u32> = pairs.iter().map(|p| p.1).collect();
    gt_classes.sort_unstable();
    gt_classes.dedup();

    let mut counts = vec![vec![0u64; gt_classes.len()]; pred_labels.len()];
    for (p, g) in pairs {
        // Both lists are sorted, so lookups are binary searches.
        let r = pred_labels.binary_search(&p).unwrap_or_default();
        let c = gt_classes.binary_search(&g).unwrap_or_default();
        counts[r][c] += 1;
    }
    Ok(Confusion {
        pred_labels,
        gt_classes,
        counts,
    })
}

/// Maximum-weight one-to-one matching of rows to columns.
///
/// Returns `(row, col)` pairs sorted by row; `min(rows, cols)` pairs in total.
/// Uses the shortest-augmenting-path Hungarian algorithm with potentials,
/// `O(n³)` on the padded square matrix.
pub fn hungarian_match(counts: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let max = counts.iter().flatten().copied().max().unwrap_or(0) as i128;
    // Minimize (max - count); padded cells cost `max` and never beat a real pairing.
    let cost = |i: usize, j: usize| -> i128 {
        if i < rows && j < cols {
            max - counts[i][j] as i128
        } else {
            max
        }
    };

    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![i128::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = i128::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0 && owner[j] <= rows && j <= cols)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub miou: f64,
}

/// Pixel accuracy and mean IoU over the ground-truth classes present.
///
/// `assignment` holds `(row, col)` positions into `counts`.
pub fn score(counts: &Confusion, assignment: &[(usize, usize)]) -> Scores {
    let total = counts.total();
    if total == 0 {
        return Scores {
            acc: 0.0,
            miou: 0.0,
        };
    }
    let pred_totals = counts.pred_totals();
    let gt_totals = counts.gt_totals();
    let matched: u64 = assignment.iter().map(|&(p, g)| counts.counts[p][g]).sum();

    let mut iou_sum = 0.0;
    for (g, &gt_total) in gt_totals.iter().enumerate() {
        if let Some(&(p, _)) = assignment.iter().find(|&&(_, c)| c == g) {
            let inter = counts.counts[p][g];
            let union = pred_totals[p] + gt_total - inter;
            if union > 0 {
                iou_sum += inter as f64 / union as f64;
            }
        }
    }
    Scores {
        acc: matched as f64 / total as f64,
        miou: iou_sum / gt_totals.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub source_id: String,
    pub acc: f64,
    pub miou: f64,
    pub pixels: u64,
    pub matched_pixels: u64,
    /// Predicted label → ground-truth class.
    pub assignment: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    /// Pixel-weighted accuracy over all images.
    pub acc: f64,
    /// Mean of per-image mIoU.
    pub miou: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageReport>,
    pub aggregate: AggregateScores,
    /// Images with no scorable pixels.
    pub skipped: Vec<String>,
}

/// Score one prediction. Returns `None` when every ground-truth pixel is ignored.
pub fn evaluate_image(
    source_id: &str,
    pred: &LabelMap,
    gt: &LabelMap,
    ignore: Option<u32>,
) -> Result<Option<ImageReport>> {
    let counts = confusion(pred, gt, ignore)?;
    let pixels = counts.total();
    if pixels == 0 {
        return Ok(None);
    }
    let assignment = hungarian_match(&counts.counts);
    let scores = score(&counts, &assignment);
    Ok(Some(ImageReport {
        source_id: source_id.to_string(),
        acc: scores.acc,
        miou: scores.miou,
        pixels,
        matched_pixels: assignment.iter().map(|&(p, g)| counts.counts[p][g]).sum(),
        assignment: assignment
            .iter()
            .map(|&(p, g)| (counts.pred_labels[p], counts.gt_classes[g]))
            .collect(),
    }))
}

/// One `(prediction, ground truth)` pair to evaluate.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub source_id: String,
    pub pred: LabelMap,
    pub gt: LabelMap,
}

/// Per-image matching and scores, aggregated over the dataset.
pub fn evaluate_dataset(pairs: &[EvalPair], ignore: Option<u32>) -> Result<EvalReport> {
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for pair in pairs {
        match evaluate_image(&pair.source_id, &pair.pred, &pair.gt, ignore)? {
            Some(report) => per_image.push(report),
            None => skipped.push(pair.source_id.clone()),
        }
    }
    let pixels: u64 = per_image.iter().map(|r| r.pixels).sum();
    let matched: u64 = per_image.iter().map(|r| r.matched_pixels).sum();
    let aggregate = AggregateScores {
        acc: if pixels > 0 {
            matched as f64 / pixels as f64
        } else {
            0.0
        },
        miou: if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().map(|r| r.miou).sum::<f64>() / per_image.len() as f64
        },
        images: per_image.len(),
    };
    Ok(EvalReport {
        per_image,
        aggregate,
        skipped,
    })
}
