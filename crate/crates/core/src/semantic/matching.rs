use nalgebra::DMatrix;

use super::assignment::solve_max_score;
use super::features::RegionFeatureSet;
use super::render::RenderedRegions;
use super::RegionKey;
use crate::error::{Error, Result};

/// Soft intersection-over-union of two confidence maps:
/// `sum(a*b) / sum(a + b - a*b)`, or 0 when both maps are empty.
pub fn soft_iou(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "confidence maps differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(soft_iou_unchecked(a, b))
}

#[inline]
pub(crate) fn soft_iou_unchecked(a: &[f32], b: &[f32]) -> f64 {
    let mut inter = 0.0f64;
    let mut union = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        let xy = x * y;
        inter += xy;
        union += x + y - xy;
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub frame_region: usize,
    pub rendered_region: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// Sorted by `frame_region`.
    pub assignments: Vec<Assignment>,
    /// Current-frame regions with no accepted partner, ascending.
    pub unmatched_frame_regions: Vec<usize>,
    /// Key of each rendered region, indexed by `rendered_region`.
    pub rendered_keys: Vec<RegionKey>,
}

impl MatchResult {
    pub fn total_score(&self) -> f64 {
        self.assignments.iter().map(|a| a.score).sum()
    }

    pub fn key_of(&self, assignment: &Assignment) -> RegionKey {
        self.rendered_keys[assignment.rendered_region]
    }
}

/// Optimal one-to-one matching on a score matrix (rows = frame regions,
/// columns = rendered regions). Scores below `threshold` are masked to zero
/// before solving and any pair below `threshold` is discarded afterwards, so
/// the kept pairs maximize the total over pairs that clear the threshold.
pub fn assign_scores(scores: &DMatrix<f64>, threshold: f64) -> Result<(Vec<Assignment>, Vec<usize>)> {
    let masked = scores.map(|s| if s >= threshold { s } else { 0.0 });
    let by_row = solve_max_score(&masked)?;
    let mut assignments = Vec::new();
    let mut unmatched = Vec::new();
    for (i, col) in by_row.into_iter().enumerate() {
        match col {
            Some(j) if scores[(i, j)] >= threshold => assignments.push(Assignment {
                frame_region: i,
                rendered_region: j,
                score: scores[(i, j)],
            }),
            _ => unmatched.push(i),
        }
    }
    Ok((assignments, unmatched))
}

/// Pairwise soft-IoU between every current region and every rendered one.
pub fn score_matrix(current: &RegionFeatureSet, rendered: &RenderedRegions) -> Result<DMatrix<f64>> {
    if current.width() != rendered.width() || current.height() != rendered.height() {
        return Err(Error::invalid(format!(
            "frame maps are {}x{} but rendered maps are {}x{}",
            current.width(),
            current.height(),
            rendered.width(),
            rendered.height()
        )));
    }
    let (n, m) = (current.len(), rendered.len());
    Ok(DMatrix::from_fn(n, m, |i, j| soft_iou_unchecked(current.map(i), rendered.map(j))))
}

/// Matches the current frame's regions against regions rendered from the
/// volume.
pub fn match_regions(current: &RegionFeatureSet, rendered: &RenderedRegions, threshold: f64) -> Result<MatchResult> {
    let rendered_keys = rendered.keys().to_vec();
    if current.is_empty() || rendered.is_empty() {
        return Ok(MatchResult {
            assignments: Vec::new(),
            unmatched_frame_regions: (0..current.len()).collect(),
            rendered_keys,
        });
    }
    let scores = score_matrix(current, rendered)?;
    let (assignments, unmatched_frame_regions) = assign_scores(&scores, threshold)?;
    Ok(MatchResult {
        assignments,
        unmatched_frame_regions,
        rendered_keys,
    })
}
