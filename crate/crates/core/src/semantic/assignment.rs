//! Rectangular linear assignment by shortest augmenting paths
//! (the Jonker-Volgenant family, in the form popularized by Crouse's
//! rectangular extension).
//!
//! Each row is augmented once along a Dijkstra-style shortest path in the
//! reduced-cost graph, with dual variables kept on both sides so reduced
//! costs stay non-negative. Runs in `O(n^2 m)` for `n <= m`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Returns, for each row, the assigned column (or `None` when there are more
/// rows than columns and the row is left out).
pub fn solve_min_cost(cost: &DMatrix<f64>) -> Result<Vec<Option<usize>>> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("assignment costs must be finite"));
    }
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Ok(vec![None; rows]);
    }
    if rows <= cols {
        Ok(solve_wide(cost).into_iter().map(Some).collect())
    } else {
        let by_col = solve_wide(&cost.transpose());
        let mut by_row = vec![None; rows];
        for (col, row) in by_col.into_iter().enumerate() {
            by_row[row] = Some(col);
        }
        Ok(by_row)
    }
}

/// Maximum-score assignment; see [`solve_min_cost`].
pub fn solve_max_score(scores: &DMatrix<f64>) -> Result<Vec<Option<usize>>> {
    solve_min_cost(&scores.map(|s| -s))
}

/// Requires `rows <= cols`; every row gets a column.
fn solve_wide(cost: &DMatrix<f64>) -> Vec<usize> {
    let (nr, nc) = cost.shape();
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut shortest = vec![f64::INFINITY; nc];
    let mut path = vec![usize::MAX; nc];
    let mut col4row = vec![usize::MAX; nr];
    let mut row4col = vec![usize::MAX; nc];
    let mut seen_row = vec![false; nr];
    let mut seen_col = vec![false; nc];
    let mut remaining = vec![0usize; nc];

    for cur_row in 0..nr {
        // Shortest augmenting path from cur_row to an unassigned column.
        let mut min_val = 0.0f64;
        let mut num_remaining = nc;
        for (it, slot) in remaining.iter_mut().enumerate() {
            *slot = nc - it - 1;
        }
        seen_row.iter_mut().for_each(|s| *s = false);
        seen_col.iter_mut().for_each(|s| *s = false);
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);

        let mut i = cur_row;
        let sink = loop {
            seen_row[i] = true;
            let mut index = usize::MAX;
            let mut lowest = f64::INFINITY;
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let r = min_val + cost[(i, j)] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                // Ties prefer unassigned columns so the path ends early.
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            seen_col[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
            if row4col[j] == usize::MAX {
                break j;
            }
            i = row4col[j];
        };

        // Dual update.
        u[cur_row] += min_val;
        for r in 0..nr {
            if seen_row[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..nc {
            if seen_col[c] {
                v[c] -= min_val - shortest[c];
            }
        }

        // Augment along the path.
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(scores: &DMatrix<f64>, assign: &[Option<usize>]) -> f64 {
        assign
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| scores[(i, j)]))
            .sum()
    }

    #[test]
    fn two_by_two() {
        let s = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let a = solve_max_score(&s).unwrap();
        assert_eq!(a, vec![Some(0), Some(1)]);
        assert!((total(&s, &a) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_not_optimal_here() {
        // Greedy would take 0.9 then 0.1; the optimum pairs the 0.8s.
        let s = DMatrix::from_row_slice(2, 2, &[0.9, 0.8, 0.8, 0.1]);
        let a = solve_max_score(&s).unwrap();
        assert_eq!(a, vec![Some(1), Some(0)]);
    }

    #[test]
    fn tall_and_wide() {
        let wide = DMatrix::from_row_slice(2, 3, &[1.0, 5.0, 3.0, 4.0, 2.0, 6.0]);
        assert_eq!(solve_min_cost(&wide).unwrap(), vec![Some(0), Some(1)]);
        let tall = wide.transpose();
        assert_eq!(solve_min_cost(&tall).unwrap(), vec![Some(0), Some(1), None]);
    }

    #[test]
    fn empty_and_invalid() {
        assert_eq!(solve_min_cost(&DMatrix::zeros(3, 0)).unwrap(), vec![None; 3]);
        assert!(solve_min_cost(&DMatrix::zeros(0, 3)).unwrap().is_empty());
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(solve_min_cost(&m).is_err());
    }

    #[test]
    fn handles_ties() {
        let s = DMatrix::from_element(4, 4, 0.5);
        let a = solve_max_score(&s).unwrap();
        let mut cols: Vec<usize> = a.iter().map(|c| c.unwrap()).collect();
        cols.sort();
        assert_eq!(cols, vec![0, 1, 2, 3]);
    }
}
