//! Rectangular linear assignment (Hungarian algorithm).
//!
//! [`solve_max`] maximizes the total score over injective row→column
//! mappings of size `min(rows, cols)`. Among optimal assignments it returns
//! the lexicographically smallest `(row, col)` sequence, so masks and metrics
//! do not depend on solver iteration order.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Selected `(row, col)` pairs in increasing row order.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Minimum-cost assignment of every row for `rows <= cols`, via shortest
/// augmenting paths with potentials. Returns `col_of_row`.
fn min_cost_rows(cost: ArrayView2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut min_v = vec![inf; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        min_v.iter_mut().for_each(|x| *x = inf);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            col_of_row[row_of[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Best total over the sub-matrix `rows × cols` (any orientation).
fn best_total(scores: ArrayView2<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let sub = scores.select(Axis(0), rows).select(Axis(1), cols);
    let neg = if rows.len() <= cols.len() { sub.mapv(|x| -x) } else { sub.t().mapv(|x| -x) };
    min_cost_rows(neg.view())
        .iter()
        .enumerate()
        .map(|(r, &c)| -neg[[r, c]])
        .sum()
}

fn validate(scores: ArrayView2<f64>) -> Result<()> {
    let (n, m) = scores.dim();
    if n == 0 || m == 0 {
        return Err(Error::Dimension(format!("assignment needs a non-empty matrix, got {n}x{m}")));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("assignment matrix has a non-finite entry".into()));
    }
    Ok(())
}

pub fn solve_max(scores: ArrayView2<f64>) -> Result<Assignment> {
    validate(scores)?;
    let (n_rows, n_cols) = scores.dim();
    let all_rows: Vec<usize> = (0..n_rows).collect();
    let all_cols: Vec<usize> = (0..n_cols).collect();
    let optimum = best_total(scores, &all_rows, &all_cols);
    let scale = scores.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-10 * scale * n_rows.min(n_cols) as f64;

    // Walk rows in order, fixing the smallest column that keeps the optimum
    // reachable; rows may stay unmatched only when rows outnumber columns.
    let mut need = n_rows.min(n_cols);
    let mut free_cols = all_cols;
    let mut pairs = Vec::with_capacity(need);
    let mut acc = 0.0;
    for r in 0..n_rows {
        if need == 0 {
            break;
        }
        let rest_rows: Vec<usize> = (r + 1..n_rows).collect();
        let mut chosen = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let candidate = acc + scores[[r, c]] + best_total(scores, &rest_rows, &rest_cols);
            if candidate >= optimum - tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let c = free_cols.remove(pos);
                acc += scores[[r, c]];
                pairs.push((r, c));
                need -= 1;
            }
            None => debug_assert!(rest_rows.len() >= need, "row {r} must be matched"),
        }
    }
    let total = pairs.iter().map(|&(r, c)| scores[[r, c]]).sum();
    Ok(Assignment { pairs, total })
}

/// [`solve_max`] on a row-major nested vector.
pub fn solve_max_rows(rows: &[Vec<f64>]) -> Result<Assignment> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged assignment matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let arr = Array2::from_shape_vec((n, m), flat).map_err(|e| Error::Dimension(e.to_string()))?;
    solve_max(arr.view())
}
