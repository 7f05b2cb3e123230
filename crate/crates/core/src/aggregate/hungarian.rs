//! Hungarian (Kuhn-Munkres) assignment via shortest augmenting paths,
//! O(rows^2 * cols). Rows must not outnumber columns; every row receives a
//! distinct column minimizing total cost.

use crate::{Error, Result};

/// Solves the rectangular assignment problem for a row-major
/// `rows x cols` cost matrix with `rows <= cols`. Returns the assigned
/// column per row and the total cost.
pub fn solve_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<(Vec<usize>, f64)> {
    if rows == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if rows > cols {
        return Err(Error::Aggregation(format!(
            "assignment needs rows <= cols, got {rows} x {cols}"
        )));
    }
    if cost.len() != rows * cols {
        return Err(Error::Aggregation("cost matrix size mismatch".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Aggregation(
            "degenerate cost matrix: non-finite entries".into(),
        ));
    }

    // Dual potentials and the column -> row matching, with a virtual
    // column at index `cols` used as the augmentation root.
    let mut row_of: Vec<Option<usize>> = vec![None; cols + 1];
    let mut ys = vec![0.0; rows];
    let mut yt = vec![0.0; cols + 1];

    for row in 0..rows {
        let mut cur_col = cols;
        row_of[cur_col] = Some(row);
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut prev = vec![usize::MAX; cols + 1];
        let mut in_tree = vec![false; cols + 1];

        while let Some(r) = row_of[cur_col] {
            in_tree[cur_col] = true;
            let mut delta = f64::INFINITY;
            let mut next_col = cols;
            for c in 0..cols {
                if in_tree[c] {
                    continue;
                }
                let reduced = cost[r * cols + c] - ys[r] - yt[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    prev[c] = cur_col;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next_col = c;
                }
            }
            for c in 0..=cols {
                if in_tree[c] {
                    if let Some(rc) = row_of[c] {
                        ys[rc] += delta;
                    }
                    yt[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            cur_col = next_col;
        }

        // Walk the augmenting path back to the root.
        while cur_col != cols {
            let p = prev[cur_col];
            row_of[cur_col] = row_of[p];
            cur_col = p;
        }
    }

    let mut assignment = vec![usize::MAX; rows];
    for c in 0..cols {
        if let Some(r) = row_of[c] {
            assignment[r] = c;
        }
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r * cols + c])
        .sum();
    Ok((assignment, total))
}
