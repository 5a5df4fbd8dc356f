//! Minimum-cost bipartite assignment with deterministic tie-breaking.

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs in increasing row order.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Column assigned to each row, `None` when unmatched.
    pub fn row_to_col(&self, n_rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }

    pub fn col_to_row(&self, n_cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_cols];
        for &(r, c) in &self.pairs {
            out[c] = Some(r);
        }
        out
    }
}

struct Solution {
    /// `col_of[i]` for every row of the square problem.
    col_of: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest-augmenting-path method with potentials on a square matrix.
fn solve_square(a: &[Vec<f64>]) -> Solution {
    let n = a.len();
    let inf = f64::INFINITY;
    // 1-based internally; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    Solution {
        col_of,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

fn value_of(a: &[Vec<f64>], col_of: &[usize]) -> f64 {
    col_of.iter().enumerate().map(|(i, &j)| a[i][j]).sum()
}

/// Optimal value of `a` restricted to rows from `first_free_row` on, with the
/// listed columns removed.
fn restricted_value(a: &[Vec<f64>], first_free_row: usize, used_cols: &[bool]) -> f64 {
    let cols: Vec<usize> = (0..a.len()).filter(|&j| !used_cols[j]).collect();
    let sub: Vec<Vec<f64>> = a[first_free_row..]
        .iter()
        .map(|row| cols.iter().map(|&j| row[j]).collect())
        .collect();
    if sub.is_empty() {
        return 0.0;
    }
    let s = solve_square(&sub);
    value_of(&sub, &s.col_of)
}

/// Minimum-cost assignment of `min(n, m)` pairs for an `n × m` cost matrix.
///
/// Among optimal assignments the one chosen gives row 0 the smallest column,
/// then row 1, and so on; an unmatched row ranks after every column.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    assert!(cost.iter().flatten().all(|c| c.is_finite()), "non-finite cost");
    let size = n.max(m);
    // dummy rows and columns cost 0 and sit after the real ones
    let a: Vec<Vec<f64>> = (0..size)
        .map(|i| (0..size).map(|j| if i < n && j < m { cost[i][j] } else { 0.0 }).collect())
        .collect();
    let scale = cost.iter().flatten().fold(1.0_f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-9 * scale * size as f64;

    let sol = solve_square(&a);
    let best = value_of(&a, &sol.col_of);
    let mut col_of = sol.col_of.clone();

    let mut used = vec![false; size];
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let current = col_of[i];
        // all dummy columns mean "unmatched", so only real columns can improve
        for j in 0..current.min(m) {
            if used[j] || a[i][j] - sol.u[i] - sol.v[j] > tol {
                continue;
            }
            used[j] = true;
            let total = fixed_cost + a[i][j] + restricted_value(&a, i + 1, &used);
            used[j] = false;
            if total <= best + tol {
                col_of[i] = j;
                break;
            }
        }
        let chosen = col_of[i];
        used[chosen] = true;
        fixed_cost += a[i][chosen];
        if chosen != current {
            // re-solve the remaining rows consistently with the fixed prefix
            let cols: Vec<usize> = (0..size).filter(|&j| !used[j]).collect();
            let sub: Vec<Vec<f64>> = a[i + 1..]
                .iter()
                .map(|row| cols.iter().map(|&j| row[j]).collect())
                .collect();
            if !sub.is_empty() {
                let s = solve_square(&sub);
                for (k, &cj) in s.col_of.iter().enumerate() {
                    col_of[i + 1 + k] = cols[cj];
                }
            }
        }
    }

    let pairs: Vec<(usize, usize)> = (0..n).filter(|&i| col_of[i] < m).map(|i| (i, col_of[i])).collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Assignment { pairs, total_cost }
}
