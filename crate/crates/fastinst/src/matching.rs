//! Minimum-cost bipartite assignment (Hungarian algorithm) with a
//! deterministic tie-break: among all optimal assignments, the
//! lexicographically smallest pair list is returned.
//!
//! The solver is the O(n^2 m) shortest-augmenting-path formulation run
//! from the smaller side. Its optimal dual variables certify which edges
//! can appear in some optimal assignment (zero reduced cost); a greedy
//! pass over those tight edges then picks the lexicographically smallest
//! pair list among the optima.

use crate::error::{Error, Result};

/// Injective query-to-target pairing with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingAssignment {
    /// `(row, column)` pairs sorted by row index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchingAssignment {
    pub fn empty() -> Self {
        MatchingAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// Column matched to `row`, if any.
    pub fn column_for(&self, row: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(r, _)| *r == row)
            .map(|(_, c)| *c)
    }
}

/// Solve the rectangular assignment problem on an `rows x cols` cost
/// matrix (row-major). Matches `min(rows, cols)` pairs, minimizing the
/// total cost; ties resolve to the lexicographically smallest pair list.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<MatchingAssignment> {
    if cost.len() != rows * cols {
        return Err(Error::shape(format!(
            "hungarian: {} entries for {rows}x{cols}",
            cost.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchingAssignment::empty());
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hungarian: non-finite cost entry".into()));
    }

    // run from the smaller side
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j * cols + i]
        } else {
            cost[i * cols + j]
        }
    };

    // shortest augmenting path with duals u (rows) / v (columns)
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut match_col = vec![usize::MAX; m + 1]; // row matched to column, m = virtual start
    for i in 0..n {
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut prev = vec![usize::MAX; m + 1];
        let mut in_tree = vec![false; m + 1];
        let mut j_cur = m; // virtual column holding row i
        match_col[m] = i;
        loop {
            in_tree[j_cur] = true;
            let i_cur = match_col[j_cur];
            let mut delta = f64::INFINITY;
            let mut j_next = m;
            for j in 0..m {
                if in_tree[j] {
                    continue;
                }
                let reduced = at(i_cur, j) - u[i_cur] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    prev[j] = j_cur;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j_next = j;
                }
            }
            debug_assert!(delta.is_finite());
            for j in 0..=m {
                if in_tree[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j_cur = j_next;
            if match_col[j_cur] == usize::MAX {
                break;
            }
        }
        // augment along the path
        while j_cur != m {
            let j_prev = prev[j_cur];
            match_col[j_cur] = match_col[j_prev];
            j_cur = j_prev;
        }
    }

    // Canonicalize. Under optimal duals (v <= 0, v = 0 on unmatched
    // columns), a row-covering matching is optimal iff it uses only tight
    // edges AND covers every column with v < 0. Greedily build the
    // lexicographically smallest such matching in original row order;
    // feasibility of a partial fix is checked by saturating the remaining
    // rows and the remaining required columns separately (Mendelsohn-
    // Dulmage: both saturable implies jointly saturable).
    let tol = tight_tolerance(cost);
    let tight = |i: usize, j: usize| -> bool { at(i, j) - u[i] - v[j] <= tol };
    let required_cols: Vec<bool> = (0..m).map(|j| v[j] < -tol).collect();

    let pairs = if transposed {
        lexicographic_pairs_large_side(n, m, &tight, &required_cols)
    } else {
        lexicographic_pairs_small_side(n, m, &tight, &required_cols)
    };

    let total_cost = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    Ok(MatchingAssignment { pairs, total_cost })
}

fn tight_tolerance(cost: &[f64]) -> f64 {
    let max_abs = cost.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    1e-9 * (1.0 + max_abs)
}

/// Partial assignment state during canonicalization (in the solved
/// orientation: `n` rows all matched, `m` columns).
struct Partial<'a> {
    n: usize,
    m: usize,
    tight: &'a dyn Fn(usize, usize) -> bool,
    required_cols: &'a [bool],
    fixed_col: Vec<Option<usize>>, // row -> column
    col_fixed: Vec<bool>,
}

impl<'a> Partial<'a> {
    fn new(
        n: usize,
        m: usize,
        tight: &'a dyn Fn(usize, usize) -> bool,
        required_cols: &'a [bool],
    ) -> Self {
        Partial {
            n,
            m,
            tight,
            required_cols,
            fixed_col: vec![None; n],
            col_fixed: vec![false; m],
        }
    }

    fn fix(&mut self, r: usize, c: usize) {
        self.fixed_col[r] = Some(c);
        self.col_fixed[c] = true;
    }

    fn unfix(&mut self, r: usize, c: usize) {
        self.fixed_col[r] = None;
        self.col_fixed[c] = false;
    }

    /// Kuhn augmenting search from the row side.
    fn try_row(&self, r: usize, owner: &mut [Option<usize>], visited: &mut [bool]) -> bool {
        for c in 0..self.m {
            if self.col_fixed[c] || visited[c] || !(self.tight)(r, c) {
                continue;
            }
            visited[c] = true;
            let free = match owner[c] {
                None => true,
                Some(prev) => self.try_row(prev, owner, visited),
            };
            if free {
                owner[c] = Some(r);
                return true;
            }
        }
        false
    }

    /// Every non-fixed row can still be matched on tight edges.
    fn rows_saturable(&self) -> bool {
        let mut owner: Vec<Option<usize>> = vec![None; self.m];
        for r in 0..self.n {
            if self.fixed_col[r].is_some() {
                continue;
            }
            let mut visited = vec![false; self.m];
            if !self.try_row(r, &mut owner, &mut visited) {
                return false;
            }
        }
        true
    }

    /// Kuhn from the column side over non-fixed rows.
    fn try_col(&self, c: usize, owner: &mut [Option<usize>], visited: &mut [bool]) -> bool {
        for r in 0..self.n {
            if self.fixed_col[r].is_some() || visited[r] || !(self.tight)(r, c) {
                continue;
            }
            visited[r] = true;
            let free = match owner[r] {
                None => true,
                Some(prev) => self.try_col(prev, owner, visited),
            };
            if free {
                owner[r] = Some(c);
                return true;
            }
        }
        false
    }

    /// Every required column not already fixed can still be covered.
    fn required_cols_saturable(&self) -> bool {
        let mut owner: Vec<Option<usize>> = vec![None; self.n];
        for c in 0..self.m {
            if !self.required_cols[c] || self.col_fixed[c] {
                continue;
            }
            let mut visited = vec![false; self.n];
            if !self.try_col(c, &mut owner, &mut visited) {
                return false;
            }
        }
        true
    }

    fn feasible(&self) -> bool {
        self.rows_saturable() && self.required_cols_saturable()
    }
}

/// Original rows are the solved rows (rows <= cols): every row is matched
/// in every optimum. Per row ascending, pick the smallest tight column
/// that keeps a full optimal completion feasible.
fn lexicographic_pairs_small_side(
    n: usize,
    m: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    required_cols: &[bool],
) -> Vec<(usize, usize)> {
    let mut part = Partial::new(n, m, tight, required_cols);
    for r in 0..n {
        let mut chosen = None;
        for c in 0..m {
            if part.col_fixed[c] || !tight(r, c) {
                continue;
            }
            part.fix(r, c);
            if part.feasible() {
                chosen = Some(c);
                break;
            }
            part.unfix(r, c);
        }
        debug_assert!(chosen.is_some(), "optimal matching must cover row {r}");
    }
    (0..n)
        .filter_map(|r| part.fixed_col[r].map(|c| (r, c)))
        .collect()
}

/// Original rows are the solved COLUMNS (rows > cols solved transposed):
/// all targets (solved rows) are matched, original rows may stay
/// unmatched. Walk original rows ascending; matching earlier rows gives a
/// lexicographically smaller pair list, so prefer the smallest feasible
/// target, falling back to unmatched.
fn lexicographic_pairs_large_side(
    n: usize, // solved rows = original columns (targets)
    m: usize, // solved cols = original rows (queries)
    tight: &dyn Fn(usize, usize) -> bool,
    required_cols: &[bool],
) -> Vec<(usize, usize)> {
    let mut part = Partial::new(n, m, tight, required_cols);
    let mut pairs = Vec::with_capacity(n);
    let mut remaining = n;
    for orig_row in 0..m {
        if remaining == 0 {
            break;
        }
        for t in 0..n {
            if part.fixed_col[t].is_some() || !tight(t, orig_row) {
                continue;
            }
            part.fix(t, orig_row);
            if part.feasible() {
                pairs.push((orig_row, t));
                remaining -= 1;
                break;
            }
            part.unfix(t, orig_row);
        }
        // if orig_row stays unmatched the current partial is unchanged and
        // therefore still feasible
    }
    pairs
}

/// Exhaustive oracle used by tests and the self-test suite: enumerate
/// every injective assignment of the smaller side, return the minimum
/// cost and the lexicographically smallest optimal pair list.
pub fn brute_force_match(cost: &[f64], rows: usize, cols: usize) -> MatchingAssignment {
    let k = rows.min(cols);
    let mut best_cost = f64::INFINITY;
    let mut best_pairs: Option<Vec<(usize, usize)>> = None;

    // enumerate ordered k-subsets: rows side if rows<=cols else cols side
    let (small, large, row_side) = if rows <= cols {
        (rows, cols, true)
    } else {
        (cols, rows, false)
    };
    let mut selection = vec![usize::MAX; small];
    let mut used = vec![false; large];
    fn recurse(
        idx: usize,
        small: usize,
        large: usize,
        selection: &mut Vec<usize>,
        used: &mut Vec<bool>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if idx == small {
            visit(selection);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                selection[idx] = j;
                recurse(idx + 1, small, large, selection, used, visit);
                used[j] = false;
            }
        }
    }
    let mut visit = |sel: &[usize]| {
        let mut pairs: Vec<(usize, usize)> = sel
            .iter()
            .enumerate()
            .map(|(i, &j)| if row_side { (i, j) } else { (j, i) })
            .collect();
        pairs.sort_unstable();
        let total: f64 = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
        let better = total < best_cost - 1e-12
            || ((total - best_cost).abs() <= 1e-12
                && best_pairs.as_ref().is_some_and(|bp| pairs < *bp));
        if best_pairs.is_none() || better {
            best_cost = total;
            best_pairs = Some(pairs);
        }
    };
    recurse(0, small, large, &mut selection, &mut used, &mut visit);
    let _ = k;
    MatchingAssignment {
        pairs: best_pairs.unwrap_or_default(),
        total_cost: if best_cost.is_finite() { best_cost } else { 0.0 },
    }
}
