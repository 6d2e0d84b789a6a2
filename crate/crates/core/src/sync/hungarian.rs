//! Minimum-cost bipartite assignment (Jonker-Volgenant style shortest
//! augmenting paths with potentials, O(n^2 m)).

/// Solve the rectangular assignment problem for a row-major `n x m` cost
/// matrix. Returns the matched `(row, col)` pairs, `min(n, m)` of them,
/// sorted by row.
///
/// Costs must be finite. Exact for f64 inputs: no scaling or rounding.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|row| row.len() == m), "ragged cost matrix");
    debug_assert!(
        cost.iter().flatten().all(|c| c.is_finite()),
        "costs must be finite"
    );

    if n <= m {
        solve(cost, n, m, |r, c| cost[r][c])
    } else {
        // Transpose: solve columns-as-rows, then swap back.
        let mut pairs = solve(cost, m, n, |r, c| cost[c][r]);
        for p in &mut pairs {
            *p = (p.1, p.0);
        }
        pairs.sort_unstable();
        pairs
    }
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}

fn solve<F: Fn(usize, usize) -> f64>(
    _cost: &[Vec<f64>],
    n: usize,
    m: usize,
    at: F,
) -> Vec<(usize, usize)> {
    // 1-indexed potentials; column 0 is the virtual start of augmenting paths.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}
