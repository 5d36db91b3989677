//! Exact discrete optimal transport and multi-marginal alignment.
//!
//! Plans are solved exactly: a shortest-augmenting-path assignment solver
//! handles the uniform square case (the optimum is a scaled permutation)
//! and a transportation simplex handles general weights. Multi-marginal
//! tuples are built with the first-order Markov chain of pairwise plans:
//! the first pair is drawn from the joint plan, every later marginal is
//! drawn row-conditionally on the previous aligned batch.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::points::{sq_dist, Points};

/// Largest coordinate magnitude accepted by [`cost_matrix`].
pub const MAX_COORD: f64 = 1e6;

const MARGINAL_TOL: f64 = 1e-9;

/// Samples observed at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Points,
    pub source_time: f64,
}

impl SampleBatch {
    pub fn new(points: Points, source_time: f64) -> Result<Self> {
        if !points.all_finite() {
            return Err(invalid("sample batch contains non-finite values"));
        }
        Ok(Self {
            points,
            source_time,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }
}

/// Dense row-major real matrix used for costs and plans.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "buffer of length {} is not {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        s
    }
}

/// A transport plan together with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub matrix: Matrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl CouplingPlan {
    /// `Σ π_ij C_ij`.
    pub fn cost(&self, cost: &Matrix) -> f64 {
        self.matrix
            .as_slice()
            .iter()
            .zip(cost.as_slice())
            .map(|(p, c)| p * c)
            .sum()
    }
}

/// Index-aligned tuples across `k + 1` consecutive marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedWindow {
    pub batches: Vec<Points>,
    pub times: Vec<f64>,
    /// Row of the corresponding input batch that each aligned row came from.
    pub source_rows: Vec<Vec<usize>>,
}

impl AlignedWindow {
    pub fn len(&self) -> usize {
        self.batches.first().map_or(0, Points::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.batches.first().map_or(0, Points::dim)
    }

    /// Writes tuple `j` (one row per knot) into `out` as `(k+1) × d` values.
    pub fn tuple_into(&self, j: usize, out: &mut Vec<f64>) {
        out.clear();
        for b in &self.batches {
            out.extend_from_slice(b.row(j));
        }
    }
}

fn check_coords(p: &Points) -> Result<()> {
    if p.as_slice()
        .iter()
        .any(|v| !v.is_finite() || v.abs() > MAX_COORD)
    {
        return Err(invalid(format!(
            "coordinates must be finite with magnitude <= {MAX_COORD:e}"
        )));
    }
    Ok(())
}

/// Pairwise squared Euclidean costs `C[i][j] = ‖a_i − b_j‖²`.
pub fn cost_matrix(a: &Points, b: &Points) -> Result<Matrix> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    check_coords(a)?;
    check_coords(b)?;
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        sq_dist(a.row(i), b.row(j))
    }))
}

/// Pairwise Euclidean distances `‖a_i − b_j‖`.
pub fn distance_matrix(a: &Points, b: &Points) -> Result<Matrix> {
    let mut c = cost_matrix(a, b)?;
    for v in &mut c.data {
        *v = v.sqrt();
    }
    Ok(c)
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(invalid(format!("{what} weights are empty")));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(format!(
            "{what} weights must be finite and nonnegative"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > MARGINAL_TOL {
        return Err(invalid(format!("{what} weights sum to {s}, expected 1")));
    }
    Ok(())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Exact minimum-cost plan with the given marginals.
pub fn exact_plan(cost: &Matrix, row_w: &[f64], col_w: &[f64]) -> Result<CouplingPlan> {
    check_weights(row_w, "row")?;
    check_weights(col_w, "column")?;
    if row_w.len() != cost.rows() || col_w.len() != cost.cols() {
        return Err(invalid(format!(
            "cost matrix is {} x {} but weights have lengths {} and {}",
            cost.rows(),
            cost.cols(),
            row_w.len(),
            col_w.len()
        )));
    }
    if cost.as_slice().iter().any(|c| !c.is_finite()) {
        return Err(invalid("cost matrix contains non-finite entries"));
    }
    let n = cost.rows();
    let uniform_square = n == cost.cols()
        && row_w
            .iter()
            .chain(col_w)
            .all(|&w| (w - 1.0 / n as f64).abs() <= 1e-15);
    let matrix = if uniform_square {
        let assign = min_cost_assignment(cost);
        let mut data = vec![0.0; n * n];
        for (i, &j) in assign.iter().enumerate() {
            data[i * n + j] = 1.0 / n as f64;
        }
        Matrix::new(n, n, data)?
    } else {
        transportation_simplex(cost, row_w, col_w)?
    };
    Ok(CouplingPlan {
        matrix,
        row_marginal: row_w.to_vec(),
        col_marginal: col_w.to_vec(),
    })
}

/// Exact plan between two empirical batches with uniform weights.
pub fn batch_plan(a: &Points, b: &Points) -> Result<CouplingPlan> {
    let c = cost_matrix(a, b)?;
    exact_plan(&c, &uniform_weights(a.rows()), &uniform_weights(b.rows()))
}

/// Minimum-cost perfect matching on a square cost matrix. Returns the column
/// assigned to each row.
pub fn min_cost_assignment(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // Column minima keep every reduced cost nonnegative.
    for j in 1..=n {
        v[j] = (0..n)
            .map(|i| cost.get(i, j - 1))
            .fold(f64::INFINITY, f64::min);
    }
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let crow = cost.row(i0 - 1);
            for j in 1..=n {
                if !used[j] {
                    let cur = crow[j - 1] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

/// Transportation simplex on the spanning-tree basis of the bipartite
/// supply/demand graph. Starts from the north-west corner solution and
/// switches from Dantzig pricing to Bland's rule after a run of degenerate
/// pivots.
fn transportation_simplex(cost: &Matrix, supply: &[f64], demand: &[f64]) -> Result<Matrix> {
    let m = supply.len();
    let n = demand.len();
    let nodes = m + n;
    let scale = cost
        .as_slice()
        .iter()
        .fold(0.0f64, |a, c| a.max(c.abs()))
        .max(1.0);
    let rc_tol = 1e-12 * scale;

    // basis edges (row, col) with their flow
    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    {
        let mut a = supply.to_vec();
        let mut b = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]);
            flow[i * n + j] = x;
            basic[i * n + j] = true;
            a[i] -= x;
            b[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (a[i] <= b[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut pot = vec![0.0; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut queue = Vec::with_capacity(nodes);
    let mut degenerate_run = 0usize;
    let max_iter = 50 * (m + n) * (m + n) + 1000;

    for _ in 0..max_iter {
        for a in &mut adj {
            a.clear();
        }
        for i in 0..m {
            for j in 0..n {
                if basic[i * n + j] {
                    adj[i].push(m + j);
                    adj[m + j].push(i);
                }
            }
        }
        // potentials: u_i + v_j = c_ij on basic cells, u_0 = 0
        parent.fill(usize::MAX);
        parent[0] = 0;
        pot[0] = 0.0;
        queue.clear();
        queue.push(0);
        let mut head = 0;
        while head < queue.len() {
            let x = queue[head];
            head += 1;
            for &y in &adj[x] {
                if parent[y] == usize::MAX {
                    parent[y] = x;
                    let (r, c) = if x < m { (x, y - m) } else { (y, x - m) };
                    pot[y] = cost.get(r, c) - pot[x];
                    queue.push(y);
                }
            }
        }
        if queue.len() != nodes {
            return Err(Error::Solver("basis is not a spanning tree".into()));
        }

        let bland = degenerate_run > m + n;
        let mut entering = None;
        let mut best = -rc_tol;
        'scan: for i in 0..m {
            for j in 0..n {
                if basic[i * n + j] {
                    continue;
                }
                let rc = cost.get(i, j) - pot[i] - pot[m + j];
                if rc < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = rc;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Matrix::new(m, n, flow);
        };

        // tree path from column node ej to row node ei (BFS tree rooted at 0)
        let path = tree_path(&parent, m + ej, ei);
        // path edges alternate -, +, -, ... starting at ej
        let mut theta = f64::INFINITY;
        let mut leave = None;
        for (k, w) in path.windows(2).enumerate() {
            if k % 2 == 0 {
                let cell = cell_index(w[0], w[1], m, n);
                let f = flow[cell];
                if f < theta || (bland && f == theta && leave.is_some_and(|l| cell < l)) {
                    theta = f;
                    leave = Some(cell);
                }
            }
        }
        let leave = leave.ok_or_else(|| Error::Solver("empty pivot cycle".into()))?;
        for (k, w) in path.windows(2).enumerate() {
            let cell = cell_index(w[0], w[1], m, n);
            if k % 2 == 0 {
                flow[cell] -= theta;
            } else {
                flow[cell] += theta;
            }
        }
        flow[ei * n + ej] += theta;
        flow[leave] = 0.0;
        basic[leave] = false;
        basic[ei * n + ej] = true;
        if theta <= 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        for f in &mut flow {
            if *f < 0.0 {
                *f = 0.0;
            }
        }
    }
    Err(Error::Solver(
        "transportation simplex did not converge".into(),
    ))
}

fn cell_index(a: usize, b: usize, m: usize, n: usize) -> usize {
    let (r, c) = if a < m { (a, b - m) } else { (b, a - m) };
    r * n + c
}

/// Node sequence from `from` to `to` through the rooted tree.
fn tree_path(parent: &[usize], from: usize, to: usize) -> Vec<usize> {
    let ancestors = |mut x: usize| {
        let mut v = vec![x];
        while parent[x] != x {
            x = parent[x];
            v.push(x);
        }
        v
    };
    let a = ancestors(from);
    let b = ancestors(to);
    // strip the common suffix, keeping the lowest common ancestor once
    let mut ia = a.len();
    let mut ib = b.len();
    while ia > 1 && ib > 1 && a[ia - 2] == b[ib - 2] {
        ia -= 1;
        ib -= 1;
    }
    let mut path: Vec<usize> = a[..ia].to_vec();
    path.extend(b[..ib - 1].iter().rev());
    path
}

/// Row-stochastic conditional plan `π(j | i) = π_ij / Σ_j π_ij`.
pub fn conditional_plan(plan: &CouplingPlan) -> Result<Matrix> {
    let m = &plan.matrix;
    let mut data = Vec::with_capacity(m.rows() * m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mass: f64 = row.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::DegeneratePlan { row: i });
        }
        data.extend(row.iter().map(|p| p / mass));
    }
    Matrix::new(m.rows(), m.cols(), data)
}

/// Draws `count` index pairs `(i, j)` with probability `π_ij`, with
/// replacement.
pub fn sample_pairs<R: Rng + ?Sized>(
    plan: &Matrix,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let dist = WeightedIndex::new(plan.as_slice())
        .map_err(|e| invalid(format!("cannot sample from plan: {e}")))?;
    Ok((0..count)
        .map(|_| {
            let k = dist.sample(rng);
            (k / plan.cols(), k % plan.cols())
        })
        .collect())
}

/// Aligns `k + 1` batches into `b` index-aligned tuples using the Markov
/// chain of exact pairwise plans. All draws are with replacement.
pub fn sample_aligned_window<R: Rng + ?Sized>(
    batches: &[SampleBatch],
    b: usize,
    rng: &mut R,
) -> Result<AlignedWindow> {
    if batches.len() < 2 {
        return Err(invalid("alignment needs at least two batches"));
    }
    let dim = batches[0].dim();
    for (l, w) in batches.windows(2).enumerate() {
        if w[1].dim() != dim {
            return Err(invalid(format!(
                "batch {} has a different dimension",
                l + 1
            )));
        }
        if w[1].source_time <= w[0].source_time {
            return Err(invalid("batch times must be strictly increasing"));
        }
    }
    if let Some(small) = batches.iter().position(|x| x.len() < b.max(1)) {
        return Err(invalid(format!(
            "batch {small} has {} samples, fewer than the {b} requested",
            batches[small].len()
        )));
    }

    let first = batch_plan(&batches[0].points, &batches[1].points)?;
    let pairs = sample_pairs(&first.matrix, b, rng)?;
    let mut source_rows: Vec<Vec<usize>> = vec![
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    ];
    let mut aligned = vec![
        batches[0].points.select(&source_rows[0]),
        batches[1].points.select(&source_rows[1]),
    ];
    for next in &batches[2..] {
        let prev = aligned.last().expect("at least two aligned batches");
        let plan = batch_plan(prev, &next.points)?;
        let cond = conditional_plan(&plan)?;
        let mut rows = Vec::with_capacity(b);
        for r in 0..prev.rows() {
            let dist = WeightedIndex::new(cond.row(r))
                .map_err(|e| invalid(format!("cannot sample conditional row {r}: {e}")))?;
            rows.push(dist.sample(rng));
        }
        aligned.push(next.points.select(&rows));
        source_rows.push(rows);
    }
    Ok(AlignedWindow {
        batches: aligned,
        times: batches.iter().map(|x| x.source_time).collect(),
        source_rows,
    })
}
