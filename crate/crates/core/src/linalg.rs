//! Sparse symmetric storage and a Jacobi-preconditioned conjugate gradient
//! solver with homogeneous Dirichlet or zero-mean constraints.

use rayon::prelude::*;
use thiserror::Error;

/// Rows above which matrix-vector products are split across threads.
const PARALLEL_ROWS: usize = 16_384;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("CG did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("breakdown in CG: non-positive curvature {0:.3e}")]
    Breakdown(f64),
    #[error("matrix is not positive definite: pivot {pivot:.3e} at row {row}")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Square matrix in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assemble from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; dim + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..dim {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let k = fill[r];
            cols[k] = c;
            vals[k] = v;
            fill[r] += 1;
        }

        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..dim {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|&(c, _)| c);
            let mut iter = scratch.iter().copied();
            if let Some((mut cur_c, mut cur_v)) = iter.next() {
                for (c, v) in iter {
                    if c == cur_c {
                        cur_v += v;
                    } else {
                        col_idx.push(cur_c);
                        values.push(cur_v);
                        cur_c = c;
                        cur_v = v;
                    }
                }
                col_idx.push(cur_c);
                values.push(cur_v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let t: Vec<_> = (0..dim).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(dim, &t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Iterate `(col, value)` over the stored entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        let row = |(i, yi): (usize, &mut f64)| {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        };
        if self.dim >= PARALLEL_ROWS {
            y.par_iter_mut().enumerate().for_each(row);
        } else {
            y.iter_mut().enumerate().for_each(row);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.dim)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>())
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Symmetric up to `tol` relative to the largest entry.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        (0..self.dim).all(|i| {
            self.row(i)
                .all(|(j, v)| (v - self.get(j, i)).abs() <= tol * scale)
        })
    }

    /// Dense row-major copy, for small matrices only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.dim]; self.dim];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// Linear constraint imposed on CG solutions.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearConstraint {
    None,
    /// Homogeneous Dirichlet values on the flagged indices.
    Dirichlet { fixed: Vec<bool> },
    /// `Σ wᵢ xᵢ = 0`, with `w` the lumped mass vector.
    ZeroMean { weights: Vec<f64> },
}

impl LinearConstraint {
    pub fn dirichlet(dim: usize, indices: &[usize]) -> Self {
        let mut fixed = vec![false; dim];
        for &i in indices {
            fixed[i] = true;
        }
        Self::Dirichlet { fixed }
    }

    pub fn zero_mean(weights: Vec<f64>) -> Self {
        assert!(
            weights.iter().all(|&w| w > 0.0),
            "zero-mean weights must be positive"
        );
        Self::ZeroMean { weights }
    }

    /// Project an iterate (a primal vector) onto the constrained subspace.
    pub fn project(&self, x: &mut [f64]) {
        match self {
            Self::None => {}
            Self::Dirichlet { fixed } => {
                for (xi, &f) in x.iter_mut().zip(fixed) {
                    if f {
                        *xi = 0.0;
                    }
                }
            }
            Self::ZeroMean { weights } => {
                let total: f64 = weights.iter().sum();
                let mean = dot(weights, x) / total;
                x.iter_mut().for_each(|xi| *xi -= mean);
            }
        }
    }

    /// Project a right-hand side (a dual vector) so the constrained system is
    /// consistent. In the zero-mean case this removes the component along the
    /// weight vector, leaving `Σ bᵢ = 0`.
    pub fn project_rhs(&self, b: &mut [f64]) {
        match self {
            Self::None => {}
            Self::Dirichlet { .. } => self.project(b),
            Self::ZeroMean { weights } => {
                let total: f64 = weights.iter().sum();
                let s = b.iter().sum::<f64>() / total;
                b.iter_mut().zip(weights).for_each(|(bi, w)| *bi -= s * w);
            }
        }
    }

    /// Weighted mean `Σ wᵢ xᵢ / Σ wᵢ` (zero-mean constraint only).
    pub fn weighted_mean(&self, x: &[f64]) -> Option<f64> {
        match self {
            Self::ZeroMean { weights } => Some(dot(weights, x) / weights.iter().sum::<f64>()),
            _ => None,
        }
    }

    fn is_fixed(&self, i: usize) -> bool {
        matches!(self, Self::Dirichlet { fixed } if fixed[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    pub rel_tol: f64,
    /// `None` means `10 * dim`.
    pub max_iter: Option<usize>,
    pub jacobi: bool,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: None,
            jacobi: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve `A x = b` under `constraint` with default Jacobi preconditioning.
pub fn cg_solve(
    a: &SparseMatrix,
    b: &[f64],
    constraint: &LinearConstraint,
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, LinalgError> {
    let settings = CgSettings {
        rel_tol,
        max_iter: Some(max_iter),
        jacobi: true,
    };
    cg_solve_from(a, b, None, constraint, &settings).map(|r| r.x)
}

/// Preconditioned CG from an optional starting guess.
///
/// Dirichlet rows and columns are eliminated implicitly: fixed entries of the
/// iterate stay exactly zero and their rows act as identity rows. Under a
/// zero-mean constraint the right-hand side is projected onto the range of
/// the (singular) operator and every iterate is kept at zero weighted mean.
pub fn cg_solve_from(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    constraint: &LinearConstraint,
    settings: &CgSettings,
) -> Result<CgReport, LinalgError> {
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if !settings.jacobi || constraint.is_fixed(i) || d <= 0.0 {
                1.0
            } else {
                1.0 / d
            }
        })
        .collect();
    let jacobi = |r: &[f64], z: &mut [f64]| {
        z.iter_mut()
            .zip(r.iter().zip(&inv_diag))
            .for_each(|(z, (r, d))| *z = d * r);
    };
    pcg(a, b, x0, constraint, settings, &jacobi)
}

fn pcg(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    constraint: &LinearConstraint,
    settings: &CgSettings,
    preconditioner: &dyn Fn(&[f64], &mut [f64]),
) -> Result<CgReport, LinalgError> {
    let n = a.dim();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let max_iter = settings.max_iter.unwrap_or(10 * n);

    let mut rhs = b.to_vec();
    constraint.project_rhs(&mut rhs);
    let b_norm = norm(&rhs);

    let mut x = match x0 {
        Some(g) if g.len() == n => g.to_vec(),
        Some(g) => {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                got: g.len(),
            })
        }
        None => vec![0.0; n],
    };
    constraint.project(&mut x);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let apply = |v: &[f64], out: &mut [f64]| {
        a.mul_vec_into(v, out);
        if let LinearConstraint::Dirichlet { fixed } = constraint {
            for i in 0..n {
                if fixed[i] {
                    out[i] = v[i];
                }
            }
        }
    };

    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    constraint.project_rhs(&mut r);
    let mut res = norm(&r) / b_norm;
    if res <= settings.rel_tol {
        return Ok(CgReport {
            x,
            iterations: 0,
            relative_residual: res,
        });
    }

    let precondition = |r: &[f64], z: &mut [f64]| {
        preconditioner(r, z);
        constraint.project(z);
    };

    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if curvature <= 0.0 {
            return Err(LinalgError::Breakdown(curvature));
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        constraint.project_rhs(&mut r);
        res = norm(&r) / b_norm;
        if res <= settings.rel_tol {
            constraint.project(&mut x);
            return Ok(CgReport {
                x,
                iterations: it,
                relative_residual: res,
            });
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::NotConverged {
        iterations: max_iter,
        residual: res,
    })
}

/// Reverse Cuthill–McKee ordering of the symmetric pattern of `a`, as
/// `perm[new] = old`. Each connected component starts from a
/// pseudo-peripheral node.
pub fn reverse_cuthill_mckee(a: &SparseMatrix) -> Vec<usize> {
    let n = a.dim();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("an unvisited node remains");
        let root = pseudo_peripheral(&adj, &degree, seed);
        visited[root] = true;
        let mut head = order.len();
        order.push(root);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Last BFS level from `root` and the number of levels.
fn bfs_last_level(adj: &[Vec<usize>], root: usize) -> (Vec<usize>, usize) {
    let mut depth = vec![usize::MAX; adj.len()];
    depth[root] = 0;
    let mut level = vec![root];
    let mut count = 1;
    loop {
        let mut next = Vec::new();
        for &v in &level {
            for &w in &adj[v] {
                if depth[w] == usize::MAX {
                    depth[w] = count;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return (level, count);
        }
        level = next;
        count += 1;
    }
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], start: usize) -> usize {
    let mut root = start;
    let (mut last, mut depth) = bfs_last_level(adj, root);
    loop {
        let cand = *last
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .expect("BFS levels are non-empty");
        let (l, d) = bfs_last_level(adj, cand);
        if d <= depth {
            return root;
        }
        root = cand;
        last = l;
        depth = d;
    }
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` in envelope storage under a reverse
/// Cuthill–McKee ordering `P`.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    /// First stored column of each row of `L`.
    first: Vec<usize>,
    /// Offset of each row in `values`; row `i` holds `L[i, first[i]..=i]`.
    start: Vec<usize>,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factor a symmetric positive definite matrix.
    pub fn factor(a: &SparseMatrix) -> Result<Self, LinalgError> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (oj, _) in a.row(old) {
                first[i] = first[i].min(inv[oj]);
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut values = vec![0.0; start[n]];
        for old in 0..n {
            let i = inv[old];
            for (oj, v) in a.row(old) {
                let j = inv[oj];
                if j <= i {
                    values[start[i] + j - first[i]] += v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let (done, rest) = values.split_at_mut(start[i]);
            let row_i = &mut rest[..=i - fi];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let row_j = &done[start[j]..start[j + 1]];
                let s = dot(&row_i[lo - fi..j - fi], &row_j[lo - fj..j - fj]);
                row_i[j - fi] = (row_i[j - fi] - s) / row_j[j - fj];
            }
            let d = row_i[i - fi] - dot(&row_i[..i - fi], &row_i[..i - fi]);
            if d.is_nan() || d <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite {
                    row: perm[i],
                    pivot: d,
                });
            }
            row_i[i - fi] = d.sqrt();
        }
        Ok(Self {
            perm,
            first,
            start,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Stored entries of `L`.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    /// `x = A⁻¹ b`.
    pub fn solve_into(&self, b: &[f64], x: &mut [f64]) {
        let n = self.dim();
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.values[self.start[i]..self.start[i + 1]];
            let s = dot(&row[..i - fi], &y[fi..i]);
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            y[fi..i].iter_mut().zip(row).for_each(|(yk, l)| *yk -= l * yi);
        }
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.solve_into(b, &mut x);
        x
    }
}

/// Constrained solves of `A x = b` with the constrained matrix factored once
/// and used as the CG preconditioner. Dirichlet rows become identity rows;
/// under a zero-mean constraint one node is pinned, which makes the singular
/// operator definite without changing solutions up to a constant.
#[derive(Debug, Clone)]
pub struct FactoredSolver {
    a: SparseMatrix,
    constraint: LinearConstraint,
    pin: Option<usize>,
    factor: EnvelopeCholesky,
    settings: CgSettings,
}

impl FactoredSolver {
    pub fn new(
        a: &SparseMatrix,
        constraint: LinearConstraint,
        settings: CgSettings,
    ) -> Result<Self, LinalgError> {
        let n = a.dim();
        if let LinearConstraint::Dirichlet { fixed } = &constraint {
            if fixed.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    got: fixed.len(),
                });
            }
        }
        if let LinearConstraint::ZeroMean { weights } = &constraint {
            if weights.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    got: weights.len(),
                });
            }
        }
        let pin = matches!(constraint, LinearConstraint::ZeroMean { .. }).then_some(0);
        let eliminated = |i: usize| constraint.is_fixed(i) || pin == Some(i);
        let mut t = Vec::with_capacity(a.nnz());
        for i in 0..n {
            if eliminated(i) {
                t.push((i, i, 1.0));
                continue;
            }
            t.extend(a.row(i).filter(|&(j, _)| !eliminated(j)).map(|(j, v)| (i, j, v)));
        }
        let factor = EnvelopeCholesky::factor(&SparseMatrix::from_triplets(n, &t))?;
        Ok(Self {
            a: a.clone(),
            constraint,
            pin,
            factor,
            settings,
        })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn constraint(&self) -> &LinearConstraint {
        &self.constraint
    }

    pub fn factor(&self) -> &EnvelopeCholesky {
        &self.factor
    }

    pub fn solve_from(&self, b: &[f64], x0: Option<&[f64]>) -> Result<CgReport, LinalgError> {
        let precondition = |r: &[f64], z: &mut [f64]| match self.pin {
            Some(k) => {
                let mut r = r.to_vec();
                r[k] = 0.0;
                self.factor.solve_into(&r, z);
            }
            None => self.factor.solve_into(r, z),
        };
        pcg(&self.a, b, x0, &self.constraint, &self.settings, &precondition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let x = m.lu().solve(&DVector::from_column_slice(b)).unwrap();
        x.iter().copied().collect()
    }

    fn laplace_1d(n: usize, h: f64) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 / h));
            if i + 1 < n {
                t.push((i, i + 1, -1.0 / h));
                t.push((i + 1, i, -1.0 / h));
            }
        }
        SparseMatrix::from_triplets(n, &t)
    }

    #[test]
    fn triplets_are_summed_and_sorted() {
        let m = SparseMatrix::from_triplets(
            3,
            &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 0.5), (2, 1, -1.0)],
        );
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.row(0).collect::<Vec<_>>(), vec![(0, 2.0), (2, 1.5)]);
    }

    #[test]
    fn identity_returns_rhs() {
        let a = SparseMatrix::identity(5);
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let x = cg_solve(&a, &b, &LinearConstraint::None, 1e-12, 50).unwrap();
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_laplacian_matches_dense_lu() {
        // 1D P1 stiffness on [0,1] with h = 0.25: nodes 0..=4, ends fixed
        let h = 0.25;
        let full = laplace_1d(5, h);
        // lumped P1 mass applied to the constant 1
        let mut b = vec![h; 5];
        b[0] = h / 2.0;
        b[4] = h / 2.0;
        let c = LinearConstraint::dirichlet(5, &[0, 4]);
        let x = cg_solve(&full, &b, &c, 1e-12, 100).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(x[4], 0.0);

        let dense = full.to_dense();
        let inner: Vec<Vec<f64>> = (1..4).map(|i| (1..4).map(|j| dense[i][j]).collect()).collect();
        let oracle = dense_solve(&inner, &b[1..4]);
        for (k, o) in oracle.iter().enumerate() {
            assert!((x[k + 1] - o).abs() < 1e-10 * o.abs().max(1.0));
        }
    }

    #[test]
    fn zero_mean_constant_rhs_gives_zero() {
        // periodic 1D Laplacian, singular with constants in the kernel
        let n = 8;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            t.push((i, (i + 1) % n, -1.0));
            t.push(((i + 1) % n, i, -1.0));
        }
        let a = SparseMatrix::from_triplets(n, &t);
        let c = LinearConstraint::zero_mean(vec![1.0; n]);
        let x = cg_solve(&a, &[3.0; 8], &c, 1e-12, 100).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn zero_mean_solution_has_zero_weighted_mean() {
        let n = 12;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            t.push((i, (i + 1) % n, -1.0));
            t.push(((i + 1) % n, i, -1.0));
        }
        let a = SparseMatrix::from_triplets(n, &t);
        let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let c = LinearConstraint::zero_mean(w.clone());
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = cg_solve(&a, &b, &c, 1e-12, 200).unwrap();
        assert!(c.weighted_mean(&x).unwrap().abs() < 1e-12);
        // residual is parallel to w after projection
        let mut r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(ax, b)| b - ax).collect();
        c.project_rhs(&mut r);
        assert!(norm(&r) < 1e-10);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let a = laplace_1d(50, 1.0);
        let b = vec![1.0; 50];
        let err = cg_solve(&a, &b, &LinearConstraint::None, 1e-14, 2).unwrap_err();
        assert!(matches!(err, LinalgError::NotConverged { iterations: 2, residual } if residual > 0.0));
    }

    fn spd_from_seed(n: usize, entries: &[f64]) -> (SparseMatrix, Vec<Vec<f64>>) {
        let bmat = DMatrix::from_fn(n, n, |i, j| entries[(i * n + j) % entries.len()]);
        let a = bmat.transpose() * &bmat + DMatrix::identity(n, n);
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                t.push((i, j, a[(i, j)]));
            }
        }
        let dense = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
        (SparseMatrix::from_triplets(n, &t), dense)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn cg_agrees_with_dense_solve(
            n in 2usize..=50,
            entries in proptest::collection::vec(-1.0f64..1.0, 1..200),
            rhs in proptest::collection::vec(-5.0f64..5.0, 50),
        ) {
            let (a, dense) = spd_from_seed(n, &entries);
            let b = &rhs[..n];
            let x = cg_solve(&a, b, &LinearConstraint::None, 1e-13, 10 * n + 50).unwrap();
            let oracle = dense_solve(&dense, b);
            let err: f64 = x.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            prop_assert!(err <= 1e-8 * scale);
        }

        #[test]
        fn jacobi_changes_iterations_not_solution(
            n in 2usize..=40,
            entries in proptest::collection::vec(-1.0f64..1.0, 1..200),
            diag in proptest::collection::vec(0.1f64..50.0, 40),
        ) {
            let (base, _) = spd_from_seed(n, &entries);
            // add a strongly varying diagonal so Jacobi matters
            let mut t = Vec::new();
            for i in 0..n {
                for (j, v) in base.row(i) {
                    t.push((i, j, v));
                }
                t.push((i, i, diag[i]));
            }
            let a = SparseMatrix::from_triplets(n, &t);
            let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
            let with = CgSettings { rel_tol: 1e-12, max_iter: Some(20 * n), jacobi: true };
            let without = CgSettings { jacobi: false, ..with };
            let x1 = cg_solve_from(&a, &b, None, &LinearConstraint::None, &with).unwrap();
            let x2 = cg_solve_from(&a, &b, None, &LinearConstraint::None, &without).unwrap();
            let diff: f64 = x1.x.iter().zip(&x2.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = x1.x.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-8 * scale.max(1e-12));
        }

        #[test]
        fn envelope_cholesky_agrees_with_dense_solve(
            n in 1usize..=40,
            entries in proptest::collection::vec(-1.0f64..1.0, 1..200),
            rhs in proptest::collection::vec(-5.0f64..5.0, 40),
        ) {
            let (a, dense) = spd_from_seed(n, &entries);
            let x = EnvelopeCholesky::factor(&a).unwrap().solve(&rhs[..n]);
            let oracle = dense_solve(&dense, &rhs[..n]);
            for (x, o) in x.iter().zip(&oracle) {
                prop_assert!((x - o).abs() <= 1e-9 * o.abs().max(1.0));
            }
        }

        #[test]
        fn factored_solver_matches_jacobi_cg(
            weights in proptest::collection::vec(0.05f64..20.0, 2 * 49),
            rhs in proptest::collection::vec(-1.0f64..1.0, 49),
            periodic in any::<bool>(),
        ) {
            let nx = 7;
            let a = grid_laplacian(nx, nx, periodic, &weights);
            let n = nx * nx;
            let constraint = if periodic {
                LinearConstraint::zero_mean((0..n).map(|i| 1.0 + 0.01 * i as f64).collect())
            } else {
                let edge: Vec<usize> = (0..n)
                    .filter(|&k| k % nx == 0 || k % nx == nx - 1 || k / nx == 0 || k / nx == nx - 1)
                    .collect();
                LinearConstraint::dirichlet(n, &edge)
            };
            let settings = CgSettings { rel_tol: 1e-12, max_iter: Some(40 * n), jacobi: true };
            let reference = cg_solve_from(&a, &rhs, None, &constraint, &settings).unwrap();
            let solver = FactoredSolver::new(&a, constraint, settings).unwrap();
            let rep = solver.solve_from(&rhs, None).unwrap();
            prop_assert!(rep.iterations <= 3);
            let scale = norm(&reference.x).max(1e-12);
            let diff: f64 = rep.x.iter().zip(&reference.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-8 * scale);
        }
    }

    /// Five-point Laplacian on an `nx × ny` grid with per-edge weights,
    /// optionally periodic in both directions.
    fn grid_laplacian(nx: usize, ny: usize, periodic: bool, w: &[f64]) -> SparseMatrix {
        let idx = |i: usize, j: usize| j * nx + i;
        let mut t = Vec::new();
        let mut e = 0;
        let mut edge = |t: &mut Vec<(usize, usize, f64)>, a: usize, b: usize| {
            let v = w[e % w.len()];
            e += 1;
            t.extend([(a, a, v), (b, b, v), (a, b, -v), (b, a, -v)]);
        };
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx || periodic {
                    edge(&mut t, idx(i, j), idx((i + 1) % nx, j));
                }
                if j + 1 < ny || periodic {
                    edge(&mut t, idx(i, j), idx(i, (j + 1) % ny));
                }
            }
        }
        // keep the non-periodic case definite without a constraint
        if !periodic {
            t.push((0, 0, 1.0));
        }
        SparseMatrix::from_triplets(nx * ny, &t)
    }

    #[test]
    fn rcm_is_a_permutation_and_narrows_the_band() {
        let (nx, ny) = (30, 8);
        let a = grid_laplacian(nx, ny, false, &[1.0]);
        let mut perm = reverse_cuthill_mckee(&a);
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let bandwidth = (0..a.dim())
            .flat_map(|i| a.row(i).map(move |(j, _)| (i, j)))
            .map(|(i, j)| inv[i].abs_diff(inv[j]))
            .max()
            .unwrap();
        // natural row-major ordering has bandwidth nx; the short side is ny
        assert!(bandwidth <= 2 * ny, "bandwidth {bandwidth}");
        perm.sort_unstable();
        assert_eq!(perm, (0..nx * ny).collect::<Vec<_>>());
    }

    #[test]
    fn rcm_covers_disconnected_components() {
        let a = SparseMatrix::from_triplets(
            5,
            &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0), (4, 4, 1.0), (0, 3, 0.1), (3, 0, 0.1)],
        );
        let mut perm = reverse_cuthill_mckee(&a);
        perm.sort_unstable();
        assert_eq!(perm, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(
            EnvelopeCholesky::factor(&a),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn torus_envelope_stays_small() {
        let nx = 40;
        let a = grid_laplacian(nx, nx, true, &[1.0]);
        let c = LinearConstraint::zero_mean(vec![1.0; nx * nx]);
        let solver = FactoredSolver::new(&a, c, CgSettings::default()).unwrap();
        // a dense lower triangle would hold n²/2 entries
        assert!(solver.factor().envelope_size() < 5 * nx * nx * nx);
    }
}
