//! P1 finite-element evaluation of the static and dynamic p-Dirichlet
//! energies, their Rayleigh quotient `J̄ = F̄ / G`, its exact discrete
//! derivative, and the conditioned descent direction.
//!
//! Gradients of P1 functions are constant per triangle, so `F` and `F̄` are
//! integrated exactly. `G = ∫|u|^p` uses the three-point edge-midpoint rule,
//! which is exact for quadratics (and thus for `p = 2`).

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::dynamics::{sym_min_eigenvalue, FlowError, Mat2, TransportData};
use crate::linalg::{CgSettings, FactoredSolver, LinalgError, LinearConstraint, SparseMatrix};
use crate::mesh::{Domain, Mesh, MeshError, Point};

/// Below this magnitude `|s|^{p-2} s` is taken to be zero.
const SINGULAR_CUTOFF: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("exponent p = {0} outside (1, 2]")]
    InvalidExponent(f64),
    #[error("weight on triangle {tri} is not symmetric positive definite")]
    NotSpd { tri: usize },
    #[error("function has {got} values, mesh has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Transport(#[from] FlowError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Exponent `p` together with its conjugate `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PSetting {
    pub p: f64,
    pub q: f64,
}

impl PSetting {
    pub fn new(p: f64) -> Result<Self, FemError> {
        if !(p > 1.0 && p <= 2.0) {
            return Err(FemError::InvalidExponent(p));
        }
        Ok(Self { p, q: p / (p - 1.0) })
    }
}

/// Nodal values of a P1 function.
#[derive(Debug, Clone, PartialEq)]
pub struct FeFunction {
    values: Vec<f64>,
}

impl FeFunction {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Self {
        Self::new(mesh.nodes().iter().map(|&p| f(p)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.values.iter().map(|v| c * v).collect())
    }

    /// `self + s * d`.
    pub fn axpy(&self, s: f64, d: &[f64]) -> Self {
        Self::new(self.values.iter().zip(d).map(|(u, d)| u + s * d).collect())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn check(&self, mesh: &Mesh) -> Result<(), FemError> {
        if self.len() != mesh.num_nodes() {
            return Err(FemError::LengthMismatch {
                expected: mesh.num_nodes(),
                got: self.len(),
            });
        }
        Ok(())
    }
}

/// `a = F(u)`, `a_dyn = F̄(u)`, `b = G(u)` and the quotient `j = a_dyn / b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunctionalValue {
    pub a: f64,
    pub a_dyn: f64,
    pub b: f64,
    pub j: f64,
}

#[inline]
fn pow_norm(v: Point, p: f64) -> f64 {
    v.norm_squared().powf(0.5 * p)
}

/// `|v|^{p-2} v`, zero near the origin.
#[inline]
fn flux(v: Point, p: f64) -> Point {
    let n2 = v.norm_squared();
    if n2 < SINGULAR_CUTOFF * SINGULAR_CUTOFF {
        Point::zeros()
    } else {
        v * n2.powf(0.5 * p - 1.0)
    }
}

/// `|s|^{p-2} s`, zero near the origin.
#[inline]
fn scalar_flux(s: f64, p: f64) -> f64 {
    if s.abs() < SINGULAR_CUTOFF {
        0.0
    } else {
        s.abs().powf(p - 1.0).copysign(s)
    }
}

#[inline]
fn gather(u: &[f64], tri: &[usize; 3]) -> [f64; 3] {
    [u[tri[0]], u[tri[1]], u[tri[2]]]
}

/// Dynamic energy density `½(|g|^p + |A g|^p)`.
#[inline]
fn dynamic_density(g: Point, a: &Mat2, p: f64) -> f64 {
    0.5 * (pow_norm(g, p) + pow_norm(a * g, p))
}

/// `F(u) = ‖∇u‖_p^p`.
pub fn eval_f(mesh: &Mesh, u: &FeFunction, p: PSetting) -> f64 {
    let u = u.values();
    mesh.triangles()
        .iter()
        .zip(mesh.geometry())
        .map(|(tri, g)| g.area * pow_norm(g.gradient(gather(u, tri)), p.p))
        .sum()
}

/// `F̄(u) = ½(‖∇u‖_p^p + ‖A∇u‖_p^p)`.
pub fn eval_f_dyn(
    mesh: &Mesh,
    u: &FeFunction,
    p: PSetting,
    transport: &TransportData,
) -> Result<f64, FemError> {
    transport.check_mesh(mesh)?;
    u.check(mesh)?;
    let u = u.values();
    Ok(mesh
        .triangles()
        .iter()
        .zip(mesh.geometry())
        .zip(transport.entries())
        .map(|((tri, g), t)| g.area * dynamic_density(g.gradient(gather(u, tri)), &t.a, p.p))
        .sum())
}

/// `G(u) = ∫|u|^p` by the edge-midpoint rule.
pub fn eval_g(mesh: &Mesh, u: &FeFunction, p: PSetting) -> f64 {
    let u = u.values();
    mesh.triangles()
        .iter()
        .zip(mesh.geometry())
        .map(|(tri, g)| {
            let [a, b, c] = gather(u, tri);
            let s = (0.5 * (a + b)).abs().powf(p.p)
                + (0.5 * (b + c)).abs().powf(p.p)
                + (0.5 * (c + a)).abs().powf(p.p);
            g.area / 3.0 * s
        })
        .sum()
}

/// Quadrature nodes of `G`: edge-midpoint values of `u` and their weights,
/// so that `G(u) = Σ wₖ |vₖ|^p`.
pub fn midpoint_samples(mesh: &Mesh, u: &FeFunction) -> (Vec<f64>, Vec<f64>) {
    let u = u.values();
    let n = 3 * mesh.triangles().len();
    let (mut values, mut weights) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (tri, g) in mesh.triangles().iter().zip(mesh.geometry()) {
        let [a, b, c] = gather(u, tri);
        values.extend([0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)]);
        weights.extend([g.area / 3.0; 3]);
    }
    (values, weights)
}

/// Discrete `‖u‖_p = G(u)^{1/p}`.
pub fn lp_norm(mesh: &Mesh, u: &FeFunction, p: PSetting) -> f64 {
    eval_g(mesh, u, p).powf(1.0 / p.p)
}

/// `F`, `F̄`, `G` and `J̄` in one pass.
pub fn functional(
    mesh: &Mesh,
    u: &FeFunction,
    p: PSetting,
    transport: &TransportData,
) -> Result<FunctionalValue, FemError> {
    let a_dyn = eval_f_dyn(mesh, u, p, transport)?;
    let a = if transport.is_identity() {
        a_dyn
    } else {
        eval_f(mesh, u, p)
    };
    let b = eval_g(mesh, u, p);
    Ok(FunctionalValue {
        a,
        a_dyn,
        b,
        j: a_dyn / b,
    })
}

/// `J̄(u)` alone, bitwise equal to `functional(..).j`.
pub fn quotient(
    mesh: &Mesh,
    u: &FeFunction,
    p: PSetting,
    transport: &TransportData,
) -> Result<f64, FemError> {
    Ok(eval_f_dyn(mesh, u, p, transport)? / eval_g(mesh, u, p))
}

/// Value of `J̄` at `u` and its derivative as the nodal vector
/// `rᵢ = J̄′(u)(φᵢ)`, so that `J̄′(u)(v) = Σᵢ rᵢ vᵢ` for every P1 `v`.
pub fn derivative(
    mesh: &Mesh,
    u: &FeFunction,
    p: PSetting,
    transport: &TransportData,
) -> Result<(FunctionalValue, Vec<f64>), FemError> {
    let value = functional(mesh, u, p, transport)?;
    let pp = p.p;
    let uv = u.values();
    let mut df = vec![0.0; uv.len()];
    let mut dg = vec![0.0; uv.len()];
    for ((tri, g), t) in mesh
        .triangles()
        .iter()
        .zip(mesh.geometry())
        .zip(transport.entries())
    {
        let vals = gather(uv, tri);
        let grad = g.gradient(vals);
        let ag = t.a * grad;
        let f = (flux(grad, pp) + t.a.transpose() * flux(ag, pp)) * (0.5 * pp * g.area);
        for k in 0..3 {
            df[tri[k]] += f.dot(&g.grad_basis[k]);
        }
        let w = g.area / 3.0 * pp * 0.5;
        for (x, y) in [(0, 1), (1, 2), (2, 0)] {
            let m = w * scalar_flux(0.5 * (vals[x] + vals[y]), pp);
            dg[tri[x]] += m;
            dg[tri[y]] += m;
        }
    }
    let r = df
        .iter()
        .zip(&dg)
        .map(|(df, dg)| (df - value.j * dg) / value.b)
        .collect();
    Ok((value, r))
}

fn is_spd(w: &Mat2) -> bool {
    let sym = (w[(0, 1)] - w[(1, 0)]).abs() <= 1e-12 * w.norm().max(1e-300);
    sym && sym_min_eigenvalue(w) > 0.0
}

/// `K_ij = Σ_T |T| ∇φᵢ · W_T ∇φⱼ` for per-triangle symmetric weights.
pub fn assemble_weighted_stiffness(
    mesh: &Mesh,
    weights: &[Mat2],
) -> Result<SparseMatrix, FemError> {
    if weights.len() != mesh.num_triangles() {
        return Err(FemError::Transport(FlowError::Mismatch {
            expected: mesh.num_triangles(),
            got: weights.len(),
        }));
    }
    let mut trip = Vec::with_capacity(9 * mesh.num_triangles());
    for (t, ((tri, g), w)) in mesh
        .triangles()
        .iter()
        .zip(mesh.geometry())
        .zip(weights)
        .enumerate()
    {
        if !is_spd(w) {
            return Err(FemError::NotSpd { tri: t });
        }
        for a in 0..3 {
            let wa = w * g.grad_basis[a];
            for b in 0..3 {
                trip.push((tri[a], tri[b], g.area * wa.dot(&g.grad_basis[b])));
            }
        }
    }
    Ok(SparseMatrix::from_triplets(mesh.num_nodes(), &trip))
}

/// Standard P1 stiffness matrix (`W = I`).
pub fn assemble_stiffness(mesh: &Mesh) -> SparseMatrix {
    let w = vec![Mat2::identity(); mesh.num_triangles()];
    assemble_weighted_stiffness(mesh, &w).expect("identity weight is SPD")
}

/// Consistent P1 mass matrix.
pub fn assemble_mass(mesh: &Mesh) -> SparseMatrix {
    let mut trip = Vec::with_capacity(9 * mesh.num_triangles());
    for (tri, g) in mesh.triangles().iter().zip(mesh.geometry()) {
        for a in 0..3 {
            for b in 0..3 {
                let v = if a == b { g.area / 6.0 } else { g.area / 12.0 };
                trip.push((tri[a], tri[b], v));
            }
        }
    }
    SparseMatrix::from_triplets(mesh.num_nodes(), &trip)
}

/// Row sums of the mass matrix, `mᵢ = ∫φᵢ`.
pub fn lumped_mass(mesh: &Mesh) -> Vec<f64> {
    let mut m = vec![0.0; mesh.num_nodes()];
    for (tri, g) in mesh.triangles().iter().zip(mesh.geometry()) {
        for &i in tri {
            m[i] += g.area / 3.0;
        }
    }
    m
}

/// The constraint matching the domain topology: homogeneous Dirichlet values
/// on boundary nodes, or zero mean on a torus.
pub fn natural_constraint(mesh: &Mesh) -> LinearConstraint {
    if mesh.domain().has_boundary() {
        LinearConstraint::dirichlet(mesh.num_nodes(), &mesh.boundary_indices())
    } else {
        LinearConstraint::zero_mean(lumped_mass(mesh))
    }
}

/// Solves `∫∇d̄ · W ∇v = J̄′(u)(v)` for all admissible `v`.
///
/// `W` does not depend on `p`, so one operator serves every exponent.
#[derive(Debug, Clone)]
pub struct DescentOperator {
    solver: FactoredSolver,
}

/// A solved descent direction together with diagnostics.
#[derive(Debug, Clone)]
pub struct Direction {
    /// `grad J̄(u)`; the descent direction is its negative.
    pub grad: Vec<f64>,
    /// `∫∇d̄ · W ∇d̄ = J̄′(u)(d̄)`.
    pub slope: f64,
    pub cg_iterations: usize,
}

impl DescentOperator {
    pub fn new(
        mesh: &Mesh,
        transport: &TransportData,
        constraint: LinearConstraint,
    ) -> Result<Self, FemError> {
        transport.check_mesh(mesh)?;
        let stiffness = assemble_weighted_stiffness(mesh, &transport.weights())?;
        let solver = FactoredSolver::new(&stiffness, constraint, CgSettings::default())?;
        Ok(Self { solver })
    }

    pub fn stiffness(&self) -> &SparseMatrix {
        self.solver.matrix()
    }

    pub fn constraint(&self) -> &LinearConstraint {
        self.solver.constraint()
    }

    pub fn solver(&self) -> &FactoredSolver {
        &self.solver
    }

    /// Solve for `grad J̄` given the nodal derivative `residual`.
    pub fn solve(&self, residual: &[f64], warm: Option<&[f64]>) -> Result<Direction, FemError> {
        let rep = self.solver.solve_from(residual, warm)?;
        let slope = self.stiffness().bilinear(&rep.x, &rep.x);
        Ok(Direction {
            grad: rep.x,
            slope,
            cg_iterations: rep.iterations,
        })
    }
}

/// One-shot `grad J̄(u)`: assembles the conditioned form and solves it.
pub fn grad_j(
    mesh: &Mesh,
    u: &FeFunction,
    p: PSetting,
    transport: &TransportData,
    constraint: &LinearConstraint,
) -> Result<FeFunction, FemError> {
    let op = DescentOperator::new(mesh, transport, constraint.clone())?;
    let (_, r) = derivative(mesh, u, p, transport)?;
    Ok(FeFunction::new(op.solve(&r, None)?.grad))
}

pub const DUMP_MAGIC: &str = "# plap-fefunction v1";

/// Text dump: a two-line header, then one line per node `x y value`.
pub fn write_dump<W: Write>(mesh: &Mesh, u: &FeFunction, mut w: W) -> Result<(), FemError> {
    u.check(mesh)?;
    writeln!(w, "{DUMP_MAGIC}")?;
    writeln!(w, "# mesh {}", mesh.signature())?;
    for (p, v) in mesh.nodes().iter().zip(u.values()) {
        writeln!(w, "{:.16e} {:.16e} {:.16e}", p.x, p.y, v)?;
    }
    Ok(())
}

/// Parse a mesh signature as produced by [`Mesh::signature`].
pub fn mesh_from_signature(sig: &str) -> Result<Mesh, String> {
    let f: Vec<&str> = sig.split_whitespace().collect();
    if f.len() != 9 || f[0] != "rect" {
        return Err(format!("malformed mesh signature {sig:?}"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
    let flag = |s: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad flag {s:?}")),
    };
    let count = |s: &str, key: &str| {
        s.strip_prefix(key)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| format!("bad grid size {s:?}"))
    };
    let d = Domain::new(
        num(f[1])?,
        num(f[2])?,
        num(f[3])?,
        num(f[4])?,
        flag(f[5])?,
        flag(f[6])?,
    )
    .map_err(|e| e.to_string())?;
    Mesh::build(d, count(f[7], "nx=")?, count(f[8], "ny=")?).map_err(|e| e.to_string())
}

/// Read a dump written by [`write_dump`], rebuilding its mesh.
pub fn read_dump<R: BufRead>(r: R) -> Result<(Mesh, FeFunction), FemError> {
    let parse_err = |line: usize, msg: String| FemError::Parse { line, msg };
    let mut lines = r.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String), FemError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(parse_err(0, format!("unexpected end of file, expected {expect}"))),
        }
    };
    let (ln, magic) = next("header")?;
    if magic.trim_end() != DUMP_MAGIC {
        return Err(parse_err(ln, "missing dump header".into()));
    }
    let (ln, sig) = next("mesh signature")?;
    let sig = sig
        .strip_prefix("# mesh ")
        .ok_or_else(|| parse_err(ln, "missing mesh signature".into()))?;
    let mesh = mesh_from_signature(sig).map_err(|m| parse_err(ln, m))?;

    let mut values = Vec::with_capacity(mesh.num_nodes());
    for (k, node) in mesh.nodes().iter().enumerate() {
        let (ln, line) = next("node line")?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(ln, format!("expected 3 fields, found {}", f.len())));
        }
        let mut v = [0.0; 3];
        for (slot, s) in v.iter_mut().zip(&f) {
            *slot = s
                .parse()
                .map_err(|_| parse_err(ln, format!("bad number {s:?}")))?;
        }
        let tol = 1e-9 * (mesh.hx() + mesh.hy());
        if (v[0] - node.x).abs() > tol || (v[1] - node.y).abs() > tol {
            return Err(parse_err(
                ln,
                format!("node {k} at ({}, {}) does not match the mesh", v[0], v[1]),
            ));
        }
        values.push(v[2]);
    }
    if let Some((i, l)) = lines.next() {
        if !l?.trim().is_empty() {
            return Err(parse_err(i + 1, "trailing data after last node".into()));
        }
    }
    Ok((mesh, FeFunction::new(values)))
}
