//! First and second eigenpairs of the (dynamic) p-Laplacian.
//!
//! The first eigenpair is found by normalized descent on `J̄` along the
//! conditioned gradient with Armijo backtracking. The second eigenpair on
//! boundaryless domains uses peak selection: for the frozen first
//! eigenfunction `u1` and a direction `v`, `u⁺(v)` maximizes `J̄` on the unit
//! circle of `span(u1, v)`, and `v` descends `J̄(u⁺(v))`. Both start from
//! eigenfunctions of the linear (`p = 2`) problem.

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::TransportData;
use crate::fem::{
    assemble_mass, derivative, functional, lp_norm, lumped_mass, midpoint_samples, quotient,
    natural_constraint, DescentOperator, FeFunction, FemError, FunctionalValue, PSetting,
};
use crate::linalg::{FactoredSolver, LinalgError, LinearConstraint, SparseMatrix};
use crate::mesh::Mesh;

/// Smallest exponent the descent is run for.
pub const MIN_EXPONENT: f64 = 1.3;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error("p = {0} is outside the supported range 1.3 <= p <= 2")]
    ExponentOutOfRange(f64),
    #[error("invalid solver parameter: {0}")]
    InvalidParams(String),
    #[error("initial function is zero after applying the constraint")]
    ZeroFunction,
    #[error("no convergence within {} iterations (gradient norm {:.3e})",
        .0.iterations, .0.history.last().map_or(f64::NAN, |h| h.grad_norm))]
    MaxIterations(Box<EigenPair>),
    #[error("degenerate peak selection (|t2| = {t2:.3e}): direction collapsed onto the first eigenfunction")]
    DegeneratePeak { t2: f64 },
    #[error("subspace iteration stalled after {iterations} iterations (relative change {change:.3e})")]
    SubspaceNotConverged { iterations: usize, change: f64 },
    #[error("{0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub alpha: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            grad_tol: 1e-3,
            step_tol: 1e-12,
            max_iter: 10_000,
            max_halvings: 60,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), EigenError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(EigenError::InvalidParams(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("grad_tol", self.grad_tol)?;
        positive("step_tol", self.step_tol)?;
        if self.max_iter == 0 || self.max_halvings == 0 {
            return Err(EigenError::InvalidParams(
                "max_iter and max_halvings must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// `‖d̄‖_p` reached the tolerance.
    Converged,
    /// The gradient vanished exactly before the tolerance test.
    Stationary,
    /// No step above `step_tol` satisfied the Armijo test.
    StepTolerance,
    /// Iteration budget exhausted.
    MaxIterations,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::Stationary => "stationary",
            Self::StepTolerance => "step_tolerance",
            Self::MaxIterations => "max_iterations",
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Self::Converged | Self::Stationary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initialization {
    /// Eigenfunction of the linear `p = 2` problem.
    LinearP2,
    /// Solution at the previous exponent of a ladder.
    Warm { from_p: f64 },
    /// Caller-provided function.
    Supplied,
}

impl Initialization {
    pub fn describe(&self) -> String {
        match self {
            Self::LinearP2 => "p2_eigenfunction".into(),
            Self::Warm { from_p } => format!("warm_start_from_p={from_p}"),
            Self::Supplied => "supplied".into(),
        }
    }
}

/// One descent iteration: `j` at the iterate, the accepted step (0 for the
/// final record), `‖d̄‖_p`, the W-form `∫∇d̄·W∇d̄` and `|t2|` (1 for the
/// first eigenpair).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub j: f64,
    pub step: f64,
    pub grad_norm: f64,
    pub slope: f64,
    pub t2: f64,
}

impl IterationRecord {
    /// Armijo decrease required of the next value when this step is accepted.
    pub fn armijo_bound(&self) -> f64 {
        self.j - 0.25 * self.step * self.t2.abs() * self.slope
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub p: f64,
    pub lambda: f64,
    pub u: FeFunction,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
    pub init: Initialization,
}

impl EigenPair {
    /// Convergence log CSV `iter,J,step,grad_norm`.
    pub fn write_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,J,step,grad_norm")?;
        for (k, h) in self.history.iter().enumerate() {
            writeln!(w, "{k},{:.16e},{:.16e},{:.16e}", h.j, h.step, h.grad_norm)?;
        }
        Ok(())
    }

    /// Metadata as a small JSON object.
    pub fn write_metadata<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{{")?;
        writeln!(w, "  \"p\": {:.16e},", self.p)?;
        writeln!(w, "  \"lambda\": {:.16e},", self.lambda)?;
        writeln!(w, "  \"iterations\": {},", self.iterations)?;
        writeln!(
            w,
            "  \"final_grad_norm\": {:.16e},",
            self.history.last().map_or(f64::NAN, |h| h.grad_norm)
        )?;
        writeln!(w, "  \"initialization\": \"{}\",", self.init.describe())?;
        writeln!(w, "  \"termination\": \"{}\",", self.termination.as_str())?;
        writeln!(w, "  \"minimizer\": \"local\"")?;
        writeln!(w, "}}")
    }

    /// Every accepted step satisfies its Armijo inequality and the values
    /// never increase.
    pub fn history_is_armijo(&self) -> bool {
        self.history
            .windows(2)
            .all(|h| h[1].j <= h[0].armijo_bound() && h[1].j <= h[0].j)
    }
}

fn check_exponent(p: PSetting) -> Result<(), EigenError> {
    if p.p < MIN_EXPONENT || p.p > 2.0 {
        return Err(EigenError::ExponentOutOfRange(p.p));
    }
    Ok(())
}

fn normalize(mesh: &Mesh, u: &FeFunction, p: PSetting) -> Result<FeFunction, EigenError> {
    let n = lp_norm(mesh, u, p);
    if !(n > 0.0 && n.is_finite()) {
        return Err(EigenError::ZeroFunction);
    }
    Ok(u.scaled(1.0 / n))
}

/// Flip `u` so that its integral is nonnegative; for (numerically)
/// zero-mean functions the entry of largest magnitude is made positive.
fn fix_sign(mesh: &Mesh, u: FeFunction) -> FeFunction {
    let w = lumped_mass(mesh);
    let integral: f64 = w.iter().zip(u.values()).map(|(w, u)| w * u).sum();
    let scale: f64 = w.iter().zip(u.values()).map(|(w, u)| w * u.abs()).sum();
    let flip = if integral.abs() > 1e-10 * scale {
        integral < 0.0
    } else {
        let (mut best, mut arg) = (0.0f64, 0.0);
        for &v in u.values() {
            if v.abs() > best {
                best = v.abs();
                arg = v;
            }
        }
        arg < 0.0
    };
    if flip {
        u.scaled(-1.0)
    } else {
        u
    }
}

/// Cyclically shift the rows of a function on a `y`-periodic mesh so that
/// its maximum lies on the row closest to the vertical center of the domain.
pub fn center_maximum_in_y(mesh: &Mesh, u: &FeFunction) -> FeFunction {
    if !mesh.domain().periodic_y {
        return u.clone();
    }
    let (cols, rows) = (mesh.columns(), mesh.rows());
    let vals = u.values();
    let mut arg = 0;
    for (k, v) in vals.iter().enumerate() {
        if *v > vals[arg] {
            arg = k;
        }
    }
    let d = mesh.domain();
    let row_of = |y: f64| (((y - d.y_min) / mesh.hy()).round() as usize) % rows;
    let from = row_of(mesh.nodes()[arg].y);
    let target = row_of(0.5 * (d.y_min + d.y_max));
    let shift = (target + rows - from) % rows;
    let mut out = vec![0.0; vals.len()];
    for j in 0..rows {
        for i in 0..cols {
            out[mesh.node_index(i, (j + shift) % rows)] = vals[mesh.node_index(i, j)];
        }
    }
    FeFunction::new(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const SUBSPACE_MAX_ITER: usize = 500;
const SUBSPACE_TOL: f64 = 1e-11;
const SUBSPACE_SEED: u64 = 0x5eed_0f_b10c;

/// Smallest eigenpair of `K x = λ M x` on the constrained subspace by block
/// inverse iteration with Rayleigh–Ritz. Returns `(λ, x, iterations, λ history)`.
fn subspace_iteration(
    solver: &FactoredSolver,
    m: &SparseMatrix,
    block: usize,
) -> Result<(f64, Vec<f64>, usize, Vec<f64>), EigenError> {
    let k = solver.matrix();
    let constraint = solver.constraint();
    let n = k.dim();
    let block = block.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSPACE_SEED);
    let mut y: Vec<Vec<f64>> = (0..block)
        .map(|_| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            constraint.project(&mut v);
            v
        })
        .collect();
    let mut ritz: Vec<f64> = vec![1.0; block];
    let mut prev = f64::NAN;
    let mut change = f64::INFINITY;
    let mut lambdas = Vec::new();

    for it in 1..=SUBSPACE_MAX_ITER {
        let mut z = Vec::with_capacity(block);
        for (yi, &ri) in y.iter().zip(&ritz) {
            let b = m.mul_vec(yi);
            let warm: Vec<f64> = yi.iter().map(|v| v / ri).collect();
            z.push(solver.solve_from(&b, Some(&warm))?.x);
        }
        let kz: Vec<Vec<f64>> = z.iter().map(|zi| k.mul_vec(zi)).collect();
        let mz: Vec<Vec<f64>> = z.iter().map(|zi| m.mul_vec(zi)).collect();
        let kp = DMatrix::from_fn(block, block, |i, j| 0.5 * (dot(&z[i], &kz[j]) + dot(&z[j], &kz[i])));
        let mp = DMatrix::from_fn(block, block, |i, j| 0.5 * (dot(&z[i], &mz[j]) + dot(&z[j], &mz[i])));
        let chol = mp.cholesky().ok_or(EigenError::Linalg(LinalgError::Breakdown(0.0)))?;
        let linv = chol
            .l()
            .try_inverse()
            .ok_or(EigenError::Linalg(LinalgError::Breakdown(0.0)))?;
        let c = &linv * kp * linv.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let coeff = linv.transpose() * &eig.eigenvectors;
        y = order
            .iter()
            .map(|&col| {
                let mut v = vec![0.0; n];
                for (i, zi) in z.iter().enumerate() {
                    let c = coeff[(i, col)];
                    v.iter_mut().zip(zi).for_each(|(v, z)| *v += c * z);
                }
                v
            })
            .collect();
        ritz = order.iter().map(|&c| eig.eigenvalues[c]).collect();
        let lambda = ritz[0];
        lambdas.push(lambda);
        change = ((lambda - prev) / lambda).abs();
        if change <= SUBSPACE_TOL {
            return Ok((lambda, y.swap_remove(0), it, lambdas));
        }
        prev = lambda;
    }
    if change <= 1e-8 {
        log::warn!("subspace iteration reached only relative change {change:.3e}");
        let lambda = ritz[0];
        return Ok((lambda, y.swap_remove(0), SUBSPACE_MAX_ITER, lambdas));
    }
    Err(EigenError::SubspaceNotConverged {
        iterations: SUBSPACE_MAX_ITER,
        change,
    })
}

/// Eigenfunction of the linear problem `K_W u = λ M u` with consistent mass.
///
/// `First` with a Dirichlet constraint returns the smallest eigenpair; on
/// boundaryless domains the first eigenfunction is constant. `Second`
/// deflates constants through the zero-mean constraint. The result has unit
/// `L²` norm.
pub fn init_p2(
    mesh: &Mesh,
    transport: &TransportData,
    which: Which,
    constraint: &LinearConstraint,
) -> Result<EigenPair, EigenError> {
    let p2 = PSetting::new(2.0)?;
    let constant_first = which == Which::First && !matches!(constraint, LinearConstraint::Dirichlet { .. });
    let (u, iterations, history) = if constant_first {
        let c = FeFunction::new(vec![1.0; mesh.num_nodes()]);
        (c, 0, Vec::new())
    } else {
        let op = DescentOperator::new(mesh, transport, constraint.clone())?;
        let mass = assemble_mass(mesh);
        let block = match which {
            Which::First => 4,
            Which::Second => 6,
        };
        let (_, x, it, lambdas) = subspace_iteration(op.solver(), &mass, block)?;
        let history = lambdas
            .iter()
            .map(|&j| IterationRecord {
                j,
                step: 0.0,
                grad_norm: f64::NAN,
                slope: 0.0,
                t2: 1.0,
            })
            .collect();
        (FeFunction::new(x), it, history)
    };
    let u = fix_sign(mesh, normalize(mesh, &u, p2)?);
    let lambda = functional(mesh, &u, p2, transport)?.j;
    Ok(EigenPair {
        p: 2.0,
        lambda,
        u,
        iterations,
        history,
        termination: Termination::Converged,
        init: Initialization::LinearP2,
    })
}

fn record(v: &FunctionalValue, step: f64, grad_norm: f64, slope: f64, t2: f64) -> IterationRecord {
    IterationRecord {
        j: v.j,
        step,
        grad_norm,
        slope,
        t2,
    }
}

/// First eigenpair of `-Δ̄_p` by normalized conditioned descent.
pub fn solve_first(
    p: PSetting,
    mesh: &Mesh,
    transport: &TransportData,
    params: &SolverParams,
    u0: &FeFunction,
) -> Result<EigenPair, EigenError> {
    check_exponent(p)?;
    params.validate()?;
    if !mesh.domain().has_boundary() {
        let c = FeFunction::new(vec![1.0; mesh.num_nodes()]);
        let u = normalize(mesh, &c, p)?;
        let v = functional(mesh, &u, p, transport)?;
        return Ok(EigenPair {
            p: p.p,
            lambda: v.j,
            u,
            iterations: 0,
            history: vec![record(&v, 0.0, 0.0, 0.0, 1.0)],
            termination: Termination::Stationary,
            init: Initialization::Supplied,
        });
    }
    let constraint = natural_constraint(mesh);
    let op = DescentOperator::new(mesh, transport, constraint.clone())?;
    let mut start = u0.clone();
    constraint.project(start.values_mut());
    let mut u = normalize(mesh, &start, p)?;
    let (mut val, mut r) = derivative(mesh, &u, p, transport)?;
    let mut history = Vec::new();
    let mut warm: Option<Vec<f64>> = None;

    let finish = |u: FeFunction, val: FunctionalValue, history: Vec<IterationRecord>, t| EigenPair {
        p: p.p,
        lambda: val.j,
        u: fix_sign(mesh, u),
        iterations: history.len().saturating_sub(1),
        history,
        termination: t,
        init: Initialization::Supplied,
    };

    for _ in 0..params.max_iter {
        let dir = op.solve(&r, warm.as_deref())?;
        let gnorm = lp_norm(mesh, &FeFunction::new(dir.grad.clone()), p);
        if gnorm <= params.grad_tol {
            history.push(record(&val, 0.0, gnorm, dir.slope, 1.0));
            return Ok(finish(u, val, history, Termination::Converged));
        }
        if gnorm == 0.0 || dir.slope <= 0.0 {
            history.push(record(&val, 0.0, gnorm, dir.slope, 1.0));
            return Ok(finish(u, val, history, Termination::Stationary));
        }
        let mut s = params.alpha / gnorm.max(1.0);
        let mut accepted = None;
        for _ in 0..=params.max_halvings {
            if s < params.step_tol {
                break;
            }
            let trial = u.axpy(-s, &dir.grad);
            if let Ok(trial) = normalize(mesh, &trial, p) {
                if quotient(mesh, &trial, p, transport)? <= val.j - 0.25 * s * dir.slope {
                    accepted = Some(trial);
                    break;
                }
            }
            s *= 0.5;
        }
        let Some(next) = accepted else {
            log::warn!(
                "p = {}: no Armijo step above {:.1e}; stopping at gradient norm {gnorm:.3e}",
                p.p,
                params.step_tol
            );
            history.push(record(&val, 0.0, gnorm, dir.slope, 1.0));
            return Ok(finish(u, val, history, Termination::StepTolerance));
        };
        history.push(record(&val, s, gnorm, dir.slope, 1.0));
        if history.len() % 500 == 0 {
            log::debug!("p = {}: iteration {} J = {:.10} |d| = {gnorm:.3e}", p.p, history.len(), val.j);
        }
        u = next;
        (val, r) = derivative(mesh, &u, p, transport)?;
        warm = Some(dir.grad);
    }
    let dir = op.solve(&r, warm.as_deref())?;
    let gnorm = lp_norm(mesh, &FeFunction::new(dir.grad), p);
    history.push(record(&val, 0.0, gnorm, dir.slope, 1.0));
    Err(EigenError::MaxIterations(Box::new(finish(
        u,
        val,
        history,
        Termination::MaxIterations,
    ))))
}

/// `u⁺(v) = t1 u1 + t2 v`, normalized, with `(t1, t2) = (cos θ, sin θ)`
/// a local maximizer of `J̄` on the unit circle of `span(u1, v)`.
#[derive(Debug, Clone)]
pub struct PeakSelection {
    pub theta: f64,
    pub t1: f64,
    pub t2: f64,
    pub u: FeFunction,
    pub value: FunctionalValue,
    /// Nodal derivative of `J̄` at `u`.
    pub residual: Vec<f64>,
}

fn combine(u1: &[f64], v: &[f64], t1: f64, t2: f64) -> FeFunction {
    FeFunction::new(u1.iter().zip(v).map(|(a, b)| t1 * a + t2 * b).collect())
}

fn constant_value(u: &[f64]) -> Option<f64> {
    let c = *u.first()?;
    (c != 0.0 && u.iter().all(|&x| x == c)).then_some(c)
}

/// `θ = arccot t*` with `t*` minimizing `Σ wₖ |t c + vₖ|^p`, by Newton's
/// method on the derivative with a bisection safeguard, started at
/// `cot theta0`.
fn constant_peak(p: PSetting, mesh: &Mesh, c: f64, v: &FeFunction, theta0: f64) -> f64 {
    let (vals, wts) = midpoint_samples(mesh, v);
    let (vmin, vmax) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    // with y = t c + x and y' = |c|: h(t) = Σ w |y|^{p-1} sign(y) sign(c) is
    // increasing, h'(t) = (p-1) |c| Σ w |y|^{p-2}
    let eval = |t: f64| -> (f64, f64) {
        let (mut h, mut dh) = (0.0, 0.0);
        for (&x, &w) in vals.iter().zip(&wts) {
            let y = t * c + x;
            let ay = y.abs();
            if ay > 0.0 {
                let q = ay.powf(p.p - 2.0);
                h += w * q * y;
                dh += w * q;
            }
        }
        (h * c.signum(), dh * (p.p - 1.0) * c.abs())
    };
    let (mut a, mut b) = if c > 0.0 { (-vmax / c, -vmin / c) } else { (-vmin / c, -vmax / c) };
    let tol = 1e-14 * (b - a).max(f64::MIN_POSITIVE);
    let cot = theta0.cos() / theta0.sin();
    let mut t = if cot.is_finite() && cot > a && cot < b { cot } else { 0.5 * (a + b) };
    for _ in 0..200 {
        let (h, dh) = eval(t);
        if h == 0.0 {
            break;
        }
        if h < 0.0 {
            a = t;
        } else {
            b = t;
        }
        let newton = t - h / dh;
        let next = if dh > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        let done = (next - t).abs() <= tol || b - a <= tol;
        t = next;
        if done {
            break;
        }
    }
    1.0f64.atan2(t)
}

/// Peak of `θ ↦ J̄(cos θ u1 + sin θ v)` by bracketing from `theta0` and an
/// Illinois secant iteration on the exact derivative.
fn secant_peak(
    p: PSetting,
    mesh: &Mesh,
    transport: &TransportData,
    a1: &[f64],
    b1: &[f64],
    theta0: f64,
) -> Result<f64, EigenError> {
    let slope = |theta: f64| -> Result<f64, EigenError> {
        let (s, c) = theta.sin_cos();
        let (_, r) = derivative(mesh, &combine(a1, b1, c, s), p, transport)?;
        Ok(r.iter()
            .zip(a1.iter().zip(b1))
            .map(|(r, (a, b))| r * (-s * a + c * b))
            .sum())
    };

    let (lo_lim, hi_lim) = (1e-9, PI - 1e-9);
    let x0 = theta0.clamp(lo_lim, hi_lim);
    let g0 = slope(x0)?;
    if g0 == 0.0 {
        return Ok(x0);
    }
    let (mut a, mut ga, mut b, mut gb);
    let mut step = 0.05;
    if g0 > 0.0 {
        (a, ga) = (x0, g0);
        loop {
            let x = (a + step).min(hi_lim);
            let gx = slope(x)?;
            if gx <= 0.0 {
                (b, gb) = (x, gx);
                break;
            }
            (a, ga) = (x, gx);
            if x >= hi_lim {
                (b, gb) = (x, gx);
                break;
            }
            step *= 2.0;
        }
    } else {
        (b, gb) = (x0, g0);
        loop {
            let x = (b - step).max(lo_lim);
            let gx = slope(x)?;
            if gx >= 0.0 {
                (a, ga) = (x, gx);
                break;
            }
            (b, gb) = (x, gx);
            if x <= lo_lim {
                (a, ga) = (x, gx);
                break;
            }
            step *= 2.0;
        }
    }
    if !(ga > 0.0 && gb < 0.0) {
        return Ok(if ga <= 0.0 { a } else { b });
    }
    let mut side = 0i8;
    let mut theta = 0.5 * (a + b);
    for _ in 0..200 {
        if b - a <= 1e-13 {
            break;
        }
        let mut x = a - ga * (b - a) / (gb - ga);
        if !(x > a && x < b) {
            x = 0.5 * (a + b);
        }
        let gx = slope(x)?;
        theta = x;
        if gx == 0.0 {
            break;
        }
        if gx > 0.0 {
            (a, ga) = (x, gx);
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            (b, gb) = (x, gx);
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    Ok(theta)
}

/// Maximize `J̄(cos θ u1 + sin θ v)` over `θ ∈ (0, π)` starting from `theta0`.
///
/// For a constant `u1` the gradient part scales as `sin^p θ`, so the peak is
/// the minimizer of the convex function `t ↦ G(t u1 + v)` with `t = cot θ`.
/// Otherwise a bracketed secant iteration (Illinois variant) runs on the
/// exact derivative in `θ`.
pub fn peak_selection(
    p: PSetting,
    mesh: &Mesh,
    transport: &TransportData,
    u1: &FeFunction,
    v: &FeFunction,
    theta0: f64,
) -> Result<PeakSelection, EigenError> {
    let (theta, u) = plane_peak(p, mesh, transport, u1, v, theta0)?;
    complete_peak(p, mesh, transport, theta, u)
}

/// Peak angle and the normalized peak function.
fn plane_peak(
    p: PSetting,
    mesh: &Mesh,
    transport: &TransportData,
    u1: &FeFunction,
    v: &FeFunction,
    theta0: f64,
) -> Result<(f64, FeFunction), EigenError> {
    let w = lumped_mass(mesh);
    let (a1, b1) = (u1.values(), v.values());
    let uu: f64 = w.iter().zip(a1).map(|(w, a)| w * a * a).sum();
    let vv: f64 = w.iter().zip(b1).map(|(w, b)| w * b * b).sum();
    let uv: f64 = w.iter().zip(a1.iter().zip(b1)).map(|(w, (a, b))| w * a * b).sum();
    let sin2 = 1.0 - uv * uv / (uu * vv);
    if !(sin2 > 1e-20) {
        return Err(EigenError::DegeneratePeak { t2: sin2.max(0.0).sqrt() });
    }
    let theta = match constant_value(a1) {
        Some(c) => constant_peak(p, mesh, c, v, theta0),
        None => secant_peak(p, mesh, transport, a1, b1, theta0)?,
    };
    let (t2, t1) = theta.sin_cos();
    if t2.abs() < 1e-10 {
        return Err(EigenError::DegeneratePeak { t2 });
    }
    Ok((theta, normalize(mesh, &combine(a1, b1, t1, t2), p)?))
}

fn complete_peak(
    p: PSetting,
    mesh: &Mesh,
    transport: &TransportData,
    theta: f64,
    u: FeFunction,
) -> Result<PeakSelection, EigenError> {
    let (t2, t1) = theta.sin_cos();
    let (value, residual) = derivative(mesh, &u, p, transport)?;
    Ok(PeakSelection {
        theta,
        t1,
        t2,
        u,
        value,
        residual,
    })
}

/// Second eigenpair on a boundaryless domain by peak-selection descent,
/// with the constant first eigenfunction frozen.
pub fn solve_second(
    p: PSetting,
    mesh: &Mesh,
    transport: &TransportData,
    params: &SolverParams,
    v0: &FeFunction,
) -> Result<EigenPair, EigenError> {
    check_exponent(p)?;
    params.validate()?;
    if mesh.domain().has_boundary() {
        return Err(EigenError::Unsupported(
            "second eigenpairs are computed on boundaryless domains only",
        ));
    }
    let constraint = natural_constraint(mesh);
    let op = DescentOperator::new(mesh, transport, constraint.clone())?;
    let u1 = normalize(mesh, &FeFunction::new(vec![1.0; mesh.num_nodes()]), p)?;
    let mut v = v0.clone();
    constraint.project(v.values_mut());
    let mut v = normalize(mesh, &v, p)?;
    let mut peak = peak_selection(p, mesh, transport, &u1, &v, 0.5 * PI)?;
    let mut history = Vec::new();
    let mut warm: Option<Vec<f64>> = None;

    let finish = |peak: PeakSelection, history: Vec<IterationRecord>, t| -> Result<EigenPair, EigenError> {
        let u = center_maximum_in_y(mesh, &fix_sign(mesh, peak.u));
        let lambda = functional(mesh, &u, p, transport)?.j;
        Ok(EigenPair {
            p: p.p,
            lambda,
            u,
            iterations: history.len().saturating_sub(1),
            history,
            termination: t,
            init: Initialization::Supplied,
        })
    };

    for _ in 0..params.max_iter {
        let dir = op.solve(&peak.residual, warm.as_deref())?;
        let gnorm = lp_norm(mesh, &FeFunction::new(dir.grad.clone()), p);
        let t2 = peak.t2.abs();
        if gnorm <= params.grad_tol {
            history.push(record(&peak.value, 0.0, gnorm, dir.slope, t2));
            return finish(peak, history, Termination::Converged);
        }
        if gnorm == 0.0 || dir.slope <= 0.0 {
            history.push(record(&peak.value, 0.0, gnorm, dir.slope, t2));
            return finish(peak, history, Termination::Stationary);
        }
        let sign = peak.t2.signum();
        let mut s = params.alpha / gnorm.max(1.0);
        let mut accepted = None;
        for _ in 0..=params.max_halvings {
            if s < params.step_tol {
                break;
            }
            let trial = v.axpy(-s * sign, &dir.grad);
            if let Ok(trial) = normalize(mesh, &trial, p) {
                match plane_peak(p, mesh, transport, &u1, &trial, peak.theta) {
                    Ok((theta, w)) => {
                        if quotient(mesh, &w, p, transport)? <= peak.value.j - 0.25 * s * t2 * dir.slope {
                            accepted = Some((trial, theta, w));
                            break;
                        }
                    }
                    Err(EigenError::DegeneratePeak { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            s *= 0.5;
        }
        let Some((next_v, theta, w)) = accepted else {
            log::warn!(
                "p = {}: no Armijo step above {:.1e}; stopping at gradient norm {gnorm:.3e}",
                p.p,
                params.step_tol
            );
            history.push(record(&peak.value, 0.0, gnorm, dir.slope, t2));
            return finish(peak, history, Termination::StepTolerance);
        };
        history.push(record(&peak.value, s, gnorm, dir.slope, t2));
        if history.len() % 500 == 0 {
            log::debug!("p = {}: iteration {} J = {:.10} |d| = {gnorm:.3e}", p.p, history.len(), peak.value.j);
        }
        v = next_v;
        peak = complete_peak(p, mesh, transport, theta, w)?;
        warm = Some(dir.grad);
    }
    let dir = op.solve(&peak.residual, warm.as_deref())?;
    let gnorm = lp_norm(mesh, &FeFunction::new(dir.grad), p);
    history.push(record(&peak.value, 0.0, gnorm, dir.slope, peak.t2.abs()));
    Err(EigenError::MaxIterations(Box::new(finish(
        peak,
        history,
        Termination::MaxIterations,
    )?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderMode {
    /// Every exponent starts from the linear eigenfunction.
    Cold,
    /// Each exponent starts from the previous exponent's solution.
    Warm,
}

/// Solve for each exponent in `targets` (sorted descending).
pub fn p_ladder(
    targets: &[f64],
    mesh: &Mesh,
    transport: &TransportData,
    params: &SolverParams,
    which: Which,
    mode: LadderMode,
) -> Result<Vec<EigenPair>, EigenError> {
    if targets.windows(2).any(|w| w[1] >= w[0]) {
        return Err(EigenError::InvalidParams(
            "ladder exponents must be strictly descending".into(),
        ));
    }
    let settings = targets
        .iter()
        .map(|&p| {
            let s = PSetting::new(p)?;
            check_exponent(s)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>, EigenError>>()?;
    let init = init_p2(mesh, transport, which, &natural_constraint(mesh))?;
    let mut out: Vec<EigenPair> = Vec::with_capacity(targets.len());
    for p in settings {
        let (start, how) = match (mode, out.last()) {
            (LadderMode::Warm, Some(prev)) => (&prev.u, Initialization::Warm { from_p: prev.p }),
            _ => (&init.u, Initialization::LinearP2),
        };
        let mut pair = match which {
            Which::First => solve_first(p, mesh, transport, params, start)?,
            Which::Second => solve_second(p, mesh, transport, params, start)?,
        };
        pair.init = how;
        out.push(pair);
    }
    Ok(out)
}

/// Largest value of `⟨u, A u⟩ / ⟨u, u⟩` on `span(x, y)`.
fn plane_max(a: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)] * x[j]).sum()).collect();
    let ay: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)] * y[j]).sum()).collect();
    let (kxx, kxy, kyy) = (dot(x, &ax), 0.5 * (dot(x, &ay) + dot(y, &ax)), dot(y, &ay));
    let (gxx, gxy, gyy) = (dot(x, x), dot(x, y), dot(y, y));
    // det(K - μ G) = 0
    let qa = gxx * gyy - gxy * gxy;
    let qb = -(kxx * gyy + kyy * gxx - 2.0 * kxy * gxy);
    let qc = kxx * kyy - kxy * kxy;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    (-qb + disc) / (2.0 * qa)
}

/// Brute-force min-max value for a small symmetric matrix: the minimum over
/// `v` in the fixed complement `{v : v_k = 0}` of the maximum Rayleigh
/// quotient on `span(u1, v)`, where `u1` is the lowest eigenvector found by
/// shifted power iteration and `k` its largest entry. Equals the second
/// smallest eigenvalue.
pub fn minmax_oracle(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    assert!(n == a.ncols() && (2..=8).contains(&n), "oracle needs a square matrix of size 2..=8");

    // shifted power iteration on σI − A
    let sigma = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let b = DMatrix::identity(n, n) * sigma - a;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut u1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut prev = f64::NAN;
    for _ in 0..1_000_000 {
        let next: Vec<f64> = (0..n).map(|i| (0..n).map(|j| b[(i, j)] * u1[j]).sum()).collect();
        let nrm = dot(&next, &next).sqrt();
        u1 = next.iter().map(|v| v / nrm).collect();
        let au: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)] * u1[j]).sum()).collect();
        let val = dot(&u1, &au);
        if (val - prev).abs() <= 1e-15 * sigma {
            break;
        }
        prev = val;
    }
    let k = (0..n)
        .max_by(|&i, &j| u1[i].abs().total_cmp(&u1[j].abs()))
        .unwrap_or(0);

    // minimize over the complement, parameterized by the n−1 free entries
    let embed = |c: &[f64]| -> Vec<f64> {
        let mut v = Vec::with_capacity(n);
        let mut it = c.iter();
        for i in 0..n {
            v.push(if i == k { 0.0 } else { *it.next().unwrap() });
        }
        v
    };
    let objective = |c: &[f64]| -> f64 {
        let norm = dot(c, c).sqrt();
        if norm < 1e-300 {
            return f64::INFINITY;
        }
        plane_max(a, &u1, &embed(c))
    };

    let mut samples: Vec<(f64, Vec<f64>)> = (0..400)
        .map(|_| {
            let c: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
            (objective(&c), c)
        })
        .collect();
    samples.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut best = f64::INFINITY;
    for (mut fc, mut c) in samples.into_iter().take(4) {
        let mut step = 0.5;
        while step > 1e-10 {
            let mut improved = false;
            for i in 0..n - 1 {
                for sgn in [1.0, -1.0] {
                    let mut t = c.clone();
                    t[i] += sgn * step;
                    let nrm = dot(&t, &t).sqrt();
                    t.iter_mut().for_each(|x| *x /= nrm);
                    let ft = objective(&t);
                    if ft < fc {
                        (fc, c) = (ft, t);
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.min(fc);
    }
    best
}
