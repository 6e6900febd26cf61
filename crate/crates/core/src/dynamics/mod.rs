//! Volume-preserving maps, their Jacobians, and the per-triangle transport
//! data `A = DT^{-T}`, `W = (I + AᵀA)/2` consumed by the dynamic functional.

mod cache;
pub mod ode;

use std::f64::consts::PI;

use nalgebra::Matrix2;
use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{Domain, Mesh, Point};
pub use cache::{read_header, CacheStatus, TransportCache, CACHE_FORMAT_VERSION};
pub use ode::OdeTolerances;

pub type Mat2 = Matrix2<f64>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step size underflow at t = {t} (state {state:?})")]
    StepUnderflow { t: f64, state: Vec<f64> },
    #[error("step budget exhausted at t = {t} (state {state:?})")]
    TooManySteps { t: f64, state: Vec<f64> },
    #[error("non-finite state at t = {t} (state {state:?})")]
    NonFinite { t: f64, state: Vec<f64> },
    #[error("flow evaluation failed for initial point ({x}, {y}): {source}")]
    Trajectory {
        x: f64,
        y: f64,
        #[source]
        source: Box<FlowError>,
    },
    #[error("singular Jacobian (det = {det:.3e}) at triangle {tri}")]
    SingularJacobian { tri: usize, det: f64 },
    #[error("transport has {got} entries, mesh has {expected} triangles")]
    Mismatch { expected: usize, got: usize },
    #[error("cache file {path}: {msg}")]
    CacheFormat { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that maps points of a domain to points of the same domain.
pub trait PointMap: Sync {
    fn map_point(&self, x: Point) -> Result<Point, FlowError>;

    /// Lets callers skip evaluation entirely for the identity.
    fn is_identity(&self) -> bool {
        false
    }
}

/// Adapter turning a plain closure into a [`PointMap`].
pub struct FnMap<F>(pub F);

impl<F> PointMap for FnMap<F>
where
    F: Fn(Point) -> Point + Sync,
{
    fn map_point(&self, x: Point) -> Result<Point, FlowError> {
        Ok((self.0)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderParams {
    pub c: f64,
    pub nu: f64,
    pub epsilon: f64,
}

impl Default for CylinderParams {
    fn default() -> Self {
        Self {
            c: 0.5,
            nu: 0.5,
            epsilon: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    Identity,
    /// Time-one map of the transitory double gyre on the unit square.
    TransitoryDoubleGyre,
    /// Flow map of the perturbed travelling-wave field on `2πS¹ x [0, π]`.
    CylinderFlow(CylinderParams),
    /// `(x, y) ↦ (x + y + a sin x, y + a sin x) mod 2π` on the flat torus.
    StandardMap { a: f64 },
}

pub const STANDARD_MAP_A: f64 = 0.971635;
pub const CYLINDER_FLOW_TIME: f64 = 40.0;

/// A diffeomorphism `T` with point evaluation and Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMap {
    pub kind: FlowKind,
    /// Integration interval `[0, flow_time]` for ODE-driven kinds.
    pub flow_time: f64,
    pub tolerances: OdeTolerances,
}

impl FlowMap {
    pub fn identity() -> Self {
        Self::with_kind(FlowKind::Identity, 0.0)
    }

    pub fn transitory_double_gyre() -> Self {
        Self::with_kind(FlowKind::TransitoryDoubleGyre, 1.0)
    }

    pub fn cylinder_flow() -> Self {
        Self::with_kind(
            FlowKind::CylinderFlow(CylinderParams::default()),
            CYLINDER_FLOW_TIME,
        )
    }

    pub fn standard_map(a: f64) -> Self {
        Self::with_kind(FlowKind::StandardMap { a }, 1.0)
    }

    fn with_kind(kind: FlowKind, flow_time: f64) -> Self {
        Self {
            kind,
            flow_time,
            tolerances: OdeTolerances::default(),
        }
    }

    pub fn with_flow_time(mut self, t: f64) -> Self {
        self.flow_time = t;
        self
    }

    pub fn with_tolerances(mut self, tol: OdeTolerances) -> Self {
        self.tolerances = tol;
        self
    }

    /// The domain the map naturally acts on; `None` for the identity.
    pub fn natural_domain(&self) -> Option<Domain> {
        match self.kind {
            FlowKind::Identity => None,
            FlowKind::TransitoryDoubleGyre => Some(Domain::unit_square()),
            FlowKind::CylinderFlow(_) => Some(Domain::cylinder(2.0 * PI, PI).unwrap()),
            FlowKind::StandardMap { .. } => Some(Domain::torus(2.0 * PI, 2.0 * PI).unwrap()),
        }
    }

    /// Textual identity of the map, parameters and tolerances included.
    pub fn description(&self) -> String {
        match self.kind {
            FlowKind::Identity => "identity".to_string(),
            FlowKind::StandardMap { a } => format!("standard_map a={a:.16e}"),
            FlowKind::TransitoryDoubleGyre => format!(
                "double_gyre time={:.16e} abs={:.3e} rel={:.3e} h0={:.3e}",
                self.flow_time,
                self.tolerances.abs,
                self.tolerances.rel,
                self.tolerances.initial_step
            ),
            FlowKind::CylinderFlow(p) => format!(
                "cylinder c={:.16e} nu={:.16e} eps={:.16e} time={:.16e} abs={:.3e} rel={:.3e} h0={:.3e}",
                p.c,
                p.nu,
                p.epsilon,
                self.flow_time,
                self.tolerances.abs,
                self.tolerances.rel,
                self.tolerances.initial_step
            ),
        }
    }

    fn wrap(&self, p: Point) -> Point {
        match self.natural_domain() {
            Some(d) => d.wrap(p),
            None => p,
        }
    }

    /// `T(x)`, reduced into the fundamental domain.
    pub fn apply(&self, x: Point) -> Result<Point, FlowError> {
        let y = match self.kind {
            FlowKind::Identity => return Ok(x),
            FlowKind::StandardMap { a } => {
                let s = a * x.x.sin();
                Point::new(x.x + x.y + s, x.y + s)
            }
            FlowKind::TransitoryDoubleGyre => {
                let f = |t: f64, s: &[f64; 2]| double_gyre(t, s[0], s[1]).0;
                self.trajectory(f, x)?
            }
            FlowKind::CylinderFlow(p) => {
                let f = |t: f64, s: &[f64; 2]| cylinder(&p, t, s[0], s[1]).0;
                self.trajectory(f, x)?
            }
        };
        Ok(self.wrap(y))
    }

    /// `DT(x)`.
    pub fn jacobian(&self, x: Point) -> Result<Mat2, FlowError> {
        self.apply_with_jacobian(x).map(|(_, j)| j)
    }

    /// `T(x)` and `DT(x)` together. ODE flows integrate the variational
    /// equation `Ḋ = ∇v D` alongside the trajectory.
    pub fn apply_with_jacobian(&self, x: Point) -> Result<(Point, Mat2), FlowError> {
        match self.kind {
            FlowKind::Identity => Ok((x, Mat2::identity())),
            FlowKind::StandardMap { a } => {
                let c = a * x.x.cos();
                let j = Mat2::new(1.0 + c, 1.0, c, 1.0);
                Ok((self.apply(x)?, j))
            }
            FlowKind::TransitoryDoubleGyre => {
                self.variational(|t, px, py| double_gyre(t, px, py), x)
            }
            FlowKind::CylinderFlow(p) => self.variational(|t, px, py| cylinder(&p, t, px, py), x),
        }
    }

    fn trajectory<F>(&self, f: F, x: Point) -> Result<Point, FlowError>
    where
        F: Fn(f64, &[f64; 2]) -> [f64; 2],
    {
        let y = ode::integrate(f, [x.x, x.y], 0.0, self.flow_time, &self.tolerances)
            .map_err(|e| trajectory_error(x, e))?;
        Ok(Point::new(y[0], y[1]))
    }

    fn variational<F>(&self, field: F, x: Point) -> Result<(Point, Mat2), FlowError>
    where
        F: Fn(f64, f64, f64) -> ([f64; 2], Mat2),
    {
        let rhs = |t: f64, s: &[f64; 6]| {
            let (v, g) = field(t, s[0], s[1]);
            let d = Mat2::new(s[2], s[3], s[4], s[5]);
            let gd = g * d;
            [v[0], v[1], gd[(0, 0)], gd[(0, 1)], gd[(1, 0)], gd[(1, 1)]]
        };
        let y0 = [x.x, x.y, 1.0, 0.0, 0.0, 1.0];
        let y = ode::integrate(rhs, y0, 0.0, self.flow_time, &self.tolerances)
            .map_err(|e| trajectory_error(x, e))?;
        Ok((
            self.wrap(Point::new(y[0], y[1])),
            Mat2::new(y[2], y[3], y[4], y[5]),
        ))
    }
}

fn trajectory_error(x: Point, e: FlowError) -> FlowError {
    FlowError::Trajectory {
        x: x.x,
        y: x.y,
        source: Box::new(e),
    }
}

impl PointMap for FlowMap {
    fn map_point(&self, x: Point) -> Result<Point, FlowError> {
        self.apply(x)
    }

    fn is_identity(&self) -> bool {
        self.kind == FlowKind::Identity
    }
}

/// Velocity and velocity gradient of the transitory double gyre.
fn double_gyre(t: f64, x: f64, y: f64) -> ([f64; 2], Mat2) {
    let s = if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * (3.0 - 2.0 * t)
    };
    let (s1x, c1x) = (PI * x).sin_cos();
    let (s2x, c2x) = (2.0 * PI * x).sin_cos();
    let (s1y, c1y) = (PI * y).sin_cos();
    let (s2y, c2y) = (2.0 * PI * y).sin_cos();
    let pi2 = PI * PI;

    // psi_P = sin(2πx) sin(πy), psi_F = sin(πx) sin(2πy)
    let (p_x, p_y) = (2.0 * PI * c2x * s1y, PI * s2x * c1y);
    let (f_x, f_y) = (PI * c1x * s2y, 2.0 * PI * s1x * c2y);
    let (p_xx, p_yy, p_xy) = (-4.0 * pi2 * s2x * s1y, -pi2 * s2x * s1y, 2.0 * pi2 * c2x * c1y);
    let (f_xx, f_yy, f_xy) = (-pi2 * s1x * s2y, -4.0 * pi2 * s1x * s2y, 2.0 * pi2 * c1x * c2y);

    let mix = |p: f64, f: f64| (1.0 - s) * p + s * f;
    let (psi_x, psi_y) = (mix(p_x, f_x), mix(p_y, f_y));
    let (psi_xx, psi_yy, psi_xy) = (mix(p_xx, f_xx), mix(p_yy, f_yy), mix(p_xy, f_xy));

    // (u, v) = (∂yψ, -∂xψ)
    (
        [psi_y, -psi_x],
        Mat2::new(psi_xy, psi_yy, -psi_xx, -psi_xy),
    )
}

/// Velocity and velocity gradient of the cylinder flow.
fn cylinder(p: &CylinderParams, t: f64, x: f64, y: f64) -> ([f64; 2], Mat2) {
    let amp = 1.0 + (2.0 * 5f64.sqrt() * t).sin() / 8.0;
    let (sp, cp) = (x - p.nu * t).sin_cos();
    let (sy, cy) = y.sin_cos();
    let g = sp * sy + y / 2.0 - PI / 4.0;
    let q = g * g + 1.0;
    let gamma = 1.0 / (q * q);
    let dgamma = -4.0 * g / (q * q * q);
    let (g_x, g_y) = (cp * sy, sp * cy + 0.5);
    let forcing = p.epsilon * (t / 2.0).sin();

    let u = p.c - amp * sp * cy + forcing * gamma;
    let v = amp * cp * sy;
    let grad = Mat2::new(
        -amp * cp * cy + forcing * dgamma * g_x,
        amp * sp * sy + forcing * dgamma * g_y,
        -amp * sp * sy,
        amp * cp * cy,
    );
    ([u, v], grad)
}

/// Transport data of one triangle, evaluated at its centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleTransport {
    pub mapped: Point,
    pub jacobian: Mat2,
    /// `DT^{-T}`.
    pub a: Mat2,
    /// `(I + AᵀA) / 2`.
    pub w: Mat2,
}

impl TriangleTransport {
    fn from_jacobian(mapped: Point, jacobian: Mat2) -> Option<Self> {
        let det = jacobian.determinant();
        if !(det.is_finite() && det.abs() > 1e-300) {
            return None;
        }
        let a = Mat2::new(
            jacobian[(1, 1)],
            -jacobian[(1, 0)],
            -jacobian[(0, 1)],
            jacobian[(0, 0)],
        ) / det;
        let w = (Mat2::identity() + a.transpose() * a) * 0.5;
        Some(Self {
            mapped,
            jacobian,
            a,
            w,
        })
    }
}

/// Per-triangle `T(c)`, `DT(c)`, `A(c)` and `W(c)` at the centroids `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportData {
    entries: Vec<TriangleTransport>,
    identity: bool,
}

impl TransportData {
    /// `A = W = I` on every triangle.
    pub fn identity(mesh: &Mesh) -> Self {
        let entries = mesh
            .geometry()
            .iter()
            .map(|g| TriangleTransport {
                mapped: g.centroid,
                jacobian: Mat2::identity(),
                a: Mat2::identity(),
                w: Mat2::identity(),
            })
            .collect();
        Self {
            entries,
            identity: true,
        }
    }

    /// Build from externally supplied images and Jacobians (one per triangle).
    pub fn from_jacobians(
        mesh: &Mesh,
        mapped: &[Point],
        jacobians: &[Mat2],
    ) -> Result<Self, FlowError> {
        let n = mesh.num_triangles();
        if mapped.len() != n || jacobians.len() != n {
            return Err(FlowError::Mismatch {
                expected: n,
                got: mapped.len().min(jacobians.len()),
            });
        }
        let entries = mapped
            .iter()
            .zip(jacobians)
            .enumerate()
            .map(|(tri, (&m, &j))| {
                TriangleTransport::from_jacobian(m, j).ok_or(FlowError::SingularJacobian {
                    tri,
                    det: j.determinant(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            entries,
            identity: false,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn entries(&self) -> &[TriangleTransport] {
        &self.entries
    }

    /// `W` per triangle, the weight of the conditioned descent form.
    pub fn weights(&self) -> Vec<Mat2> {
        self.entries.iter().map(|e| e.w).collect()
    }

    /// `max |det DT - 1|` over all triangles.
    pub fn max_volume_defect(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| (e.jacobian.determinant() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue of `W` over all triangles.
    pub fn min_w_eigenvalue(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| sym_min_eigenvalue(&e.w))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<(), FlowError> {
        if self.len() != mesh.num_triangles() {
            return Err(FlowError::Mismatch {
                expected: mesh.num_triangles(),
                got: self.len(),
            });
        }
        Ok(())
    }
}

/// Smallest eigenvalue of a symmetric 2x2 matrix.
pub fn sym_min_eigenvalue(m: &Mat2) -> f64 {
    let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    mean - r
}

/// Evaluate `T` and `DT` at every triangle centroid of `mesh`, in parallel.
pub fn precompute_transport(map: &FlowMap, mesh: &Mesh) -> Result<TransportData, FlowError> {
    if map.kind == FlowKind::Identity {
        return Ok(TransportData::identity(mesh));
    }
    let evaluated: Vec<(Point, Mat2)> = mesh
        .geometry()
        .par_iter()
        .map(|g| map.apply_with_jacobian(g.centroid))
        .collect::<Result<_, _>>()?;
    let (mapped, jac): (Vec<_>, Vec<_>) = evaluated.into_iter().unzip();
    TransportData::from_jacobians(mesh, &mapped, &jac)
}
