//! Level sets of P1 functions on structured meshes: extraction by marching
//! squares, areas, boundary lengths before and after transport, and
//! (dynamic) Cheeger ratios over a sweep of levels.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{FlowError, PointMap};
use crate::fem::FeFunction;
use crate::mesh::{Domain, Mesh, Point};

/// Default relative tolerance for evolved-length refinement.
pub const DEFAULT_REFINE_TOL: f64 = 1e-3;
/// Maximal bisection depth per contour segment.
pub const MAX_REFINE_DEPTH: u32 = 12;
/// Default number of sampled levels.
pub const DEFAULT_LEVELS: usize = 100;

#[derive(Debug, Error)]
pub enum CheegerError {
    #[error("function has no positive values; no superlevel sets to analyze")]
    NoPositiveValues,
    #[error("every sampled level produced an empty contour")]
    AllLevelsEmpty,
    #[error("shoelace areas need a non-periodic domain; use vertex counting")]
    ShoelaceOnPeriodic,
    #[error("reference grid must have at least one cell in each direction")]
    EmptyReferenceGrid,
    #[error("function has {got} values, mesh has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// A polyline through contour crossing points. Consecutive points are
/// stored reduced into the domain; lengths unwrap periodic seams.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub points: Vec<Point>,
    pub closed: bool,
}

/// All chains of one level. Chains are oriented with the superlevel set on
/// their left.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourSet {
    pub level: f64,
    pub chains: Vec<Chain>,
    pub domain: Domain,
}

impl ContourSet {
    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    /// Total Euclidean length of all chains.
    pub fn length(&self) -> f64 {
        self.chains.iter().map(|c| chain_length(&self.domain, c)).sum()
    }

    /// Plain-text dump: a `# level` line, then per chain a `# chain` header
    /// and one `x y` line per vertex, chains separated by blank lines.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# level {:.16e}", self.level)?;
        for (k, c) in self.chains.iter().enumerate() {
            writeln!(
                w,
                "# chain {k} closed={} points={}",
                u8::from(c.closed),
                c.points.len()
            )?;
            for p in &c.points {
                writeln!(w, "{:.16e} {:.16e}", p.x, p.y)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Length of a chain, unwrapping periodic seams.
pub fn chain_length(domain: &Domain, chain: &Chain) -> f64 {
    let pts = &chain.points;
    let mut len: f64 = pts
        .windows(2)
        .map(|w| domain.unwrap_displacement(w[0], w[1]).norm())
        .sum();
    if chain.closed && pts.len() > 1 {
        len += domain
            .unwrap_displacement(pts[pts.len() - 1], pts[0])
            .norm();
    }
    len
}

/// Grid edge identified by its lower/left node and direction
/// (0 = horizontal, 1 = vertical).
type EdgeKey = (usize, u8);

struct Grid<'a> {
    mesh: &'a Mesh,
    vals: &'a [f64],
    level: f64,
}

impl Grid<'_> {
    fn value(&self, i: usize, j: usize) -> f64 {
        self.vals[self.mesh.node_index(i, j)]
    }

    fn above(&self, i: usize, j: usize) -> bool {
        self.value(i, j) > self.level
    }

    fn key(&self, i: usize, j: usize, dir: u8) -> EdgeKey {
        (self.mesh.node_index(i, j), dir)
    }

    /// Crossing point on a canonical edge.
    fn point(&self, key: EdgeKey) -> Point {
        let (a, dir) = key;
        let m = self.mesh;
        let cols = m.columns();
        let (i, j) = (a % cols, a / cols);
        let (b, step) = if dir == 0 {
            (m.node_index(i + 1, j), Point::new(m.hx(), 0.0))
        } else {
            (m.node_index(i, j + 1), Point::new(0.0, m.hy()))
        };
        let (va, vb) = (self.vals[a], self.vals[b]);
        let t = ((self.level - va) / (vb - va)).clamp(0.0, 1.0);
        m.domain().wrap(m.nodes()[a] + step * t)
    }
}

/// Extract the level set `{u = level}` by marching squares on the grid
/// nodes. Saddle cells are resolved by the average of the four corners.
pub fn marching_squares(mesh: &Mesh, u: &FeFunction, level: f64) -> ContourSet {
    let vals = u.values();
    let empty = ContourSet {
        level,
        chains: Vec::new(),
        domain: *mesh.domain(),
    };
    let (lo, hi) = (u.min(), u.max());
    if !(level > lo && level < hi) {
        log::warn!("level {level} outside the range ({lo}, {hi}); contour is empty");
        return empty;
    }
    let g = Grid { mesh, vals, level };

    // oriented segments, each from an entry edge to an exit edge
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for j in 0..mesh.ny() {
        for i in 0..mesh.nx() {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let up = corners.map(|(a, b)| g.above(a, b));
            let keys = [g.key(i, j, 0), g.key(i + 1, j, 1), g.key(i, j + 1, 0), g.key(i, j, 1)];
            let entries: Vec<usize> = (0..4).filter(|&e| up[e] && !up[(e + 1) % 4]).collect();
            match entries.len() {
                0 => {}
                1 => {
                    let s = entries[0];
                    let exit = (0..4)
                        .find(|&e| !up[e] && up[(e + 1) % 4])
                        .expect("one entry implies one exit");
                    segments.push((keys[s], keys[exit]));
                }
                _ => {
                    let center = corners.iter().map(|&(a, b)| g.value(a, b)).sum::<f64>() / 4.0;
                    for &s in &entries {
                        let exit = if center > level { (s + 1) % 4 } else { (s + 3) % 4 };
                        segments.push((keys[s], keys[exit]));
                    }
                }
            }
        }
    }

    let next: HashMap<EdgeKey, usize> = segments.iter().enumerate().map(|(k, s)| (s.0, k)).collect();
    let incoming: HashSet<EdgeKey> = segments.iter().map(|s| s.1).collect();
    let mut used = vec![false; segments.len()];
    let mut chains = Vec::new();

    let follow = |start: usize, used: &mut Vec<bool>| -> Chain {
        let mut points = Vec::new();
        let mut k = start;
        loop {
            used[k] = true;
            points.push(g.point(segments[k].0));
            match next.get(&segments[k].1) {
                Some(&n) if n == start => return Chain { points, closed: true },
                Some(&n) if !used[n] => k = n,
                _ => {
                    points.push(g.point(segments[k].1));
                    return Chain {
                        points,
                        closed: false,
                    };
                }
            }
        }
    };
    for k in 0..segments.len() {
        if !used[k] && !incoming.contains(&segments[k].0) {
            chains.push(follow(k, &mut used));
        }
    }
    for k in 0..segments.len() {
        if !used[k] {
            chains.push(follow(k, &mut used));
        }
    }
    ContourSet {
        level,
        chains,
        domain: *mesh.domain(),
    }
}

/// How superlevel-set areas are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaMethod {
    /// Signed polygon area of the oriented contours, closed along the
    /// boundary. Non-periodic domains only.
    Shoelace,
    /// Vertices of a regular `nx × ny` reference grid where the interpolant
    /// exceeds the level, times the cell area.
    GridCount { nx: usize, ny: usize },
}

impl AreaMethod {
    /// Shoelace on rectangles, vertex counting at mesh resolution otherwise.
    pub fn natural(mesh: &Mesh) -> Self {
        if mesh.domain().is_periodic() {
            Self::GridCount {
                nx: mesh.nx(),
                ny: mesh.ny(),
            }
        } else {
            Self::Shoelace
        }
    }
}

fn shoelace(points: &[Point]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|k| {
            let (a, b) = (points[k], points[(k + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        * 0.5
}

/// Counter-clockwise arclength position of a boundary point.
fn boundary_position(d: &Domain, p: Point) -> f64 {
    let (w, h) = (d.width(), d.height());
    let dist = [
        (p.y - d.y_min).abs(),
        (p.x - d.x_max).abs(),
        (p.y - d.y_max).abs(),
        (p.x - d.x_min).abs(),
    ];
    let side = (0..4).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
    match side {
        0 => p.x - d.x_min,
        1 => w + (p.y - d.y_min),
        2 => w + h + (d.x_max - p.x),
        _ => 2.0 * w + h + (d.y_max - p.y),
    }
}

fn shoelace_area(mesh: &Mesh, u: &FeFunction, contours: &ContourSet) -> Result<f64, CheegerError> {
    let d = mesh.domain();
    if d.is_periodic() {
        return Err(CheegerError::ShoelaceOnPeriodic);
    }
    let mut area: f64 = contours
        .chains
        .iter()
        .filter(|c| c.closed)
        .map(|c| shoelace(&c.points))
        .sum();
    let open: Vec<&Chain> = contours.chains.iter().filter(|c| !c.closed && c.points.len() > 1).collect();
    if open.is_empty() {
        if u.values()[0] > contours.level {
            area += d.area();
        }
        return Ok(area);
    }

    let perim = 2.0 * (d.width() + d.height());
    let corners = [
        (d.width(), Point::new(d.x_max, d.y_min)),
        (d.width() + d.height(), Point::new(d.x_max, d.y_max)),
        (2.0 * d.width() + d.height(), Point::new(d.x_min, d.y_max)),
        (perim, Point::new(d.x_min, d.y_min)),
    ];
    let starts: Vec<f64> = open.iter().map(|c| boundary_position(d, c.points[0])).collect();
    let mut used = vec![false; open.len()];
    for first in 0..open.len() {
        if used[first] {
            continue;
        }
        let mut poly: Vec<Point> = Vec::new();
        let mut k = first;
        loop {
            used[k] = true;
            poly.extend_from_slice(&open[k].points);
            let end = boundary_position(d, *open[k].points.last().unwrap());
            let gap = |s: f64| (s - end).rem_euclid(perim);
            let nxt = (0..open.len())
                .min_by(|&a, &b| gap(starts[a]).total_cmp(&gap(starts[b])))
                .unwrap();
            let g = gap(starts[nxt]);
            // boundary corners passed on the way, in counter-clockwise order
            let mut passed: Vec<(f64, Point)> = corners
                .iter()
                .chain(corners.iter())
                .map(|&(s, p)| (s, p))
                .enumerate()
                .map(|(idx, (s, p))| (s + if idx >= 4 { perim } else { 0.0 }, p))
                .filter(|&(s, _)| s > end && s < end + g)
                .collect();
            passed.sort_by(|a, b| a.0.total_cmp(&b.0));
            poly.extend(passed.into_iter().map(|(_, p)| p));
            if used[nxt] {
                break;
            }
            k = nxt;
        }
        area += shoelace(&poly);
    }
    Ok(area)
}

fn grid_count_area(mesh: &Mesh, u: &FeFunction, level: f64, nx: usize, ny: usize) -> Result<f64, CheegerError> {
    if nx == 0 || ny == 0 {
        return Err(CheegerError::EmptyReferenceGrid);
    }
    let d = mesh.domain();
    let (hx, hy) = (d.width() / nx as f64, d.height() / ny as f64);
    let cols = if d.periodic_x { nx } else { nx + 1 };
    let rows = if d.periodic_y { ny } else { ny + 1 };
    let same_grid = nx == mesh.nx() && ny == mesh.ny();
    let mut count = 0usize;
    for j in 0..rows {
        for i in 0..cols {
            let v = if same_grid {
                u.values()[mesh.node_index(i, j)]
            } else {
                let p = Point::new(d.x_min + i as f64 * hx, d.y_min + j as f64 * hy);
                mesh.interpolate_at(u.values(), p)
            };
            if v > level {
                count += 1;
            }
        }
    }
    Ok(count as f64 * hx * hy)
}

/// Area of the superlevel set `{u > contours.level}`.
pub fn superlevel_area(
    mesh: &Mesh,
    u: &FeFunction,
    contours: &ContourSet,
    method: AreaMethod,
) -> Result<f64, CheegerError> {
    if u.len() != mesh.num_nodes() {
        return Err(CheegerError::LengthMismatch {
            expected: mesh.num_nodes(),
            got: u.len(),
        });
    }
    match method {
        AreaMethod::Shoelace => shoelace_area(mesh, u, contours),
        AreaMethod::GridCount { nx, ny } => grid_count_area(mesh, u, contours.level, nx, ny),
    }
}

fn image_length(
    map: &dyn PointMap,
    d: &Domain,
    a: Point,
    b: Point,
    ta: Point,
    tb: Point,
    tol: f64,
    depth: u32,
) -> Result<f64, CheegerError> {
    let l0 = d.unwrap_displacement(ta, tb).norm();
    if depth >= MAX_REFINE_DEPTH || l0 == 0.0 && (b - a).norm() == 0.0 {
        return Ok(l0);
    }
    let m = 0.5 * (a + b);
    let tm = map.map_point(d.wrap(m))?;
    let l1 = d.unwrap_displacement(ta, tm).norm() + d.unwrap_displacement(tm, tb).norm();
    if (l1 - l0).abs() <= tol * l1 {
        return Ok(l1);
    }
    Ok(image_length(map, d, a, m, ta, tm, tol, depth + 1)?
        + image_length(map, d, m, b, tm, tb, tol, depth + 1)?)
}

/// Length of the image of the contours under `map`. Each segment is
/// bisected until its image length changes by less than `refine_tol`
/// relative (at most [`MAX_REFINE_DEPTH`] levels deep).
pub fn evolved_length(
    contours: &ContourSet,
    map: &dyn PointMap,
    refine_tol: f64,
) -> Result<f64, CheegerError> {
    if map.is_identity() {
        return Ok(contours.length());
    }
    let d = &contours.domain;
    let mut total = 0.0;
    for c in &contours.chains {
        let pts = &c.points;
        if pts.len() < 2 {
            continue;
        }
        let images: Vec<Point> = pts.iter().map(|&p| map.map_point(p)).collect::<Result<_, _>>()?;
        let n = if c.closed { pts.len() } else { pts.len() - 1 };
        for k in 0..n {
            let l = (k + 1) % pts.len();
            let a = pts[k];
            let b = a + d.unwrap_displacement(a, pts[l]);
            total += image_length(map, d, a, b, images[k], images[l], refine_tol, 0)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    /// `ℓ(∂A) / |A|`.
    Static,
    /// `(ℓ(∂A) + ℓ(T∂A)) / (2|A|)`.
    DynamicDirichlet,
    /// `(ℓ(∂A) + ℓ(T∂A)) / (2 min(|A|, |M \ A|))`.
    DynamicNeumann,
}

impl RatioMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::DynamicDirichlet => "dynamic_dirichlet",
            Self::DynamicNeumann => "dynamic_neumann",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(Self::Static),
            "dynamic_dirichlet" | "dynamic" => Some(Self::DynamicDirichlet),
            "dynamic_neumann" | "neumann" => Some(Self::DynamicNeumann),
            _ => None,
        }
    }
}

/// Geometry and ratio of one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelRecord {
    pub level: f64,
    pub area: f64,
    pub boundary_length: f64,
    pub evolved_length: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub n_levels: usize,
    pub area: AreaMethod,
    pub refine_tol: f64,
}

impl SweepOptions {
    pub fn for_mesh(mesh: &Mesh) -> Self {
        Self {
            n_levels: DEFAULT_LEVELS,
            area: AreaMethod::natural(mesh),
            refine_tol: DEFAULT_REFINE_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetReport {
    pub mode: RatioMode,
    pub levels: Vec<LevelRecord>,
    /// Levels without a usable contour (empty, or zero denominator).
    pub skipped: Vec<f64>,
    pub min_ratio: f64,
    pub argmin_level: f64,
    pub median_ratio: f64,
}

impl LevelSetReport {
    /// CSV `level,area,boundary_length,evolved_length,ratio`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "level,area,boundary_length,evolved_length,ratio")?;
        for r in &self.levels {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.level, r.area, r.boundary_length, r.evolved_length, r.ratio
            )?;
        }
        Ok(())
    }

    pub fn best(&self) -> &LevelRecord {
        self.levels
            .iter()
            .find(|r| r.level == self.argmin_level)
            .expect("argmin level is one of the records")
    }
}

/// The sampled levels `t_k = max(u) k / (n + 1)`, `k = 1..=n`.
pub fn sample_levels(u: &FeFunction, n_levels: usize) -> Result<Vec<f64>, CheegerError> {
    let top = u.max();
    if !(top > 0.0) {
        return Err(CheegerError::NoPositiveValues);
    }
    Ok((1..=n_levels)
        .map(|k| top * k as f64 / (n_levels + 1) as f64)
        .collect())
}

fn ratio_of(mode: RatioMode, domain: &Domain, area: f64, len: f64, evolved: f64) -> f64 {
    let denom = match mode {
        RatioMode::DynamicNeumann => area.min(domain.area() - area),
        _ => area,
    };
    (len + evolved) / (2.0 * denom)
}

fn analyze_level(
    mesh: &Mesh,
    u: &FeFunction,
    map: &dyn PointMap,
    mode: RatioMode,
    opts: &SweepOptions,
    level: f64,
) -> Result<Option<LevelRecord>, CheegerError> {
    let contours = marching_squares(mesh, u, level);
    if contours.is_empty() {
        return Ok(None);
    }
    let area = superlevel_area(mesh, u, &contours, opts.area)?;
    let len = contours.length();
    let evolved = match mode {
        RatioMode::Static => len,
        _ => evolved_length(&contours, map, opts.refine_tol)?,
    };
    let ratio = ratio_of(mode, mesh.domain(), area, len, evolved);
    if !(ratio.is_finite() && ratio > 0.0) {
        return Ok(None);
    }
    Ok(Some(LevelRecord {
        level,
        area,
        boundary_length: len,
        evolved_length: evolved,
        ratio,
    }))
}

/// Analyze `n_levels` uniformly spaced positive levels of `u`.
pub fn sweep_levels(
    mesh: &Mesh,
    u: &FeFunction,
    map: &dyn PointMap,
    mode: RatioMode,
    opts: &SweepOptions,
) -> Result<LevelSetReport, CheegerError> {
    if u.len() != mesh.num_nodes() {
        return Err(CheegerError::LengthMismatch {
            expected: mesh.num_nodes(),
            got: u.len(),
        });
    }
    let levels = sample_levels(u, opts.n_levels)?;
    let results: Vec<Option<LevelRecord>> = levels
        .par_iter()
        .map(|&t| analyze_level(mesh, u, map, mode, opts, t))
        .collect::<Result<_, _>>()?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (t, r) in levels.iter().zip(results) {
        match r {
            Some(r) => records.push(r),
            None => skipped.push(*t),
        }
    }
    if records.is_empty() {
        return Err(CheegerError::AllLevelsEmpty);
    }
    let best = records
        .iter()
        .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
        .unwrap();
    let mut sorted: Vec<f64> = records.iter().map(|r| r.ratio).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(LevelSetReport {
        mode,
        min_ratio: best.ratio,
        argmin_level: best.level,
        median_ratio: median,
        levels: records,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{FlowMap, FnMap, STANDARD_MAP_A};
    use std::f64::consts::PI;

    fn square(n: usize) -> Mesh {
        Mesh::build(Domain::unit_square(), n, n).unwrap()
    }

    fn identity() -> FlowMap {
        FlowMap::identity()
    }

    fn disk(mesh: &Mesh, c: Point) -> FeFunction {
        let d = *mesh.domain();
        FeFunction::interpolate(mesh, |q| 0.09 - d.unwrap_displacement(c, q).norm_squared())
    }

    #[test]
    fn vertical_line_for_planar_function() {
        let m = square(20);
        let u = FeFunction::interpolate(&m, |q| q.x);
        let c = marching_squares(&m, &u, 0.5);
        assert_eq!(c.chains.len(), 1);
        assert!(!c.chains[0].closed);
        assert!((c.length() - 1.0).abs() < 1e-6);
        assert!(c.chains[0].points.iter().all(|p| (p.x - 0.5).abs() < 1e-12));
        let a = superlevel_area(&m, &u, &c, AreaMethod::Shoelace).unwrap();
        assert!((a - 0.5).abs() < 1e-12, "{a}");
    }

    #[test]
    fn superlevel_on_left_for_both_orientations() {
        let m = square(16);
        for (f, expect) in [
            (Box::new(|q: Point| q.x) as Box<dyn Fn(Point) -> f64>, 0.7),
            (Box::new(|q: Point| 1.0 - q.x), 0.7),
            (Box::new(|q: Point| q.y), 0.7),
            (Box::new(|q: Point| q.x + q.y), 1.0 - 0.5 * 0.3 * 0.3),
        ] {
            let u = FeFunction::interpolate(&m, f);
            let c = marching_squares(&m, &u, 0.3);
            let a = superlevel_area(&m, &u, &c, AreaMethod::Shoelace).unwrap();
            assert!((a - expect).abs() < 1e-12, "{a} vs {expect}");
        }
    }

    #[test]
    fn circle_length_and_areas() {
        let m = square(100);
        let u = disk(&m, Point::new(0.5, 0.5));
        let c = marching_squares(&m, &u, 0.0);
        assert_eq!(c.chains.len(), 1);
        assert!(c.chains[0].closed);
        assert!((c.length() - 2.0 * PI * 0.3).abs() < 0.01 * 2.0 * PI * 0.3);
        let exact = PI * 0.09;
        let a = superlevel_area(&m, &u, &c, AreaMethod::Shoelace).unwrap();
        assert!((a - exact).abs() < 0.01 * exact);
        let g = superlevel_area(&m, &u, &c, AreaMethod::GridCount { nx: 100, ny: 100 }).unwrap();
        assert!((g - exact).abs() < 0.02 * exact);
        let g2 = superlevel_area(&m, &u, &c, AreaMethod::GridCount { nx: 150, ny: 130 }).unwrap();
        assert!((g2 - exact).abs() < 0.02 * exact);
    }

    #[test]
    fn disk_across_torus_seam() {
        let d = Domain::torus(1.0, 1.0).unwrap();
        let m = Mesh::build(d, 100, 100).unwrap();
        let u = disk(&m, Point::new(0.05, 0.95));
        let c = marching_squares(&m, &u, 0.0);
        assert_eq!(c.chains.len(), 1);
        assert!(c.chains[0].closed);
        assert!((c.length() - 2.0 * PI * 0.3).abs() < 0.01 * 2.0 * PI * 0.3);
        let g = superlevel_area(&m, &u, &c, AreaMethod::natural(&m)).unwrap();
        assert!((g - PI * 0.09).abs() < 0.02 * PI * 0.09);
        assert!(superlevel_area(&m, &u, &c, AreaMethod::Shoelace).is_err());
    }

    #[test]
    fn band_on_cylinder_wraps() {
        let d = Domain::cylinder(2.0 * PI, PI).unwrap();
        let m = Mesh::build(d, 40, 20).unwrap();
        let u = FeFunction::interpolate(&m, |q| q.y.sin());
        let c = marching_squares(&m, &u, 0.5);
        // two horizontal circles y = π/6 and y = 5π/6
        assert_eq!(c.chains.len(), 2);
        assert!(c.chains.iter().all(|ch| ch.closed));
        assert!((c.length() - 4.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn constant_and_out_of_range_levels_are_empty() {
        let m = square(8);
        let u = FeFunction::interpolate(&m, |_| 1.0);
        assert!(marching_squares(&m, &u, 1.0).is_empty());
        let v = FeFunction::interpolate(&m, |q| q.x);
        assert!(marching_squares(&m, &v, 2.0).is_empty());
    }

    #[test]
    fn saddle_resolved_by_center_value() {
        let m = square(2);
        // lower-left cell has high corners (0,0) and (1,1)
        let mut vals = vec![0.0; 9];
        vals[m.node_index(0, 0)] = 1.0;
        vals[m.node_index(1, 1)] = 1.0;
        let u = FeFunction::new(vals);
        // center average 0.5: above it the high corners are joined
        let joined = marching_squares(&m, &u, 0.4);
        let split = marching_squares(&m, &u, 0.6);
        assert_eq!(joined.chains.len(), 1);
        assert!(!joined.chains[0].closed);
        assert_eq!(split.chains.len(), 2);
        assert_eq!(split.chains.iter().filter(|c| c.closed).count(), 1);
        let a = superlevel_area(&m, &u, &split, AreaMethod::Shoelace).unwrap();
        let corner = 0.5 * 0.2 * 0.2;
        let diamond = 4.0 * 0.5 * 0.2 * 0.2;
        assert!((a - corner - diamond).abs() < 1e-12, "{a}");
    }

    #[test]
    fn hole_area_is_subtracted() {
        let m = square(100);
        let u = FeFunction::interpolate(&m, |q| (q - Point::new(0.5, 0.5)).norm_squared());
        let c = marching_squares(&m, &u, 0.04);
        let a = superlevel_area(&m, &u, &c, AreaMethod::Shoelace).unwrap();
        let exact = 1.0 - PI * 0.04;
        assert!((a - exact).abs() < 0.01 * exact, "{a}");
    }

    #[test]
    fn cone_ratio_follows_disk_law() {
        let m = square(100);
        let u = FeFunction::interpolate(&m, |q| 0.5 - (q - Point::new(0.5, 0.5)).norm());
        let rep = sweep_levels(&m, &u, &identity(), RatioMode::Static, &SweepOptions::for_mesh(&m)).unwrap();
        for r in &rep.levels {
            let radius = 0.5 - r.level;
            if radius > 0.05 {
                assert!((r.ratio - 2.0 / radius).abs() < 0.02 * 2.0 / radius, "{} {}", r.level, r.ratio);
            }
        }
        assert_eq!(rep.argmin_level, rep.levels[0].level);
    }

    #[test]
    fn identity_dynamic_equals_static_exactly() {
        let m = square(40);
        let u = FeFunction::interpolate(&m, |q| (PI * q.x).sin() * (PI * q.y).sin());
        let opts = SweepOptions::for_mesh(&m);
        let s = sweep_levels(&m, &u, &identity(), RatioMode::Static, &opts).unwrap();
        let d = sweep_levels(&m, &u, &identity(), RatioMode::DynamicDirichlet, &opts).unwrap();
        assert_eq!(s.levels.len(), d.levels.len());
        for (a, b) in s.levels.iter().zip(&d.levels) {
            assert_eq!(a.ratio, b.ratio);
            assert_eq!(a.evolved_length, b.boundary_length);
        }
    }

    #[test]
    fn isometry_preserves_length() {
        let m = square(60);
        let u = disk(&m, Point::new(0.5, 0.5));
        let c = marching_squares(&m, &u, 0.0);
        let (s, co) = 0.7f64.sin_cos();
        let rot = FnMap(move |p: Point| {
            let q = p - Point::new(0.5, 0.5);
            Point::new(0.5 + co * q.x - s * q.y, 0.5 + s * q.x + co * q.y)
        });
        let l = evolved_length(&c, &rot, 1e-3).unwrap();
        assert!((l - c.length()).abs() < 1e-6 * c.length());
    }

    #[test]
    fn standard_map_segment_against_dense_sampling() {
        let d = Domain::torus(2.0 * PI, 2.0 * PI).unwrap();
        let map = FlowMap::standard_map(STANDARD_MAP_A);
        let c = ContourSet {
            level: 0.0,
            chains: vec![Chain {
                points: vec![d.wrap(Point::new(-0.5, 0.0)), Point::new(0.5, 0.0)],
                closed: false,
            }],
            domain: d,
        };
        let l = evolved_length(&c, &map, 1e-3).unwrap();
        let n = 10_000;
        let mut prev = map.apply(d.wrap(Point::new(-0.5, 0.0))).unwrap();
        let mut dense = 0.0;
        for k in 1..=n {
            let x = -0.5 + k as f64 / n as f64;
            let img = map.apply(d.wrap(Point::new(x, 0.0))).unwrap();
            dense += d.unwrap_displacement(prev, img).norm();
            prev = img;
        }
        assert!((l - dense).abs() < 1e-3 * dense, "{l} vs {dense}");
        // endpoint images follow the closed form
        let img = map.apply(Point::new(0.5, 0.0)).unwrap();
        let s = STANDARD_MAP_A * 0.5f64.sin();
        assert!((img - Point::new(0.5 + s, s)).norm() < 1e-14);
    }

    #[test]
    fn neumann_denominator_uses_smaller_part() {
        let d = Domain::torus(1.0, 1.0).unwrap();
        assert!((ratio_of(RatioMode::DynamicNeumann, &d, 0.8, 1.0, 1.0) - 5.0).abs() < 1e-12);
        assert!((ratio_of(RatioMode::DynamicDirichlet, &d, 0.8, 1.0, 1.0) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn report_csv_and_levels() {
        let m = square(20);
        let u = FeFunction::interpolate(&m, |q| (PI * q.x).sin() * (PI * q.y).sin());
        let opts = SweepOptions {
            n_levels: 9,
            ..SweepOptions::for_mesh(&m)
        };
        let rep = sweep_levels(&m, &u, &identity(), RatioMode::Static, &opts).unwrap();
        assert_eq!(rep.levels.len(), 9);
        assert!((rep.levels[0].level - u.max() / 10.0).abs() < 1e-15);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("level,area,boundary_length,evolved_length,ratio\n"));
        assert_eq!(text.lines().count(), 10);
        assert!(rep.best().ratio == rep.min_ratio);
        let neg = u.scaled(-1.0);
        assert!(matches!(
            sweep_levels(&m, &neg, &identity(), RatioMode::Static, &opts),
            Err(CheegerError::NoPositiveValues)
        ));
    }

    #[test]
    fn contour_dump_lists_chains() {
        let m = square(30);
        let u = disk(&m, Point::new(0.5, 0.5));
        let c = marching_squares(&m, &u, 0.0);
        let mut buf = Vec::new();
        c.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# level "));
        assert!(text.contains("# chain 0 closed=1"));
    }
}
