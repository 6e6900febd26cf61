//! Structured triangulations of axis-aligned rectangles.
//!
//! Every rectangular cell is split along its lower-left to upper-right
//! diagonal. Periodic directions are handled at the index level: the ghost
//! column (or row) at the far end of the grid maps back onto the canonical
//! nodes of the first column, so assembly code never needs to know about
//! seams.

use std::fmt;
use std::io::{self, Write};

use nalgebra::Vector2;
use thiserror::Error;

/// A point (or displacement) in the plane.
pub type Point = Vector2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("invalid domain bounds: [{x_min}, {x_max}] x [{y_min}, {y_max}]")]
    InvalidBounds {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    },
    #[error("grid needs at least 2 cells per direction, got {nx}x{ny}")]
    TooCoarse { nx: usize, ny: usize },
    #[error("degenerate triangle with signed area {0}")]
    DegenerateTriangle(f64),
}

/// An axis-aligned rectangle, optionally periodic in either coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub periodic_x: bool,
    pub periodic_y: bool,
}

impl Domain {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        periodic_x: bool,
        periodic_y: bool,
    ) -> Result<Self, MeshError> {
        let finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(MeshError::InvalidBounds {
                x_min,
                x_max,
                y_min,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            periodic_x,
            periodic_y,
        })
    }

    pub fn unit_square() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0, false, false).unwrap()
    }

    /// The flat torus `[0, lx) x [0, ly)`.
    pub fn torus(lx: f64, ly: f64) -> Result<Self, MeshError> {
        Self::new(0.0, lx, 0.0, ly, true, true)
    }

    /// The cylinder `[0, circumference) x [0, height]`, periodic in x.
    pub fn cylinder(circumference: f64, height: f64) -> Result<Self, MeshError> {
        Self::new(0.0, circumference, 0.0, height, true, false)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_torus(&self) -> bool {
        self.periodic_x && self.periodic_y
    }

    pub fn is_cylinder(&self) -> bool {
        self.periodic_x != self.periodic_y
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic_x || self.periodic_y
    }

    /// True when the domain has a nonempty boundary (anything but a torus).
    pub fn has_boundary(&self) -> bool {
        !self.is_torus()
    }

    /// Reduce a point into the fundamental domain along periodic directions.
    pub fn wrap(&self, p: Point) -> Point {
        let mut q = p;
        if self.periodic_x {
            q.x = wrap_coord(q.x, self.x_min, self.width());
        }
        if self.periodic_y {
            q.y = wrap_coord(q.y, self.y_min, self.height());
        }
        q
    }

    /// Shortest displacement from `a` to `b`, i.e. `b - a` shifted by whole
    /// periods so that each periodic component has magnitude at most half a
    /// period.
    pub fn unwrap_displacement(&self, a: Point, b: Point) -> Point {
        let mut d = b - a;
        if self.periodic_x {
            d.x = nearest_image(d.x, self.width());
        }
        if self.periodic_y {
            d.y = nearest_image(d.y, self.height());
        }
        d
    }

    /// Stable textual description, used in dump headers and cache keys.
    pub fn signature(&self) -> String {
        format!(
            "{:.16e} {:.16e} {:.16e} {:.16e} {} {}",
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            u8::from(self.periodic_x),
            u8::from(self.periodic_y)
        )
    }
}

fn wrap_coord(v: f64, lo: f64, period: f64) -> f64 {
    let w = lo + (v - lo).rem_euclid(period);
    // rem_euclid can round up to exactly `period`
    if w >= lo + period {
        lo
    } else {
        w
    }
}

fn nearest_image(d: f64, period: f64) -> f64 {
    d - period * (d / period).round()
}

/// Shortest periodic displacement from `a` to `b` on `domain`.
pub fn unwrap_displacement(domain: &Domain, a: Point, b: Point) -> Point {
    domain.unwrap_displacement(a, b)
}

/// Constant P1 data of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleGeometry {
    pub area: f64,
    /// Gradients of the three hat functions, in vertex order.
    pub grad_basis: [Point; 3],
    pub centroid: Point,
}

impl TriangleGeometry {
    /// Geometry of the triangle with counterclockwise vertices `v`.
    pub fn from_vertices(v: [Point; 3]) -> Result<Self, MeshError> {
        let e1 = v[1] - v[0];
        let e2 = v[2] - v[0];
        let twice_area = e1.x * e2.y - e1.y * e2.x;
        if twice_area <= 0.0 || !twice_area.is_finite() {
            return Err(MeshError::DegenerateTriangle(0.5 * twice_area));
        }
        let grad = |a: Point, b: Point| Point::new(a.y - b.y, b.x - a.x) / twice_area;
        Ok(Self {
            area: 0.5 * twice_area,
            grad_basis: [grad(v[1], v[2]), grad(v[2], v[0]), grad(v[0], v[1])],
            centroid: (v[0] + v[1] + v[2]) / 3.0,
        })
    }

    /// Gradient of the P1 function with vertex values `vals`.
    #[inline]
    pub fn gradient(&self, vals: [f64; 3]) -> Point {
        self.grad_basis[0] * vals[0] + self.grad_basis[1] * vals[1] + self.grad_basis[2] * vals[2]
    }
}

/// Uniform structured triangulation of a [`Domain`].
#[derive(Debug, Clone)]
pub struct Mesh {
    domain: Domain,
    nx: usize,
    ny: usize,
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_node: Vec<bool>,
    geometry: Vec<TriangleGeometry>,
}

impl Mesh {
    /// Build the `nx` by `ny` cell triangulation of `domain`.
    pub fn build(domain: Domain, nx: usize, ny: usize) -> Result<Self, MeshError> {
        // re-validate; the fields are public
        let domain = Domain::new(
            domain.x_min,
            domain.x_max,
            domain.y_min,
            domain.y_max,
            domain.periodic_x,
            domain.periodic_y,
        )?;
        if nx < 2 || ny < 2 {
            return Err(MeshError::TooCoarse { nx, ny });
        }
        let cols = if domain.periodic_x { nx } else { nx + 1 };
        let rows = if domain.periodic_y { ny } else { ny + 1 };
        let hx = domain.width() / nx as f64;
        let hy = domain.height() / ny as f64;

        let mut nodes = Vec::with_capacity(cols * rows);
        let mut boundary_node = Vec::with_capacity(cols * rows);
        for j in 0..rows {
            for i in 0..cols {
                nodes.push(Point::new(
                    domain.x_min + i as f64 * hx,
                    domain.y_min + j as f64 * hy,
                ));
                let on_x = !domain.periodic_x && (i == 0 || i == nx);
                let on_y = !domain.periodic_y && (j == 0 || j == ny);
                boundary_node.push(on_x || on_y);
            }
        }

        let mut mesh = Self {
            domain,
            nx,
            ny,
            nodes,
            triangles: Vec::with_capacity(2 * nx * ny),
            boundary_node,
            geometry: Vec::with_capacity(2 * nx * ny),
        };

        for j in 0..ny {
            for i in 0..nx {
                let ll = mesh.node_index(i, j);
                let lr = mesh.node_index(i + 1, j);
                let ul = mesh.node_index(i, j + 1);
                let ur = mesh.node_index(i + 1, j + 1);
                let p = |a: usize, b: usize| {
                    Point::new(
                        domain.x_min + a as f64 * hx,
                        domain.y_min + b as f64 * hy,
                    )
                };
                for (tri, verts) in [
                    ([ll, lr, ur], [p(i, j), p(i + 1, j), p(i + 1, j + 1)]),
                    ([ll, ur, ul], [p(i, j), p(i + 1, j + 1), p(i, j + 1)]),
                ] {
                    let mut g = TriangleGeometry::from_vertices(verts)?;
                    g.centroid = domain.wrap(g.centroid);
                    mesh.triangles.push(tri);
                    mesh.geometry.push(g);
                }
            }
        }
        Ok(mesh)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        self.domain.width() / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.domain.height() / self.ny as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_nodes(&self) -> &[bool] {
        &self.boundary_node
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_node[node]
    }

    /// Indices of all boundary nodes, ascending.
    pub fn boundary_indices(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| self.boundary_node[i]).collect()
    }

    /// Canonical node index of grid position `(i, j)`, `0 <= i <= nx`,
    /// `0 <= j <= ny`. Ghost positions on periodic seams map to the first
    /// column or row.
    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        let cols = self.columns();
        let i = if self.domain.periodic_x { i % self.nx } else { i };
        let j = if self.domain.periodic_y { j % self.ny } else { j };
        j * cols + i
    }

    /// Number of distinct node columns.
    pub fn columns(&self) -> usize {
        if self.domain.periodic_x {
            self.nx
        } else {
            self.nx + 1
        }
    }

    /// Number of distinct node rows.
    pub fn rows(&self) -> usize {
        if self.domain.periodic_y {
            self.ny
        } else {
            self.ny + 1
        }
    }

    pub fn triangle_geometry(&self, tri: usize) -> &TriangleGeometry {
        &self.geometry[tri]
    }

    pub fn geometry(&self) -> &[TriangleGeometry] {
        &self.geometry
    }

    /// Evaluate the P1 interpolant of nodal `values` at an arbitrary point.
    pub fn interpolate_at(&self, values: &[f64], p: Point) -> f64 {
        let d = &self.domain;
        let q = d.wrap(p);
        let fx = ((q.x - d.x_min) / self.hx()).clamp(0.0, self.nx as f64);
        let fy = ((q.y - d.y_min) / self.hy()).clamp(0.0, self.ny as f64);
        let i = (fx.floor() as usize).min(self.nx - 1);
        let j = (fy.floor() as usize).min(self.ny - 1);
        let (s, t) = (fx - i as f64, fy - j as f64);
        let ll = values[self.node_index(i, j)];
        let lr = values[self.node_index(i + 1, j)];
        let ul = values[self.node_index(i, j + 1)];
        let ur = values[self.node_index(i + 1, j + 1)];
        if t <= s {
            // lower triangle (ll, lr, ur)
            ll + s * (lr - ll) + t * (ur - lr)
        } else {
            // upper triangle (ll, ur, ul)
            ll + t * (ul - ll) + s * (ur - ul)
        }
    }

    /// Stable identity of the discretisation, used to match dumps and caches.
    pub fn signature(&self) -> String {
        format!("rect {} nx={} ny={}", self.domain.signature(), self.nx, self.ny)
    }

    /// Debug dump: one node per line `x y boundary_flag`, then one triangle
    /// per line `i j k`.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (p, &b) in self.nodes.iter().zip(&self.boundary_node) {
            writeln!(w, "{:.16e} {:.16e} {}", p.x, p.y, u8::from(b))?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

impl fmt::Display for Mesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} mesh, {} nodes, {} triangles",
            self.nx,
            self.ny,
            self.num_nodes(),
            self.num_triangles()
        )
    }
}
