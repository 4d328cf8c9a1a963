//! Simplicial meshes on intervals and rectangles, P1 fields, gradients,
//! quadrature, and a sampled Poincaré-constant estimator.
//!
//! Quadrature is the midpoint rule per segment in 1D and the 3-point
//! edge-midpoint rule per triangle in 2D: exact for the piecewise-constant
//! P1 gradient magnitudes and second order for nodal fields.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{Binding, EvalError, ExprAst};
use crate::modular;
use crate::nfunction::{ExponentModel, NFunctionMode, Point};

#[derive(Debug, Clone, Error)]
pub enum MeshError {
    #[error("{0}")]
    InvalidArg(String),
    #[error("expression evaluation failed at node {node}: {source}")]
    Interpolate {
        node: usize,
        #[source]
        source: EvalError,
    },
    #[error("field has {found} coefficients, mesh has {expected} nodes")]
    SizeMismatch { found: usize, expected: usize },
}

/// Uniform simplicial mesh of an interval or a rectangle.
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    nodes: Vec<Point>,
    segments: Vec<[usize; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    boundary_nodes: Vec<usize>,
    element_measures: Vec<f64>,
    qp_points: Vec<Point>,
    qp_weights: Vec<f64>,
    qp_per_element: usize,
    total_measure: f64,
}

/// Nodal coefficients of a P1 scalar function on some mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(mesh: &Mesh) -> Self {
        Field {
            values: vec![0.0; mesh.n_nodes()],
        }
    }

    /// Nodal evaluation of an expression in the spatial variables.
    pub fn interpolate(mesh: &Mesh, expr: &ExprAst) -> Result<Self, MeshError> {
        let mut values = Vec::with_capacity(mesh.n_nodes());
        for (i, p) in mesh.nodes.iter().enumerate() {
            let b = if mesh.dim == 1 {
                Binding::new().x(p.x)
            } else {
                Binding::new().x(p.x).y(p.y)
            };
            values.push(expr.eval(&b).map_err(|source| MeshError::Interpolate {
                node: i,
                source,
            })?);
        }
        Ok(Field { values })
    }

    pub fn check_size(&self, mesh: &Mesh) -> Result<(), MeshError> {
        if self.values.len() != mesh.n_nodes() {
            Err(MeshError::SizeMismatch {
                found: self.values.len(),
                expected: mesh.n_nodes(),
            })
        } else {
            Ok(())
        }
    }

    /// Zero the coefficients on the Dirichlet boundary.
    pub fn project_dirichlet(&mut self, mesh: &Mesh) {
        for &i in &mesh.boundary_nodes {
            self.values[i] = 0.0;
        }
    }
}

/// `n` uniform segments on `(a, b)`; boundary nodes are the endpoints.
pub fn build_interval_mesh(a: f64, b: f64, n: usize) -> Result<Mesh, MeshError> {
    if !(a < b) {
        return Err(MeshError::InvalidArg(format!("need a < b, got {a}, {b}")));
    }
    if n < 2 {
        return Err(MeshError::InvalidArg(format!("need n >= 2, got {n}")));
    }
    let h = (b - a) / n as f64;
    let nodes: Vec<Point> = (0..=n).map(|i| Point::x1(a + i as f64 * h)).collect();
    let segments: Vec<[usize; 2]> = (0..n).map(|i| [i, i + 1]).collect();
    let mut boundary = vec![false; n + 1];
    boundary[0] = true;
    boundary[n] = true;
    let element_measures: Vec<f64> = segments
        .iter()
        .map(|&[i, j]| nodes[j].x - nodes[i].x)
        .collect();
    let mut qp_points = Vec::with_capacity(n);
    let mut qp_weights = Vec::with_capacity(n);
    for &[i, j] in &segments {
        qp_points.push(Point::x1(0.5 * (nodes[i].x + nodes[j].x)));
        qp_weights.push(nodes[j].x - nodes[i].x);
    }
    Ok(Mesh {
        dim: 1,
        boundary_nodes: boundary
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect(),
        nodes,
        segments,
        triangles: Vec::new(),
        boundary,
        element_measures,
        qp_points,
        qp_weights,
        qp_per_element: 1,
        total_measure: b - a,
    })
}

/// `nx × ny` cells on `(0,lx) × (0,ly)`, each split into two triangles with
/// positive orientation; boundary nodes lie on the rectangle edge.
pub fn build_rect_mesh(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Mesh, MeshError> {
    if !(lx > 0.0 && ly > 0.0) {
        return Err(MeshError::InvalidArg(format!(
            "need positive side lengths, got {lx}, {ly}"
        )));
    }
    if nx < 2 || ny < 2 {
        return Err(MeshError::InvalidArg(format!(
            "need nx, ny >= 2, got {nx}, {ny}"
        )));
    }
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut boundary = vec![false; (nx + 1) * (ny + 1)];
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push(Point::new(i as f64 * hx, j as f64 * hy));
            if i == 0 || i == nx || j == 0 || j == ny {
                boundary[idx(i, j)] = true;
            }
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v01 = idx(i, j + 1);
            let v11 = idx(i + 1, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut element_measures = Vec::with_capacity(triangles.len());
    let mut qp_points = Vec::with_capacity(3 * triangles.len());
    let mut qp_weights = Vec::with_capacity(3 * triangles.len());
    for tri in &triangles {
        let [a, b, c] = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
        let area = 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
        debug_assert!(area > 0.0, "orientation must be positive");
        element_measures.push(area);
        // edge midpoints
        qp_points.push(Point::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y)));
        qp_points.push(Point::new(0.5 * (b.x + c.x), 0.5 * (b.y + c.y)));
        qp_points.push(Point::new(0.5 * (c.x + a.x), 0.5 * (c.y + a.y)));
        for _ in 0..3 {
            qp_weights.push(area / 3.0);
        }
    }
    Ok(Mesh {
        dim: 2,
        boundary_nodes: boundary
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect(),
        nodes,
        segments: Vec::new(),
        triangles,
        boundary,
        element_measures,
        qp_points,
        qp_weights,
        qp_per_element: 3,
        total_measure: lx * ly,
    })
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        if self.dim == 1 {
            self.segments.len()
        } else {
            self.triangles.len()
        }
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn element_nodes(&self, e: usize) -> &[usize] {
        if self.dim == 1 {
            &self.segments[e]
        } else {
            &self.triangles[e]
        }
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn element_measures(&self) -> &[f64] {
        &self.element_measures
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| !self.boundary[i]).collect()
    }

    // -- quadrature -----------------------------------------------------------

    pub fn n_qp(&self) -> usize {
        self.qp_points.len()
    }

    pub fn qp_per_element(&self) -> usize {
        self.qp_per_element
    }

    pub fn qp_points(&self) -> &[Point] {
        &self.qp_points
    }

    pub fn qp_weights(&self) -> &[f64] {
        &self.qp_weights
    }

    pub fn qp_element(&self, k: usize) -> usize {
        k / self.qp_per_element
    }

    /// P1 shape function values at the local quadrature points of an element.
    pub fn shape_at_qp(&self) -> &'static [[f64; 3]] {
        if self.dim == 1 {
            &[[0.5, 0.5, 0.0]]
        } else {
            &[[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
        }
    }

    /// Shape-function gradients on element `e` (constant over the element).
    pub fn grad_shapes(&self, e: usize) -> [[f64; 2]; 3] {
        if self.dim == 1 {
            let [i, j] = self.segments[e];
            let h = self.nodes[j].x - self.nodes[i].x;
            [[-1.0 / h, 0.0], [1.0 / h, 0.0], [0.0, 0.0]]
        } else {
            let [a, b, c] = self.triangles[e];
            let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
            let e1 = (pb.x - pa.x, pb.y - pa.y);
            let e2 = (pc.x - pa.x, pc.y - pa.y);
            let det = e1.0 * e2.1 - e2.0 * e1.1;
            let g1 = [e2.1 / det, -e2.0 / det];
            let g2 = [-e1.1 / det, e1.0 / det];
            [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2]
        }
    }

    /// Interpolated field values at all quadrature points.
    pub fn values_at_qp(&self, field: &Field) -> Vec<f64> {
        let shapes = self.shape_at_qp();
        let mut out = Vec::with_capacity(self.n_qp());
        for e in 0..self.n_elements() {
            let en = self.element_nodes(e);
            for sh in shapes {
                let mut v = 0.0;
                for (loc, &node) in en.iter().enumerate() {
                    v += sh[loc] * field.values[node];
                }
                out.push(v);
            }
        }
        out
    }

    /// Piecewise-constant gradient of the P1 interpolant, one vector per
    /// element; exact for affine fields.
    pub fn gradient(&self, field: &Field) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.n_elements());
        for e in 0..self.n_elements() {
            let en = self.element_nodes(e);
            let gs = self.grad_shapes(e);
            let mut g = [0.0, 0.0];
            for (loc, &node) in en.iter().enumerate() {
                g[0] += gs[loc][0] * field.values[node];
                g[1] += gs[loc][1] * field.values[node];
            }
            out.push(g);
        }
        out
    }

    /// `|∇u|` replicated at each quadrature point of its element.
    pub fn gradient_magnitude_at_qp(&self, field: &Field) -> Vec<f64> {
        let grads = self.gradient(field);
        let mut out = Vec::with_capacity(self.n_qp());
        for g in grads {
            let m = (g[0] * g[0] + g[1] * g[1]).sqrt();
            for _ in 0..self.qp_per_element {
                out.push(m);
            }
        }
        out
    }

    /// Quadrature of a nodal field: `∫ u dx` by the mesh rule.
    pub fn integrate_field(&self, field: &Field) -> f64 {
        let vals = self.values_at_qp(field);
        vals.iter()
            .zip(self.qp_weights.iter())
            .map(|(v, w)| v * w)
            .sum()
    }
}

/// P1 stiffness and consistent mass on the interior degrees of freedom.
pub(crate) fn assemble_stiffness_mass(mesh: &Mesh) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
    let interior = mesh.interior_nodes();
    let pos: Vec<Option<usize>> = {
        let mut v = vec![None; mesh.n_nodes()];
        for (k, &i) in interior.iter().enumerate() {
            v[i] = Some(k);
        }
        v
    };
    let n = interior.len();
    let mut k_mat = DMatrix::zeros(n, n);
    let mut m_mat = DMatrix::zeros(n, n);
    for e in 0..mesh.n_elements() {
        let en = mesh.element_nodes(e);
        let gs = mesh.grad_shapes(e);
        let measure = mesh.element_measures()[e];
        let nn = en.len();
        for a in 0..nn {
            let Some(ia) = pos[en[a]] else { continue };
            for b in 0..nn {
                let Some(ib) = pos[en[b]] else { continue };
                k_mat[(ia, ib)] +=
                    measure * (gs[a][0] * gs[b][0] + gs[a][1] * gs[b][1]);
                let mass = if mesh.dim() == 1 {
                    if a == b { measure / 3.0 } else { measure / 6.0 }
                } else if a == b {
                    measure / 6.0
                } else {
                    measure / 12.0
                };
                m_mat[(ia, ib)] += mass;
            }
        }
    }
    (k_mat, m_mat, interior)
}

/// Lower estimate of the discrete Poincaré constant
/// `sup ‖u‖_{L^H} / ‖∇u‖_{L^H}` over Dirichlet fields: the maximum over
/// random trial fields and the first Dirichlet Laplacian eigenmode (found by
/// inverse power iteration, which is sharp for the p ≡ 2 case).
pub fn poincare_estimate(
    mesh: &Mesh,
    model: &ExponentModel,
    mode: NFunctionMode,
    trials: usize,
    tol: f64,
) -> Result<f64, MeshError> {
    if trials < 1 {
        return Err(MeshError::InvalidArg("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let ratio = |field: &Field| -> Result<Option<f64>, MeshError> {
        let vals = mesh.values_at_qp(field);
        let grads = mesh.gradient_magnitude_at_qp(field);
        let nv = modular::luxemburg_norm(&vals, model, mode, mesh, tol)
            .map_err(|e| MeshError::InvalidArg(e.to_string()))?;
        let ng = modular::luxemburg_norm(&grads, model, mode, mesh, tol)
            .map_err(|e| MeshError::InvalidArg(e.to_string()))?;
        if ng.value == 0.0 {
            return Ok(None);
        }
        Ok(Some(nv.value / ng.value))
    };

    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let mut field = Field::zeros(mesh);
        for v in field.values.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        field.project_dirichlet(mesh);
        if let Some(r) = ratio(&field)? {
            best = best.max(r);
        }
    }

    // inverse power iteration on K z = λ M z
    let (k_mat, m_mat, interior) = assemble_stiffness_mass(mesh);
    if !interior.is_empty() {
        if let Some(lu) = Some(k_mat.clone().lu()) {
            let mut z = DVector::from_element(interior.len(), 1.0);
            let mut lambda_prev = f64::INFINITY;
            for _ in 0..200 {
                let rhs = &m_mat * &z;
                let Some(next) = lu.solve(&rhs) else { break };
                let norm = next.norm();
                if norm == 0.0 {
                    break;
                }
                z = next / norm;
                let kz = &k_mat * &z;
                let mz = &m_mat * &z;
                let lambda = z.dot(&kz) / z.dot(&mz);
                if (lambda - lambda_prev).abs() <= 1e-12 * lambda.abs() {
                    lambda_prev = lambda;
                    break;
                }
                lambda_prev = lambda;
            }
            let _ = lambda_prev;
            let mut field = Field::zeros(mesh);
            for (k, &i) in interior.iter().enumerate() {
                field.values[i] = z[k];
            }
            if let Some(r) = ratio(&field)? {
                best = best.max(r);
            }
        }
    }
    Ok(best)
}
