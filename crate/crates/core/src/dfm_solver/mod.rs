//! Coupled matrix/fracture Darcy flow on a rectangle.
//!
//! The matrix uses linear triangles on a structured grid with one constant
//! tensor per element. Fractures are chains of linear 1D elements whose nodes
//! carry their own heads; each fracture element exchanges water with the
//! matrix triangle that contains its midpoint.

mod fractures;
mod mesh;

pub use fractures::{clip_fractures, ClipStats, ClippedFracture, FractureElement, FractureMesh, MeshingOptions};
pub use mesh::MatrixMesh;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frac_geom::Fracture;
use crate::geometry::{Point2, Rect};
use crate::linalg::{cg_jacobi, solve_refined, CgOptions, CgReport, CsrMatrix, EnvelopeCholesky, TripletBuilder};
use crate::random_field::TensorField;
use crate::tensor::SymTensor2;

/// Matrix/fracture exchange attached to one fracture element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coupling {
    pub fracture_element: usize,
    pub matrix_element: usize,
    /// Element length times the per-length exchange coefficient.
    pub coefficient: f64,
}

/// Linear solver for the reduced system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Envelope Cholesky on an RCM ordering, refined to `cg.rel_tol`.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    CgJacobi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub meshing: MeshingOptions,
    pub cg: CgOptions,
    pub linear: LinearSolver,
}

/// Assembled DFM system. Matrix nodes come first in the DOF numbering,
/// fracture nodes follow.
#[derive(Clone, Debug)]
pub struct DiscreteSystem {
    pub mesh: MatrixMesh,
    pub element_k: Vec<SymTensor2<f64>>,
    pub fractures: FractureMesh,
    pub couplings: Vec<Coupling>,
    pub stiffness: CsrMatrix<f64>,
    pub cg: CgOptions,
    pub linear: LinearSolver,
    /// Absolute distance used to decide whether a node lies on a side.
    pub snap_tol: f64,
}

const GAUSS2: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Build the stiffness matrix for `fractures` embedded in `field` over `domain`.
pub fn discretize(
    field: &TensorField,
    fractures: &[Fracture],
    domain: Rect,
    nx: usize,
    ny: usize,
    opts: &SolverOptions,
) -> Result<DiscreteSystem> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument(format!("resolution {nx}x{ny} is below 2x2")));
    }
    if !(domain.width() > 0.0 && domain.height() > 0.0) {
        return Err(Error::InvalidArgument("domain has no area".into()));
    }
    let mesh = MatrixMesh::new(domain, nx, ny);
    let element_k: Vec<_> = (0..mesh.n_elements()).map(|e| field.at(mesh.centroid(e))).collect();
    let fmesh = FractureMesh::build(fractures, &mesh, &opts.meshing);
    let nm = mesh.n_nodes();
    let n = nm + fmesh.n_nodes();

    let mut tb = TripletBuilder::with_capacity(n, 9 * mesh.n_elements() + 29 * fmesh.elements.len());
    let area = mesh.element_area();
    for (e, k) in element_k.iter().enumerate() {
        let g = mesh.basis_gradients(e);
        let nodes = mesh.element_nodes(e);
        for a in 0..3 {
            let kg = k.apply(g[a]);
            for b in 0..3 {
                tb.add(nodes[a], nodes[b], area * (kg[0] * g[b][0] + kg[1] * g[b][1]));
            }
        }
    }

    let mut couplings = Vec::with_capacity(fmesh.elements.len());
    for (fe, el) in fmesh.elements.iter().enumerate() {
        let [ia, ib] = el.nodes;
        let (da, db) = (nm + ia, nm + ib);
        let t = el.aperture * el.conductivity / el.length;
        tb.add(da, da, t);
        tb.add(da, db, -t);
        tb.add(db, da, -t);
        tb.add(db, db, t);

        let coefficient = el.length * el.conductivity / el.aperture;
        couplings.push(Coupling { fracture_element: fe, matrix_element: el.host, coefficient });
        let hosts = mesh.element_nodes(el.host);
        let dofs = [hosts[0], hosts[1], hosts[2], da, db];
        let (pa, pb) = (fmesh.nodes[ia], fmesh.nodes[ib]);
        let mut local = [[0.0; 5]; 5];
        for s in GAUSS2 {
            let phi = mesh.basis_values(el.host, pa.lerp(pb, s));
            let psi = [phi[0], phi[1], phi[2], -(1.0 - s), -s];
            for a in 0..5 {
                for b in 0..5 {
                    local[a][b] += 0.5 * coefficient * psi[a] * psi[b];
                }
            }
        }
        for a in 0..5 {
            for b in 0..5 {
                tb.add(dofs[a], dofs[b], local[a][b]);
            }
        }
    }

    Ok(DiscreteSystem {
        mesh,
        element_k,
        fractures: fmesh,
        couplings,
        stiffness: tb.build(),
        cg: opts.cg,
        linear: opts.linear,
        snap_tol: opts.meshing.snap_rel * domain.size(),
    })
}

/// Head `c + gx·x + gy·y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub c: f64,
    pub gx: f64,
    pub gy: f64,
}

impl LinearHead {
    pub const X: LinearHead = LinearHead { c: 0.0, gx: 1.0, gy: 0.0 };
    pub const Y: LinearHead = LinearHead { c: 0.0, gx: 0.0, gy: 1.0 };

    pub fn constant(c: f64) -> Self {
        Self { c, gx: 0.0, gy: 0.0 }
    }

    pub fn eval(&self, p: Point2) -> f64 {
        self.c + self.gx * p.x + self.gy * p.y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SideCondition {
    Dirichlet(LinearHead),
    NoFlow,
}

/// Conditions on the four sides, ordered left, right, bottom, top.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub left: SideCondition,
    pub right: SideCondition,
    pub bottom: SideCondition,
    pub top: SideCondition,
}

impl BoundaryConditions {
    pub fn all(h: LinearHead) -> Self {
        let d = SideCondition::Dirichlet(h);
        Self { left: d, right: d, bottom: d, top: d }
    }

    /// Head `head` on the left, zero on the right, closed top and bottom.
    pub fn aquifer(head: f64) -> Self {
        Self {
            left: SideCondition::Dirichlet(LinearHead::constant(head)),
            right: SideCondition::Dirichlet(LinearHead::constant(0.0)),
            bottom: SideCondition::NoFlow,
            top: SideCondition::NoFlow,
        }
    }

    fn sides(&self) -> [SideCondition; 4] {
        [self.left, self.right, self.bottom, self.top]
    }
}

/// Net outflow through each side (positive leaves the domain).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SideFluxes {
    pub left: f64,
    pub right: f64,
    pub bottom: f64,
    pub top: f64,
}

impl SideFluxes {
    pub fn total(&self) -> f64 {
        self.left + self.right + self.bottom + self.top
    }

    pub fn total_abs(&self) -> f64 {
        self.left.abs() + self.right.abs() + self.bottom.abs() + self.top.abs()
    }
}

#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub heads: Vec<f64>,
    pub matrix_grad: Vec<[f64; 2]>,
    pub matrix_velocity: Vec<[f64; 2]>,
    pub fracture_grad: Vec<[f64; 2]>,
    pub fracture_velocity: Vec<[f64; 2]>,
    pub outflow: SideFluxes,
    pub report: CgReport,
}

impl DiscreteSystem {
    pub fn n_matrix_dofs(&self) -> usize {
        self.mesh.n_nodes()
    }

    pub fn n_dofs(&self) -> usize {
        self.stiffness.n
    }

    pub fn dof_position(&self, d: usize) -> Point2 {
        let nm = self.n_matrix_dofs();
        if d < nm {
            self.mesh.node_pos(d)
        } else {
            self.fractures.nodes[d - nm]
        }
    }

    /// Side index (left, right, bottom, top) of the first Dirichlet side
    /// touching `p`, if any.
    fn dirichlet_side(&self, p: Point2, sides: &[SideCondition; 4], tol: f64) -> Option<usize> {
        let r = self.mesh.rect;
        let on = [
            (p.x - r.x0).abs() <= tol,
            (p.x - r.x1).abs() <= tol,
            (p.y - r.y0).abs() <= tol,
            (p.y - r.y1).abs() <= tol,
        ];
        (0..4).find(|&s| on[s] && matches!(sides[s], SideCondition::Dirichlet(_)))
    }

    /// Side of every Dirichlet DOF and the prescribed heads (zero elsewhere).
    fn dirichlet_data(&self, bc: &BoundaryConditions) -> (Vec<Option<usize>>, Vec<f64>) {
        let n = self.n_dofs();
        let sides = bc.sides();
        let mut side_of = vec![None; n];
        let mut heads = vec![0.0; n];
        for d in 0..n {
            let p = self.dof_position(d);
            if let Some(s) = self.dirichlet_side(p, &sides, self.snap_tol) {
                side_of[d] = Some(s);
                if let SideCondition::Dirichlet(h) = sides[s] {
                    heads[d] = h.eval(p);
                }
            }
        }
        (side_of, heads)
    }

    pub fn solve(&self, bc: &BoundaryConditions) -> Result<FlowSolution> {
        Ok(self.solve_many(std::slice::from_ref(bc))?.remove(0))
    }

    /// Solve for several boundary conditions. Problems that fix the same set
    /// of DOFs share one reduced matrix (and one factorization).
    pub fn solve_many(&self, bcs: &[BoundaryConditions]) -> Result<Vec<FlowSolution>> {
        let n = self.n_dofs();
        let mut out = Vec::with_capacity(bcs.len());
        let mut cached: Option<(Vec<bool>, Vec<usize>, CsrMatrix<f64>, Option<EnvelopeCholesky>)> = None;
        for bc in bcs {
            let (side_of, mut heads) = self.dirichlet_data(bc);
            let fixed: Vec<bool> = side_of.iter().map(Option::is_some).collect();
            if !fixed.iter().any(|&f| f) {
                return Err(Error::InvalidArgument("boundary conditions fix no head; problem is singular".into()));
            }
            if cached.as_ref().is_none_or(|c| c.0 != fixed) {
                let mut map = vec![usize::MAX; n];
                let mut free = Vec::new();
                for d in 0..n {
                    if !fixed[d] {
                        map[d] = free.len();
                        free.push(d);
                    }
                }
                let reduced = self.stiffness.submatrix(&map, free.len());
                let factor = match self.linear {
                    LinearSolver::Direct if !free.is_empty() => Some(EnvelopeCholesky::factor(&reduced)?),
                    _ => None,
                };
                cached = Some((fixed, free, reduced, factor));
            }
            let (_, free, reduced, factor) = cached.as_ref().unwrap();

            let mut rhs = vec![0.0; free.len()];
            for (r, &d) in free.iter().enumerate() {
                let mut acc = 0.0;
                for (c, v) in self.stiffness.row(d) {
                    if side_of[c].is_some() {
                        acc -= v * heads[c];
                    }
                }
                rhs[r] = acc;
            }
            let (x, report) = if free.is_empty() {
                (Vec::new(), CgReport::default())
            } else if let Some(f) = factor {
                solve_refined(reduced, f, &rhs, self.cg.rel_tol)
            } else {
                let common = {
                    let mut it = bc.sides().into_iter().map(|s| match s {
                        SideCondition::Dirichlet(h) => Some(h),
                        SideCondition::NoFlow => None,
                    });
                    let first = it.next().flatten();
                    if it.all(|h| h == first) { first } else { None }
                };
                let mut x: Vec<f64> = free
                    .iter()
                    .map(|&d| common.map_or(0.0, |h| h.eval(self.dof_position(d))))
                    .collect();
                let report = cg_jacobi(reduced, &rhs, &mut x, &self.cg)?;
                (x, report)
            };
            for (r, &d) in free.iter().enumerate() {
                heads[d] = x[r];
            }
            out.push(self.postprocess(heads, &side_of, report));
        }
        Ok(out)
    }

    fn postprocess(&self, heads: Vec<f64>, side_of: &[Option<usize>], report: CgReport) -> FlowSolution {
        let reactions = self.stiffness.mul_vec(&heads);
        let mut out = [0.0; 4];
        for (d, s) in side_of.iter().enumerate() {
            if let Some(s) = s {
                out[*s] -= reactions[d];
            }
        }
        let outflow = SideFluxes { left: out[0], right: out[1], bottom: out[2], top: out[3] };

        let mut matrix_grad = Vec::with_capacity(self.element_k.len());
        let mut matrix_velocity = Vec::with_capacity(self.element_k.len());
        for (e, k) in self.element_k.iter().enumerate() {
            let g = self.mesh.basis_gradients(e);
            let nodes = self.mesh.element_nodes(e);
            let mut gr = [0.0; 2];
            for a in 0..3 {
                gr[0] += heads[nodes[a]] * g[a][0];
                gr[1] += heads[nodes[a]] * g[a][1];
            }
            let u = k.apply(gr);
            matrix_grad.push(gr);
            matrix_velocity.push([-u[0], -u[1]]);
        }
        let nm = self.n_matrix_dofs();
        let mut fracture_grad = Vec::with_capacity(self.fractures.elements.len());
        let mut fracture_velocity = Vec::with_capacity(self.fractures.elements.len());
        for el in &self.fractures.elements {
            let [a, b] = el.nodes;
            let (pa, pb) = (self.fractures.nodes[a], self.fractures.nodes[b]);
            let slope = (heads[nm + b] - heads[nm + a]) / el.length;
            let gr = [slope * (pb.x - pa.x) / el.length, slope * (pb.y - pa.y) / el.length];
            fracture_grad.push(gr);
            fracture_velocity.push([-el.conductivity * gr[0], -el.conductivity * gr[1]]);
        }
        FlowSolution { heads, matrix_grad, matrix_velocity, fracture_grad, fracture_velocity, outflow, report }
    }
}

/// Solve the system under `bc`.
pub fn solve_darcy(system: &DiscreteSystem, bc: &BoundaryConditions) -> Result<FlowSolution> {
    system.solve(bc)
}
