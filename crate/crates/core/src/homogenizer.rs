//! Equivalent conductivity of blocks and block-wise upscaling of a domain.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dfm_solver::{discretize, BoundaryConditions, FlowSolution, LinearHead, SolverOptions};
use crate::error::{Error, Result};
use crate::frac_geom::Fracture;
use crate::geometry::{Point2, Rect};
use crate::random_field::{Grid, TensorField};
use crate::tensor::SymTensor2;
use crate::Tensor;

/// Relative eigenvalue floor used when repairing non-SPD block tensors.
pub const SPD_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalentTensor {
    pub k: Tensor,
    pub positive_definite: bool,
    pub block: Option<usize>,
    /// Relative least-squares residual `|A k + u| / |u|`.
    pub residual: f64,
}

impl EquivalentTensor {
    pub fn new(k: Tensor, residual: f64) -> Self {
        Self { k, positive_definite: k.is_spd(), block: None, residual }
    }
}

/// Volume-weighted means of one flow solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowAverages {
    pub grad: [f64; 2],
    pub velocity: [f64; 2],
}

/// Averages over matrix elements (unit cross-section) and fracture elements
/// (cross-section equal to the aperture).
pub fn flow_averages(system: &crate::dfm_solver::DiscreteSystem, sol: &FlowSolution) -> FlowAverages {
    let area = system.mesh.element_area();
    let mut w = 0.0;
    let mut g = [0.0; 2];
    let mut u = [0.0; 2];
    for (gr, ve) in sol.matrix_grad.iter().zip(&sol.matrix_velocity) {
        w += area;
        for c in 0..2 {
            g[c] += area * gr[c];
            u[c] += area * ve[c];
        }
    }
    for ((el, gr), ve) in system.fractures.elements.iter().zip(&sol.fracture_grad).zip(&sol.fracture_velocity) {
        let we = el.length * el.aperture;
        w += we;
        for c in 0..2 {
            g[c] += we * gr[c];
            u[c] += we * ve[c];
        }
    }
    FlowAverages { grad: [g[0] / w, g[1] / w], velocity: [u[0] / w, u[1] / w] }
}

/// Symmetric least-squares fit of `u = -K g` to the two averaged responses.
pub fn fit_symmetric(avg: &[FlowAverages; 2]) -> EquivalentTensor {
    let mut rows = [[0.0; 3]; 4];
    let mut rhs = [0.0; 4];
    for (i, a) in avg.iter().enumerate() {
        let [gx, gy] = a.grad;
        rows[2 * i] = [gx, gy, 0.0];
        rows[2 * i + 1] = [0.0, gx, gy];
        rhs[2 * i] = -a.velocity[0];
        rhs[2 * i + 1] = -a.velocity[1];
    }
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for r in 0..4 {
        for i in 0..3 {
            atb[i] += rows[r][i] * rhs[r];
            for j in 0..3 {
                ata[i][j] += rows[r][i] * rows[r][j];
            }
        }
    }
    let k = solve3(ata, atb);
    let mut res = 0.0;
    let mut norm = 0.0;
    for r in 0..4 {
        let fit: f64 = (0..3).map(|i| rows[r][i] * k[i]).sum();
        res += (fit - rhs[r]).powi(2);
        norm += rhs[r].powi(2);
    }
    let residual = if norm > 0.0 { (res / norm).sqrt() } else { 0.0 };
    EquivalentTensor::new(SymTensor2::new(k[0], k[1], k[2]), residual)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    // Gaussian elimination with partial pivoting
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        if a[c][c] == 0.0 {
            continue;
        }
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        let s = b[c] - (c + 1..3).map(|k| a[c][k] * x[k]).sum::<f64>();
        x[c] = if a[c][c] == 0.0 { 0.0 } else { s / a[c][c] };
    }
    x
}

/// Unsymmetric 2×2 tensor `K = -U G⁻¹` from the two responses.
pub fn fit_general(avg: &[FlowAverages; 2]) -> Option<[[f64; 2]; 2]> {
    let g = [[avg[0].grad[0], avg[1].grad[0]], [avg[0].grad[1], avg[1].grad[1]]];
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    if det == 0.0 {
        return None;
    }
    let gi = [[g[1][1] / det, -g[0][1] / det], [-g[1][0] / det, g[0][0] / det]];
    let u = [[avg[0].velocity[0], avg[1].velocity[0]], [avg[0].velocity[1], avg[1].velocity[1]]];
    let mut k = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            k[i][j] = -(u[i][0] * gi[0][j] + u[i][1] * gi[1][j]);
        }
    }
    Some(k)
}

/// Full result of the two linear-head problems on a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnisotropyResult {
    pub tensor: EquivalentTensor,
    pub averages: [FlowAverages; 2],
}

impl AnisotropyResult {
    /// `|K12 - K21| / |K|` of the unconstrained 2×2 fit.
    pub fn reciprocity_gap(&self) -> f64 {
        fit_general(&self.averages).map_or(f64::INFINITY, |k| {
            let norm = k.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            (k[0][1] - k[1][0]).abs() / norm
        })
    }
}

pub fn anisotropy_problem(
    field: &TensorField,
    fractures: &[Fracture],
    block: Rect,
    resolution: usize,
    opts: &SolverOptions,
) -> Result<AnisotropyResult> {
    let system = discretize(field, fractures, block, resolution, resolution, opts)?;
    // heads measured from the block corner keep values O(block size)
    let px = LinearHead { c: -block.x0, gx: 1.0, gy: 0.0 };
    let py = LinearHead { c: -block.y0, gx: 0.0, gy: 1.0 };
    let sols = system.solve_many(&[BoundaryConditions::all(px), BoundaryConditions::all(py)])?;
    let averages = [flow_averages(&system, &sols[0]), flow_averages(&system, &sols[1])];
    Ok(AnisotropyResult { tensor: fit_symmetric(&averages), averages })
}

/// Equivalent tensor of `block` from the two linear-head problems.
pub fn anisotropy_tensor(
    field: &TensorField,
    fractures: &[Fracture],
    block: Rect,
    resolution: usize,
    opts: &SolverOptions,
) -> Result<EquivalentTensor> {
    Ok(anisotropy_problem(field, fractures, block, resolution, opts)?.tensor)
}

/// Horizontal outflow `Y` under head `head` on the left side and zero on the
/// right, with the equivalent horizontal conductivity `Y·L / (H·W)`.
pub fn aquifer_kx(
    field: &TensorField,
    fractures: &[Fracture],
    domain: Rect,
    resolution: usize,
    head: f64,
    opts: &SolverOptions,
) -> Result<(f64, f64)> {
    if !(head > 0.0) {
        return Err(Error::InvalidArgument(format!("aquifer head must be positive, got {head}")));
    }
    let system = discretize(field, fractures, domain, resolution, resolution, opts)?;
    let sol = system.solve(&BoundaryConditions::aquifer(head))?;
    let y = sol.outflow.right;
    Ok((y, y * domain.width() / (head * domain.height())))
}

/// Overlapping square blocks with centers on a half-block lattice over the
/// original domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub original: Rect,
    pub extended: Rect,
    pub block_size: f64,
    pub per_axis: usize,
}

impl BlockGrid {
    /// Blocks of nominal size `l` over `original` (square). The count `2L/l`
    /// must be an integer up to a relative tolerance of 1e-3; the block
    /// size is then made exact.
    pub fn new(original: Rect, l: f64) -> Result<Self> {
        let side = original.width();
        if !(side > 0.0) || (original.height() - side).abs() > 1e-9 * side {
            return Err(Error::InvalidConfig("block grid needs a square domain".into()));
        }
        if !(l > 0.0) {
            return Err(Error::InvalidConfig(format!("block size must be positive, got {l}")));
        }
        let ratio = 2.0 * side / l;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-3 * ratio {
            return Err(Error::InvalidConfig(format!("2L/l = {ratio} is not an integer")));
        }
        let block_size = 2.0 * side / steps;
        Ok(Self {
            original,
            extended: original.inflate(block_size / 2.0),
            block_size,
            per_axis: steps as usize + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.per_axis * self.per_axis
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self) -> f64 {
        self.block_size / 2.0
    }

    /// Center of block `id` (row-major, row index along y).
    pub fn center(&self, id: usize) -> Point2 {
        let (i, j) = (id % self.per_axis, id / self.per_axis);
        Point2::new(self.original.x0 + i as f64 * self.step(), self.original.y0 + j as f64 * self.step())
    }

    pub fn centers(&self) -> Vec<Point2> {
        (0..self.len()).map(|id| self.center(id)).collect()
    }

    pub fn block(&self, id: usize) -> Rect {
        Rect::centered(self.center(id), self.block_size)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            original: self.original.scaled(s),
            extended: self.extended.scaled(s),
            block_size: self.block_size * s,
            per_axis: self.per_axis,
        }
    }
}

/// Blocks of size `l` over the square `(0, side)²`.
pub fn build_block_grid(side: f64, l: f64) -> Result<BlockGrid> {
    BlockGrid::new(Rect::new(0.0, 0.0, side, side), l)
}

/// Fractures touching `block`, optionally restricted to lengths below `threshold`.
pub fn select_fractures(fractures: &[Fracture], block: &Rect, threshold: Option<f64>) -> Vec<Fracture> {
    fractures
        .iter()
        .filter(|f| threshold.is_none_or(|t| f.length < t))
        .filter(|f| f.segment().clip(block).is_some())
        .copied()
        .collect()
}

/// Evaluates the equivalent tensor of one block.
pub trait BlockBackend: Sync {
    fn name(&self) -> &str;

    fn block_tensor(&self, field: &TensorField, fractures: &[Fracture], block: Rect) -> Result<EquivalentTensor>;
}

/// Solves the two linear-head problems on every block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NumericBackend {
    pub resolution: usize,
    pub solver: SolverOptions,
}

impl NumericBackend {
    pub fn new(resolution: usize) -> Self {
        Self { resolution, solver: SolverOptions::default() }
    }
}

impl BlockBackend for NumericBackend {
    fn name(&self) -> &str {
        "numeric"
    }

    fn block_tensor(&self, field: &TensorField, fractures: &[Fracture], block: Rect) -> Result<EquivalentTensor> {
        anisotropy_tensor(field, fractures, block, self.resolution, &self.solver)
    }
}

#[derive(Clone, Debug)]
pub struct Upscaled {
    pub coarse: TensorField,
    pub blocks: Vec<EquivalentTensor>,
    /// Blocks whose tensor had to be projected onto the SPD cone.
    pub projected: usize,
}

/// Equivalent tensors of every block in `grid`, in block order.
pub fn block_tensors(
    field: &TensorField,
    fractures: &[Fracture],
    grid: &BlockGrid,
    backend: &dyn BlockBackend,
    threshold: Option<f64>,
) -> Result<Vec<EquivalentTensor>> {
    (0..grid.len())
        .into_par_iter()
        .map(|id| {
            let block = grid.block(id);
            let local = select_fractures(fractures, &block, threshold);
            let mut t = backend.block_tensor(field, &local, block)?;
            t.block = Some(id);
            Ok(t)
        })
        .collect()
}

/// Bilinear interpolation of the block-center tensors onto an `n × n` grid
/// covering the original domain.
pub fn interpolate_blocks(grid: &BlockGrid, blocks: &[EquivalentTensor], n: usize) -> Result<(TensorField, usize)> {
    let mut projected = 0;
    let tensors: Vec<Tensor> = blocks
        .iter()
        .map(|b| {
            if b.positive_definite {
                b.k
            } else {
                projected += 1;
                log::warn!("block {:?}: non-SPD equivalent tensor {:?} projected", b.block, b.k);
                b.k.project_spd(SPD_FLOOR).0
            }
        })
        .collect();
    let o = grid.original;
    let cg = Grid::new(n, n, o.width() / n as f64, Point2::new(o.x0, o.y0))?;
    let m = grid.per_axis;
    let step = grid.step();
    let coarse = TensorField::from_fn(cg, |p| {
        let locate = |v: f64| {
            let u = (v / step).clamp(0.0, (m - 1) as f64);
            let i = (u.floor() as usize).min(m - 2);
            (i, u - i as f64)
        };
        let (i, tx) = locate(p.x - o.x0);
        let (j, ty) = locate(p.y - o.y0);
        let at = |a: usize, b: usize| tensors[b * m + a].to_array();
        let (k00, k10, k01, k11) = (at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (1.0 - tx) * (1.0 - ty) * k00[c] + tx * (1.0 - ty) * k10[c] + (1.0 - tx) * ty * k01[c] + tx * ty * k11[c];
        }
        SymTensor2::from_array(out)
    });
    Ok((coarse, projected))
}

/// Homogenize every block of `grid` and interpolate onto `n × n` coarse cells.
pub fn upscale_domain(
    field: &TensorField,
    fractures: &[Fracture],
    grid: &BlockGrid,
    backend: &dyn BlockBackend,
    threshold: Option<f64>,
    n: usize,
) -> Result<Upscaled> {
    let blocks = block_tensors(field, fractures, grid, backend, threshold)?;
    let (coarse, projected) = interpolate_blocks(grid, &blocks, n)?;
    Ok(Upscaled { coarse, blocks, projected })
}

/// Per-block CSV: block id, center, tensor components, SPD flag, residual.
pub fn write_blocks_csv<W: Write>(grid: &BlockGrid, blocks: &[EquivalentTensor], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["block", "cx", "cy", "k_xx", "k_xy", "k_yy", "pd_flag", "residual"])?;
    for (id, b) in blocks.iter().enumerate() {
        let c = grid.center(id);
        wr.write_record([
            id.to_string(),
            format!("{:e}", c.x),
            format!("{:e}", c.y),
            format!("{:e}", b.k.xx),
            format!("{:e}", b.k.xy),
            format!("{:e}", b.k.yy),
            u8::from(b.positive_definite).to_string(),
            format!("{:e}", b.residual),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_block_grid_has_225_blocks() {
        let g = build_block_grid(100.0, 14.28).unwrap();
        assert_eq!(g.per_axis, 15);
        assert_eq!(g.len(), 225);
        assert!((g.extended.x0 + 7.142857142857143).abs() < 1e-12);
        assert!((g.extended.width() - 114.28571428571429).abs() < 1e-9);
        assert_eq!(g.center(0), Point2::new(0.0, 0.0));
        assert_eq!(g.center(224), Point2::new(100.0, 100.0));
    }

    #[test]
    fn single_block_grid_is_three_by_three() {
        assert_eq!(build_block_grid(100.0, 100.0).unwrap().len(), 9);
        assert!(matches!(build_block_grid(100.0, 30.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn least_squares_recovers_exact_tensor() {
        let k = SymTensor2::new(2.0, 0.3, 1.0);
        let avg = [
            FlowAverages { grad: [1.0, 0.1], velocity: { let u = k.apply([1.0, 0.1]); [-u[0], -u[1]] } },
            FlowAverages { grad: [-0.2, 1.0], velocity: { let u = k.apply([-0.2, 1.0]); [-u[0], -u[1]] } },
        ];
        let fit = fit_symmetric(&avg);
        assert!((fit.k.xx - 2.0).abs() < 1e-12 && (fit.k.xy - 0.3).abs() < 1e-12 && (fit.k.yy - 1.0).abs() < 1e-12);
        assert!(fit.residual < 1e-12 && fit.positive_definite);
        let g = fit_general(&avg).unwrap();
        assert!((g[0][1] - g[1][0]).abs() < 1e-12);
    }
}
