//! Structured triangulation of a rectangle.
//!
//! Cell `(i, j)` is split along its rising diagonal into a lower-right
//! triangle (local index 0) and an upper-left triangle (local index 1).

use crate::geometry::{Point2, Rect};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatrixMesh {
    pub rect: Rect,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl MatrixMesh {
    pub fn new(rect: Rect, nx: usize, ny: usize) -> Self {
        Self {
            rect,
            nx,
            ny,
            dx: rect.width() / nx as f64,
            dy: rect.height() / ny as f64,
        }
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_elements(&self) -> usize {
        2 * self.nx * self.ny
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % (self.nx + 1), n / (self.nx + 1))
    }

    pub fn node_pos(&self, n: usize) -> Point2 {
        let (i, j) = self.node_ij(n);
        // exact boundary coordinates on the last row and column
        let x = if i == self.nx { self.rect.x1 } else { self.rect.x0 + i as f64 * self.dx };
        let y = if j == self.ny { self.rect.y1 } else { self.rect.y0 + j as f64 * self.dy };
        Point2::new(x, y)
    }

    pub fn element_area(&self) -> f64 {
        0.5 * self.dx * self.dy
    }

    #[inline]
    fn split(&self, e: usize) -> (usize, usize, usize) {
        let cell = e / 2;
        (cell % self.nx, cell / self.nx, e % 2)
    }

    pub fn element_nodes(&self, e: usize) -> [usize; 3] {
        let (i, j, t) = self.split(e);
        let n00 = self.node(i, j);
        let n10 = self.node(i + 1, j);
        let n11 = self.node(i + 1, j + 1);
        let n01 = self.node(i, j + 1);
        if t == 0 {
            [n00, n10, n11]
        } else {
            [n00, n11, n01]
        }
    }

    pub fn centroid(&self, e: usize) -> Point2 {
        let (i, j, t) = self.split(e);
        let (u, v) = if t == 0 { (2.0 / 3.0, 1.0 / 3.0) } else { (1.0 / 3.0, 2.0 / 3.0) };
        Point2::new(
            self.rect.x0 + (i as f64 + u) * self.dx,
            self.rect.y0 + (j as f64 + v) * self.dy,
        )
    }

    /// Gradients of the three nodal basis functions, in `element_nodes` order.
    pub fn basis_gradients(&self, e: usize) -> [[f64; 2]; 3] {
        let (hx, hy) = (1.0 / self.dx, 1.0 / self.dy);
        if e % 2 == 0 {
            [[-hx, 0.0], [hx, -hy], [0.0, hy]]
        } else {
            [[0.0, -hy], [hx, 0.0], [-hx, hy]]
        }
    }

    /// Basis values at `p` (affine extension outside the element).
    pub fn basis_values(&self, e: usize, p: Point2) -> [f64; 3] {
        let (i, j, t) = self.split(e);
        let u = (p.x - self.rect.x0) / self.dx - i as f64;
        let v = (p.y - self.rect.y0) / self.dy - j as f64;
        if t == 0 {
            [1.0 - u, u - v, v]
        } else {
            [1.0 - v, u, v - u]
        }
    }

    /// Element containing `p`, clamped to the mesh.
    pub fn locate(&self, p: Point2) -> usize {
        let fu = (p.x - self.rect.x0) / self.dx;
        let fv = (p.y - self.rect.y0) / self.dy;
        let i = (fu.floor().max(0.0) as usize).min(self.nx - 1);
        let j = (fv.floor().max(0.0) as usize).min(self.ny - 1);
        let (u, v) = (fu - i as f64, fv - j as f64);
        let t = usize::from(v > u);
        2 * (j * self.nx + i) + t
    }
}
