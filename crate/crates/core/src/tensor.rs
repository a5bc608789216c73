//! Symmetric 2×2 tensors stored as `(xx, xy, yy)`.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymTensor2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Real> SymTensor2<T> {
    pub const fn new(xx: T, xy: T, yy: T) -> Self {
        Self { xx, xy, yy }
    }

    pub fn isotropic(k: T) -> Self {
        Self::new(k, T::zero(), k)
    }

    pub fn diag(kx: T, ky: T) -> Self {
        Self::new(kx, T::zero(), ky)
    }

    /// `Qᵀ diag(kx, ky) Q` with `Q = [[c, -s], [s, c]]`.
    pub fn from_principal(kx: T, ky: T, c: T, s: T) -> Self {
        Self::new(
            kx * c * c + ky * s * s,
            (ky - kx) * c * s,
            kx * s * s + ky * c * c,
        )
    }

    pub fn trace(&self) -> T {
        self.xx + self.yy
    }

    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn is_spd(&self) -> bool {
        self.xx > T::zero() && self.yy > T::zero() && self.det() > T::zero()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [T; 2] {
        let half = T::lit(0.5);
        let m = half * (self.xx + self.yy);
        let d = (half * (self.xx - self.yy)).hypot(self.xy);
        // the smaller root from the product avoids cancellation when both are positive
        let hi = m + d;
        let lo = if hi != T::zero() && m > T::zero() {
            self.det() / hi
        } else {
            m - d
        };
        [lo, hi]
    }

    pub fn apply(&self, v: [T; 2]) -> [T; 2] {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det == T::zero() {
            return None;
        }
        Some(Self::new(self.yy / det, -self.xy / det, self.xx / det))
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.xx * s, self.xy * s, self.yy * s)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.xx + o.xx, self.xy + o.xy, self.yy + o.yy)
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.xx, self.xy, self.yy]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Nearest SPD tensor by clamping eigenvalues at `floor_rel · |trace|`.
    /// Returns the tensor unchanged when no eigenvalue is below the floor.
    pub fn project_spd(&self, floor_rel: T) -> (Self, bool) {
        let [lo, hi] = self.eigenvalues();
        let floor = floor_rel * self.trace().abs().max(hi.abs());
        if lo >= floor && self.is_spd() {
            return (*self, false);
        }
        let floor = if floor > T::zero() { floor } else { T::min_positive_value() };
        let l1 = hi.max(floor);
        let l2 = lo.max(floor);
        // eigenvector of the larger eigenvalue
        let (vx, vy) = if self.xy != T::zero() {
            (self.xy, hi - self.xx)
        } else if self.xx >= self.yy {
            (T::one(), T::zero())
        } else {
            (T::zero(), T::one())
        };
        let n = vx.hypot(vy);
        let (c, s) = (vx / n, vy / n);
        // R diag(l1, l2) Rᵀ with R = [[c, -s], [s, c]]
        let out = Self::new(
            l1 * c * c + l2 * s * s,
            (l1 - l2) * c * s,
            l1 * s * s + l2 * c * c,
        );
        (out, true)
    }
}
