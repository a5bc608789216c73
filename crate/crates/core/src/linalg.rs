//! Sparse symmetric systems and Jacobi-preconditioned conjugate gradients.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<T>,
}

/// Coordinate-format accumulator. Duplicate entries are summed in insertion
/// order, so the assembled values do not depend on anything but the input sequence.
#[derive(Clone, Debug)]
pub struct TripletBuilder<T> {
    n: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> TripletBuilder<T> {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self { n, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.n && j < self.n);
        self.entries.push((i, j, v));
    }

    pub fn build(mut self) -> CsrMatrix<T> {
        // stable sort keeps insertion order among duplicates
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<T> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n: self.n, row_ptr, col_idx, values }
    }
}

impl<T: Real> CsrMatrix<T> {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or_else(T::zero)
    }

    pub fn mul_vec_into(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = T::zero();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        let mut scale = T::zero();
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                scale = scale.max(v.abs());
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        if scale == T::zero() {
            T::zero()
        } else {
            worst / scale
        }
    }

    /// Principal submatrix on `keep` (given as old → new map, `usize::MAX` = dropped).
    pub fn submatrix(&self, map: &[usize], n_new: usize) -> CsrMatrix<T> {
        let mut row_ptr = Vec::with_capacity(n_new + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.n {
            if map[i] == usize::MAX {
                continue;
            }
            for (j, v) in self.row(i) {
                if map[j] != usize::MAX {
                    col_idx.push(map[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n: n_new, row_ptr, col_idx, values }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgOptions {
    pub rel_tol: f64,
    /// Iteration cap is `max_iter_factor · √n`.
    pub max_iter_factor: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter_factor: 20.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Solves `A x = b` for symmetric positive definite `A`, starting from `x`.
pub fn cg_jacobi<T: Real>(a: &CsrMatrix<T>, b: &[T], x: &mut [T], opts: &CgOptions) -> Result<CgReport> {
    let n = a.n;
    assert_eq!(b.len(), n);
    assert_eq!(x.len(), n);
    let bnorm = dot(b, b).sqrt();
    if n == 0 {
        return Ok(CgReport::default());
    }
    if bnorm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(CgReport::default());
    }
    let max_iter = ((opts.max_iter_factor * (n as f64).sqrt()).ceil() as usize).max(10);
    let tol = T::lit(opts.rel_tol);
    let inv_diag: Vec<T> = a
        .diagonal()
        .into_iter()
        .map(|d| {
            if d > T::zero() {
                Ok(T::one() / d)
            } else {
                Err(Error::Indefinite { iteration: 0, curvature: d.as_f64() })
            }
        })
        .collect::<Result<_>>()?;

    let mut r = a.mul_vec(x);
    for (ri, &bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(&ri, &d)| ri * d).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    while rel > tol {
        if it >= max_iter {
            return Err(Error::NonConvergence { iterations: it, residual: rel.as_f64() });
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::Indefinite { iteration: it, curvature: pap.as_f64() });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        // refresh the recursive residual periodically against drift
        if it % 50 == 0 {
            a.mul_vec_into(x, &mut ap);
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // confirm with the true residual
    a.mul_vec_into(x, &mut ap);
    let true_rel = b
        .iter()
        .zip(&ap)
        .map(|(&bi, &ai)| (bi - ai) * (bi - ai))
        .sum::<T>()
        .sqrt()
        / bnorm;
    Ok(CgReport { iterations: it, rel_residual: true_rel.as_f64() })
}

/// Reverse Cuthill–McKee ordering of the symmetric pattern of `a`.
/// Returns `perm` with `perm[new] = old`. Ties are broken by index, so the
/// ordering is deterministic.
pub fn rcm_order<T: Real>(a: &CsrMatrix<T>) -> Vec<usize> {
    let n = a.n;
    let degree: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nbrs = Vec::new();
    let bfs_levels = |start: usize, visited: &[bool]| -> (usize, usize) {
        // returns (eccentricity, last node of the deepest level with min degree)
        let mut seen = visited.to_vec();
        let mut level = vec![start];
        seen[start] = true;
        let mut depth = 0;
        loop {
            let mut next = Vec::new();
            for &v in &level {
                for (w, _) in a.row(v) {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                let far = *level.iter().min_by_key(|&&v| (degree[v], v)).unwrap();
                return (depth, far);
            }
            depth += 1;
            level = next;
        }
    };
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut ecc, mut far) = bfs_levels(start, &visited);
        for _ in 0..8 {
            let (e2, f2) = bfs_levels(far, &visited);
            if e2 <= ecc {
                break;
            }
            start = far;
            ecc = e2;
            far = f2;
        }
        let head = order.len();
        visited[start] = true;
        order.push(start);
        let mut q = head;
        while q < order.len() {
            let v = order[q];
            q += 1;
            nbrs.clear();
            nbrs.extend(a.row(v).map(|(w, _)| w).filter(|&w| !visited[w]));
            nbrs.sort_by_key(|&w| (degree[w], w));
            for &w in &nbrs {
                visited[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factor stored by rows inside the envelope of an RCM-ordered,
/// diagonally scaled copy of the matrix.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    scale: Vec<f64>,
    first: Vec<usize>,
    ptr: Vec<usize>,
    vals: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &CsrMatrix<f64>) -> Result<Self> {
        let n = a.n;
        let perm = rcm_order(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let scale: Vec<f64> = a
            .diagonal()
            .into_iter()
            .map(|d| if d > 0.0 { Ok(1.0 / d.sqrt()) } else { Err(Error::Indefinite { iteration: 0, curvature: d }) })
            .collect::<Result<_>>()?;

        let mut first: Vec<usize> = (0..n).collect();
        for (new, &old) in perm.iter().enumerate() {
            for (c, _) in a.row(old) {
                let j = inv[c];
                if j < first[new] {
                    first[new] = j;
                }
            }
        }
        let mut ptr = Vec::with_capacity(n + 1);
        ptr.push(0);
        for i in 0..n {
            ptr.push(ptr[i] + i - first[i] + 1);
        }
        let mut vals = vec![0.0; ptr[n]];
        for (new, &old) in perm.iter().enumerate() {
            for (c, v) in a.row(old) {
                let j = inv[c];
                if j <= new {
                    vals[ptr[new] + j - first[new]] += v * scale[old] * scale[c];
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            let row_i = ptr[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let ri = row_i + k0 - fi;
                let rj = ptr[j] + k0 - fj;
                let len = j - k0;
                let mut s = vals[row_i + j - fi];
                for k in 0..len {
                    s -= vals[ri + k] * vals[rj + k];
                }
                if j < i {
                    vals[row_i + j - fi] = s / vals[ptr[j] + j - fj];
                } else if s > 0.0 {
                    vals[row_i + i - fi] = s.sqrt();
                } else {
                    return Err(Error::Indefinite { iteration: i, curvature: s });
                }
            }
        }
        Ok(Self { perm, scale, first, ptr, vals })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Stored entries of the factor.
    pub fn envelope(&self) -> usize {
        self.vals.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old] * self.scale[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.vals[self.ptr[i]..self.ptr[i + 1]];
            let mut s = y[i];
            for (k, &l) in row[..i - fi].iter().enumerate() {
                s -= l * y[fi + k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.vals[self.ptr[i]..self.ptr[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, &l) in row[..i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new] * self.scale[old];
        }
        x
    }
}

/// Direct solve with iterative refinement until the relative residual is
/// at most `rel_tol` (or refinement stops improving).
pub fn solve_refined(a: &CsrMatrix<f64>, f: &EnvelopeCholesky, b: &[f64], rel_tol: f64) -> (Vec<f64>, CgReport) {
    let bnorm = dot(b, b).sqrt();
    let mut x = f.solve(b);
    if bnorm == 0.0 {
        return (x, CgReport::default());
    }
    let mut r = vec![0.0; b.len()];
    let residual = |x: &[f64], r: &mut Vec<f64>| {
        a.mul_vec_into(x, r);
        for (ri, &bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        dot(r, r).sqrt() / bnorm
    };
    let mut rel = residual(&x, &mut r);
    let mut steps = 0;
    while rel > rel_tol && steps < 5 {
        let dx = f.solve(&r);
        let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let mut r2 = vec![0.0; b.len()];
        let rel2 = residual(&trial, &mut r2);
        steps += 1;
        if rel2 >= rel {
            break;
        }
        x = trial;
        r = r2;
        rel = rel2;
    }
    (x, CgReport { iterations: steps, rel_residual: rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplace_1d(n: usize) -> CsrMatrix<f64> {
        let mut t = TripletBuilder::new(n);
        for i in 0..n {
            t.add(i, i, 2.0);
            if i > 0 {
                t.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                t.add(i, i + 1, -1.0);
            }
        }
        t.build()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = TripletBuilder::new(2);
        t.add(0, 0, 1.0);
        t.add(1, 0, 2.0);
        t.add(0, 0, 3.0);
        let m = t.build();
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn cg_solves_tridiagonal() {
        let a = laplace_1d(50);
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.mul_vec(&xs);
        let mut x = vec![0.0; 50];
        let rep = cg_jacobi(&a, &b, &mut x, &CgOptions::default()).unwrap();
        assert!(rep.rel_residual <= 1e-10);
        for (u, v) in x.iter().zip(&xs) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn cg_reports_indefinite() {
        let mut t = TripletBuilder::new(2);
        t.add(0, 0, 1.0);
        t.add(0, 1, 2.0);
        t.add(1, 0, 2.0);
        t.add(1, 1, 1.0);
        let a = t.build();
        let mut x = vec![0.0; 2];
        let err = cg_jacobi(&a, &[1.0, -1.0], &mut x, &CgOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Indefinite { .. }));
    }

    #[test]
    fn cg_reports_non_convergence() {
        let a = laplace_1d(400);
        let b = vec![1.0; 400];
        let mut x = vec![0.0; 400];
        let opts = CgOptions { rel_tol: 1e-14, max_iter_factor: 0.5 };
        assert!(matches!(
            cg_jacobi(&a, &b, &mut x, &opts),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn envelope_cholesky_matches_cg() {
        let n = 40;
        let mut tb = TripletBuilder::new(n);
        for i in 0..n {
            tb.add(i, i, 4.0 + i as f64 * 0.1);
            tb.add(i, (i * 7 + 3) % n, -0.5);
            tb.add((i * 7 + 3) % n, i, -0.5);
        }
        let a = tb.build();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let f = EnvelopeCholesky::factor(&a).unwrap();
        let (x, rep) = solve_refined(&a, &f, &b, 1e-13);
        assert!(rep.rel_residual <= 1e-13);
        let mut y = vec![0.0; n];
        cg_jacobi(&a, &b, &mut y, &CgOptions { rel_tol: 1e-14, max_iter_factor: 50.0 }).unwrap();
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn envelope_cholesky_rejects_indefinite() {
        let mut tb = TripletBuilder::new(2);
        tb.add(0, 0, 1.0);
        tb.add(0, 1, 2.0);
        tb.add(1, 0, 2.0);
        tb.add(1, 1, 1.0);
        assert!(matches!(EnvelopeCholesky::factor(&tb.build()), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplace_1d(30);
        let mut p = rcm_order(&a);
        p.sort_unstable();
        assert_eq!(p, (0..30).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn cg_f32_and_f64_agree(seed in 0u64..1000) {
            let n = 20;
            let a64 = laplace_1d(n);
            let a32 = CsrMatrix::<f32> {
                n,
                row_ptr: a64.row_ptr.clone(),
                col_idx: a64.col_idx.clone(),
                values: a64.values.iter().map(|&v| v as f32).collect(),
            };
            let b64: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let b32: Vec<f32> = b64.iter().map(|&v| v as f32).collect();
            let mut x64 = vec![0.0; n];
            let mut x32 = vec![0.0f32; n];
            cg_jacobi(&a64, &b64, &mut x64, &CgOptions::default()).unwrap();
            cg_jacobi(&a32, &b32, &mut x32, &CgOptions { rel_tol: 1e-5, max_iter_factor: 20.0 }).unwrap();
            let scale = x64.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            for (u, v) in x64.iter().zip(&x32) {
                prop_assert!((u - *v as f64).abs() < 1e-3 * scale);
            }
        }
    }
}
