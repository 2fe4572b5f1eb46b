//! P1 conforming finite elements with mass lumping.
//!
//! [`assemble`] eliminates Dirichlet nodes at assembly time and produces a
//! [`LumpedSystem`]: the stiffness matrix `K` (CSR, symmetric, free nodes
//! only, entries `a(b_y, b_z) = (c^2 grad b_y, grad b_z)`) together with the
//! diagonal lumped mass `D` from vertex quadrature. The discrete wave
//! operator is `A = D^{-1} K`; it is self-adjoint in the mass-weighted
//! product `(u, v) = sum_z d_z u_z v_z`, which is the inner product every
//! energy and projection statement in this crate refers to.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::{partition_dofs, DofPartition, Mesh};

/// Assembled stiffness + lumped mass over the free nodes of a mesh.
///
/// The stiffness is stored fully (both triangles of the symmetric matrix) in
/// CSR, so a row doubles as the matching column. Matvec counters distinguish
/// full applications from fine-column applications; they are the cost model
/// the local time-stepping claims are audited against.
pub struct LumpedSystem {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    mass: Vec<f64>,
    partition: DofPartition,
    /// Free-dof indices flagged fine, ascending.
    fine_dofs: Vec<usize>,
    full_applies: AtomicU64,
    fine_applies: AtomicU64,
}

impl LumpedSystem {
    pub fn n_dofs(&self) -> usize {
        self.n
    }

    pub fn partition(&self) -> &DofPartition {
        &self.partition
    }

    /// Lumped mass diagonal, aligned with the free-node ordering.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Free-dof indices of the fine set.
    pub fn fine_dofs(&self) -> &[usize] {
        &self.fine_dofs
    }

    /// Stiffness row `i` as `(column, value)` pairs. The matrix is symmetric,
    /// so this is also column `i`.
    pub fn stiffness_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
            .iter()
            .copied()
            .zip(self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().copied())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::DimMismatch {
                expected: self.n,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `out = D^{-1} K v`. Counts one full application.
    pub fn apply_as_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len(v)?;
        self.check_len(out)?;
        for i in 0..self.n {
            let mut s = 0.0;
            for (j, k) in self.stiffness_row(i) {
                s += k * v[j];
            }
            out[i] = s / self.mass[i];
        }
        self.full_applies.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// `D^{-1} K v`, allocating.
    pub fn apply_as(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n];
        self.apply_as_into(v, &mut out)?;
        Ok(out)
    }

    /// `out = D^{-1} K P_f v`: only the fine entries of `v` are read, and only
    /// the stiffness columns of fine dofs are touched, so the cost scales with
    /// the fine support rather than the whole mesh. Counts one fine
    /// application.
    pub fn apply_as_fine_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len(v)?;
        self.check_len(out)?;
        out.fill(0.0);
        for &j in &self.fine_dofs {
            let vj = v[j];
            if vj != 0.0 {
                for (i, k) in self.stiffness_row(j) {
                    out[i] += k * vj;
                }
            }
        }
        for i in 0..self.n {
            out[i] /= self.mass[i];
        }
        self.fine_applies.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Zeroes the coarse entries, keeping the fine ones.
    pub fn project_fine(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        Ok(v.iter()
            .zip(&self.partition.fine_mask)
            .map(|(&x, &f)| if f { x } else { 0.0 })
            .collect())
    }

    /// Zeroes the fine entries, keeping the coarse ones.
    pub fn project_coarse(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        Ok(v.iter()
            .zip(&self.partition.fine_mask)
            .map(|(&x, &f)| if f { 0.0 } else { x })
            .collect())
    }

    /// In-place coarse projection of `v` into `out`.
    pub fn project_coarse_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len(v)?;
        self.check_len(out)?;
        for ((o, &x), &f) in out.iter_mut().zip(v).zip(&self.partition.fine_mask) {
            *o = if f { 0.0 } else { x };
        }
        Ok(())
    }

    /// Mass-weighted inner product `sum_z d_z u_z v_z`.
    pub fn t_inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok(u.iter()
            .zip(v)
            .zip(&self.mass)
            .map(|((&a, &b), &d)| d * a * b)
            .sum())
    }

    /// Norm induced by [`t_inner`](Self::t_inner).
    pub fn t_norm(&self, u: &[f64]) -> Result<f64> {
        Ok(self.t_inner(u, u)?.sqrt())
    }

    /// `(full, fine)` matvec counts since construction or the last reset.
    pub fn matvec_counts(&self) -> (u64, u64) {
        (
            self.full_applies.load(Ordering::Relaxed),
            self.fine_applies.load(Ordering::Relaxed),
        )
    }

    pub fn reset_matvec_counts(&self) {
        self.full_applies.store(0, Ordering::Relaxed);
        self.fine_applies.store(0, Ordering::Relaxed);
    }
}

/// P1 gradient coefficients of a triangle: `grad lambda_i = (beta_i, gamma_i)
/// / (2 A_signed)`.
fn triangle_coeffs(mesh: &Mesh, e: usize) -> ([f64; 3], [f64; 3], f64) {
    let el = mesh.element(e);
    let (a, b, c) = (mesh.vertex(el[0]), mesh.vertex(el[1]), mesh.vertex(el[2]));
    let beta = [b[1] - c[1], c[1] - a[1], a[1] - b[1]];
    let gamma = [c[0] - b[0], a[0] - c[0], b[0] - a[0]];
    let two_a = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    (beta, gamma, two_a)
}

/// Assembles stiffness and lumped mass over the free nodes.
///
/// 1D lumping is the trapezoid rule per element (`d_z` is the half-sum of the
/// incident element lengths); 2D lumping adds `|tau| / 3` per incident
/// triangle. The elementwise wave speed enters the stiffness as `c^2` and
/// leaves the mass untouched.
pub fn assemble(mesh: &Mesh) -> Result<LumpedSystem> {
    mesh.validate()?;
    let partition = partition_dofs(mesh);
    let n = partition.n_free();
    if n == 0 {
        return Err(Error::Mesh("mesh has no free nodes".into()));
    }
    let mut dof_of = vec![usize::MAX; mesh.n_vertices()];
    for (dof, &v) in partition.free_nodes.iter().enumerate() {
        dof_of[v] = dof;
    }

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut mass = vec![0.0; n];
    let add = |rows: &mut Vec<Vec<(usize, f64)>>, zi: usize, zj: usize, v: f64| {
        if zi != usize::MAX && zj != usize::MAX {
            rows[zi].push((zj, v));
        }
    };
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        let c2 = mesh.speed[e] * mesh.speed[e];
        match mesh.dim {
            1 => {
                let h = mesh.element_measure(e);
                let k_loc = c2 / h;
                let (z0, z1) = (dof_of[el[0]], dof_of[el[1]]);
                add(&mut rows, z0, z0, k_loc);
                add(&mut rows, z1, z1, k_loc);
                add(&mut rows, z0, z1, -k_loc);
                add(&mut rows, z1, z0, -k_loc);
                for &z in &[z0, z1] {
                    if z != usize::MAX {
                        mass[z] += 0.5 * h;
                    }
                }
            }
            _ => {
                let (beta, gamma, two_a) = triangle_coeffs(mesh, e);
                let area = 0.5 * two_a.abs();
                let scale = c2 / (4.0 * area);
                for i in 0..3 {
                    for j in 0..3 {
                        add(
                            &mut rows,
                            dof_of[el[i]],
                            dof_of[el[j]],
                            scale * (beta[i] * beta[j] + gamma[i] * gamma[j]),
                        );
                    }
                }
                for &v in el {
                    if dof_of[v] != usize::MAX {
                        mass[dof_of[v]] += area / 3.0;
                    }
                }
            }
        }
    }

    // Coalesce duplicate column entries in index order. Contributions to
    // (i, j) and (j, i) arrive in the same element order with identical
    // values, so the assembled matrix is symmetric bit-for-bit.
    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        row.sort_by_key(|&(j, _)| j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for &(j, v) in row.iter() {
            match merged.last_mut() {
                Some((jj, vv)) if *jj == j => *vv += v,
                _ => merged.push((j, v)),
            }
        }
        for (j, v) in merged {
            col_idx.push(j);
            vals.push(v);
        }
        row_ptr[i + 1] = col_idx.len();
    }

    let fine_dofs = partition
        .fine_mask
        .iter()
        .enumerate()
        .filter_map(|(dof, &f)| f.then_some(dof))
        .collect();

    Ok(LumpedSystem {
        n,
        row_ptr,
        col_idx,
        vals,
        mass,
        partition,
        fine_dofs,
        full_applies: AtomicU64::new(0),
        fine_applies: AtomicU64::new(0),
    })
}

/// Nodal interpolant of `f` over the free nodes (Dirichlet nodes are dropped;
/// their value is pinned to zero by the boundary condition).
pub fn interpolate(mesh: &Mesh, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    partition_dofs(mesh)
        .free_nodes
        .iter()
        .map(|&v| f(mesh.vertex(v)))
        .collect()
}

/// Expands a free-dof vector to all vertices, zero at Dirichlet nodes.
pub fn to_vertex_vector(mesh: &Mesh, part: &DofPartition, v: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; mesh.n_vertices()];
    for (&node, &x) in part.free_nodes.iter().zip(v) {
        full[node] = x;
    }
    full
}

/// Reference a discrete solution is compared against.
pub enum Reference<'a> {
    /// Closed-form solution with its gradient (`[g, 0]` in 1D).
    Analytic {
        value: &'a dyn Fn(&[f64]) -> f64,
        gradient: &'a dyn Fn(&[f64]) -> [f64; 2],
    },
    /// Free-dof vector on a finer mesh covering the same domain.
    FineMesh { mesh: &'a Mesh, values: &'a [f64] },
}

/// L2 and full H1 error of a free-dof solution `u_h` against the reference.
///
/// Against an analytic field the element integrals use 3-point Gauss per
/// interval and the mid-edge rule per triangle (both exact for quadratic
/// integrands). Against a fine-mesh vector, `u_h` is prolonged node-wise onto
/// the fine mesh and the difference, itself P1 there, is integrated exactly;
/// a fine vertex falling outside the coarse mesh is an error.
pub fn error_norms(mesh: &Mesh, u_h: &[f64], reference: &Reference) -> Result<(f64, f64)> {
    let part = partition_dofs(mesh);
    if u_h.len() != part.n_free() {
        return Err(Error::DimMismatch {
            expected: part.n_free(),
            got: u_h.len(),
        });
    }
    let full = to_vertex_vector(mesh, &part, u_h);
    match reference {
        Reference::Analytic { value, gradient } => {
            Ok(analytic_error_norms(mesh, &full, value, gradient))
        }
        Reference::FineMesh { mesh: fine, values } => {
            let fine_part = partition_dofs(fine);
            if values.len() != fine_part.n_free() {
                return Err(Error::DimMismatch {
                    expected: fine_part.n_free(),
                    got: values.len(),
                });
            }
            let fine_full = to_vertex_vector(fine, &fine_part, values);
            let coarse_on_fine = prolong_to_vertices(mesh, &full, fine)?;
            let diff: Vec<f64> = coarse_on_fine
                .iter()
                .zip(&fine_full)
                .map(|(a, b)| a - b)
                .collect();
            Ok(p1_norms(fine, &diff))
        }
    }
}

fn analytic_error_norms(
    mesh: &Mesh,
    full: &[f64],
    value: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> [f64; 2],
) -> (f64, f64) {
    let mut l2sq = 0.0;
    let mut h1sq = 0.0;
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        match mesh.dim {
            1 => {
                let (xl, xr) = (mesh.vertices[el[0]], mesh.vertices[el[1]]);
                let (ul, ur) = (full[el[0]], full[el[1]]);
                let h = xr - xl;
                let du = (ur - ul) / h;
                // 3-point Gauss-Legendre on [xl, xr].
                let c = 0.5 * (xl + xr);
                let r = 0.5 * h * (3.0f64 / 5.0).sqrt();
                for (q, w) in [(c - r, 5.0 / 9.0), (c, 8.0 / 9.0), (c + r, 5.0 / 9.0)] {
                    let uh = ul + du * (q - xl);
                    let d = uh - value(&[q]);
                    let g = du - gradient(&[q])[0];
                    l2sq += 0.5 * h * w * d * d;
                    h1sq += 0.5 * h * w * g * g;
                }
            }
            _ => {
                let (beta, gamma, two_a) = triangle_coeffs(mesh, e);
                let area = 0.5 * two_a.abs();
                let u = [full[el[0]], full[el[1]], full[el[2]]];
                let gx = (0..3).map(|i| u[i] * beta[i]).sum::<f64>() / two_a;
                let gy = (0..3).map(|i| u[i] * gamma[i]).sum::<f64>() / two_a;
                let w = area / 3.0;
                for i in 0..3 {
                    let j = (i + 1) % 3;
                    let (a, b) = (mesh.vertex(el[i]), mesh.vertex(el[j]));
                    let q = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                    let uh = 0.5 * (u[i] + u[j]);
                    let d = uh - value(&q);
                    let gref = gradient(&q);
                    l2sq += w * d * d;
                    h1sq += w * ((gx - gref[0]).powi(2) + (gy - gref[1]).powi(2));
                }
            }
        }
    }
    (l2sq.sqrt(), (l2sq + h1sq).sqrt())
}

/// Exact L2 and H1 norms of a P1 vertex function.
fn p1_norms(mesh: &Mesh, full: &[f64]) -> (f64, f64) {
    let mut l2sq = 0.0;
    let mut h1sq = 0.0;
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        match mesh.dim {
            1 => {
                let h = mesh.element_measure(e);
                let (a, b) = (full[el[0]], full[el[1]]);
                l2sq += h * (a * a + a * b + b * b) / 3.0;
                h1sq += (b - a) * (b - a) / h;
            }
            _ => {
                let (beta, gamma, two_a) = triangle_coeffs(mesh, e);
                let area = 0.5 * two_a.abs();
                let u = [full[el[0]], full[el[1]], full[el[2]]];
                let sum = u[0] + u[1] + u[2];
                l2sq += area / 12.0 * (u.iter().map(|x| x * x).sum::<f64>() + sum * sum);
                let gx = (0..3).map(|i| u[i] * beta[i]).sum::<f64>() / two_a;
                let gy = (0..3).map(|i| u[i] * gamma[i]).sum::<f64>() / two_a;
                h1sq += area * (gx * gx + gy * gy);
            }
        }
    }
    (l2sq.sqrt(), (l2sq + h1sq).sqrt())
}

/// Evaluates the P1 field `full` (vertex values on `mesh`) at the vertices of
/// `target`. Fails if some target vertex lies outside the source mesh.
pub fn prolong_to_vertices(mesh: &Mesh, full: &[f64], target: &Mesh) -> Result<Vec<f64>> {
    let locator = PointLocator::new(mesh);
    let mut out = Vec::with_capacity(target.n_vertices());
    for v in 0..target.n_vertices() {
        let p = target.vertex(v);
        let (e, lambda) = locator.locate(p).ok_or_else(|| {
            Error::Mesh(format!("point {p:?} lies outside the source mesh"))
        })?;
        let el = mesh.element(e);
        let val = match mesh.dim {
            1 => lambda[0] * full[el[0]] + lambda[1] * full[el[1]],
            _ => (0..3).map(|i| lambda[i] * full[el[i]]).sum(),
        };
        out.push(val);
    }
    Ok(out)
}

/// Point-in-element queries against a fixed mesh, backed by a uniform bin
/// grid over the bounding box.
pub struct PointLocator<'a> {
    mesh: &'a Mesh,
    lo: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    bins: Vec<Vec<usize>>,
}

/// Barycentric tolerance: a point this far outside an element still counts as
/// inside, absorbing roundoff at shared facets.
const BARY_TOL: f64 = 1e-9;

impl<'a> PointLocator<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let dim = mesh.dim;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in 0..mesh.n_vertices() {
            let p = mesh.vertex(v);
            for d in 0..dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let ne = mesh.n_elements().max(1);
        let per_dim = if dim == 1 {
            [ne.min(1 << 16), 1]
        } else {
            let k = ((ne as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 1 << 12);
            [k, k]
        };
        let mut cell = [1.0; 2];
        for d in 0..dim {
            let w = (hi[d] - lo[d]).max(f64::MIN_POSITIVE);
            cell[d] = w / per_dim[d] as f64;
        }
        let mut bins = vec![Vec::new(); per_dim[0] * per_dim[1]];
        let clampi = |x: f64, d: usize| -> usize {
            (((x - lo[d]) / cell[d]).floor() as isize).clamp(0, per_dim[d] as isize - 1) as usize
        };
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            let mut blo = [usize::MAX; 2];
            let mut bhi = [0usize; 2];
            for &v in el {
                let p = mesh.vertex(v);
                for d in 0..dim {
                    let b = clampi(p[d], d);
                    blo[d] = blo[d].min(b);
                    bhi[d] = bhi[d].max(b);
                }
            }
            if dim == 1 {
                for bx in blo[0]..=bhi[0] {
                    bins[bx].push(e);
                }
            } else {
                for bx in blo[0]..=bhi[0] {
                    for by in blo[1]..=bhi[1] {
                        bins[bx * per_dim[1] + by].push(e);
                    }
                }
            }
        }
        Self {
            mesh,
            lo,
            cell,
            dims: per_dim,
            bins,
        }
    }

    /// Containing element and barycentric coordinates of `p`, or `None` if
    /// the point is outside every element. On shared facets any incident
    /// element may be returned; the interpolated P1 value is the same.
    pub fn locate(&self, p: &[f64]) -> Option<(usize, Vec<f64>)> {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        let consider = |e: usize, best: &mut Option<(usize, Vec<f64>, f64)>| {
            let lambda = self.barycentric(e, p);
            let worst = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(_, _, w)| worst > *w) {
                *best = Some((e, lambda, worst));
            }
        };
        for e in self.bin_candidates(p) {
            consider(e, &mut best);
        }
        // A miss near bin borders falls back to the exhaustive scan; this is
        // rare and keeps the locator correct for any query inside the domain.
        if best.as_ref().is_none_or(|(_, _, w)| *w < -BARY_TOL) {
            for e in 0..self.mesh.n_elements() {
                consider(e, &mut best);
            }
        }
        match best {
            Some((e, mut lambda, worst)) if worst >= -BARY_TOL => {
                // Clamp tiny negatives so downstream interpolation stays a
                // convex combination.
                let mut sum = 0.0;
                for l in &mut lambda {
                    *l = l.max(0.0);
                    sum += *l;
                }
                for l in &mut lambda {
                    *l /= sum;
                }
                Some((e, lambda))
            }
            _ => None,
        }
    }

    fn bin_candidates(&self, p: &[f64]) -> impl Iterator<Item = usize> + '_ {
        let dim = self.mesh.dim;
        let mut ranges = [(0usize, 0usize); 2];
        for d in 0..dim {
            let b = ((p[d] - self.lo[d]) / self.cell[d]).floor() as isize;
            let lo = (b - 1).clamp(0, self.dims[d] as isize - 1) as usize;
            let hi = (b + 1).clamp(0, self.dims[d] as isize - 1) as usize;
            ranges[d] = (lo, hi);
        }
        let (r0, r1) = (ranges[0], ranges[1]);
        let dims = self.dims;
        let one_d = dim == 1;
        (r0.0..=r0.1)
            .flat_map(move |bx| {
                let ys = if one_d { 0..=0 } else { r1.0..=r1.1 };
                ys.map(move |by| bx * dims[1] + by)
            })
            .flat_map(|b| self.bins[b].iter().copied())
    }

    fn barycentric(&self, e: usize, p: &[f64]) -> Vec<f64> {
        let el = self.mesh.element(e);
        match self.mesh.dim {
            1 => {
                let (xl, xr) = (self.mesh.vertices[el[0]], self.mesh.vertices[el[1]]);
                let t = (p[0] - xl) / (xr - xl);
                vec![1.0 - t, t]
            }
            _ => {
                let (a, b, c) = (
                    self.mesh.vertex(el[0]),
                    self.mesh.vertex(el[1]),
                    self.mesh.vertex(el[2]),
                );
                let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
                let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
                let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
                vec![1.0 - l1 - l2, l1, l2]
            }
        }
    }
}

/// Dense consistent (non-lumped) P1 mass matrix over the free nodes. Used to
/// quantify how far lumping distorts the mass quadratic form; the integrator
/// itself never touches it.
pub fn consistent_mass_dense(mesh: &Mesh) -> Result<DMatrix<f64>> {
    mesh.validate()?;
    let part = partition_dofs(mesh);
    let n = part.n_free();
    let mut dof_of = vec![usize::MAX; mesh.n_vertices()];
    for (dof, &v) in part.free_nodes.iter().enumerate() {
        dof_of[v] = dof;
    }
    let mut m = DMatrix::zeros(n, n);
    for e in 0..mesh.n_elements() {
        let el = mesh.element(e);
        match mesh.dim {
            1 => {
                let h = mesh.element_measure(e);
                let loc = [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]];
                for i in 0..2 {
                    for j in 0..2 {
                        let (zi, zj) = (dof_of[el[i]], dof_of[el[j]]);
                        if zi != usize::MAX && zj != usize::MAX {
                            m[(zi, zj)] += loc[i][j];
                        }
                    }
                }
            }
            _ => {
                let area = mesh.element_measure(e);
                for i in 0..3 {
                    for j in 0..3 {
                        let (zi, zj) = (dof_of[el[i]], dof_of[el[j]]);
                        if zi != usize::MAX && zj != usize::MAX {
                            m[(zi, zj)] += area / 12.0 * if i == j { 2.0 } else { 1.0 };
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_interval_mesh, build_lshape_graded};
    use rand::{Rng, SeedableRng};

    fn uniform_1d(n: usize) -> Mesh {
        build_interval_mesh(1.0 / n as f64, 0.5, 0.5, 1, 1.0).unwrap()
    }

    fn unit_right_triangle(speed: f64) -> Mesh {
        Mesh {
            dim: 2,
            vertices: vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            elements: vec![0, 1, 2],
            fine_flag: vec![false],
            speed: vec![speed],
            dirichlet_nodes: vec![],
        }
    }

    fn dense_stiffness(sys: &LumpedSystem) -> DMatrix<f64> {
        let n = sys.n_dofs();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in sys.stiffness_row(i) {
                k[(i, j)] = v;
            }
        }
        k
    }

    #[test]
    fn uniform_interval_stencil() {
        let mesh = uniform_1d(4);
        let sys = assemble(&mesh).unwrap();
        assert_eq!(sys.n_dofs(), 3);
        let k = dense_stiffness(&sys);
        let expect = 4.0 * DMatrix::from_row_slice(3, 3, &[
            2.0, -1.0, 0.0, //
            -1.0, 2.0, -1.0, //
            0.0, -1.0, 2.0,
        ]);
        assert_eq!(k, expect);
        assert_eq!(sys.mass(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn unit_triangle_element_matrix() {
        let sys = assemble(&unit_right_triangle(1.0)).unwrap();
        let k = dense_stiffness(&sys);
        let expect = DMatrix::from_row_slice(3, 3, &[
            1.0, -0.5, -0.5, //
            -0.5, 0.5, 0.0, //
            -0.5, 0.0, 0.5,
        ]);
        assert_eq!(k, expect);
        for d in sys.mass() {
            assert!((d - 1.0 / 6.0).abs() < 1e-16);
        }

        let sys2 = assemble(&unit_right_triangle(2.0)).unwrap();
        assert_eq!(dense_stiffness(&sys2), 4.0 * k);
    }

    #[test]
    fn stiffness_rows_annihilate_constants() {
        // Interior rows away from the boundary sum to zero; c is constant.
        let mesh = build_lshape_graded(4, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let ones = vec![1.0; sys.n_dofs()];
        let part = sys.partition().clone();
        let dmask = mesh.dirichlet_mask();
        let mut near_boundary = vec![false; mesh.n_vertices()];
        for e in 0..mesh.n_elements() {
            let el = mesh.element(e);
            if el.iter().any(|&v| dmask[v]) {
                for &v in el {
                    near_boundary[v] = true;
                }
            }
        }
        let av = sys.apply_as(&ones).unwrap();
        for (dof, &node) in part.free_nodes.iter().enumerate() {
            if !near_boundary[node] {
                assert!(
                    av[dof].abs() < 1e-12,
                    "row {dof} (node {node}) sum {}",
                    av[dof]
                );
            }
        }
    }

    #[test]
    fn sine_modes_are_near_eigenvectors() {
        let n = 50;
        let mesh = uniform_1d(n);
        let h = 1.0 / n as f64;
        let sys = assemble(&mesh).unwrap();
        for k in [1usize, 3, 10] {
            let v: Vec<f64> = (1..n)
                .map(|i| (k as f64 * std::f64::consts::PI * i as f64 * h).sin())
                .collect();
            let av = sys.apply_as(&v).unwrap();
            let lam = 4.0 / (h * h) * (k as f64 * std::f64::consts::PI * h / 2.0).sin().powi(2);
            for (a, x) in av.iter().zip(&v) {
                assert!(
                    (a - lam * x).abs() <= 1e-9 * lam,
                    "mode {k}: {a} vs {}",
                    lam * x
                );
            }
        }
    }

    #[test]
    fn operator_is_self_adjoint_in_mass_product() {
        let mesh = build_interval_mesh(0.05, 0.8, 1.0, 4, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let u: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let au = sys.apply_as(&u).unwrap();
            let av = sys.apply_as(&v).unwrap();
            let lhs = sys.t_inner(&au, &v).unwrap();
            let rhs = sys.t_inner(&av, &u).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs - rhs).abs() < 1e-13 * scale);

            // (A u, v)_T equals the stiffness bilinear form u' K v.
            let mut kform = 0.0;
            for i in 0..sys.n_dofs() {
                for (j, kv) in sys.stiffness_row(i) {
                    kform += v[i] * kv * u[j];
                }
            }
            assert!((lhs - kform).abs() < 1e-13 * scale);
        }
    }

    #[test]
    fn apply_is_linear() {
        let mesh = build_interval_mesh(0.1, 0.7, 1.0, 3, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.37, -1.21);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(&x, &y)| a * x + b * y).collect();
        let lhs = sys.apply_as(&combo).unwrap();
        let au = sys.apply_as(&u).unwrap();
        let av = sys.apply_as(&v).unwrap();
        for i in 0..sys.n_dofs() {
            let rhs = a * au[i] + b * av[i];
            assert!((lhs[i] - rhs).abs() < 1e-13 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn projections_split_orthogonally() {
        let mesh = build_interval_mesh(0.125, 0.75, 1.0, 2, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pf = sys.project_fine(&v).unwrap();
        let pc = sys.project_coarse(&v).unwrap();
        for i in 0..v.len() {
            assert_eq!(pf[i] + pc[i], v[i]);
            assert!(pf[i] == 0.0 || pc[i] == 0.0);
        }
        let nf = sys.t_inner(&pf, &pf).unwrap();
        let nc = sys.t_inner(&pc, &pc).unwrap();
        let nv = sys.t_inner(&v, &v).unwrap();
        assert!((nf + nc - nv).abs() < 1e-13 * nv);

        let u: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pu = sys.project_fine(&u).unwrap();
        let lhs = sys.t_inner(&pu, &v).unwrap();
        let rhs = sys.t_inner(&u, &pf).unwrap();
        assert!((lhs - rhs).abs() < 1e-14 + 1e-13 * lhs.abs());
    }

    #[test]
    fn all_fine_projection_is_identity() {
        let mesh = build_interval_mesh(0.25, 0.0, 1.0, 2, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let v: Vec<f64> = (0..sys.n_dofs()).map(|i| i as f64 - 2.0).collect();
        assert_eq!(sys.project_fine(&v).unwrap(), v);
        assert!(sys.project_coarse(&v).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn t_inner_uniform_example() {
        let sys = assemble(&uniform_1d(4)).unwrap();
        let ones = vec![1.0; 3];
        assert!((sys.t_inner(&ones, &ones).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn lumping_is_exact_against_piecewise_constants() {
        // One element [0, 0.7], u P1, v constant: the trapezoid-lumped
        // pairing reproduces the integral of u v exactly.
        let mesh = Mesh {
            dim: 1,
            vertices: vec![0.0, 0.7],
            elements: vec![0, 1],
            fine_flag: vec![false],
            speed: vec![1.0],
            dirichlet_nodes: vec![],
        };
        let sys = assemble(&mesh).unwrap();
        let u = vec![0.3, -0.2];
        let v = vec![1.4, 1.4];
        let exact = 1.4 * 0.7 * (0.3 - 0.2) / 2.0;
        assert!((sys.t_inner(&u, &v).unwrap() - exact).abs() < 1e-15);
    }

    #[test]
    fn lumped_vs_consistent_mass_ratios() {
        for n in [16usize, 100, 200] {
            let mesh = uniform_1d(n);
            let sys = assemble(&mesh).unwrap();
            let m = consistent_mass_dense(&mesh).unwrap();
            let chol = m.clone().cholesky().expect("consistent mass is SPD");
            // Generalized eigenvalues of (D, M): ratios of the quadratic forms.
            let linv_t = chol.l().try_inverse().unwrap();
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(sys.mass()));
            let sym = &linv_t * d * linv_t.transpose();
            let eig = nalgebra::SymmetricEigen::new(sym);
            for lam in eig.eigenvalues.iter() {
                assert!((0.3..=3.0).contains(lam), "ratio {lam} out of range, n={n}");
            }
        }
    }

    #[test]
    fn coercivity_on_small_systems() {
        for mesh in [
            build_interval_mesh(0.25, 0.75, 1.0, 2, 1.0).unwrap(),
            build_lshape_graded(3, 1.4).unwrap(),
        ] {
            let sys = assemble(&mesh).unwrap();
            let n = sys.n_dofs();
            let mut sym = DMatrix::zeros(n, n);
            for i in 0..n {
                for (j, v) in sys.stiffness_row(i) {
                    sym[(i, j)] = v / (sys.mass()[i] * sys.mass()[j]).sqrt();
                }
            }
            let eig = nalgebra::SymmetricEigen::new(sym);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0, "smallest eigenvalue {min}");
        }
    }

    #[test]
    fn interpolation_basics() {
        let mesh = uniform_1d(4);
        assert!(interpolate(&mesh, |_| 0.0).iter().all(|&x| x == 0.0));
        let gauss = interpolate(&mesh, |p| (-400.0 * (p[0] - 0.5).powi(2)).exp());
        assert_eq!(gauss[1], 1.0); // node at x = 1/2
        let lin = interpolate(&mesh, |p| 3.0 * p[0] - 0.25);
        assert_eq!(lin, vec![0.5, 1.25, 2.0]);
    }

    #[test]
    fn errors_vanish_for_exact_p1_reference() {
        let mesh = uniform_1d(4);
        let hat = |p: &[f64]| 1.0 - (4.0 * (p[0] - 0.5)).abs().min(1.0);
        let hat_grad = move |p: &[f64]| -> [f64; 2] {
            if (p[0] - 0.5).abs() >= 0.25 {
                [0.0, 0.0]
            } else if p[0] < 0.5 {
                [4.0, 0.0]
            } else {
                [-4.0, 0.0]
            }
        };
        let u_h = interpolate(&mesh, hat);
        let (l2, h1) = error_norms(
            &mesh,
            &u_h,
            &Reference::Analytic {
                value: &hat,
                gradient: &hat_grad,
            },
        )
        .unwrap();
        assert!(l2 < 1e-14, "l2 = {l2}");
        assert!(h1 < 1e-14, "h1 = {h1}");
    }

    #[test]
    fn zero_solution_against_sine() {
        let mesh = uniform_1d(100);
        let u_h = vec![0.0; 99];
        let pi = std::f64::consts::PI;
        let (l2, h1) = error_norms(
            &mesh,
            &u_h,
            &Reference::Analytic {
                value: &|p: &[f64]| (pi * p[0]).sin(),
                gradient: &|p: &[f64]| [pi * (pi * p[0]).cos(), 0.0],
            },
        )
        .unwrap();
        assert!((l2 - 0.5f64.sqrt()).abs() < 1e-6, "l2 = {l2}");
        let want_h1 = (0.5 + pi * pi * 0.5).sqrt();
        assert!((h1 - want_h1).abs() < 1e-5, "h1 = {h1}");
    }

    #[test]
    fn quadrature_integrates_quadratics_exactly() {
        // u_h = 0 against f = x: the reported l2^2 is the exact integral of
        // x^2 (1/3 on the interval, 1/12 on the unit right triangle).
        let mesh = Mesh {
            dim: 1,
            vertices: vec![0.0, 1.0],
            elements: vec![0, 1],
            fine_flag: vec![false],
            speed: vec![1.0],
            dirichlet_nodes: vec![],
        };
        let (l2, _) = error_norms(
            &mesh,
            &[0.0, 0.0],
            &Reference::Analytic {
                value: &|p: &[f64]| p[0],
                gradient: &|_: &[f64]| [1.0, 0.0],
            },
        )
        .unwrap();
        assert!((l2 * l2 - 1.0 / 3.0).abs() < 1e-15);

        let tri = unit_right_triangle(1.0);
        let (l2, _) = error_norms(
            &tri,
            &[0.0; 3],
            &Reference::Analytic {
                value: &|p: &[f64]| p[0],
                gradient: &|_: &[f64]| [1.0, 0.0],
            },
        )
        .unwrap();
        assert!((l2 * l2 - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn fine_mesh_reference_round_trip() {
        let coarse = uniform_1d(4);
        let fine = uniform_1d(8);
        let hat = |p: &[f64]| 1.0 - (4.0 * (p[0] - 0.5)).abs().min(1.0);
        let u_c = interpolate(&coarse, hat);
        let u_f = interpolate(&fine, hat);
        let (l2, h1) = error_norms(
            &coarse,
            &u_c,
            &Reference::FineMesh {
                mesh: &fine,
                values: &u_f,
            },
        )
        .unwrap();
        assert!(l2 < 1e-15 && h1 < 1e-15, "l2={l2} h1={h1}");

        let lcoarse = build_lshape_graded(3, 1.5).unwrap();
        let lfine = build_lshape_graded(6, 1.5).unwrap();
        // The reference must vanish on the boundary (free-dof vectors expand
        // with zeros at Dirichlet nodes), so compare bump interpolants.
        let bump = |p: &[f64]| {
            p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]) * ((p[0] - 0.5).max(0.0) + 1.0)
        };
        let u_c = interpolate(&lcoarse, bump);
        let u_f = interpolate(&lfine, bump);
        let (l2, _) = error_norms(
            &lcoarse,
            &u_c,
            &Reference::FineMesh {
                mesh: &lfine,
                values: &u_f,
            },
        )
        .unwrap();
        // Not nested as functions (bump is not P1), so the error is the
        // genuine interpolation gap: small but nonzero.
        assert!(l2 > 0.0 && l2 < 0.05, "l2 = {l2}");
    }

    #[test]
    fn non_nested_reference_is_rejected() {
        let tri = unit_right_triangle(1.0);
        let lmesh = build_lshape_graded(2, 1.0).unwrap();
        let u_tri = vec![0.0; 3];
        let part = crate::mesh::partition_dofs(&lmesh);
        let u_l = vec![0.0; part.n_free()];
        let res = error_norms(
            &tri,
            &u_tri,
            &Reference::FineMesh {
                mesh: &lmesh,
                values: &u_l,
            },
        );
        assert!(res.is_err());
    }

    #[test]
    fn fine_apply_matches_projected_full_apply() {
        let mesh = build_interval_mesh(0.05, 0.8, 1.0, 5, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..sys.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut fast = vec![0.0; sys.n_dofs()];
        sys.apply_as_fine_into(&v, &mut fast).unwrap();
        let slow = sys.apply_as(&sys.project_fine(&v).unwrap()).unwrap();
        for i in 0..sys.n_dofs() {
            assert!((fast[i] - slow[i]).abs() < 1e-13 * slow[i].abs().max(1.0));
        }
    }

    #[test]
    fn matvec_counters_track_applications() {
        let mesh = build_interval_mesh(0.25, 0.75, 1.0, 2, 1.0).unwrap();
        let sys = assemble(&mesh).unwrap();
        let v = vec![1.0; sys.n_dofs()];
        let mut out = vec![0.0; sys.n_dofs()];
        assert_eq!(sys.matvec_counts(), (0, 0));
        sys.apply_as_into(&v, &mut out).unwrap();
        sys.apply_as_into(&v, &mut out).unwrap();
        sys.apply_as_fine_into(&v, &mut out).unwrap();
        assert_eq!(sys.matvec_counts(), (2, 1));
        sys.reset_matvec_counts();
        assert_eq!(sys.matvec_counts(), (0, 0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sys = assemble(&uniform_1d(4)).unwrap();
        assert!(sys.apply_as(&[1.0, 2.0]).is_err());
        assert!(sys.t_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn locator_finds_points_in_graded_mesh() {
        let mesh = build_lshape_graded(8, 1.5).unwrap();
        let loc = PointLocator::new(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0;
        for _ in 0..500 {
            let x: f64 = rng.gen_range(0.0..1.0);
            let y: f64 = rng.gen_range(0.0..1.0);
            let inside_l = !(x >= 0.5 && y >= 0.5);
            match loc.locate(&[x, y]) {
                Some((e, lambda)) => {
                    assert!(inside_l || x == 0.5 || y == 0.5);
                    assert!((lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let el = mesh.element(e);
                    let px: f64 = (0..3).map(|i| lambda[i] * mesh.vertex(el[i])[0]).sum();
                    let py: f64 = (0..3).map(|i| lambda[i] * mesh.vertex(el[i])[1]).sum();
                    assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9);
                    hits += 1;
                }
                None => assert!(!inside_l),
            }
        }
        assert!(hits > 300);
    }
}
