//! Reference solutions the experiments compare against: the exact integrator
//! of the semi-discrete system, and the elliptic solve that produces the
//! L-shape initial velocity.

use crate::error::{Error, Result};
use crate::fem::LumpedSystem;
use crate::mesh::Mesh;
use crate::spectral::{dense_as, eigs_t_sorted, DEFAULT_DENSE_CAP};

/// Exact solution of `u'' + A u = 0`, `u(0) = u0`, `u'(0) = v0` at time `t`
/// (negative allowed), via the dense T-orthonormal eigendecomposition:
///
/// ```text
/// u(t) = sum_j [ cos(sqrt(l_j) t) (u0, e_j)_T
///              + sin(sqrt(l_j) t)/sqrt(l_j) (v0, e_j)_T ] e_j
/// ```
pub fn reference_semidiscrete(
    sys: &LumpedSystem,
    u0: &[f64],
    v0: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    Ok(reference_semidiscrete_pair(sys, u0, v0, t)?.0)
}

/// [`reference_semidiscrete`] returning position and velocity, so the state
/// can be evolved onward (or back) exactly.
pub fn reference_semidiscrete_pair(
    sys: &LumpedSystem,
    u0: &[f64],
    v0: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sys.n_dofs();
    if n > DEFAULT_DENSE_CAP {
        return Err(Error::DenseCap {
            n,
            cap: DEFAULT_DENSE_CAP,
        });
    }
    if u0.len() != n || v0.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: if u0.len() != n { u0.len() } else { v0.len() },
        });
    }
    let a = dense_as(sys);
    let (eigs, vecs) = eigs_t_sorted(sys, &a);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| vecs[(i, j)]).collect();
        let cu = sys.t_inner(u0, &col)?;
        let cv = sys.t_inner(v0, &col)?;
        // Dirichlet elimination keeps the spectrum positive; guard against
        // roundoff producing a tiny negative anyway.
        let w = eigs[j].max(0.0).sqrt();
        let (cos_wt, sinc_wt) = if w > 0.0 {
            ((w * t).cos(), (w * t).sin() / w)
        } else {
            (1.0, t)
        };
        let coef_u = cos_wt * cu + sinc_wt * cv;
        let coef_v = -w * (w * t).sin() * cu + (w * t).cos() * cv;
        for i in 0..n {
            u[i] += coef_u * col[i];
            v[i] += coef_v * col[i];
        }
    }
    Ok((u, v))
}

/// Solves the constant-source Poisson problem `lap w = rhs_const` with
/// homogeneous Dirichlet data on the mesh: `K w = -rhs_const * d` with the
/// lumped masses `d`, by Jacobi-preconditioned conjugate gradients to
/// relative residual `1e-12` (true residual, unpreconditioned norm).
pub fn elliptic_solve(mesh: &Mesh, rhs_const: f64) -> Result<Vec<f64>> {
    let sys = crate::fem::assemble(mesh)?;
    let n = sys.n_dofs();
    let b: Vec<f64> = sys.mass().iter().map(|&d| -rhs_const * d).collect();
    let b_norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }

    // Diagonal of K for the Jacobi preconditioner.
    let mut diag = vec![0.0; n];
    for i in 0..n {
        for (j, k) in sys.stiffness_row(i) {
            if j == i {
                diag[i] = k;
            }
        }
        if !(diag[i] > 0.0) {
            return Err(Error::Singular("stiffness diagonal in elliptic solve"));
        }
    }

    let kmul = |x: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let mut s = 0.0;
            for (j, k) in sys.stiffness_row(i) {
                s += k * x[j];
            }
            out[i] = s;
        }
    };

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(&ri, &di)| ri / di).collect();
    let mut p = z.clone();
    let mut kp = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
    let tol = 1e-12;
    let max_iters = 10 * n;
    for _ in 0..max_iters {
        kmul(&p, &mut kp);
        let pkp: f64 = p.iter().zip(&kp).map(|(&a, &b)| a * b).sum();
        if !(pkp > 0.0) {
            return Err(Error::Singular("indefinite stiffness in elliptic solve"));
        }
        let alpha = rz / pkp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= tol * b_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        what: "conjugate gradients in elliptic solve",
        iters: max_iters,
    })
}
