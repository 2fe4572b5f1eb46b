//! Randomized locally refined interval systems shared by the integration
//! tests. Spacings, wave speeds and the refined band are all drawn from a
//! seeded generator so failures replay bit-for-bit.

// Each test target compiles its own copy and uses a different subset.
#![allow(dead_code)]

use lts_wave_core::fem::{assemble, LumpedSystem};
use lts_wave_core::spectral::{dense_as, eigs_t_sorted};
use lts_wave_core::{Mesh, StabParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct RandomCase {
    pub sys: LumpedSystem,
    pub params: StabParams,
    pub dt: f64,
    /// Plain leapfrog limit `2 / sqrt(lambda_max(D^{-1} K))` of this system.
    pub dt_plain: f64,
    pub label: String,
}

const NU_GRID: [f64; 6] = [0.0, 0.01, 0.05, 0.2, 0.35, 0.5];

/// Interval mesh with jittered coarse cells, a contiguous band of which is
/// split into jittered subcells and flagged fine. Occasionally the band is
/// empty, leaving a purely coarse mesh; the step algebra must not care.
pub fn random_mesh(rng: &mut ChaCha8Rng) -> Mesh {
    let n_coarse: usize = rng.gen_range(4..=9);
    let band_len: usize = if rng.gen_bool(0.08) {
        0
    } else {
        rng.gen_range(1..=3.min(n_coarse - 1))
    };
    let band_lo: usize = rng.gen_range(0..=n_coarse - band_len);
    let split: usize = rng.gen_range(2..=5);

    let mut vertices = vec![0.0];
    let mut fine_flag = Vec::new();
    let mut speed = Vec::new();
    let mut x = 0.0;
    for cell in 0..n_coarse {
        let width = rng.gen_range(0.6..1.4) / n_coarse as f64;
        let refined = cell >= band_lo && cell < band_lo + band_len;
        let subs = if refined { split } else { 1 };
        let weights: Vec<f64> = (0..subs).map(|_| rng.gen_range(0.6..1.4)).collect();
        let total: f64 = weights.iter().sum();
        for w in weights {
            x += width * w / total;
            vertices.push(x);
            fine_flag.push(refined);
            speed.push(rng.gen_range(0.5..2.0));
        }
    }
    let m = vertices.len();
    let elements = (0..m - 1).flat_map(|i| [i, i + 1]).collect();
    let mesh = Mesh {
        dim: 1,
        vertices,
        elements,
        fine_flag,
        speed,
        dirichlet_nodes: vec![0, m - 1],
    };
    mesh.validate().expect("random mesh must validate");
    mesh
}

/// `count` cases covering every `(p, nu)` combination of `p in 1..=6` and the
/// damping grid before repeating. `dt_cap` bounds the step as a fraction of
/// the plain leapfrog limit.
pub fn cases(rng: &mut ChaCha8Rng, count: usize, dt_cap: f64) -> Vec<RandomCase> {
    (0..count)
        .map(|k| {
            let mesh = random_mesh(rng);
            let sys = assemble(&mesh).expect("assembly of a validated mesh");
            let p = 1 + (k % 6) as u32;
            let nu = NU_GRID[(k / 6) % NU_GRID.len()];
            let params = StabParams::new(p, nu).expect("parameters on the supported grid");
            let (eigs, _) = eigs_t_sorted(&sys, &dense_as(&sys));
            let lam_max = eigs[eigs.len() - 1];
            let dt_plain = 2.0 / lam_max.sqrt();
            let dt = rng.gen_range(0.3..=dt_cap) * dt_plain;
            let label = format!(
                "case {k}: n={}, p={p}, nu={nu}, dt={dt:.3e}",
                sys.n_dofs()
            );
            RandomCase {
                sys,
                params,
                dt,
                dt_plain,
                label,
            }
        })
        .collect()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
