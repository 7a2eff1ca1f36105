//! Exact control for stochastic Hamiltonian systems with memory.
//!
//! Only the second block is driven by noise, so the control cannot move
//! `v - w^h` along an arbitrary path. Instead the second block follows
//! `alpha^{(2)}`, chosen so that the linearised first block
//!
//! ```text
//! alpha1_{j+1} = P_j alpha1_j + dt C_j alpha2_j,    P_j = I + dt grad_1 b1,  C_j = grad_2 b1
//! ```
//!
//! reaches zero at `tau = T - r0`. With `Phi_{K,j} = P_{K-1} ... P_j` and the
//! Gram sums `Qhat_j = sum_{i <= j} dt t_i (tau - t_i) Phi_{K,i+1} C_i B^T Phi_{K,i+1}^T`,
//!
//! ```text
//! alpha2_j = r_j xi2 - t_j (tau - t_j) (Phi_{K,j+1} B)^T [G_j Phi_{K,0} xi1 + Q_tau^{-1} J xi2],  j < K
//! G_j      = sum_{k >= j} omega_k Qhat_k^{-1} / sum_k omega_k,   omega_k = dt theta_k^2
//! J        = sum_{j < K} dt r_j Phi_{K,j+1} C_j,   r_j = (K - j) / K
//! ```
//!
//! where `theta_k` is the smallest singular value of `Qhat_k`. Both
//! corrections telescope against the Gram sums, so `alpha1_K = 0` holds up to
//! rounding. The matrices are deterministic only when `grad b1` does not
//! depend on the state; otherwise the control would anticipate the noise.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::controls::{assemble_control, check_mu_free_sigma, sigma_block_inverse, Inverse};
use crate::error::{Error, Result};
use crate::mkv_solver::EnsemblePaths;
use crate::models::{Coefficients, HamiltonianStructure};
use crate::pathspace::{current, window_sup_norm, LawFlow, TimeGrid};
use crate::tangents::{solve_fundamental_k, ControlPath, TangentKind, TangentPaths};

/// Quantities reported alongside the Hamiltonian control.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianDiagnostics {
    /// Smallest singular value of the discrete `Q_{T - r0}`.
    pub gram_min_singular: f64,
    /// `sup_i sup_{t in [T - r0, T]} |alpha_i(t)| / ||xi_i||_C`.
    pub alpha_terminal_ratio: f64,
}

/// `Q_t` on the grid nodes `t_0 = 0, ..., t_K = T - r0`.
#[derive(Clone, Debug)]
pub struct GramMatrices {
    pub times: Vec<f64>,
    pub q: Vec<DMatrix<f64>>,
}

struct Blocks {
    l: usize,
    m: usize,
    cutoff: usize,
    /// `P_j` for every forward step.
    p: Vec<DMatrix<f64>>,
    /// `C_j = grad_2 b1` at every node `0..=steps`.
    c: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    /// `Phi_{K,j}` for `j = 0..=K`.
    phi: Vec<DMatrix<f64>>,
}

fn blocks<'a>(
    coeffs: &'a dyn Coefficients,
    base: &EnsemblePaths,
) -> Result<(Blocks, &'a dyn HamiltonianStructure)> {
    let ham = coeffs
        .hamiltonian()
        .ok_or_else(|| Error::ModelNotHamiltonian(coeffs.name().to_string()))?;
    if !ham.first_jacobians_state_free() {
        return Err(Error::AnticipatingControl(format!(
            "the first-block Jacobians of {} depend on the state",
            coeffs.name()
        )));
    }
    let grid = base.grid;
    let cutoff = grid.cutoff_step();
    if cutoff == 0 || grid.steps() <= grid.k {
        return Err(Error::HorizonTooShort {
            t_end: grid.horizon,
            r0: grid.r0,
            dt: grid.dt,
        });
    }
    let (l, m) = ham.blocks();
    let d = l + m;
    let fm = solve_fundamental_k(coeffs, base)?;
    let p: Vec<DMatrix<f64>> = (0..grid.steps())
        .map(|s| DMatrix::from_row_slice(l, l, fm.factor(0, s)))
        .collect();
    let mut d1 = vec![0.0; l * l];
    let mut d2 = vec![0.0; l * m];
    let c: Vec<DMatrix<f64>> = (0..=grid.steps())
        .map(|s| {
            ham.first_jacobians(
                grid.step_time(s),
                current(base.segment(0, s), d),
                &mut d1,
                &mut d2,
            );
            DMatrix::from_row_slice(l, m, &d2)
        })
        .collect();
    let mut phi = vec![DMatrix::identity(l, l); cutoff + 1];
    for j in (0..cutoff).rev() {
        phi[j] = &phi[j + 1] * &p[j];
    }
    let b = DMatrix::from_row_slice(l, m, ham.coupling());
    Ok((
        Blocks {
            l,
            m,
            cutoff,
            p,
            c,
            b,
            phi,
        },
        ham,
    ))
}

fn min_singular(q: &DMatrix<f64>) -> f64 {
    q.clone().singular_values().min()
}

/// `Q_t = int_0^t s (tau - s) K_{tau,s} grad_2 b1(s) B^T K_{tau,s}^T ds` on the
/// grid nodes up to `tau = T - r0`, integrating the polynomial weight exactly
/// against the piecewise-linear interpolant of the matrix factor.
pub fn gram_matrices(coeffs: &dyn Coefficients, base: &EnsemblePaths) -> Result<GramMatrices> {
    let (bl, _) = blocks(coeffs, base)?;
    Ok(gram_from_blocks(&bl, &base.grid))
}

fn gram_from_blocks(bl: &Blocks, grid: &TimeGrid) -> GramMatrices {
    let tau = grid.step_time(bl.cutoff);
    let h = grid.dt;
    let factor = |j: usize| &bl.phi[j] * &bl.c[j] * bl.b.transpose() * bl.phi[j].transpose();
    let mut q = vec![DMatrix::zeros(bl.l, bl.l)];
    let mut times = vec![0.0];
    let mut left = factor(0);
    for j in 0..bl.cutoff {
        let a = grid.step_time(j);
        let right = factor(j + 1);
        // w(a + h u) = c0 + c1 u + c2 u^2 for u in [0, 1].
        let (c0, c1, c2) = (tau * a - a * a, h * (tau - 2.0 * a), -h * h);
        let i0 = c0 + c1 / 2.0 + c2 / 3.0;
        let i1 = c0 / 2.0 + c1 / 3.0 + c2 / 4.0;
        let next = &q[j] + &left * (h * (i0 - i1)) + &right * (h * i1);
        q.push(next);
        times.push(grid.step_time(j + 1));
        left = right;
    }
    GramMatrices { times, q }
}

/// Hamiltonian control, the correction `alpha` (aligned with the base
/// ensemble) and diagnostics. `xi` holds `phi(X_{i,0})`, `v` the Lions
/// tangent of the same `phi`.
pub fn build_hamiltonian_control(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    xi: &[f64],
    v: &TangentPaths,
) -> Result<(ControlPath, TangentPaths, HamiltonianDiagnostics)> {
    check_mu_free_sigma(coeffs)?;
    let (bl, ham) = blocks(coeffs, base)?;
    let grid = base.grid;
    let (l, m, cutoff) = (bl.l, bl.m, bl.cutoff);
    let d = l + m;
    let dt = grid.dt;
    let tau = grid.step_time(cutoff);
    let seg_len = grid.window_len() * d;
    if xi.len() != base.n * seg_len {
        return Err(Error::SizeMismatch(format!(
            "{} tangent initials for {} segments",
            xi.len(),
            base.n
        )));
    }

    let pb: Vec<DMatrix<f64>> = (0..cutoff).map(|j| &bl.phi[j + 1] * &bl.b).collect();
    let mut qhat = Vec::with_capacity(cutoff);
    let mut acc = DMatrix::zeros(l, l);
    for j in 0..cutoff {
        let t = grid.step_time(j);
        let q = &bl.phi[j + 1] * &bl.c[j] * pb[j].transpose() * (t * (tau - t) * dt);
        acc += q;
        qhat.push(acc.clone());
    }
    let q_tau = qhat[cutoff - 1].clone();
    let gram_min = min_singular(&q_tau);
    if !(gram_min >= 1e-10) {
        return Err(Error::SingularGram(gram_min));
    }
    let q_tau_inv = q_tau
        .clone()
        .try_inverse()
        .ok_or(Error::SingularGram(gram_min))?;

    let theta_floor = 1e-12 * gram_min;
    let mut suffix = vec![DMatrix::zeros(l, l); cutoff + 1];
    let mut total_omega = 0.0;
    for j in (0..cutoff).rev() {
        let theta = min_singular(&qhat[j]);
        let mut term = DMatrix::zeros(l, l);
        if theta > theta_floor {
            if let Some(inv) = qhat[j].clone().try_inverse() {
                let omega = dt * theta * theta;
                total_omega += omega;
                term = inv * omega;
            }
        }
        suffix[j] = &suffix[j + 1] + term;
    }

    let mut jmat = DMatrix::zeros(l, m);
    for j in 0..cutoff {
        let r = (cutoff - j) as f64 / cutoff as f64;
        jmat += &bl.phi[j + 1] * &bl.c[j] * (dt * r);
    }
    let qj = &q_tau_inv * &jmat;
    // alpha2_j = r_j xi2 - a_mats[j] xi1 - e_mats[j] xi2
    let mut a_mats = Vec::with_capacity(cutoff);
    let mut e_mats = Vec::with_capacity(cutoff);
    for j in 0..cutoff {
        let t = grid.step_time(j);
        let w = t * (tau - t);
        let pbt = pb[j].transpose() * w;
        a_mats.push(&pbt * (&suffix[j] / total_omega) * &bl.phi[0]);
        e_mats.push(&pbt * &qj);
    }

    let (pts, k, steps) = (grid.points(), grid.k, grid.steps());
    let mut alpha = vec![0.0; base.n * pts * d];
    alpha
        .par_chunks_mut(pts * d)
        .enumerate()
        .for_each(|(i, path)| {
            let w = &xi[i * seg_len..(i + 1) * seg_len];
            path[..seg_len].copy_from_slice(w);
            let x0 = current(w, d);
            let xi1 = nalgebra::DVector::from_column_slice(&x0[..l]);
            let xi2 = nalgebra::DVector::from_column_slice(&x0[l..]);
            let mut a1 = xi1.clone();
            for j in 0..=steps {
                let a2 = if j < cutoff {
                    let r = (cutoff - j) as f64 / cutoff as f64;
                    &xi2 * r - &a_mats[j] * &xi1 - &e_mats[j] * &xi2
                } else {
                    nalgebra::DVector::zeros(m)
                };
                let at = (k + j) * d;
                path[at..at + l].copy_from_slice(a1.as_slice());
                path[at + l..at + d].copy_from_slice(a2.as_slice());
                if j < steps {
                    a1 = &bl.p[j] * &a1 + &bl.c[j] * &a2 * dt;
                }
            }
        });
    let alpha = TangentPaths::from_parts(grid, base.n, d, TangentKind::HamiltonianAlpha, alpha);

    let alpha_terminal_ratio = (0..base.n)
        .map(|i| {
            let norm = window_sup_norm(&xi[i * seg_len..(i + 1) * seg_len], d);
            let tail = window_sup_norm(alpha.terminal_segment(i), d);
            if norm > 0.0 {
                tail / norm
            } else if tail > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);

    let inverse = Inverse::Block2 {
        l,
        inv: sigma_block_inverse(ham, 0.0)?,
    };
    let control = assemble_control(
        coeffs,
        base,
        law,
        Some(v),
        inverse,
        |ctx, i, lions, g, tmp| {
            let aseg = alpha.segment(i, ctx.s);
            coeffs.drift_dir(
                ctx.t,
                base.segment(i, ctx.s),
                aseg,
                &ctx.law,
                &ctx.feats,
                tmp,
            );
            let now = current(aseg, d);
            let next = current(alpha.segment(i, ctx.s + 1), d);
            for r in l..d {
                g[r] = tmp[r] + lions[r] - (next[r] - now[r]) / dt;
            }
        },
    )?;
    Ok((
        control,
        alpha,
        HamiltonianDiagnostics {
            gram_min_singular: gram_min,
            alpha_terminal_ratio,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkv_solver::{simulate_particles, InitialSampler};
    use crate::models::{
        hamiltonian_model, HamiltonianParams, LinearFirstBlock, LinearSecondBlock,
    };
    use crate::pathspace::make_grid;
    use crate::tangents::solve_lions_tangent;
    use std::sync::Arc;

    fn kinetic(a: f64) -> crate::models::HamiltonianModel {
        hamiltonian_model(HamiltonianParams {
            l: 1,
            m: 1,
            coupling: vec![1.0],
            sigma: vec![1.0],
            first: Arc::new(LinearFirstBlock {
                l: 1,
                m: 1,
                a: vec![a],
                c: vec![1.0],
            }),
            second: Arc::new(LinearSecondBlock {
                d: 2,
                m: 1,
                local: vec![-0.3, -0.5],
                delay: vec![0.0, 0.2],
                mean_field: vec![0.0, 0.3],
            }),
        })
        .unwrap()
    }

    fn ensemble(model: &dyn Coefficients, dt: f64, n: usize) -> (EnsemblePaths, LawFlow) {
        let g = make_grid(1.0, dt, 0.25).unwrap();
        let init = InitialSampler::gaussian(vec![0.0, 0.0], vec![1.0, 1.0]);
        let ens = simulate_particles(model, &init, &g, n, 3).unwrap();
        let law = ens.law_flow();
        (ens, law)
    }

    #[test]
    fn gram_matches_closed_form() {
        let model = kinetic(0.0);
        let (ens, _) = ensemble(&model, 1.0 / 400.0, 2);
        let gram = gram_matrices(&model, &ens).unwrap();
        let tau: f64 = 0.75;
        for (t, q) in gram.times.iter().zip(&gram.q).skip(1) {
            let exact = t * t * tau / 2.0 - t.powi(3) / 3.0;
            assert!(
                (q[(0, 0)] - exact).abs() <= 1e-6 * exact.abs(),
                "{t}: {} vs {exact}",
                q[(0, 0)]
            );
        }
    }

    #[test]
    fn alpha_vanishes_after_cutoff() {
        for a in [0.0, -0.7] {
            let model = kinetic(a);
            let (ens, law) = ensemble(&model, 1.0 / 200.0, 16);
            let xi: Vec<f64> = ens.initial_segments().iter().map(|x| 0.5 + x).collect();
            let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
            let (_, alpha, diag) = build_hamiltonian_control(&model, &ens, &law, &xi, &v).unwrap();
            assert!(
                diag.alpha_terminal_ratio <= 1e-8,
                "{}",
                diag.alpha_terminal_ratio
            );
            assert!(diag.gram_min_singular > 1e-10);
            assert_eq!(
                alpha.segment(3, 0),
                &xi[3 * ens.grid.window_len() * 2..4 * ens.grid.window_len() * 2]
            );
        }
    }

    #[test]
    fn zero_direction_gives_zero_control() {
        let model = kinetic(0.0);
        let (ens, law) = ensemble(&model, 1.0 / 100.0, 8);
        let xi = vec![0.0; ens.n * ens.grid.window_len() * 2];
        let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
        let (h, alpha, _) = build_hamiltonian_control(&model, &ens, &law, &xi, &v).unwrap();
        assert!(h.hdot().iter().all(|&x| x == 0.0));
        assert!(alpha.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn degenerate_coupling_is_singular() {
        let model = hamiltonian_model(HamiltonianParams {
            l: 2,
            m: 1,
            coupling: vec![1.0, 0.0],
            sigma: vec![1.0],
            first: Arc::new(LinearFirstBlock {
                l: 2,
                m: 1,
                a: vec![0.0; 4],
                c: vec![1.0, 0.0],
            }),
            second: Arc::new(LinearSecondBlock {
                d: 3,
                m: 1,
                local: vec![0.0, 0.0, -1.0],
                delay: vec![0.0; 3],
                mean_field: vec![0.0; 3],
            }),
        })
        .unwrap();
        let g = make_grid(1.0, 0.01, 0.25).unwrap();
        let ens =
            simulate_particles(&model, &InitialSampler::constant(vec![0.0; 3]), &g, 2, 0).unwrap();
        let law = ens.law_flow();
        let xi = vec![1.0; 2 * g.window_len() * 3];
        let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
        assert!(matches!(
            build_hamiltonian_control(&model, &ens, &law, &xi, &v),
            Err(Error::SingularGram(_))
        ));
    }
}
