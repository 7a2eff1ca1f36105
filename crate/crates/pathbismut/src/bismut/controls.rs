//! Cameron-Martin controls `hdot` of the exact and asymptotic constructions.
//!
//! Each control is built so that, step by step on the Euler grid, the
//! difference `v - w^h` between the Lions tangent and the Malliavin tangent
//! follows a prescribed process (the ramp `Z`, the auxiliary `U`, the damped
//! `Z`, or the Hamiltonian `alpha`). Every term at step `s` is read from the
//! ensemble up to `t_s`, so the controls are adapted.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mkv_solver::EnsemblePaths;
use crate::models::Coefficients;
use crate::pathspace::{current, LawFlow, LawSlice, TimeGrid};
use crate::tangents::{ControlPath, TangentKind, TangentPaths};

/// Law data shared by all particles at one step.
pub(crate) struct StepCtx<'a> {
    pub s: usize,
    pub t: f64,
    pub law: LawSlice<'a>,
    pub feats: Vec<f64>,
}

/// How the drift-space vector `G` is mapped to `hdot`.
pub(crate) enum Inverse {
    /// `sigma^T (sigma sigma^T)^{-1} G` with the full diffusion at the segment.
    Full,
    /// `sigma_2^{-1} G[l..]` with a constant `m x m` second-block diffusion.
    Block2 { l: usize, inv: Vec<f64> },
}

struct Scratch {
    lions: Vec<f64>,
    g: Vec<f64>,
    tmp: Vec<f64>,
    sig: Vec<f64>,
}

/// `hdot = sigma^+ G` at every particle and step, where `G` is written by
/// `build(ctx, i, lions, g, tmp)` and `lions` holds the drift pairing against
/// `v` (zero when `v` is `None` or the drift is measure-free).
pub(crate) fn assemble_control(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    v: Option<&TangentPaths>,
    inverse: Inverse,
    build: impl Fn(&StepCtx, usize, &[f64], &mut [f64], &mut [f64]) + Sync,
) -> Result<ControlPath> {
    let grid = base.grid;
    if !grid.same_as(&law.grid) || law.dim != base.dim {
        return Err(Error::GridMismatch);
    }
    if let Some(v) = v {
        if !v.grid.same_as(&grid) || v.n != base.n || v.dim != base.dim {
            return Err(Error::GridMismatch);
        }
    }
    let (n, d, m, steps) = (base.n, base.dim, base.noise_dim, grid.steps());
    let pairing_on = v.is_some() && !coeffs.flags().mu_free_drift;
    let mut hdot = vec![0.0; n * steps * m];
    let mut row = vec![0.0; n * m];
    for s in 0..steps {
        let t = grid.step_time(s);
        let ls = law.slice(s)?;
        let feats = coeffs.law_features(t, &ls);
        let ctx = StepCtx {
            s,
            t,
            law: ls,
            feats,
        };
        let vs = v.map(|v| v.slice(s));
        let pf = match (&vs, pairing_on) {
            (Some(vs), true) => coeffs.pairing_features(t, &ctx.law, vs),
            _ => None,
        };
        if pairing_on && pf.is_none() && n > coeffs.generic_pairing_cap() {
            return Err(Error::TooLarge {
                n,
                cap: coeffs.generic_pairing_cap(),
            });
        }
        row.par_chunks_mut(m)
            .enumerate()
            .with_min_len(64)
            .try_for_each_init(
                || Scratch {
                    lions: vec![0.0; d],
                    g: vec![0.0; d],
                    tmp: vec![0.0; d],
                    sig: vec![0.0; d * m],
                },
                |sc, (i, out)| -> Result<()> {
                    let seg = base.segment(i, s);
                    if pairing_on {
                        let vs = vs.as_ref().expect("pairing needs a tangent ensemble");
                        coeffs.drift_lions_pairing(
                            t,
                            seg,
                            &ctx.law,
                            vs,
                            pf.as_deref(),
                            &mut sc.lions,
                        );
                    } else {
                        sc.lions.fill(0.0);
                    }
                    sc.g.fill(0.0);
                    build(&ctx, i, &sc.lions, &mut sc.g, &mut sc.tmp);
                    match &inverse {
                        Inverse::Full => {
                            coeffs.diffusion(t, seg, &ctx.law, &ctx.feats, &mut sc.sig);
                            right_inverse_apply(&sc.sig, d, m, &sc.g, out, t)
                        }
                        Inverse::Block2 { l, inv } => {
                            let g2 = &sc.g[*l..];
                            for (r, o) in out.iter_mut().enumerate() {
                                *o = inv[r * m..(r + 1) * m]
                                    .iter()
                                    .zip(g2)
                                    .map(|(a, b)| a * b)
                                    .sum();
                            }
                            Ok(())
                        }
                    }
                },
            )?;
        for i in 0..n {
            let at = (i * steps + s) * m;
            hdot[at..at + m].copy_from_slice(&row[i * m..(i + 1) * m]);
        }
    }
    ControlPath::new(grid, n, m, hdot)
}

/// `out = sigma^T (sigma sigma^T)^{-1} g` for a `d x m` matrix `sigma`.
pub(crate) fn right_inverse_apply(
    sigma: &[f64],
    d: usize,
    m: usize,
    g: &[f64],
    out: &mut [f64],
    t: f64,
) -> Result<()> {
    if d == 1 && m == 1 {
        let s = sigma[0];
        if s == 0.0 || !s.is_finite() {
            return Err(Error::SingularSigma(t));
        }
        out[0] = g[0] / s;
        return Ok(());
    }
    let sig = DMatrix::from_row_slice(d, m, sigma);
    let gram = &sig * sig.transpose();
    let chol = gram.cholesky().ok_or(Error::SingularSigma(t))?;
    let y = chol.solve(&DVector::from_column_slice(g));
    let h = sig.transpose() * y;
    out.copy_from_slice(h.as_slice());
    Ok(())
}

/// Deterministic ramp `Z(t) = xi(t)` on `[-r0, 0]`,
/// `Z(t) = ((T - r0 - t)^+ / (T - r0)) xi(0)` for `t >= 0`, per particle.
pub fn ramp_paths(grid: &TimeGrid, n: usize, dim: usize, xi: &[f64]) -> Result<TangentPaths> {
    let cutoff = grid.cutoff_step();
    if cutoff == 0 || grid.steps() <= grid.k {
        return Err(Error::HorizonTooShort {
            t_end: grid.horizon,
            r0: grid.r0,
            dt: grid.dt,
        });
    }
    let (pts, seg_len) = (grid.points(), grid.window_len() * dim);
    if xi.len() != n * seg_len {
        return Err(Error::SizeMismatch(format!(
            "{} tangent initials for {n} segments",
            xi.len()
        )));
    }
    let mut values = vec![0.0; n * pts * dim];
    values
        .par_chunks_mut(pts * dim)
        .enumerate()
        .for_each(|(i, path)| {
            let w = &xi[i * seg_len..(i + 1) * seg_len];
            path[..seg_len].copy_from_slice(w);
            let x0 = current(w, dim);
            for s in 1..=grid.steps() {
                let r = cutoff.saturating_sub(s) as f64 / cutoff as f64;
                let at = (grid.k + s) * dim;
                for c in 0..dim {
                    path[at + c] = r * x0[c];
                }
            }
        });
    Ok(TangentPaths::from_parts(
        *grid,
        n,
        dim,
        TangentKind::Lions,
        values,
    ))
}

fn check_additive(coeffs: &dyn Coefficients) -> Result<()> {
    let flags = coeffs.flags();
    if !flags.additive {
        return Err(Error::ModelNotAdditive(coeffs.name().to_string()));
    }
    check_mu_free_sigma(coeffs)
}

pub(crate) fn check_mu_free_sigma(coeffs: &dyn Coefficients) -> Result<()> {
    if !coeffs.flags().mu_free_sigma {
        return Err(Error::InvalidArgument(format!(
            "model {} has a measure-dependent diffusion",
            coeffs.name()
        )));
    }
    Ok(())
}

/// Additive-noise control `hdot = -sigma^+ H` with
/// `H(t) = (grad_{Z_t} b)(X_t) + L_t(v) + xi(0) 1_{[0, T - r0)}(t) / (T - r0)`
/// for the ramp `Z` of `xi = phi(X_0)`. The matching estimate carries a
/// leading minus: `D^L_phi P_T f = -E[f(X_T) D*(h)]`.
pub fn build_additive_control(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    xi: &[f64],
    v: &TangentPaths,
) -> Result<ControlPath> {
    check_additive(coeffs)?;
    let grid = base.grid;
    let z = ramp_paths(&grid, base.n, base.dim, xi)?;
    let d = base.dim;
    let dt = grid.dt;
    assemble_control(
        coeffs,
        base,
        law,
        Some(v),
        Inverse::Full,
        |ctx, i, lions, g, tmp| {
            let seg = base.segment(i, ctx.s);
            coeffs.drift_dir(ctx.t, seg, z.segment(i, ctx.s), &ctx.law, &ctx.feats, tmp);
            let now = current(z.segment(i, ctx.s), d);
            let next = current(z.segment(i, ctx.s + 1), d);
            for r in 0..d {
                g[r] = -(tmp[r] + lions[r] - (next[r] - now[r]) / dt);
            }
        },
    )
}

/// Multiplicative-noise control `hdot = sigma^+(X(t)) G(t)` from the
/// auxiliary process `U` (see [`crate::tangents::solve_multiplicative_aux`]):
///
/// ```text
/// G(t_s) = U(t_s) / (T - r0 - t_s)                          s < K - 1
/// G(t_s) = U(t_s) / dt + (grad_{U_s} b)(X_s) + L_s(v)       s = K - 1
/// G(t_s) = (grad_{U_s} b)(X_s) + L_s(v)                     s >= K
/// ```
///
/// with `K` the step of `T - r0`. The middle row absorbs the step on which
/// `U` is pinned to zero.
pub fn build_multiplicative_control(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    u: &TangentPaths,
    v: &TangentPaths,
) -> Result<ControlPath> {
    if !coeffs.flags().sigma_state_only {
        return Err(Error::ModelSigmaNotStateOnly(coeffs.name().to_string()));
    }
    check_mu_free_sigma(coeffs)?;
    if !u.grid.same_as(&base.grid) || u.n != base.n {
        return Err(Error::GridMismatch);
    }
    let grid = base.grid;
    let cutoff = grid.cutoff_step();
    let tau = grid.step_time(cutoff);
    let d = base.dim;
    let dt = grid.dt;
    assemble_control(
        coeffs,
        base,
        law,
        Some(v),
        Inverse::Full,
        |ctx, i, lions, g, tmp| {
            let s = ctx.s;
            let useg = u.segment(i, s);
            let unow = current(useg, d);
            if s + 1 < cutoff {
                let inv = 1.0 / (tau - ctx.t);
                for r in 0..d {
                    g[r] = unow[r] * inv;
                }
                return;
            }
            coeffs.drift_dir(ctx.t, base.segment(i, s), useg, &ctx.law, &ctx.feats, tmp);
            for r in 0..d {
                g[r] = tmp[r] + lions[r];
                if s + 1 == cutoff {
                    g[r] += unow[r] / dt;
                }
            }
        },
    )
}

/// Asymptotic control `hdot = sigma^+ [L_t(v) + lambda Z(t)]` for the damped
/// tangent `Z`. For Hamiltonian models only the second block is used,
/// `hdot = sigma_2^{-1} [L^{(2)}_t(v) + lambda Z^{(2)}(t)]`.
pub fn build_asymptotic_control(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    z: &TangentPaths,
    v: &TangentPaths,
    lambda: f64,
) -> Result<ControlPath> {
    check_mu_free_sigma(coeffs)?;
    if !z.grid.same_as(&base.grid) || z.n != base.n {
        return Err(Error::GridMismatch);
    }
    let d = base.dim;
    let inverse = match coeffs.hamiltonian() {
        Some(ham) => Inverse::Block2 {
            l: ham.blocks().0,
            inv: sigma_block_inverse(ham, 0.0)?,
        },
        None => Inverse::Full,
    };
    assemble_control(
        coeffs,
        base,
        law,
        Some(v),
        inverse,
        |ctx, i, lions, g, _| {
            let znow = current(z.segment(i, ctx.s), d);
            for r in 0..d {
                g[r] = lions[r] + lambda * znow[r];
            }
        },
    )
}

/// `sigma_2(t)^{-1}`, row-major.
pub(crate) fn sigma_block_inverse(
    ham: &dyn crate::models::HamiltonianStructure,
    t: f64,
) -> Result<Vec<f64>> {
    let m = ham.blocks().1;
    let mut sig = vec![0.0; m * m];
    ham.sigma_block(t, &mut sig);
    let inv = DMatrix::from_row_slice(m, m, &sig)
        .try_inverse()
        .ok_or(Error::SingularSigma(t))?;
    Ok(inv.transpose().as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkv_solver::{simulate_particles, InitialSampler};
    use crate::models::{linear_meanfield_delay_model, tanh_noise_delay_model, LinearDelayParams};
    use crate::pathspace::make_grid;
    use crate::tangents::{solve_damped_tangent, solve_lions_tangent, solve_multiplicative_aux};

    fn params(a: f64, b1: f64, c: f64) -> LinearDelayParams {
        LinearDelayParams {
            a,
            b1,
            c,
            sigma0: 1.0,
        }
    }

    fn run(model: &dyn Coefficients, n: usize) -> (EnsemblePaths, LawFlow) {
        let g = make_grid(1.0, 1.0 / 200.0, 0.5).unwrap();
        let ens = simulate_particles(
            model,
            &InitialSampler::gaussian(vec![0.0], vec![1.0]),
            &g,
            n,
            5,
        )
        .unwrap();
        let law = ens.law_flow();
        (ens, law)
    }

    #[test]
    fn ramp_hits_zero_at_cutoff() {
        let g = make_grid(1.0, 0.01, 0.5).unwrap();
        let xi = vec![1.0; 2 * g.window_len()];
        let z = ramp_paths(&g, 2, 1, &xi).unwrap();
        let cutoff = g.cutoff_step();
        assert_eq!(current(z.segment(1, cutoff), 1)[0], 0.0);
        assert!(z.terminal_segment(0).iter().all(|&v| v == 0.0));
        assert!((current(z.segment(0, 25), 1)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn additive_control_on_ou() {
        let model = linear_meanfield_delay_model(params(1.0, 0.0, 0.0));
        let (ens, law) = run(&model, 8);
        let xi = vec![1.0; ens.n * ens.grid.window_len()];
        let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
        let h = build_additive_control(&model, &ens, &law, &xi, &v).unwrap();
        assert!((h.at(3, 0)[0] + 1.0).abs() < 1e-12, "{}", h.at(3, 0)[0]);
        let cutoff = ens.grid.cutoff_step();
        for s in 0..ens.grid.steps() {
            let t = ens.grid.step_time(s);
            let z = ((0.5 - t) / 0.5).max(0.0);
            let ramp = if s < cutoff { 2.0 } else { 0.0 };
            let expected = -(-z + ramp);
            assert!((h.at(0, s)[0] - expected).abs() < 1e-9, "s = {s}");
        }

        let zero = vec![0.0; xi.len()];
        let v0 = solve_lions_tangent(&model, &ens, &law, &zero).unwrap();
        let h0 = build_additive_control(&model, &ens, &law, &zero, &v0).unwrap();
        assert!(h0.hdot().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn additive_rejects_state_dependent_noise() {
        let model = tanh_noise_delay_model(params(1.0, 0.0, 0.0), 0.25);
        let (ens, law) = run(&model, 4);
        let xi = vec![1.0; ens.n * ens.grid.window_len()];
        let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
        assert!(matches!(
            build_additive_control(&model, &ens, &law, &xi, &v),
            Err(Error::ModelNotAdditive(_))
        ));
    }

    #[test]
    fn multiplicative_derivative_free_control_is_constant() {
        let model = linear_meanfield_delay_model(params(0.0, 0.0, 0.0));
        let (ens, law) = run(&model, 4);
        let xi = vec![0.8; ens.n * ens.grid.window_len()];
        let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
        let u = solve_multiplicative_aux(&model, &ens, &law, &xi, &v).unwrap();
        let h = build_multiplicative_control(&model, &ens, &law, &u, &v).unwrap();
        let cutoff = ens.grid.cutoff_step();
        for s in 0..cutoff - 1 {
            assert!(
                (h.at(1, s)[0] - 0.8 / 0.5).abs() < 1e-9,
                "s = {s}: {}",
                h.at(1, s)[0]
            );
        }
        for s in cutoff..ens.grid.steps() {
            assert_eq!(h.at(1, s)[0], 0.0);
        }
        let zero = vec![0.0; xi.len()];
        let v0 = solve_lions_tangent(&model, &ens, &law, &zero).unwrap();
        let u0 = solve_multiplicative_aux(&model, &ens, &law, &zero, &v0).unwrap();
        let h0 = build_multiplicative_control(&model, &ens, &law, &u0, &v0).unwrap();
        assert!(h0.hdot().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn asymptotic_without_mean_field_is_damped_tangent() {
        let model = linear_meanfield_delay_model(LinearDelayParams {
            a: 0.5,
            b1: 0.3,
            c: 0.0,
            sigma0: 2.0,
        });
        let (ens, law) = run(&model, 6);
        let xi = vec![1.0; ens.n * ens.grid.window_len()];
        let v = solve_lions_tangent(&model, &ens, &law, &xi).unwrap();
        let z = solve_damped_tangent(&model, &ens, &law, &xi, 5.0).unwrap();
        let h = build_asymptotic_control(&model, &ens, &law, &z, &v, 5.0).unwrap();
        for s in [0, 50, 199] {
            let expected = 5.0 * current(z.segment(2, s), 1)[0] / 2.0;
            assert!((h.at(2, s)[0] - expected).abs() < 1e-12);
        }
        let z0 = solve_damped_tangent(&model, &ens, &law, &xi, 0.0).unwrap();
        let h0 = build_asymptotic_control(&model, &ens, &law, &z0, &v, 0.0).unwrap();
        assert!(h0.hdot().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn right_inverse() {
        let mut out = [0.0; 2];
        right_inverse_apply(&[1.0, 2.0], 1, 2, &[5.0], &mut out, 0.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
        assert!(matches!(
            right_inverse_apply(&[0.0], 1, 1, &[1.0], &mut out[..1], 0.5),
            Err(Error::SingularSigma(t)) if t == 0.5
        ));
        assert!(
            right_inverse_apply(&[0.0, 0.0, 1.0, 0.0], 2, 2, &[1.0, 1.0], &mut out, 0.0).is_err()
        );
    }
}
