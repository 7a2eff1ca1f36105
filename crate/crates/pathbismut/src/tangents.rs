//! Linear tangent equations solved by Euler along a frozen base ensemble,
//! reusing its increments.
//!
//! With `D_eta b = (grad_eta b)(t, ., mu_t)(X_t)` and `L_t(v)` the Lions
//! pairing `E <D^L b(t, X_t, .)(mu_t)(X_t), v_t>` over the ensemble:
//!
//! ```text
//! Malliavin   dw = [D_w b + sigma hdot] dt + D_w sigma dW,                 w_0 = 0
//! Lions       dv = [D_v b + L_t(v)] dt + [D_v sigma + L^sigma_t(v)] dW,    v_0 = phi(X_0)
//! damped      dZ = [D_Z b - lambda Z(t)] dt + D_Z sigma dW,                Z_0 = phi(X_0)
//! auxiliary   dU = [D_U b + L_t(v) - U(t) / (T - r0 - t)] dt + D_U sigma dW, U = 0 on [T - r0, T]
//! ```
//!
//! For Hamiltonian models the damping acts on the second block only.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mkv_solver::EnsemblePaths;
use crate::models::Coefficients;
use crate::pathspace::{current, window_sup_norm, LawFlow, LawSlice, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TangentKind {
    Malliavin,
    Lions,
    Damped {
        lambda: f64,
    },
    /// `cutoff` is `T - r0`.
    MultAux {
        cutoff: f64,
    },
    /// Deterministic correction of the Hamiltonian construction.
    HamiltonianAlpha,
}

/// Tangent paths aligned index by index with a base ensemble.
#[derive(Clone, Debug)]
pub struct TangentPaths {
    pub grid: TimeGrid,
    pub n: usize,
    pub dim: usize,
    pub kind: TangentKind,
    values: Vec<f64>,
}

impl TangentPaths {
    pub(crate) fn from_parts(
        grid: TimeGrid,
        n: usize,
        dim: usize,
        kind: TangentKind,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(values.len(), n * grid.points() * dim);
        Self {
            grid,
            n,
            dim,
            kind,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.grid.points() * self.dim;
        &self.values[i * len..(i + 1) * len]
    }

    pub fn segment(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.grid.points() + s) * self.dim;
        &self.values[start..start + self.grid.window_len() * self.dim]
    }

    pub fn terminal_segment(&self, i: usize) -> &[f64] {
        self.segment(i, self.grid.steps())
    }

    pub fn slice(&self, s: usize) -> LawSlice<'_> {
        LawSlice::from_paths(&self.values, self.n, self.dim, &self.grid, s)
    }
}

/// Cameron-Martin control `hdot`, `n x steps x m`. The value at step `s`
/// multiplies the increment over `[t_s, t_{s+1}]` and may only depend on
/// information up to `t_s`.
#[derive(Clone, Debug)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub n: usize,
    pub noise_dim: usize,
    hdot: Vec<f64>,
}

impl ControlPath {
    pub fn new(grid: TimeGrid, n: usize, noise_dim: usize, hdot: Vec<f64>) -> Result<Self> {
        if hdot.len() != n * grid.steps() * noise_dim {
            return Err(Error::SizeMismatch(format!(
                "control has {} values, expected {}",
                hdot.len(),
                n * grid.steps() * noise_dim
            )));
        }
        Ok(Self {
            grid,
            n,
            noise_dim,
            hdot,
        })
    }

    pub fn zeros(grid: TimeGrid, n: usize, noise_dim: usize) -> Self {
        Self {
            grid,
            n,
            noise_dim,
            hdot: vec![0.0; n * grid.steps() * noise_dim],
        }
    }

    /// `hdot(t_s) = f(t_s)` for every particle.
    pub fn deterministic(
        grid: TimeGrid,
        n: usize,
        noise_dim: usize,
        f: impl Fn(f64, &mut [f64]),
    ) -> Self {
        let mut row = vec![0.0; grid.steps() * noise_dim];
        for (s, h) in row.chunks_mut(noise_dim).enumerate() {
            f(grid.step_time(s), h);
        }
        Self {
            grid,
            n,
            noise_dim,
            hdot: row.repeat(n),
        }
    }

    pub fn hdot(&self) -> &[f64] {
        &self.hdot
    }

    pub fn at(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.grid.steps() + s) * self.noise_dim;
        &self.hdot[start..start + self.noise_dim]
    }

    /// `h(t_s) = sum_{j < s} hdot(t_j) dt` for `s = 0..=steps`.
    pub fn cumulative(&self, i: usize) -> Vec<f64> {
        let m = self.noise_dim;
        let mut out = vec![0.0; (self.grid.steps() + 1) * m];
        for s in 0..self.grid.steps() {
            for c in 0..m {
                out[(s + 1) * m + c] = out[s * m + c] + self.at(i, s)[c] * self.grid.dt;
            }
        }
        out
    }
}

/// Per-step propagators `P_s = I + dt (grad_1 b1)(t_s, X(t_s))` of the first
/// block, so that `K_{t_j, t_i} = P_{j-1} ... P_i`.
#[derive(Clone, Debug)]
pub struct FundamentalMatrices {
    pub grid: TimeGrid,
    pub n: usize,
    pub l: usize,
    factors: Vec<f64>,
    per_particle: bool,
}

impl FundamentalMatrices {
    /// Whether the factors differ between particles.
    pub fn per_particle(&self) -> bool {
        self.per_particle
    }

    pub fn factor(&self, i: usize, s: usize) -> &[f64] {
        let ll = self.l * self.l;
        let row = if self.per_particle {
            i * self.grid.steps() + s
        } else {
            s
        };
        &self.factors[row * ll..(row + 1) * ll]
    }

    /// `K_{t_to, t_from}` for particle `i`, `from <= to`.
    pub fn propagator(&self, i: usize, from: usize, to: usize) -> DMatrix<f64> {
        assert!(from <= to && to <= self.grid.steps());
        let mut k = DMatrix::identity(self.l, self.l);
        for s in from..to {
            k = DMatrix::from_row_slice(self.l, self.l, self.factor(i, s)) * k;
        }
        k
    }
}

enum Lions<'a> {
    Off,
    Own,
    External(&'a TangentPaths),
}

struct Terms<'a> {
    lions: Lions<'a>,
    damping: Option<(f64, Range<usize>)>,
    control: Option<&'a ControlPath>,
    cutoff: Option<usize>,
}

fn check_base(base: &EnsemblePaths, law: &LawFlow) -> Result<()> {
    if !base.grid.same_as(&law.grid) || base.dim != law.dim {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

fn integrate(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    init: &[f64],
    terms: Terms,
    kind: TangentKind,
) -> Result<TangentPaths> {
    check_base(base, law)?;
    let grid = base.grid;
    let (n, d, m) = (base.n, base.dim, base.noise_dim);
    let (k, pts, steps, dt) = (grid.k, grid.points(), grid.steps(), grid.dt);
    let seg_len = (k + 1) * d;
    if init.len() != n * seg_len {
        return Err(Error::SizeMismatch(format!(
            "{} initial tangent values for {n} segments of length {seg_len}",
            init.len()
        )));
    }
    if let Some(c) = terms.control {
        if !c.grid.same_as(&grid) || c.n != n || c.noise_dim != m {
            return Err(Error::GridMismatch);
        }
    }
    if let Lions::External(v) = &terms.lions {
        if !v.grid.same_as(&grid) || v.n != n || v.dim != d {
            return Err(Error::GridMismatch);
        }
    }
    let flags = coeffs.flags();
    let pairing_on = !matches!(terms.lions, Lions::Off) && !flags.mu_free_drift;
    let sigma_pairing_on = !matches!(terms.lions, Lions::Off) && !flags.mu_free_sigma;
    let noise_on = !flags.additive;

    let mut values = vec![0.0; n * pts * d];
    for i in 0..n {
        values[i * pts * d..i * pts * d + seg_len]
            .copy_from_slice(&init[i * seg_len..(i + 1) * seg_len]);
    }
    let mut next = vec![0.0; n * d];
    for s in 0..steps {
        let t = grid.step_time(s);
        {
            let ls = law.slice(s)?;
            let feats = coeffs.law_features(t, &ls);
            let own = LawSlice::from_paths(&values, n, d, &grid, s);
            let source = match &terms.lions {
                Lions::Off => None,
                Lions::Own => Some(own),
                Lions::External(v) => Some(v.slice(s)),
            };
            let pf = match (&source, pairing_on || sigma_pairing_on) {
                (Some(ts), true) => coeffs.pairing_features(t, &ls, ts),
                _ => None,
            };
            if (pairing_on || sigma_pairing_on) && pf.is_none() && n > coeffs.generic_pairing_cap()
            {
                return Err(Error::TooLarge {
                    n,
                    cap: coeffs.generic_pairing_cap(),
                });
            }
            let cutoff_time = terms.cutoff.map(|c| c as f64 * dt);
            next.par_chunks_mut(d)
                .enumerate()
                .with_min_len(64)
                .for_each_init(
                    || {
                        (
                            vec![0.0; d],
                            vec![0.0; d],
                            vec![0.0; d * m],
                            vec![0.0; d * m],
                        )
                    },
                    |(acc, tmp, sig, sig2), (i, out)| {
                        let seg = base.segment(i, s);
                        let tseg = own.segment(i);
                        let tcur = current(tseg, d);
                        coeffs.drift_dir(t, seg, tseg, &ls, &feats, acc);
                        if pairing_on {
                            let ts = source.as_ref().expect("pairing has a tangent source");
                            coeffs.drift_lions_pairing(t, seg, &ls, ts, pf.as_deref(), tmp);
                            acc.iter_mut().zip(tmp.iter()).for_each(|(a, b)| *a += b);
                        }
                        if let Some((lambda, range)) = &terms.damping {
                            for r in range.clone() {
                                acc[r] -= lambda * tcur[r];
                            }
                        }
                        if let (Some(c), Some(tau)) = (terms.cutoff, cutoff_time) {
                            if s < c {
                                let inv = 1.0 / (tau - t);
                                for r in 0..d {
                                    acc[r] -= tcur[r] * inv;
                                }
                            }
                        }
                        if let Some(control) = terms.control {
                            coeffs.diffusion(t, seg, &ls, &feats, sig);
                            let h = control.at(i, s);
                            for r in 0..d {
                                acc[r] += sig[r * m..(r + 1) * m]
                                    .iter()
                                    .zip(h)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                        for r in 0..d {
                            out[r] = tcur[r] + acc[r] * dt;
                        }
                        if noise_on || sigma_pairing_on {
                            sig.fill(0.0);
                            if noise_on {
                                coeffs.diffusion_dir(t, seg, tseg, sig);
                            }
                            if sigma_pairing_on {
                                let ts = source.as_ref().expect("pairing has a tangent source");
                                coeffs.diffusion_lions_pairing(
                                    t,
                                    seg,
                                    &ls,
                                    ts,
                                    pf.as_deref(),
                                    sig2,
                                );
                                sig.iter_mut().zip(sig2.iter()).for_each(|(a, b)| *a += b);
                            }
                            let dw = base.increment(i, s);
                            for r in 0..d {
                                out[r] += sig[r * m..(r + 1) * m]
                                    .iter()
                                    .zip(dw)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                        if let Some(c) = terms.cutoff {
                            if s + 1 >= c {
                                out.fill(0.0);
                            }
                        }
                    },
                );
        }
        if let Some(p) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: s,
                particle: p / d,
            });
        }
        for i in 0..n {
            let at = (i * pts + k + s + 1) * d;
            values[at..at + d].copy_from_slice(&next[i * d..(i + 1) * d]);
        }
    }
    Ok(TangentPaths {
        grid,
        n,
        dim: d,
        kind,
        values,
    })
}

pub fn solve_malliavin_tangent(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    control: &ControlPath,
) -> Result<TangentPaths> {
    let init = vec![0.0; base.n * base.grid.window_len() * base.dim];
    let terms = Terms {
        lions: Lions::Off,
        damping: None,
        control: Some(control),
        cutoff: None,
    };
    integrate(coeffs, base, law, &init, terms, TangentKind::Malliavin)
}

/// `init_tangents` holds `phi(X_{i,0})` for every particle, `n x (k + 1) x dim`.
pub fn solve_lions_tangent(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    init_tangents: &[f64],
) -> Result<TangentPaths> {
    let terms = Terms {
        lions: Lions::Own,
        damping: None,
        control: None,
        cutoff: None,
    };
    integrate(coeffs, base, law, init_tangents, terms, TangentKind::Lions)
}

pub fn solve_damped_tangent(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    init_tangents: &[f64],
    lambda: f64,
) -> Result<TangentPaths> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let range = match coeffs.flags().hamiltonian_split {
        Some((l, m)) => l..l + m,
        None => 0..coeffs.dim(),
    };
    let terms = Terms {
        lions: Lions::Off,
        damping: Some((lambda, range)),
        control: None,
        cutoff: None,
    };
    integrate(
        coeffs,
        base,
        law,
        init_tangents,
        terms,
        TangentKind::Damped { lambda },
    )
}

/// Auxiliary process of the multiplicative-noise construction. The Lions
/// pairing is taken against the Lions tangent `v` of the same `phi`.
pub fn solve_multiplicative_aux(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    init_tangents: &[f64],
    v: &TangentPaths,
) -> Result<TangentPaths> {
    let grid = base.grid;
    if !coeffs.flags().sigma_state_only {
        return Err(Error::ModelSigmaNotStateOnly(coeffs.name().to_string()));
    }
    if grid.steps() < grid.k + 2 {
        return Err(Error::HorizonTooShort {
            t_end: grid.horizon,
            r0: grid.r0,
            dt: grid.dt,
        });
    }
    let cutoff = grid.cutoff_step();
    let terms = Terms {
        lions: Lions::External(v),
        damping: None,
        control: None,
        cutoff: Some(cutoff),
    };
    let kind = TangentKind::MultAux {
        cutoff: grid.step_time(cutoff),
    };
    integrate(coeffs, base, law, init_tangents, terms, kind)
}

pub fn solve_fundamental_k(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
) -> Result<FundamentalMatrices> {
    let ham = coeffs
        .hamiltonian()
        .ok_or_else(|| Error::ModelNotHamiltonian(coeffs.name().to_string()))?;
    let (l, m) = ham.blocks();
    let grid = base.grid;
    let steps = grid.steps();
    let d = base.dim;
    let per_particle = !ham.first_jacobians_state_free();
    let rows = if per_particle { base.n } else { 1 };
    let ll = l * l;
    let mut factors = vec![0.0; rows * steps * ll];
    factors
        .par_chunks_mut(steps * ll)
        .enumerate()
        .for_each(|(i, block)| {
            let mut d2 = vec![0.0; l * m];
            for s in 0..steps {
                let p = &mut block[s * ll..(s + 1) * ll];
                let x = current(base.segment(i, s), d);
                ham.first_jacobians(grid.step_time(s), x, p, &mut d2);
                for v in p.iter_mut() {
                    *v *= grid.dt;
                }
                for r in 0..l {
                    p[r * l + r] += 1.0;
                }
            }
        });
    Ok(FundamentalMatrices {
        grid,
        n: base.n,
        l,
        factors,
        per_particle,
    })
}

/// `(1 / N) sum_i ||Z_{i, t_s}||_C^2` for every forward step `s = 0..=steps`.
pub fn second_moments(z: &TangentPaths) -> Vec<f64> {
    (0..=z.grid.steps())
        .into_par_iter()
        .map(|s| {
            let total: f64 = (0..z.n)
                .map(|i| window_sup_norm(z.segment(i, s), z.dim).powi(2))
                .sum();
            total / z.n as f64
        })
        .collect()
}

/// Least-squares slope of `t -> log E ||Z_t||_C^2` over the steps with
/// `t_s` in `[from, to]`.
pub fn log_moment_slope(z: &TangentPaths, from: f64, to: f64) -> Result<f64> {
    let moments = second_moments(z);
    let pts: Vec<(f64, f64)> = moments
        .iter()
        .enumerate()
        .map(|(s, m)| (z.grid.step_time(s), *m))
        .filter(|(t, _)| *t >= from - 1e-12 && *t <= to + 1e-12)
        .map(|(t, m)| (t, m.ln()))
        .collect();
    if pts.len() < 2 || pts.iter().any(|(_, y)| !y.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need at least two positive moments in [{from}, {to}]"
        )));
    }
    let n = pts.len() as f64;
    let (mt, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|(t, y)| (t - mt) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| (t - mt).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkv_solver::{simulate_particles, InitialSampler};
    use crate::models::{
        hamiltonian_model, linear_meanfield_delay_model, tanh_noise_delay_model, HamiltonianParams,
        LinearDelayParams, LinearFirstBlock, LinearSecondBlock,
    };
    use crate::pathspace::make_grid;
    use std::sync::Arc;

    fn lin(a: f64, b1: f64, c: f64) -> crate::models::DelayModel {
        linear_meanfield_delay_model(LinearDelayParams {
            a,
            b1,
            c,
            sigma0: 1.0,
        })
    }

    fn setup(model: &dyn Coefficients, n: usize) -> (EnsemblePaths, LawFlow) {
        let g = make_grid(1.0, 1.0 / 200.0, 0.5).unwrap();
        let ens = simulate_particles(
            model,
            &InitialSampler::gaussian(vec![0.0], vec![1.0]),
            &g,
            n,
            17,
        )
        .unwrap();
        let law = ens.law_flow();
        (ens, law)
    }

    fn constant_init(ens: &EnsemblePaths, value: f64) -> Vec<f64> {
        vec![value; ens.n * ens.grid.window_len() * ens.dim]
    }

    #[test]
    fn malliavin_zero_control_gives_zero() {
        let model = tanh_noise_delay_model(
            LinearDelayParams {
                a: 0.5,
                b1: 0.3,
                c: 0.4,
                sigma0: 1.0,
            },
            0.25,
        );
        let (ens, law) = setup(&model, 50);
        let w = solve_malliavin_tangent(&model, &ens, &law, &ControlPath::zeros(ens.grid, 50, 1))
            .unwrap();
        assert!(w.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malliavin_constant_forcing_on_ou() {
        let model = lin(1.0, 0.0, 0.0);
        let (ens, law) = setup(&model, 10);
        let control = ControlPath::deterministic(ens.grid, 10, 1, |_, h| h[0] = 1.0);
        let w = solve_malliavin_tangent(&model, &ens, &law, &control).unwrap();
        for s in [50, 100, 200] {
            let t = ens.grid.step_time(s);
            let got = current(w.segment(3, s), 1)[0];
            assert!(
                (got - (1.0 - (-t).exp())).abs() < ens.grid.dt,
                "{got} at {t}"
            );
        }
    }

    #[test]
    fn malliavin_superposition() {
        let model = lin(0.5, 0.3, 0.4);
        let (ens, law) = setup(&model, 20);
        let c1 = ControlPath::deterministic(ens.grid, 20, 1, |t, h| h[0] = t.sin());
        let c2 = ControlPath::deterministic(ens.grid, 20, 1, |t, h| h[0] = 1.0 - t * t);
        let sum: Vec<f64> = c1
            .hdot()
            .iter()
            .zip(c2.hdot())
            .map(|(a, b)| a + b)
            .collect();
        let c12 = ControlPath::new(ens.grid, 20, 1, sum).unwrap();
        let w1 = solve_malliavin_tangent(&model, &ens, &law, &c1).unwrap();
        let w2 = solve_malliavin_tangent(&model, &ens, &law, &c2).unwrap();
        let w12 = solve_malliavin_tangent(&model, &ens, &law, &c12).unwrap();
        for ((a, b), c) in w1.values().iter().zip(w2.values()).zip(w12.values()) {
            assert!((a + b - c).abs() <= 1e-10 * c.abs().max(1.0));
        }
    }

    #[test]
    fn lions_tangent_examples() {
        let model = lin(0.5, 0.3, 0.4);
        let (ens, law) = setup(&model, 40);
        let v0 = solve_lions_tangent(&model, &ens, &law, &constant_init(&ens, 0.0)).unwrap();
        assert!(v0.values().iter().all(|&v| v == 0.0));

        let v1 = solve_lions_tangent(&model, &ens, &law, &constant_init(&ens, 1.0)).unwrap();
        let v3 = solve_lions_tangent(&model, &ens, &law, &constant_init(&ens, 3.0)).unwrap();
        for (a, b) in v1.values().iter().zip(v3.values()) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let oracle =
            crate::bismut::deterministic_tangent_oracle(&model.params, 1.0, 1.0, &ens.grid);
        let got = current(v1.terminal_segment(7), 1)[0];
        assert!(
            (got - oracle).abs() < 2.0 * ens.grid.dt * oracle.abs().max(1.0),
            "{got} vs {oracle}"
        );
        assert_eq!(got, current(v1.terminal_segment(0), 1)[0]);
    }

    #[test]
    fn damped_without_damping_or_measure_matches_lions() {
        let model = lin(0.5, 0.3, 0.0);
        let (ens, law) = setup(&model, 30);
        let init: Vec<f64> = (0..ens.n * ens.grid.window_len())
            .map(|v| (v as f64).cos())
            .collect();
        let v = solve_lions_tangent(&model, &ens, &law, &init).unwrap();
        let z = solve_damped_tangent(&model, &ens, &law, &init, 0.0).unwrap();
        assert_eq!(v.values(), z.values());
        let w = solve_malliavin_tangent(&model, &ens, &law, &ControlPath::zeros(ens.grid, 30, 1))
            .unwrap();
        let z0 = solve_damped_tangent(&model, &ens, &law, &vec![0.0; init.len()], 0.0).unwrap();
        assert_eq!(w.values(), z0.values());
    }

    #[test]
    fn damped_pure_decay() {
        let model = lin(0.0, 0.0, 0.0);
        let (ens, law) = setup(&model, 5);
        let z = solve_damped_tangent(&model, &ens, &law, &constant_init(&ens, 2.0), 3.0).unwrap();
        for s in [40, 120, 200] {
            let t = ens.grid.step_time(s);
            let got = current(z.segment(1, s), 1)[0];
            assert!(
                (got - 2.0 * (-3.0 * t).exp()).abs() < 10.0 * ens.grid.dt,
                "{got}"
            );
        }
    }

    #[test]
    fn damped_second_moment_decays() {
        let model = lin(0.5, 0.3, 0.4);
        let (ens, law) = setup(&model, 200);
        let z = solve_damped_tangent(&model, &ens, &law, &constant_init(&ens, 1.0), 10.0).unwrap();
        let moments = second_moments(&z);
        assert!(moments[200].ln() <= moments[40].ln() - 2.0);
        let slow =
            solve_damped_tangent(&model, &ens, &law, &constant_init(&ens, 1.0), 5.0).unwrap();
        let (s10, s5) = (
            log_moment_slope(&z, 0.2, 1.0).unwrap(),
            log_moment_slope(&slow, 0.2, 1.0).unwrap(),
        );
        assert!(s10 < s5 && s5 < 0.0, "{s10} {s5}");
    }

    #[test]
    fn multiplicative_aux_ramp_and_cutoff() {
        let model = lin(0.0, 0.0, 0.0);
        let (ens, law) = setup(&model, 6);
        let init = constant_init(&ens, 1.5);
        let v = solve_lions_tangent(&model, &ens, &law, &init).unwrap();
        let u = solve_multiplicative_aux(&model, &ens, &law, &init, &v).unwrap();
        let g = ens.grid;
        let cutoff = g.cutoff_step();
        let tau = g.step_time(cutoff);
        for s in 0..=g.steps() {
            let got = current(u.segment(2, s), 1)[0];
            let t = g.step_time(s);
            let ramp = 1.5 * ((tau - t) / tau).max(0.0);
            assert!((got - ramp).abs() < 1e-12, "{got} vs {ramp} at {t}");
            if s >= cutoff {
                assert_eq!(got, 0.0);
            }
        }
        let zero =
            solve_multiplicative_aux(&model, &ens, &law, &vec![0.0; init.len()], &v).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multiplicative_aux_rejects_short_horizon() {
        let model = lin(0.0, 0.0, 0.0);
        let g = make_grid(0.55, 0.05, 0.5).unwrap();
        let ens =
            simulate_particles(&model, &InitialSampler::constant(vec![0.0]), &g, 2, 0).unwrap();
        let init = vec![1.0; 2 * g.window_len()];
        let law = ens.law_flow();
        let v = solve_lions_tangent(&model, &ens, &law, &init).unwrap();
        assert!(matches!(
            solve_multiplicative_aux(&model, &ens, &law, &init, &v),
            Err(Error::HorizonTooShort { .. })
        ));
    }

    fn first_block_model(a: Vec<f64>) -> crate::models::HamiltonianModel {
        hamiltonian_model(HamiltonianParams {
            l: 2,
            m: 1,
            coupling: vec![1.0, 0.0],
            sigma: vec![1.0],
            first: Arc::new(LinearFirstBlock {
                l: 2,
                m: 1,
                a,
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
        .unwrap()
    }

    #[test]
    fn fundamental_matrices() {
        let g = make_grid(1.0, 1.0 / 400.0, 0.25).unwrap();
        let init = InitialSampler::constant(vec![0.0, 0.0, 0.0]);

        let model = first_block_model(vec![0.0; 4]);
        let ens = simulate_particles(&model, &init, &g, 2, 0).unwrap();
        let k = solve_fundamental_k(&model, &ens).unwrap();
        assert_eq!(k.propagator(1, 10, 300), DMatrix::identity(2, 2));

        let a = vec![-0.5, 1.0, -1.0, -0.2];
        let model = first_block_model(a.clone());
        let ens = simulate_particles(&model, &init, &g, 2, 0).unwrap();
        let k = solve_fundamental_k(&model, &ens).unwrap();
        assert!(!k.per_particle());
        let (from, to) = (40, 360);
        let exact = (DMatrix::from_row_slice(2, 2, &a) * ((to - from) as f64 * g.dt)).exp();
        let err = (k.propagator(0, from, to) - &exact).abs().max();
        assert!(err < 2.0 * g.dt, "{err}");

        let (s, u, t) = (17, 150, 333);
        let lhs = k.propagator(0, s, t);
        let rhs = k.propagator(0, u, t) * k.propagator(0, s, u);
        assert!((lhs - rhs).abs().max() < 1e-10);
        assert_eq!(k.propagator(0, 99, 99), DMatrix::identity(2, 2));
    }

    #[test]
    fn fundamental_requires_hamiltonian() {
        let model = lin(1.0, 0.0, 0.0);
        let (ens, _) = setup(&model, 2);
        assert!(matches!(
            solve_fundamental_k(&model, &ens),
            Err(Error::ModelNotHamiltonian(_))
        ));
    }

    #[test]
    fn cumulative_control() {
        let g = make_grid(1.0, 0.25, 0.0).unwrap();
        let c = ControlPath::deterministic(g, 1, 1, |t, h| h[0] = t);
        assert_eq!(c.cumulative(0), vec![0.0, 0.0, 0.0625, 0.1875, 0.375]);
    }
}
