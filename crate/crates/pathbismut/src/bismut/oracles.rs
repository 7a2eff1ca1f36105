//! Independent checks: the deterministic delay-ODE oracle for the linear
//! model, integration by parts along a Malliavin tangent, and the chain rule
//! for functions of a measure.

use std::sync::Arc;

use rayon::prelude::*;

use super::functionals::{Direction, TestFunctional};
use super::{ito_weight, mean_stderr};
use crate::error::{Error, Result};
use crate::mkv_solver::{simulate_particles, InitialSampler};
use crate::models::{Coefficients, LinearDelayParams};
use crate::pathspace::{LawSlice, TimeGrid};
use crate::tangents::{solve_malliavin_tangent, ControlPath};

/// `D^L_phi P_T f` for the linear delay model with constant `phi = phi0` and
/// `f(xi) = xi(0)`: the value at `T` of
///
/// ```text
/// v'(t) = (c - a) v(t) + b1 v(t - r0),   v = phi0 on [-r0, 0].
/// ```
///
/// Solved by the method of steps with RK4, halving the step from the grid's
/// `dt` until successive values agree to `1e-8`.
pub fn deterministic_tangent_oracle(
    params: &LinearDelayParams,
    phi0: f64,
    t_end: f64,
    grid: &TimeGrid,
) -> f64 {
    let kappa = params.c - params.a;
    let r0 = grid.r0;
    if phi0 == 0.0 {
        return 0.0;
    }
    if r0 == 0.0 {
        return phi0 * ((kappa + params.b1) * t_end).exp();
    }
    let mut q = 0;
    while r0 / f64::from(1u32 << q) > grid.dt {
        q += 1;
    }
    let mut prev = delay_rk4(kappa, params.b1, r0, phi0, t_end, r0 / f64::from(1u32 << q));
    for _ in 0..12 {
        q += 1;
        let next = delay_rk4(kappa, params.b1, r0, phi0, t_end, r0 / f64::from(1u32 << q));
        let done = (next - prev).abs() < 1e-8;
        prev = next;
        if done {
            break;
        }
    }
    prev
}

/// Method of steps: `y_i(s) = v(i r0 + s)` for `s in [0, r0]` solves
/// `y_i' = kappa y_i + b1 y_{i-1}` with `y_{-1} = phi0`. The stack
/// `(y_0, ..., y_M)` is integrated jointly; each pass fixes one more
/// initial condition `y_i(0) = y_{i-1}(r0)`.
fn delay_rk4(kappa: f64, b1: f64, r0: f64, phi0: f64, t_end: f64, h: f64) -> f64 {
    let intervals = (t_end / r0 - 1e-12).floor().max(0.0) as usize;
    let stack = intervals + 1;
    let rhs = |y: &[f64], out: &mut [f64]| {
        for i in 0..y.len() {
            let lag = if i == 0 { phi0 } else { y[i - 1] };
            out[i] = kappa * y[i] + b1 * lag;
        }
    };
    let integrate = |init: &[f64], span: f64| -> Vec<f64> {
        let mut y = init.to_vec();
        let n = y.len();
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        );
        let full = (span / h - 1e-9).floor().max(0.0) as usize;
        let mut steps: Vec<f64> = vec![h; full];
        let rest = span - full as f64 * h;
        if rest > 1e-14 * r0 {
            steps.push(rest);
        }
        for dh in steps {
            rhs(&y, &mut k1);
            tmp.iter_mut()
                .zip(&y)
                .zip(&k1)
                .for_each(|((t, a), b)| *t = a + 0.5 * dh * b);
            rhs(&tmp, &mut k2);
            tmp.iter_mut()
                .zip(&y)
                .zip(&k2)
                .for_each(|((t, a), b)| *t = a + 0.5 * dh * b);
            rhs(&tmp, &mut k3);
            tmp.iter_mut()
                .zip(&y)
                .zip(&k3)
                .for_each(|((t, a), b)| *t = a + dh * b);
            rhs(&tmp, &mut k4);
            for i in 0..n {
                y[i] += dh / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    };
    let mut init = vec![phi0; stack];
    for _ in 0..stack {
        let end = integrate(&init, r0);
        init[1..stack].copy_from_slice(&end[..stack - 1]);
    }
    let rem = t_end - intervals as f64 * r0;
    integrate(&init, rem)[intervals]
}

/// Both sides of `E (grad_{w^h_T} f)(X_T) = E f(X_T) D*(h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IbpCheck {
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Standard error of the per-particle difference.
    pub stderr: f64,
}

/// Simulates the ensemble, solves the Malliavin tangent for `control` (given
/// as a function of the grid) and evaluates both sides of the integration by
/// parts formula.
pub fn verify_ibp(
    coeffs: &dyn Coefficients,
    init: &InitialSampler,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    f: &TestFunctional,
    control: impl Fn(&TimeGrid, usize) -> ControlPath,
) -> Result<IbpCheck> {
    if !f.has_grad() {
        return Err(Error::MissingGradient(f.name.clone()));
    }
    let base = simulate_particles(coeffs, init, grid, n, seed)?;
    let law = base.law_flow();
    let h = control(grid, n);
    let w = solve_malliavin_tangent(coeffs, &base, &law, &h)?;
    let weights = ito_weight(&h, &base)?;
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let x = base.terminal_segment(i);
            let lhs = f
                .grad_dir(x, w.terminal_segment(i))
                .expect("gradient checked above");
            (lhs, f.eval(x) * weights[i])
        })
        .collect();
    let lhs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rhs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (lhs_mean, lhs_se) = mean_stderr(&lhs);
    let (rhs_mean, rhs_se) = mean_stderr(&rhs);
    Ok(IbpCheck {
        lhs: lhs_mean,
        lhs_stderr: lhs_se,
        rhs: rhs_mean,
        rhs_stderr: rhs_se,
        stderr: mean_stderr(&diff).1,
    })
}

type RealFn = dyn Fn(f64) -> f64 + Send + Sync;

/// A scalar map with its first two derivatives.
#[derive(Clone)]
pub struct ScalarMap {
    pub name: String,
    value: Arc<RealFn>,
    derivative: Arc<RealFn>,
    second: Arc<RealFn>,
}

impl std::fmt::Debug for ScalarMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarMap")
            .field("name", &self.name)
            .finish()
    }
}

impl ScalarMap {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
        second: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            second: Arc::new(second),
        }
    }

    pub fn identity() -> Self {
        Self::new("identity", |u| u, |_| 1.0, |_| 0.0)
    }

    pub fn square() -> Self {
        Self::new("square", |u| u * u, |u| 2.0 * u, |_| 2.0)
    }

    pub fn value(&self, u: f64) -> f64 {
        (self.value)(u)
    }

    pub fn derivative(&self, u: f64) -> f64 {
        (self.derivative)(u)
    }

    pub fn second(&self, u: f64) -> f64 {
        (self.second)(u)
    }
}

/// Numeric and analytic intrinsic derivative of `F(mu) = outer(mu(g))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainRuleCheck {
    pub numeric: f64,
    pub analytic: f64,
    pub gap: f64,
    /// Delta-method standard error of either side as an estimate of the
    /// population derivative.
    pub stderr: f64,
}

/// Compares the symmetric difference
/// `(F(mu o (Id + eps phi)^{-1}) - F(mu o (Id - eps phi)^{-1})) / (2 eps)` with
/// `outer'(mu(g)) mu(<grad g, phi>)` on the empirical law `samples`.
pub fn verify_chain_rule(
    samples: &LawSlice,
    g: &TestFunctional,
    outer: &ScalarMap,
    phi: &Direction,
    eps: f64,
) -> Result<ChainRuleCheck> {
    if !g.has_grad() {
        return Err(Error::MissingGradient(g.name.clone()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let n = samples.n();
    let len = (samples.k() + 1) * samples.dim();
    let rows: Vec<[f64; 4]> = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map_init(
            || (vec![0.0; len], vec![0.0; len]),
            |(dir, shifted), i| {
                let x = samples.segment(i);
                phi.apply_window(x, dir);
                let gx = g.eval(x);
                let grad = g.grad_dir(x, dir).expect("gradient checked above");
                shifted
                    .iter_mut()
                    .zip(x)
                    .zip(dir.iter())
                    .for_each(|((s, a), b)| *s = a + eps * b);
                let plus = g.eval(shifted);
                shifted
                    .iter_mut()
                    .zip(x)
                    .zip(dir.iter())
                    .for_each(|((s, a), b)| *s = a - eps * b);
                let minus = g.eval(shifted);
                [gx, grad, plus, minus]
            },
        )
        .collect();
    let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<f64>>();
    let (gvals, grads) = (col(0), col(1));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mu_g, mu_grad) = (mean(&gvals), mean(&grads));
    let numeric = (outer.value(mean(&col(2))) - outer.value(mean(&col(3)))) / (2.0 * eps);
    let analytic = outer.derivative(mu_g) * mu_grad;

    // Influence function of analytic = outer'(mu(g)) mu(grad):
    // outer'(mu g) (grad_i - mu grad) + outer''(mu g) mu(grad) (g_i - mu g).
    let (d1, d2) = (outer.derivative(mu_g), outer.second(mu_g));
    let influence: Vec<f64> = gvals
        .iter()
        .zip(&grads)
        .map(|(gi, di)| d1 * (di - mu_grad) + d2 * mu_grad * (gi - mu_g))
        .collect();
    let stderr = mean_stderr(&influence).1;
    Ok(ChainRuleCheck {
        numeric,
        analytic,
        gap: (numeric - analytic).abs(),
        stderr,
    })
}
