//! Monte Carlo estimators of the intrinsic derivative `D^L_phi (P_T f)(mu)`.
//!
//! Every estimator runs the same pipeline on one seeded ensemble: forward
//! particles, the Lions tangent `v` of `phi`, a flavor-specific control
//! `hdot`, and the Ito weights `D*(h) = sum_s <hdot(t_s), dW_s>`. The
//! estimate is the sample mean of `sign * f(X_T) D*(h)`, plus the remainder
//! `E (grad_{Z_T} f)(X_T)` for the asymptotic flavors.
//!
//! [`estimate_fd`] and [`fd_richardson`] difference the particle system in
//! the initial law with common random numbers and serve as the oracle.

mod controls;
mod functionals;
mod hamiltonian;
mod oracles;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use controls::{
    build_additive_control, build_asymptotic_control, build_multiplicative_control, ramp_paths,
};
pub use functionals::{Direction, Smoothness, TestFunctional};
pub use hamiltonian::{
    build_hamiltonian_control, gram_matrices, GramMatrices, HamiltonianDiagnostics,
};
pub use oracles::{
    deterministic_tangent_oracle, verify_chain_rule, verify_ibp, ChainRuleCheck, IbpCheck,
    ScalarMap,
};

use crate::error::{Error, Result};
use crate::mkv_solver::{simulate_from, simulate_particles, EnsemblePaths, InitialSampler};
use crate::models::Coefficients;
use crate::pathspace::TimeGrid;
use crate::tangents::{
    solve_damped_tangent, solve_lions_tangent, solve_multiplicative_aux, ControlPath, TangentPaths,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flavor {
    AdditiveExact,
    HamiltonianExact,
    MultiplicativeExact,
    AsymptoticNondeg,
    AsymptoticHamiltonian,
}

impl Flavor {
    pub const ALL: [Flavor; 5] = [
        Flavor::AdditiveExact,
        Flavor::HamiltonianExact,
        Flavor::MultiplicativeExact,
        Flavor::AsymptoticNondeg,
        Flavor::AsymptoticHamiltonian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::AdditiveExact => "additive_exact",
            Flavor::HamiltonianExact => "hamiltonian_exact",
            Flavor::MultiplicativeExact => "multiplicative_exact",
            Flavor::AsymptoticNondeg => "asymptotic_nondeg",
            Flavor::AsymptoticHamiltonian => "asymptotic_hamiltonian",
        }
    }

    pub fn is_asymptotic(self) -> bool {
        matches!(
            self,
            Flavor::AsymptoticNondeg | Flavor::AsymptoticHamiltonian
        )
    }

    /// Checks the model flags the flavor relies on.
    pub fn check(self, coeffs: &dyn Coefficients) -> Result<()> {
        let flags = coeffs.flags();
        match self {
            Flavor::AdditiveExact if !flags.additive => {
                Err(Error::ModelNotAdditive(coeffs.name().to_string()))
            }
            Flavor::MultiplicativeExact if !flags.sigma_state_only => {
                Err(Error::ModelSigmaNotStateOnly(coeffs.name().to_string()))
            }
            Flavor::HamiltonianExact | Flavor::AsymptoticHamiltonian
                if coeffs.hamiltonian().is_none() =>
            {
                Err(Error::ModelNotHamiltonian(coeffs.name().to_string()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flavor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown flavor {s:?}")))
    }
}

/// Initial law, grid, ensemble size and seed of one run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub init: InitialSampler,
    pub grid: TimeGrid,
    pub n: usize,
    pub seed: u64,
}

impl RunSpec {
    pub fn simulate(&self, coeffs: &dyn Coefficients) -> Result<EnsemblePaths> {
        simulate_particles(coeffs, &self.init, &self.grid, self.n, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateOptions {
    /// Damping of the asymptotic flavors.
    pub lambda: f64,
    /// Add `E (grad_{Z_T} f)(X_T)` to the asymptotic estimate.
    pub include_remainder: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            include_remainder: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BismutEstimate {
    pub flavor: Flavor,
    pub value: f64,
    /// `sd(weights) / sqrt(N)`.
    pub stderr: f64,
    /// Standard error of `value`, remainder included.
    pub total_stderr: f64,
    pub n_particles: usize,
    /// `E (grad_{Z_T} f)(X_T)` for the asymptotic flavors when `f` has a gradient.
    pub remainder: Option<f64>,
    pub remainder_stderr: Option<f64>,
    /// `|remainder|` when the remainder was left out of `value`.
    pub truncation_error: Option<f64>,
    /// `sign * f(X_T) D*(h)` per particle; `value` without remainder is their mean.
    pub weights: Vec<f64>,
    /// `D*(h)` per particle.
    pub ito_weights: Vec<f64>,
    pub diagnostics: Vec<(String, f64)>,
}

/// Sample mean and standard error `sd / sqrt(n)` (unbiased variance).
pub fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Left-point Ito sums `sum_s <hdot(t_s), dW_s>` with the base increments.
pub fn ito_weight(control: &ControlPath, base: &EnsemblePaths) -> Result<Vec<f64>> {
    if !control.grid.same_as(&base.grid)
        || control.n != base.n
        || control.noise_dim != base.noise_dim
    {
        return Err(Error::GridMismatch);
    }
    let steps = base.grid.steps();
    Ok((0..base.n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            (0..steps)
                .map(|s| {
                    control
                        .at(i, s)
                        .iter()
                        .zip(base.increment(i, s))
                        .map(|(h, w)| h * w)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect())
}

/// Simulates the ensemble described by `run` and estimates on it.
pub fn estimate_bismut(
    coeffs: &dyn Coefficients,
    run: &RunSpec,
    f: &TestFunctional,
    phi: &Direction,
    flavor: Flavor,
    opts: &EstimateOptions,
) -> Result<BismutEstimate> {
    flavor.check(coeffs)?;
    let base = run.simulate(coeffs)?;
    estimate_on(coeffs, &base, f, phi, flavor, opts)
}

/// Bismut estimate on an existing ensemble.
pub fn estimate_on(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    f: &TestFunctional,
    phi: &Direction,
    flavor: Flavor,
    opts: &EstimateOptions,
) -> Result<BismutEstimate> {
    flavor.check(coeffs)?;
    if phi.dim != base.dim {
        return Err(Error::SizeMismatch(format!(
            "direction has dimension {}, model has {}",
            phi.dim, base.dim
        )));
    }
    if flavor.is_asymptotic() && opts.include_remainder && !f.has_grad() {
        return Err(Error::MissingGradient(f.name.clone()));
    }
    let law = base.law_flow();
    let xi = phi.apply_all(&base.initial_segments());
    let v = solve_lions_tangent(coeffs, base, &law, &xi)?;
    let mut diagnostics = Vec::new();
    let mut damped: Option<TangentPaths> = None;
    let (control, sign) = match flavor {
        Flavor::AdditiveExact => (build_additive_control(coeffs, base, &law, &xi, &v)?, -1.0),
        Flavor::MultiplicativeExact => {
            let u = solve_multiplicative_aux(coeffs, base, &law, &xi, &v)?;
            (
                build_multiplicative_control(coeffs, base, &law, &u, &v)?,
                1.0,
            )
        }
        Flavor::HamiltonianExact => {
            let (h, _, diag) = build_hamiltonian_control(coeffs, base, &law, &xi, &v)?;
            diagnostics.push(("gram_min_singular".into(), diag.gram_min_singular));
            diagnostics.push(("alpha_terminal_ratio".into(), diag.alpha_terminal_ratio));
            (h, 1.0)
        }
        Flavor::AsymptoticNondeg | Flavor::AsymptoticHamiltonian => {
            let z = solve_damped_tangent(coeffs, base, &law, &xi, opts.lambda)?;
            let h = build_asymptotic_control(coeffs, base, &law, &z, &v, opts.lambda)?;
            diagnostics.push(("lambda".into(), opts.lambda));
            damped = Some(z);
            (h, 1.0)
        }
    };
    let ito = ito_weight(&control, base)?;
    let n = base.n;
    let weights: Vec<f64> = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| sign * f.eval(base.terminal_segment(i)) * ito[i])
        .collect();
    let (mean, stderr) = mean_stderr(&weights);

    let rem_samples: Option<Vec<f64>> = match (&damped, f.has_grad()) {
        (Some(z), true) => Some(
            (0..n)
                .into_par_iter()
                .with_min_len(256)
                .map(|i| {
                    f.grad_dir(base.terminal_segment(i), z.terminal_segment(i))
                        .expect("gradient checked above")
                })
                .collect(),
        ),
        _ => None,
    };
    let (remainder, remainder_stderr) = match &rem_samples {
        Some(r) => {
            let (m, s) = mean_stderr(r);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let (value, total_stderr, truncation_error) = match (&rem_samples, opts.include_remainder) {
        (Some(r), true) => {
            let total: Vec<f64> = weights.iter().zip(r).map(|(w, z)| w + z).collect();
            let (m, s) = mean_stderr(&total);
            (m, s, None)
        }
        _ => (mean, stderr, remainder.map(f64::abs)),
    };
    Ok(BismutEstimate {
        flavor,
        value,
        stderr,
        total_stderr,
        n_particles: n,
        remainder,
        remainder_stderr,
        truncation_error,
        weights,
        ito_weights: ito,
        diagnostics,
    })
}

/// Forward difference in the initial law with common random numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdEstimate {
    pub epsilon: f64,
    pub value: f64,
    /// Standard error of the per-particle difference quotients.
    pub stderr: f64,
}

fn fd_samples(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    f: &TestFunctional,
    phi: &Direction,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let initials = base.initial_segments();
    let shift = phi.apply_all(&initials);
    let shifted: Vec<f64> = initials
        .iter()
        .zip(&shift)
        .map(|(x, d)| x + eps * d)
        .collect();
    let moved = simulate_from(
        coeffs,
        &base.grid,
        &shifted,
        base.increments_arc(),
        base.seed,
    )?;
    Ok((0..base.n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| (f.eval(moved.terminal_segment(i)) - f.eval(base.terminal_segment(i))) / eps)
        .collect())
}

/// `[E f(X^eps_T) - E f(X_T)] / eps` where `X^eps` starts from
/// `X_0 + eps phi(X_0)` with the same increments.
pub fn estimate_fd(
    coeffs: &dyn Coefficients,
    run: &RunSpec,
    f: &TestFunctional,
    phi: &Direction,
    eps: f64,
) -> Result<FdEstimate> {
    let base = run.simulate(coeffs)?;
    fd_on(coeffs, &base, f, phi, eps)
}

/// [`estimate_fd`] around an existing ensemble.
pub fn fd_on(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    f: &TestFunctional,
    phi: &Direction,
    eps: f64,
) -> Result<FdEstimate> {
    let samples = fd_samples(coeffs, base, f, phi, eps)?;
    let (value, stderr) = mean_stderr(&samples);
    Ok(FdEstimate {
        epsilon: eps,
        value,
        stderr,
    })
}

/// Richardson pair `2 D(eps / 2) - D(eps)` of forward differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RichardsonFd {
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
    pub coarse: f64,
    pub fine: f64,
    /// `|D(eps / 2) - D(eps)|`, the size of the first-order bias at `eps`.
    pub bias_term: f64,
}

pub fn fd_richardson(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    f: &TestFunctional,
    phi: &Direction,
    eps: f64,
) -> Result<RichardsonFd> {
    let coarse = fd_samples(coeffs, base, f, phi, eps)?;
    let fine = fd_samples(coeffs, base, f, phi, eps / 2.0)?;
    let combined: Vec<f64> = coarse.iter().zip(&fine).map(|(c, h)| 2.0 * h - c).collect();
    let (value, stderr) = mean_stderr(&combined);
    let (dc, df) = (mean_stderr(&coarse).0, mean_stderr(&fine).0);
    Ok(RichardsonFd {
        epsilon: eps,
        value,
        stderr,
        coarse: dc,
        fine: df,
        bias_term: (df - dc).abs(),
    })
}
