//! Coefficients `b(t, xi, mu)` and `sigma(t, xi, mu)` of a distribution-path
//! dependent SDE, with directional derivatives in the segment and Lions
//! pairings in the measure.
//!
//! Callbacks receive raw windows (`(k + 1) * dim` values, oldest point
//! first) and write into caller-provided buffers. Diffusion matrices are
//! `dim x noise_dim`, row-major. Implementations must be pure: the solvers
//! call them concurrently and rely on results not depending on the order.

mod hamiltonian;
mod linear;

pub use hamiltonian::{
    hamiltonian_model, FirstBlock, HamiltonianModel, HamiltonianParams, LinearFirstBlock,
    LinearSecondBlock, SecondBlock,
};
pub use linear::{
    linear_meanfield_delay_model, tanh_noise_delay_model, DelayModel, LinearDelayParams, NoiseShape,
};

use crate::pathspace::{LawSlice, Segment};

/// Structural properties the solvers and estimators dispatch on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelFlags {
    /// `sigma` depends on `t` only.
    pub additive: bool,
    /// `sigma` depends on `(t, xi(0))` only.
    pub sigma_state_only: bool,
    /// `sigma` does not depend on the measure.
    pub mu_free_sigma: bool,
    /// `b` does not depend on the measure.
    pub mu_free_drift: bool,
    /// `(l, m)` for a stochastic Hamiltonian system.
    pub hamiltonian_split: Option<(usize, usize)>,
}

pub trait Coefficients: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn flags(&self) -> ModelFlags;

    /// Growth and dissipativity constants, reported but never enforced.
    fn metadata(&self) -> Vec<(String, f64)> {
        Vec::new()
    }

    /// Summary statistics of the law computed once per time step and passed
    /// to the drift and diffusion callbacks.
    fn law_features(&self, _t: f64, _law: &LawSlice) -> Vec<f64> {
        Vec::new()
    }

    fn drift(&self, t: f64, seg: &[f64], law: &LawSlice, feats: &[f64], out: &mut [f64]);

    fn diffusion(&self, t: f64, seg: &[f64], law: &LawSlice, feats: &[f64], out: &mut [f64]);

    /// `(grad_eta b)(t, ., mu)(xi)`.
    fn drift_dir(
        &self,
        t: f64,
        seg: &[f64],
        dir: &[f64],
        law: &LawSlice,
        feats: &[f64],
        out: &mut [f64],
    );

    /// `(grad_eta sigma)(t, .)(xi)`, a `dim x noise_dim` matrix.
    fn diffusion_dir(&self, t: f64, seg: &[f64], dir: &[f64], out: &mut [f64]);

    /// Per-step statistics of the coupled (particle, tangent) ensemble that
    /// reduce the Lions pairing to `O(1)` per particle. `None` selects the
    /// generic `O(N)` kernel sum.
    fn pairing_features(&self, _t: f64, _law: &LawSlice, _tangents: &LawSlice) -> Option<Vec<f64>> {
        None
    }

    /// Contribution `<D^L b(t, observer, .)(mu)(x_j), v_j>` of one particle.
    fn drift_lions_kernel(
        &self,
        _t: f64,
        _observer: &[f64],
        _x_j: &[f64],
        _v_j: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }

    /// `E <D^L b(t, observer, .)(mu_t)(X_t), v_t>` over the ensemble.
    fn drift_lions_pairing(
        &self,
        t: f64,
        observer: &[f64],
        law: &LawSlice,
        tangents: &LawSlice,
        _pairing: Option<&[f64]>,
        out: &mut [f64],
    ) {
        generic_pairing(law, tangents, out, |x, v, buf| {
            self.drift_lions_kernel(t, observer, x, v, buf)
        });
    }

    /// Same as [`Coefficients::drift_lions_pairing`] for `sigma`, as a
    /// `dim x noise_dim` matrix. Zero for measure-free diffusions.
    fn diffusion_lions_pairing(
        &self,
        _t: f64,
        _observer: &[f64],
        _law: &LawSlice,
        _tangents: &LawSlice,
        _pairing: Option<&[f64]>,
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }

    /// Largest ensemble for which the generic `O(N^2)` pairing is allowed.
    fn generic_pairing_cap(&self) -> usize {
        20_000
    }

    fn hamiltonian(&self) -> Option<&dyn HamiltonianStructure> {
        None
    }
}

/// Block data of `X = (X1, X2)` with `dX1 = b1(t, X(t)) dt`,
/// `dX2 = b2(t, X_t, mu_t) dt + sigma(t) dW`.
pub trait HamiltonianStructure: Send + Sync {
    fn blocks(&self) -> (usize, usize);
    /// `B`, `l x m`, row-major.
    fn coupling(&self) -> &[f64];
    /// `grad_1 b1` (`l x l`) and `grad_2 b1` (`l x m`) at the point `x`.
    fn first_jacobians(&self, t: f64, x: &[f64], d1: &mut [f64], d2: &mut [f64]);
    /// Whether the first-block Jacobians are independent of the state.
    fn first_jacobians_state_free(&self) -> bool;
    /// `sigma(t)`, `m x m`, row-major.
    fn sigma_block(&self, t: f64, out: &mut [f64]);
}

/// `(1 / N) sum_j kernel(x_j, v_j)`, summed in index order.
pub fn generic_pairing(
    law: &LawSlice,
    tangents: &LawSlice,
    out: &mut [f64],
    mut kernel: impl FnMut(&[f64], &[f64], &mut [f64]),
) {
    out.fill(0.0);
    let mut buf = vec![0.0; out.len()];
    for j in 0..law.n() {
        kernel(law.segment(j), tangents.segment(j), &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += b;
        }
    }
    let inv = 1.0 / law.n() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Central difference `(f(xi + h eta) - f(xi - h eta)) / (2 h)`.
pub fn fd_directional_derivative(
    f: impl Fn(&Segment) -> Vec<f64>,
    xi: &Segment,
    eta: &Segment,
    h_fd: f64,
) -> Vec<f64> {
    assert!(h_fd > 0.0, "h_fd must be positive");
    assert_eq!(xi.window.len(), eta.window.len());
    let shifted = |sign: f64| {
        Segment::new(
            xi.dim,
            xi.window
                .iter()
                .zip(&eta.window)
                .map(|(x, e)| x + sign * h_fd * e)
                .collect(),
        )
    };
    let plus = f(&shifted(1.0));
    let minus = f(&shifted(-1.0));
    plus.iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * h_fd))
        .collect()
}

/// Default step for [`fd_directional_derivative`].
pub fn default_fd_step(xi: &Segment) -> f64 {
    1e-5 * (1.0 + crate::pathspace::sup_norm(xi))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_window(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// Central-difference check of `drift_dir` and `diffusion_dir` against the
    /// model's own drift and diffusion at a frozen law.
    pub fn check_directional_derivatives(model: &dyn Coefficients, k: usize, seed: u64) {
        let d = model.dim();
        let m = model.noise_dim();
        let len = (k + 1) * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let cloud: Vec<f64> = random_window(&mut rng, n * len, 1.0);
        let law = LawSlice::from_segments(&cloud, n, d, k);
        let feats = model.law_features(0.3, &law);
        for _ in 0..20 {
            let xi = Segment::new(d, random_window(&mut rng, len, 1.0));
            let eta = Segment::new(d, random_window(&mut rng, len, 1.0));
            let fd = fd_directional_derivative(
                |s| {
                    let mut out = vec![0.0; d];
                    model.drift(0.3, &s.window, &law, &feats, &mut out);
                    out
                },
                &xi,
                &eta,
                1e-5,
            );
            let mut exact = vec![0.0; d];
            model.drift_dir(0.3, &xi.window, &eta.window, &law, &feats, &mut exact);
            for (a, b) in fd.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-6, "drift_dir {b} vs fd {a}");
            }
            let fd = fd_directional_derivative(
                |s| {
                    let mut out = vec![0.0; d * m];
                    model.diffusion(0.3, &s.window, &law, &feats, &mut out);
                    out
                },
                &xi,
                &eta,
                1e-5,
            );
            let mut exact = vec![0.0; d * m];
            model.diffusion_dir(0.3, &xi.window, &eta.window, &mut exact);
            for (a, b) in fd.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-6, "diffusion_dir {b} vs fd {a}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_examples() {
        let xi = Segment::new(1, vec![0.3, 1.0]);
        let eta = Segment::new(1, vec![0.0, 1.0]);
        let got = fd_directional_derivative(|s| vec![s.current()[0].powi(2)], &xi, &eta, 1e-5);
        assert!((got[0] - 2.0).abs() < 1e-9);

        let lin = |s: &Segment| vec![2.0 * s.window[0] - 3.0 * s.window[1]];
        let eta = Segment::new(1, vec![0.7, -0.2]);
        let got = fd_directional_derivative(lin, &xi, &eta, 1e-3);
        assert!((got[0] - (2.0 * 0.7 + 3.0 * 0.2)).abs() < 1e-12);

        let zero = Segment::new(1, vec![0.0, 0.0]);
        assert_eq!(
            fd_directional_derivative(|s| vec![s.window[1].sin()], &xi, &zero, 1e-5),
            vec![0.0]
        );
    }

    #[test]
    fn default_step_scales_with_norm() {
        let xi = Segment::new(1, vec![-3.0, 1.0]);
        assert!((default_fd_step(&xi) - 4e-5).abs() < 1e-18);
    }
}
