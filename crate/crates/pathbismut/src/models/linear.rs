//! Scalar delay model with a mean-field term,
//! `b(t, xi, mu) = -a xi(0) + b1 xi(-r0) + c int eta(0) mu(d eta)`.

use super::{Coefficients, ModelFlags};
use crate::pathspace::{current, oldest, LawSlice};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDelayParams {
    pub a: f64,
    pub b1: f64,
    pub c: f64,
    pub sigma0: f64,
}

/// Diffusion `sigma0 + sigma1 tanh(x(0))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseShape {
    Constant,
    Tanh { sigma1: f64 },
}

#[derive(Clone, Debug)]
pub struct DelayModel {
    pub params: LinearDelayParams,
    pub noise: NoiseShape,
    name: String,
}

pub fn linear_meanfield_delay_model(p: LinearDelayParams) -> DelayModel {
    DelayModel {
        params: p,
        noise: NoiseShape::Constant,
        name: "linear_delay".into(),
    }
}

/// Same drift with the state-dependent diffusion `sigma0 + sigma1 tanh(x(0))`.
pub fn tanh_noise_delay_model(p: LinearDelayParams, sigma1: f64) -> DelayModel {
    DelayModel {
        params: p,
        noise: NoiseShape::Tanh { sigma1 },
        name: "tanh_noise_delay".into(),
    }
}

impl DelayModel {
    fn linear_part(&self, seg: &[f64]) -> f64 {
        -self.params.a * current(seg, 1)[0] + self.params.b1 * oldest(seg, 1)[0]
    }
}

impl Coefficients for DelayModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn flags(&self) -> ModelFlags {
        ModelFlags {
            additive: matches!(self.noise, NoiseShape::Constant),
            sigma_state_only: true,
            mu_free_sigma: true,
            mu_free_drift: self.params.c == 0.0,
            hamiltonian_split: None,
        }
    }

    fn metadata(&self) -> Vec<(String, f64)> {
        let p = &self.params;
        let mut out = vec![
            ("a".into(), p.a),
            ("b1".into(), p.b1),
            ("c".into(), p.c),
            ("sigma0".into(), p.sigma0),
            ("drift_lipschitz".into(), p.a.abs() + p.b1.abs() + p.c.abs()),
        ];
        if let NoiseShape::Tanh { sigma1 } = self.noise {
            out.push(("sigma1".into(), sigma1));
        }
        out
    }

    fn law_features(&self, _t: f64, law: &LawSlice) -> Vec<f64> {
        if self.params.c == 0.0 {
            return vec![0.0];
        }
        law.mean_current()
    }

    fn drift(&self, _t: f64, seg: &[f64], _law: &LawSlice, feats: &[f64], out: &mut [f64]) {
        out[0] = self.linear_part(seg) + self.params.c * feats[0];
    }

    fn diffusion(&self, _t: f64, seg: &[f64], _law: &LawSlice, _feats: &[f64], out: &mut [f64]) {
        out[0] = match self.noise {
            NoiseShape::Constant => self.params.sigma0,
            NoiseShape::Tanh { sigma1 } => self.params.sigma0 + sigma1 * current(seg, 1)[0].tanh(),
        };
    }

    fn drift_dir(
        &self,
        _t: f64,
        _seg: &[f64],
        dir: &[f64],
        _law: &LawSlice,
        _feats: &[f64],
        out: &mut [f64],
    ) {
        out[0] = self.linear_part(dir);
    }

    fn diffusion_dir(&self, _t: f64, seg: &[f64], dir: &[f64], out: &mut [f64]) {
        out[0] = match self.noise {
            NoiseShape::Constant => 0.0,
            NoiseShape::Tanh { sigma1 } => {
                let th = current(seg, 1)[0].tanh();
                sigma1 * (1.0 - th * th) * current(dir, 1)[0]
            }
        };
    }

    fn pairing_features(&self, _t: f64, _law: &LawSlice, tangents: &LawSlice) -> Option<Vec<f64>> {
        Some(tangents.mean_current())
    }

    fn drift_lions_kernel(
        &self,
        _t: f64,
        _observer: &[f64],
        _x_j: &[f64],
        v_j: &[f64],
        out: &mut [f64],
    ) {
        out[0] = self.params.c * current(v_j, 1)[0];
    }

    fn drift_lions_pairing(
        &self,
        t: f64,
        observer: &[f64],
        law: &LawSlice,
        tangents: &LawSlice,
        pairing: Option<&[f64]>,
        out: &mut [f64],
    ) {
        match pairing {
            Some(p) => out[0] = self.params.c * p[0],
            None => super::generic_pairing(law, tangents, out, |x, v, buf| {
                self.drift_lions_kernel(t, observer, x, v, buf)
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::check_directional_derivatives;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(a: f64, b1: f64, c: f64) -> LinearDelayParams {
        LinearDelayParams {
            a,
            b1,
            c,
            sigma0: 1.0,
        }
    }

    #[test]
    fn examples() {
        let law_data = vec![0.0; 3];
        let law = LawSlice::from_segments(&law_data, 1, 1, 2);
        let m = linear_meanfield_delay_model(params(1.0, 0.0, 0.0));
        let mut out = [0.0];
        m.drift(
            0.0,
            &[1.0, 1.0, 1.0],
            &law,
            &m.law_features(0.0, &law),
            &mut out,
        );
        assert_eq!(out[0], -1.0);

        let m = linear_meanfield_delay_model(params(0.0, 1.0, 0.0));
        m.drift_dir(0.0, &[9.0; 3], &[0.25, 7.0, -3.0], &law, &[0.0], &mut out);
        assert_eq!(out[0], 0.25);

        let m = linear_meanfield_delay_model(params(0.0, 0.0, 1.0));
        let tangents = vec![2.0; 12];
        let ts = LawSlice::from_segments(&tangents, 4, 1, 2);
        let xs_data = vec![0.5; 12];
        let xs = LawSlice::from_segments(&xs_data, 4, 1, 2);
        let pf = m.pairing_features(0.0, &xs, &ts);
        m.drift_lions_pairing(0.0, &[0.0; 3], &xs, &ts, pf.as_deref(), &mut out);
        assert_eq!(out[0], 2.0);
    }

    #[test]
    fn self_consistency_and_pairing_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = linear_meanfield_delay_model(params(0.7, -0.4, 0.9));
        let n = 37;
        let xs: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vs: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let law = LawSlice::from_segments(&xs, n, 1, 3);
        let tang = LawSlice::from_segments(&vs, n, 1, 3);
        let feats = m.law_features(0.0, &law);
        let (xi, xi2) = (law.segment(0), law.segment(1));
        let diff: Vec<f64> = xi.iter().zip(xi2).map(|(a, b)| a - b).collect();
        let (mut d1, mut d2, mut dd) = ([0.0], [0.0], [0.0]);
        m.drift(0.0, xi, &law, &feats, &mut d1);
        m.drift(0.0, xi2, &law, &feats, &mut d2);
        m.drift_dir(0.0, xi, &diff, &law, &feats, &mut dd);
        assert!((d1[0] - d2[0] - dd[0]).abs() < 1e-14);

        let pf = m.pairing_features(0.0, &law, &tang);
        let (mut fast, mut slow) = ([0.0], [0.0]);
        m.drift_lions_pairing(0.0, xi, &law, &tang, pf.as_deref(), &mut fast);
        m.drift_lions_pairing(0.0, xi, &law, &tang, None, &mut slow);
        let mut brute = 0.0;
        for j in 0..n {
            brute += tang.current(j)[0];
        }
        let brute = 0.9 * (brute / n as f64);
        assert_eq!(fast[0], brute);
        assert!((slow[0] - brute).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        check_directional_derivatives(&linear_meanfield_delay_model(params(0.5, 0.3, 0.4)), 3, 1);
        check_directional_derivatives(&tanh_noise_delay_model(params(0.5, 0.3, 0.4), 0.25), 3, 2);
        check_directional_derivatives(&tanh_noise_delay_model(params(1.0, 0.0, 0.0), 0.25), 0, 3);
    }

    #[test]
    fn flags_follow_noise_shape() {
        let lin = linear_meanfield_delay_model(params(1.0, 0.0, 0.0)).flags();
        assert!(lin.additive && lin.mu_free_drift && lin.sigma_state_only);
        let tanh = tanh_noise_delay_model(params(1.0, 0.0, 0.4), 0.25).flags();
        assert!(!tanh.additive && !tanh.mu_free_drift && tanh.sigma_state_only);
    }
}
