//! Stochastic Hamiltonian systems with memory: `X = (X1, X2)` in
//! `R^l x R^m`, `dX1 = b1(t, X(t)) dt`, `dX2 = b2(t, X_t, mu_t) dt + sigma(t) dW`.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{generic_pairing, Coefficients, HamiltonianStructure, ModelFlags};
use crate::error::{Error, Result};
use crate::pathspace::{current, oldest, LawSlice};

/// First-block drift `b1(t, x)` on the current point `x in R^{l+m}`.
pub trait FirstBlock: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// `grad_1 b1` (`l x l`) and `grad_2 b1` (`l x m`).
    fn jacobians(&self, t: f64, x: &[f64], d1: &mut [f64], d2: &mut [f64]);
    fn state_free_jacobians(&self) -> bool {
        false
    }
}

/// Second-block drift `b2(t, xi, mu)` on full segments.
pub trait SecondBlock: Send + Sync {
    fn law_features(&self, _t: f64, _law: &LawSlice) -> Vec<f64> {
        Vec::new()
    }
    fn eval(&self, t: f64, seg: &[f64], law: &LawSlice, feats: &[f64], out: &mut [f64]);
    fn dir(&self, t: f64, seg: &[f64], dir: &[f64], law: &LawSlice, feats: &[f64], out: &mut [f64]);
    fn mu_free(&self) -> bool {
        false
    }
    fn pairing_features(&self, _t: f64, _law: &LawSlice, _tangents: &LawSlice) -> Option<Vec<f64>> {
        None
    }
    fn lions_kernel(
        &self,
        _t: f64,
        _observer: &[f64],
        _x_j: &[f64],
        _v_j: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }
    fn pairing(
        &self,
        t: f64,
        observer: &[f64],
        law: &LawSlice,
        tangents: &LawSlice,
        _pairing: Option<&[f64]>,
        out: &mut [f64],
    ) {
        generic_pairing(law, tangents, out, |x, v, buf| {
            self.lions_kernel(t, observer, x, v, buf)
        });
    }
}

#[derive(Clone)]
pub struct HamiltonianParams {
    pub l: usize,
    pub m: usize,
    /// `B`, `l x m`, row-major.
    pub coupling: Vec<f64>,
    /// Constant `sigma`, `m x m`, row-major.
    pub sigma: Vec<f64>,
    pub first: Arc<dyn FirstBlock>,
    pub second: Arc<dyn SecondBlock>,
}

/// `b1(x) = A x1 + C x2`.
#[derive(Clone, Debug)]
pub struct LinearFirstBlock {
    pub l: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl FirstBlock for LinearFirstBlock {
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let (x1, x2) = x.split_at(self.l);
        for (r, o) in out.iter_mut().enumerate() {
            let a_row = &self.a[r * self.l..(r + 1) * self.l];
            let c_row = &self.c[r * self.m..(r + 1) * self.m];
            *o = dot(a_row, x1) + dot(c_row, x2);
        }
    }

    fn jacobians(&self, _t: f64, _x: &[f64], d1: &mut [f64], d2: &mut [f64]) {
        d1.copy_from_slice(&self.a);
        d2.copy_from_slice(&self.c);
    }

    fn state_free_jacobians(&self) -> bool {
        true
    }
}

/// `b2(xi, mu) = L xi(0) + D xi(-r0) + M int eta(0) mu(d eta)` with
/// `m x (l + m)` matrices `L`, `D`, `M`.
#[derive(Clone, Debug)]
pub struct LinearSecondBlock {
    pub d: usize,
    pub m: usize,
    pub local: Vec<f64>,
    pub delay: Vec<f64>,
    pub mean_field: Vec<f64>,
}

impl LinearSecondBlock {
    fn apply(mat: &[f64], d: usize, x: &[f64], out: &mut [f64], accumulate: bool) {
        for (r, o) in out.iter_mut().enumerate() {
            let v = dot(&mat[r * d..(r + 1) * d], x);
            if accumulate {
                *o += v;
            } else {
                *o = v;
            }
        }
    }

    fn has_mean_field(&self) -> bool {
        self.mean_field.iter().any(|&v| v != 0.0)
    }
}

impl SecondBlock for LinearSecondBlock {
    fn law_features(&self, _t: f64, law: &LawSlice) -> Vec<f64> {
        if self.has_mean_field() {
            law.mean_current()
        } else {
            vec![0.0; self.d]
        }
    }

    fn eval(&self, t: f64, seg: &[f64], law: &LawSlice, feats: &[f64], out: &mut [f64]) {
        self.dir(t, seg, seg, law, feats, out);
        Self::apply(&self.mean_field, self.d, feats, out, true);
    }

    fn dir(
        &self,
        _t: f64,
        _seg: &[f64],
        dir: &[f64],
        _law: &LawSlice,
        _feats: &[f64],
        out: &mut [f64],
    ) {
        Self::apply(&self.local, self.d, current(dir, self.d), out, false);
        Self::apply(&self.delay, self.d, oldest(dir, self.d), out, true);
    }

    fn mu_free(&self) -> bool {
        !self.has_mean_field()
    }

    fn pairing_features(&self, _t: f64, _law: &LawSlice, tangents: &LawSlice) -> Option<Vec<f64>> {
        Some(tangents.mean_current())
    }

    fn lions_kernel(&self, _t: f64, _observer: &[f64], _x_j: &[f64], v_j: &[f64], out: &mut [f64]) {
        Self::apply(&self.mean_field, self.d, current(v_j, self.d), out, false);
    }

    fn pairing(
        &self,
        t: f64,
        observer: &[f64],
        law: &LawSlice,
        tangents: &LawSlice,
        pairing: Option<&[f64]>,
        out: &mut [f64],
    ) {
        match pairing {
            Some(p) => Self::apply(&self.mean_field, self.d, p, out, false),
            None => generic_pairing(law, tangents, out, |x, v, buf| {
                self.lions_kernel(t, observer, x, v, buf)
            }),
        }
    }
}

#[derive(Clone)]
pub struct HamiltonianModel {
    params: HamiltonianParams,
    sigma_condition: f64,
}

pub fn hamiltonian_model(p: HamiltonianParams) -> Result<HamiltonianModel> {
    if p.l == 0 || p.m == 0 || p.coupling.len() != p.l * p.m || p.sigma.len() != p.m * p.m {
        return Err(Error::InvalidArgument(
            "Hamiltonian block sizes do not match the matrices".into(),
        ));
    }
    let s = DMatrix::from_row_slice(p.m, p.m, &p.sigma);
    let sv = (&s * s.transpose()).singular_values();
    let (max, min) = (sv.max(), sv.min());
    let condition = max / min;
    if !condition.is_finite() || min <= 0.0 || condition > 1e12 {
        return Err(Error::SingularSigma(0.0));
    }
    Ok(HamiltonianModel {
        params: p,
        sigma_condition: condition,
    })
}

impl HamiltonianModel {
    pub fn params(&self) -> &HamiltonianParams {
        &self.params
    }
}

impl Coefficients for HamiltonianModel {
    fn name(&self) -> &str {
        "hamiltonian"
    }

    fn dim(&self) -> usize {
        self.params.l + self.params.m
    }

    fn noise_dim(&self) -> usize {
        self.params.m
    }

    fn flags(&self) -> ModelFlags {
        ModelFlags {
            additive: true,
            sigma_state_only: true,
            mu_free_sigma: true,
            mu_free_drift: self.params.second.mu_free(),
            hamiltonian_split: Some((self.params.l, self.params.m)),
        }
    }

    fn metadata(&self) -> Vec<(String, f64)> {
        vec![
            ("l".into(), self.params.l as f64),
            ("m".into(), self.params.m as f64),
            ("sigma_condition".into(), self.sigma_condition),
        ]
    }

    fn law_features(&self, t: f64, law: &LawSlice) -> Vec<f64> {
        self.params.second.law_features(t, law)
    }

    fn drift(&self, t: f64, seg: &[f64], law: &LawSlice, feats: &[f64], out: &mut [f64]) {
        let l = self.params.l;
        let d = self.dim();
        self.params.first.eval(t, current(seg, d), &mut out[..l]);
        self.params.second.eval(t, seg, law, feats, &mut out[l..]);
    }

    fn diffusion(&self, _t: f64, _seg: &[f64], _law: &LawSlice, _feats: &[f64], out: &mut [f64]) {
        let (l, m) = (self.params.l, self.params.m);
        out[..l * m].fill(0.0);
        out[l * m..].copy_from_slice(&self.params.sigma);
    }

    fn drift_dir(
        &self,
        t: f64,
        seg: &[f64],
        dir: &[f64],
        law: &LawSlice,
        feats: &[f64],
        out: &mut [f64],
    ) {
        let (l, m) = (self.params.l, self.params.m);
        let d = l + m;
        let mut d1 = vec![0.0; l * l];
        let mut d2 = vec![0.0; l * m];
        self.params
            .first
            .jacobians(t, current(seg, d), &mut d1, &mut d2);
        let (e1, e2) = current(dir, d).split_at(l);
        for r in 0..l {
            out[r] = dot(&d1[r * l..(r + 1) * l], e1) + dot(&d2[r * m..(r + 1) * m], e2);
        }
        self.params
            .second
            .dir(t, seg, dir, law, feats, &mut out[l..]);
    }

    fn diffusion_dir(&self, _t: f64, _seg: &[f64], _dir: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn pairing_features(&self, t: f64, law: &LawSlice, tangents: &LawSlice) -> Option<Vec<f64>> {
        self.params.second.pairing_features(t, law, tangents)
    }

    fn drift_lions_kernel(
        &self,
        t: f64,
        observer: &[f64],
        x_j: &[f64],
        v_j: &[f64],
        out: &mut [f64],
    ) {
        let l = self.params.l;
        out[..l].fill(0.0);
        self.params
            .second
            .lions_kernel(t, observer, x_j, v_j, &mut out[l..]);
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
        let l = self.params.l;
        out[..l].fill(0.0);
        self.params
            .second
            .pairing(t, observer, law, tangents, pairing, &mut out[l..]);
    }

    fn hamiltonian(&self) -> Option<&dyn HamiltonianStructure> {
        Some(self)
    }
}

impl HamiltonianStructure for HamiltonianModel {
    fn blocks(&self) -> (usize, usize) {
        (self.params.l, self.params.m)
    }

    fn coupling(&self) -> &[f64] {
        &self.params.coupling
    }

    fn first_jacobians(&self, t: f64, x: &[f64], d1: &mut [f64], d2: &mut [f64]) {
        self.params.first.jacobians(t, x, d1, d2);
    }

    fn first_jacobians_state_free(&self) -> bool {
        self.params.first.state_free_jacobians()
    }

    fn sigma_block(&self, _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.params.sigma);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::check_directional_derivatives;

    /// `l = m = 1`, `b1 = x2`, `b2 = -0.5 x2(0) - 0.3 x1(0) + 0.2 x2(-r0) + 0.3 E x2(0)`.
    pub(crate) fn kinetic() -> HamiltonianModel {
        hamiltonian_model(HamiltonianParams {
            l: 1,
            m: 1,
            coupling: vec![1.0],
            sigma: vec![1.0],
            first: Arc::new(LinearFirstBlock {
                l: 1,
                m: 1,
                a: vec![0.0],
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

    #[test]
    fn block_structure() {
        let model = kinetic();
        let data = vec![0.0; 6];
        let law = LawSlice::from_segments(&data, 1, 2, 2);
        let mut sig = vec![9.0; 2];
        model.diffusion(0.0, &data[..6], &law, &[], &mut sig);
        assert_eq!(sig, vec![0.0, 1.0]);
        let mut out = [0.0; 2];
        model.drift_dir(
            0.0,
            &[0.0; 6],
            &[0.0, 0.0, 0.0, 0.0, 5.0, 7.0],
            &law,
            &[0.0, 0.0],
            &mut out,
        );
        assert_eq!(out[0], 7.0);
        let flags = model.flags();
        assert_eq!(flags.hamiltonian_split, Some((1, 1)));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        check_directional_derivatives(&kinetic(), 2, 7);
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let mut p = kinetic().params().clone();
        p.sigma = vec![0.0];
        assert!(matches!(hamiltonian_model(p), Err(Error::SingularSigma(_))));
    }
}
