//! Test functionals `f: C -> R` and perturbation directions `phi: C -> C`.

use std::sync::Arc;

use crate::pathspace::current;

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type MapFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothness {
    BoundedC1,
    PolynomialC1,
}

/// `f` on raw windows, with the optional directional gradient
/// `(xi, eta) -> (grad_eta f)(xi)`.
#[derive(Clone)]
pub struct TestFunctional {
    pub name: String,
    pub smoothness: Smoothness,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
}

impl std::fmt::Debug for TestFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunctional")
            .field("name", &self.name)
            .field("smoothness", &self.smoothness)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl TestFunctional {
    pub fn new(
        name: impl Into<String>,
        smoothness: Smoothness,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: Option<Arc<GradFn>>,
    ) -> Self {
        Self {
            name: name.into(),
            smoothness,
            eval: Arc::new(eval),
            grad,
        }
    }

    pub fn eval(&self, window: &[f64]) -> f64 {
        (self.eval)(window)
    }

    pub fn grad_dir(&self, window: &[f64], dir: &[f64]) -> Option<f64> {
        self.grad.as_ref().map(|g| g(window, dir))
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// `f(xi) = xi_c(0)`.
    pub fn coordinate(dim: usize, component: usize) -> Self {
        assert!(component < dim);
        Self::new(
            format!("coordinate[{component}]"),
            Smoothness::PolynomialC1,
            move |w| current(w, dim)[component],
            Some(Arc::new(move |_, e| current(e, dim)[component])),
        )
    }

    /// `f(xi) = tanh(xi_c(0))`.
    pub fn tanh_coordinate(dim: usize, component: usize) -> Self {
        assert!(component < dim);
        Self::new(
            format!("tanh[{component}]"),
            Smoothness::BoundedC1,
            move |w| current(w, dim)[component].tanh(),
            Some(Arc::new(move |w, e| {
                let th = current(w, dim)[component].tanh();
                (1.0 - th * th) * current(e, dim)[component]
            })),
        )
    }

    /// Trapezoidal mean of `xi_c` over `[-r0, 0]`; `xi_c(0)` when `r0 = 0`.
    pub fn window_average(dim: usize, component: usize) -> Self {
        assert!(component < dim);
        let average = move |w: &[f64]| {
            let pts = w.len() / dim;
            if pts == 1 {
                return w[component];
            }
            let vals = w.chunks(dim).map(|x| x[component]);
            let total: f64 = vals
                .enumerate()
                .map(|(j, v)| if j == 0 || j == pts - 1 { 0.5 * v } else { v })
                .sum();
            total / (pts - 1) as f64
        };
        Self::new(
            format!("window_average[{component}]"),
            Smoothness::PolynomialC1,
            average,
            Some(Arc::new(move |_, e| average(e))),
        )
    }
}

/// Pointwise direction `phi(xi)(theta) = map(xi(theta))`.
#[derive(Clone)]
pub struct Direction {
    pub name: String,
    pub dim: usize,
    map: Arc<MapFn>,
    constant: Option<Vec<f64>>,
}

impl std::fmt::Debug for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Direction")
            .field("name", &self.name)
            .finish()
    }
}

impl Direction {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            map: Arc::new(map),
            constant: None,
        }
    }

    /// `phi(xi) = shift` at every `theta`.
    pub fn constant_shift(shift: Vec<f64>) -> Self {
        let dim = shift.len();
        let value = shift.clone();
        Self {
            name: format!("constant_shift{shift:?}"),
            dim,
            map: Arc::new(move |_, out| out.copy_from_slice(&value)),
            constant: Some(shift),
        }
    }

    /// `phi(xi)(theta) = scale * xi(theta)` componentwise.
    pub fn coordinate_scaled(scale: Vec<f64>) -> Self {
        let name = format!("coordinate_scaled{scale:?}");
        let dim = scale.len();
        Self::new(name, dim, move |x, out| {
            for ((o, v), s) in out.iter_mut().zip(x).zip(&scale) {
                *o = s * v;
            }
        })
    }

    /// `phi(xi)(theta) = A xi(theta) + offset` with `A` row-major `dim x dim`.
    pub fn affine(matrix: Vec<f64>, offset: Vec<f64>) -> Self {
        let dim = offset.len();
        assert_eq!(matrix.len(), dim * dim, "affine matrix must be dim x dim");
        let name = format!("affine(A={matrix:?}, c={offset:?})");
        Self::new(name, dim, move |x, out| {
            for (r, o) in out.iter_mut().enumerate() {
                *o = offset[r]
                    + matrix[r * dim..(r + 1) * dim]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
        })
    }

    /// Scaled copy, `(a phi)(xi) = a phi(xi)`.
    pub fn scaled(&self, a: f64) -> Self {
        let inner = Arc::clone(&self.map);
        Self {
            name: format!("{a}*{}", self.name),
            dim: self.dim,
            map: Arc::new(move |x, out| {
                inner(x, out);
                out.iter_mut().for_each(|v| *v *= a);
            }),
            constant: self
                .constant
                .as_ref()
                .map(|c| c.iter().map(|v| a * v).collect()),
        }
    }

    /// The shift vector when `phi` is constant.
    pub fn constant_value(&self) -> Option<&[f64]> {
        self.constant.as_deref()
    }

    pub fn apply_window(&self, window: &[f64], out: &mut [f64]) {
        for (x, o) in window.chunks(self.dim).zip(out.chunks_mut(self.dim)) {
            (self.map)(x, o);
        }
    }

    /// `phi` applied to every segment of an `n x (k + 1) x dim` array.
    pub fn apply_all(&self, segments: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; segments.len()];
        for (x, o) in segments.chunks(self.dim).zip(out.chunks_mut(self.dim)) {
            (self.map)(x, o);
        }
        out
    }
}
