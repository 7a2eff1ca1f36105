//! Forward solvers: the interacting particle system, the decoupled equation
//! under a frozen law flow, and Picard iteration on law flows.
//!
//! All schemes are explicit Euler-Maruyama with left-endpoint evaluation:
//!
//! ```text
//! X_i(t + dt) = X_i(t) + b(t, X_{i,t}, mu_t) dt + sigma(t, X_{i,t}, mu_t) dW_i
//! ```
//!
//! where `mu_t` is the empirical law of all current segments (self included)
//! or a frozen flow. Particle `i` uses the increments of its own stream, so
//! the output is a deterministic function of `(seed, N, grid, model)`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::Coefficients;
use crate::pathspace::{current, wp_lambda, LawFlow, LawSlice, Path, TimeGrid};
use crate::rng::{fill_normal, initial_stream, noise_stream, ParticleRng};

type SampleFn = dyn Fn(usize, &mut ParticleRng, &mut [f64]) + Send + Sync;

/// Draws the initial segment of particle `i` into a `(k + 1) * dim` window.
#[derive(Clone)]
pub struct InitialSampler {
    sample: Arc<SampleFn>,
    pub descriptor: String,
}

impl std::fmt::Debug for InitialSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InitialSampler")
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl InitialSampler {
    pub fn new(
        descriptor: impl Into<String>,
        sample: impl Fn(usize, &mut ParticleRng, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            sample: Arc::new(sample),
            descriptor: descriptor.into(),
        }
    }

    /// Every particle starts from the constant segment `value`.
    pub fn constant(value: Vec<f64>) -> Self {
        let descriptor = format!("constant{value:?}");
        Self::new(descriptor, move |_, _, out| {
            for x in out.chunks_mut(value.len()) {
                x.copy_from_slice(&value);
            }
        })
    }

    /// Constant-in-time segments with independent `N(mean_c, std_c^2)`
    /// components.
    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len());
        let descriptor = format!("gaussian(mean={mean:?}, std={std:?})");
        Self::new(descriptor, move |_, rng, out| {
            let mut z = vec![0.0; mean.len()];
            fill_normal(rng, &mut z, 1.0);
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = mean[c] + std[c] * *zc;
            }
            for x in out.chunks_mut(mean.len()) {
                x.copy_from_slice(&z);
            }
        })
    }

    pub fn sample_into(&self, i: usize, rng: &mut ParticleRng, out: &mut [f64]) {
        (self.sample)(i, rng, out)
    }
}

/// Initial segments of `n` particles, `n x (k + 1) x dim`.
pub fn sample_initials(
    init: &InitialSampler,
    dim: usize,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let len = grid.window_len() * dim;
    let mut out = vec![0.0; n * len];
    out.par_chunks_mut(len).enumerate().for_each(|(i, w)| {
        let mut rng = initial_stream(seed, i);
        init.sample_into(i, &mut rng, w);
    });
    out
}

/// Brownian increments `n x steps x m`, each `N(0, dt I_m)`.
pub fn draw_increments(grid: &TimeGrid, m: usize, n: usize, seed: u64) -> Vec<f64> {
    let len = grid.steps() * m;
    let mut out = vec![0.0; n * len];
    let scale = grid.dt.sqrt();
    if len > 0 {
        out.par_chunks_mut(len).enumerate().for_each(|(i, w)| {
            fill_normal(&mut noise_stream(seed, i), w, scale);
        });
    }
    out
}

/// `N` particle paths on `[-r0, T]` with the increments that drove them.
#[derive(Clone, Debug)]
pub struct EnsemblePaths {
    pub grid: TimeGrid,
    pub n: usize,
    pub dim: usize,
    pub noise_dim: usize,
    pub seed: u64,
    paths: Arc<Vec<f64>>,
    dw: Arc<Vec<f64>>,
}

impl EnsemblePaths {
    pub fn values(&self) -> &[f64] {
        &self.paths
    }

    pub fn increments(&self) -> &[f64] {
        &self.dw
    }

    pub fn increments_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.dw)
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let len = self.grid.points() * self.dim;
        &self.paths[i * len..(i + 1) * len]
    }

    pub fn to_path(&self, i: usize) -> Path {
        Path {
            dim: self.dim,
            values: self.path(i).to_vec(),
        }
    }

    /// Segment of particle `i` after `s` forward steps.
    pub fn segment(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.grid.points() + s) * self.dim;
        &self.paths[start..start + self.grid.window_len() * self.dim]
    }

    pub fn terminal_segment(&self, i: usize) -> &[f64] {
        self.segment(i, self.grid.steps())
    }

    /// `dW` of particle `i` over forward step `s`.
    pub fn increment(&self, i: usize, s: usize) -> &[f64] {
        let start = (i * self.grid.steps() + s) * self.noise_dim;
        &self.dw[start..start + self.noise_dim]
    }

    pub fn slice(&self, s: usize) -> LawSlice<'_> {
        LawSlice::from_paths(&self.paths, self.n, self.dim, &self.grid, s)
    }

    pub fn law_flow(&self) -> LawFlow {
        LawFlow::from_paths(self.grid, self.n, self.dim, Arc::clone(&self.paths))
            .expect("ensemble storage matches its grid")
    }

    /// Initial segments, `n x (k + 1) x dim`.
    pub fn initial_segments(&self) -> Vec<f64> {
        (0..self.n)
            .flat_map(|i| self.segment(i, 0).iter().copied())
            .collect()
    }
}

enum LawSource<'a> {
    Interacting,
    Frozen(&'a LawFlow),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euler scheme shared by all forward solvers. `forcing = (hdot, eps)` shifts
/// the increments by `eps * hdot * dt`.
fn euler(
    coeffs: &dyn Coefficients,
    grid: &TimeGrid,
    initials: &[f64],
    dw: &[f64],
    n: usize,
    law: LawSource,
    forcing: Option<(&[f64], f64)>,
) -> Result<Vec<f64>> {
    let d = coeffs.dim();
    let m = coeffs.noise_dim();
    let k = grid.k;
    let pts = grid.points();
    let steps = grid.steps();
    let seg_len = (k + 1) * d;
    let dt = grid.dt;
    if initials.len() != n * seg_len {
        return Err(Error::SizeMismatch(format!(
            "{} initial values for {n} segments of length {seg_len}",
            initials.len()
        )));
    }
    if dw.len() != n * steps * m {
        return Err(Error::SizeMismatch(
            "increments do not match the grid".into(),
        ));
    }
    if let LawSource::Frozen(flow) = &law {
        if !flow.grid.same_as(grid) || flow.dim != d {
            return Err(Error::GridMismatch);
        }
    }

    let mut paths = vec![0.0; n * pts * d];
    for i in 0..n {
        paths[i * pts * d..i * pts * d + seg_len]
            .copy_from_slice(&initials[i * seg_len..(i + 1) * seg_len]);
    }
    let mut next = vec![0.0; n * d];
    for s in 0..steps {
        let t = grid.step_time(s);
        {
            let own = LawSlice::from_paths(&paths, n, d, grid, s);
            let law_slice = match &law {
                LawSource::Interacting => own,
                LawSource::Frozen(flow) => flow.slice(s)?,
            };
            let feats = coeffs.law_features(t, &law_slice);
            next.par_chunks_mut(d)
                .enumerate()
                .with_min_len(64)
                .for_each_init(
                    || (vec![0.0; d], vec![0.0; d * m], vec![0.0; m]),
                    |(b, sig, inc), (i, out)| {
                        let seg = own.segment(i);
                        coeffs.drift(t, seg, &law_slice, &feats, b);
                        coeffs.diffusion(t, seg, &law_slice, &feats, sig);
                        let at = (i * steps + s) * m;
                        inc.copy_from_slice(&dw[at..at + m]);
                        if let Some((hdot, eps)) = forcing {
                            for (c, v) in inc.iter_mut().enumerate() {
                                *v += eps * hdot[at + c] * dt;
                            }
                        }
                        let x = current(seg, d);
                        for r in 0..d {
                            out[r] = x[r] + b[r] * dt + dot(&sig[r * m..(r + 1) * m], inc);
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
            paths[at..at + d].copy_from_slice(&next[i * d..(i + 1) * d]);
        }
    }
    Ok(paths)
}

/// Interacting particle system driven by the streams of `seed`.
pub fn simulate_particles(
    coeffs: &dyn Coefficients,
    init: &InitialSampler,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<EnsemblePaths> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 particles, got {n}"
        )));
    }
    let initials = sample_initials(init, coeffs.dim(), grid, n, seed);
    let dw = Arc::new(draw_increments(grid, coeffs.noise_dim(), n, seed));
    simulate_from(coeffs, grid, &initials, dw, seed)
}

/// Interacting particle system from explicit initial segments and increments.
pub fn simulate_from(
    coeffs: &dyn Coefficients,
    grid: &TimeGrid,
    initials: &[f64],
    dw: Arc<Vec<f64>>,
    seed: u64,
) -> Result<EnsemblePaths> {
    let n = initials.len() / (grid.window_len() * coeffs.dim());
    let paths = euler(coeffs, grid, initials, &dw, n, LawSource::Interacting, None)?;
    Ok(EnsemblePaths {
        grid: *grid,
        n,
        dim: coeffs.dim(),
        noise_dim: coeffs.noise_dim(),
        seed,
        paths: Arc::new(paths),
        dw,
    })
}

/// Decoupled equation `dY = b(t, Y_t, mu_t) dt + sigma(t, Y_t, mu_t) dW` with
/// `mu` read from `law`. Uses the same increments as
/// [`simulate_particles`] for the same seed.
pub fn simulate_decoupled(
    coeffs: &dyn Coefficients,
    law: &LawFlow,
    init_segments: &[f64],
    grid: &TimeGrid,
    seed: u64,
) -> Result<EnsemblePaths> {
    let n = init_segments.len() / (grid.window_len() * coeffs.dim());
    let dw = Arc::new(draw_increments(grid, coeffs.noise_dim(), n, seed));
    decoupled_with(coeffs, law, init_segments, grid, dw, seed)
}

fn decoupled_with(
    coeffs: &dyn Coefficients,
    law: &LawFlow,
    init_segments: &[f64],
    grid: &TimeGrid,
    dw: Arc<Vec<f64>>,
    seed: u64,
) -> Result<EnsemblePaths> {
    let n = init_segments.len() / (grid.window_len() * coeffs.dim());
    let paths = euler(
        coeffs,
        grid,
        init_segments,
        &dw,
        n,
        LawSource::Frozen(law),
        None,
    )?;
    Ok(EnsemblePaths {
        grid: *grid,
        n,
        dim: coeffs.dim(),
        noise_dim: coeffs.noise_dim(),
        seed,
        paths: Arc::new(paths),
        dw,
    })
}

/// Decoupled solve from the base ensemble's initials and noise with the
/// increments shifted by `eps * hdot * dt`; `hdot` is `n x steps x m`.
pub fn simulate_forced(
    coeffs: &dyn Coefficients,
    base: &EnsemblePaths,
    law: &LawFlow,
    hdot: &[f64],
    eps: f64,
) -> Result<EnsemblePaths> {
    if hdot.len() != base.increments().len() {
        return Err(Error::SizeMismatch(
            "control does not match the increments".into(),
        ));
    }
    let initials = base.initial_segments();
    let paths = euler(
        coeffs,
        &base.grid,
        &initials,
        base.increments(),
        base.n,
        LawSource::Frozen(law),
        Some((hdot, eps)),
    )?;
    Ok(EnsemblePaths {
        paths: Arc::new(paths),
        ..base.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub p: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            tol: 1e-6,
            max_iter: 10,
            p: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PicardDiagnostics {
    /// `W_{p,lambda}(mu^{(k+1)}, mu^{(k)})` for `k = 0, 1, ...`.
    pub distances: Vec<f64>,
    /// `distances[k] / distances[k - 1]`.
    pub ratios: Vec<f64>,
    /// Index of the first iterate within `tol` of its image.
    pub iterations: usize,
    pub converged: bool,
}

/// Fixed point of `mu -> law(Y^mu)` with common initials and noise across
/// iterations, started from the flow that freezes every particle at its
/// initial value.
pub fn picard_law_fixedpoint(
    coeffs: &dyn Coefficients,
    init: &InitialSampler,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    opts: &PicardOptions,
) -> Result<(LawFlow, PicardDiagnostics)> {
    if !(opts.lambda >= 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(
            "Picard needs lambda >= 0 and tol > 0".into(),
        ));
    }
    let d = coeffs.dim();
    let initials = sample_initials(init, d, grid, n, seed);
    let dw = Arc::new(draw_increments(grid, coeffs.noise_dim(), n, seed));

    let pts = grid.points();
    let seg_len = grid.window_len() * d;
    let mut frozen = vec![0.0; n * pts * d];
    for i in 0..n {
        let w = &initials[i * seg_len..(i + 1) * seg_len];
        let path = &mut frozen[i * pts * d..(i + 1) * pts * d];
        path[..seg_len].copy_from_slice(w);
        let x0 = current(w, d);
        for x in path[seg_len..].chunks_mut(d) {
            x.copy_from_slice(x0);
        }
    }
    let mut flow = LawFlow::from_paths(*grid, n, d, Arc::new(frozen))?;
    let mut diag = PicardDiagnostics::default();
    for k in 0..opts.max_iter {
        let next =
            decoupled_with(coeffs, &flow, &initials, grid, Arc::clone(&dw), seed)?.law_flow();
        let dist = wp_lambda(&next, &flow, opts.p, opts.lambda)?;
        if let Some(&prev) = diag.distances.last() {
            diag.ratios.push(if prev > 0.0 { dist / prev } else { 0.0 });
        }
        diag.distances.push(dist);
        flow = next;
        if dist < opts.tol {
            diag.iterations = k;
            diag.converged = true;
            return Ok((flow, diag));
        }
    }
    diag.iterations = opts.max_iter;
    Ok((flow, diag))
}

/// `(1 / N) sum_i sup_{t in [0, T]} ||X_{i,t}||_C^p`.
pub fn moment_sup(paths: &EnsemblePaths, p: f64) -> f64 {
    moment_sup_of(paths.values(), paths.n, paths.dim, p)
}

pub(crate) fn moment_sup_of(values: &[f64], n: usize, dim: usize, p: f64) -> f64 {
    let len = values.len() / n.max(1);
    let total: f64 = (0..n)
        .map(|i| {
            values[i * len..(i + 1) * len]
                .chunks(dim)
                .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
                .powf(p)
        })
        .sum();
    total / n as f64
}
