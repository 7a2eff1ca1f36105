//! Discretized path space `C([-r0, 0]; R^d)`.
//!
//! A path lives on the grid `t_j = -r0 + j*dt`, `j = 0..=n_total`, and is
//! stored as a flat array of `d`-vectors. The segment (window) at time `t`
//! is the slice of `k + 1` consecutive points ending at `t`, so
//! `xi(theta) = x(t + theta)` for `theta in {-r0, ..., 0}`.
//!
//! Ensembles are stored particle-major: particle `i` owns the contiguous
//! block `[i * (n_total + 1) * d, (i + 1) * (n_total + 1) * d)`. A segment
//! is therefore always a contiguous slice, which is what model callbacks
//! receive.

mod assignment;
pub mod io;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use assignment::min_cost_assignment;

/// Largest ensemble accepted by [`empirical_wp`].
pub const WP_EXACT_CAP: usize = 512;

const GRID_TOL: f64 = 1e-9;

/// Uniform grid on `[-r0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub r0: f64,
    pub horizon: f64,
    /// Steps inside the memory window, `r0 / dt`.
    pub k: usize,
    /// Steps covering `[-r0, T]`.
    pub n_total: usize,
}

pub fn make_grid(horizon: f64, dt: f64, r0: f64) -> Result<TimeGrid> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidGrid(format!(
            "T must be positive, got {horizon}"
        )));
    }
    if !(r0 >= 0.0 && r0.is_finite()) {
        return Err(Error::InvalidGrid(format!(
            "r0 must be non-negative, got {r0}"
        )));
    }
    let k = commensurate("r0", r0, dt)?;
    let steps = commensurate("T", horizon, dt)?;
    Ok(TimeGrid {
        dt,
        r0,
        horizon,
        k,
        n_total: k + steps,
    })
}

fn commensurate(name: &'static str, value: f64, dt: f64) -> Result<usize> {
    let ratio = value / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > GRID_TOL * ratio.abs().max(1.0) {
        return Err(Error::NonCommensurate { name, value, dt });
    }
    Ok(rounded as usize)
}

impl TimeGrid {
    /// Number of forward steps on `[0, T]`.
    pub fn steps(&self) -> usize {
        self.n_total - self.k
    }

    pub fn window_len(&self) -> usize {
        self.k + 1
    }

    pub fn points(&self) -> usize {
        self.n_total + 1
    }

    /// Time of global index `j`.
    pub fn time(&self, j: usize) -> f64 {
        (j as f64 - self.k as f64) * self.dt
    }

    /// Time after `s` forward steps.
    pub fn step_time(&self, s: usize) -> f64 {
        s as f64 * self.dt
    }

    /// Forward step index of a grid time in `[0, T]`.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let ratio = t / self.dt;
        let s = ratio.round();
        if (ratio - s).abs() > GRID_TOL * ratio.abs().max(1.0)
            || s < 0.0
            || s as usize > self.steps()
        {
            return Err(Error::OffGrid(t));
        }
        Ok(s as usize)
    }

    /// Forward step at which `T - r0` is reached.
    pub fn cutoff_step(&self) -> usize {
        self.steps().saturating_sub(self.k)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.k == other.k
            && self.n_total == other.n_total
            && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }
}

/// A single discretized path on `[-r0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Path {
    pub fn new(dim: usize, values: Vec<f64>, grid: &TimeGrid) -> Result<Self> {
        if values.len() != grid.points() * dim {
            return Err(Error::SizeMismatch(format!(
                "path has {} values, grid needs {}",
                values.len(),
                grid.points() * dim
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn from_fn(dim: usize, grid: &TimeGrid, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; grid.points() * dim];
        for (j, x) in values.chunks_mut(dim).enumerate() {
            f(grid.time(j), x);
        }
        Self { dim, values }
    }

    pub fn at(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }
}

/// A window `xi(theta)`, `theta in {-r0, ..., 0}`, of `k + 1` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub dim: usize,
    pub window: Vec<f64>,
}

impl Segment {
    pub fn new(dim: usize, window: Vec<f64>) -> Self {
        assert!(
            dim > 0 && window.len().is_multiple_of(dim),
            "window length must be a multiple of dim"
        );
        Self { dim, window }
    }

    pub fn constant(dim: usize, k: usize, value: &[f64]) -> Self {
        assert_eq!(value.len(), dim);
        Self {
            dim,
            window: value.repeat(k + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.window.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn at(&self, j: usize) -> &[f64] {
        &self.window[j * self.dim..(j + 1) * self.dim]
    }

    /// `xi(0)`.
    pub fn current(&self) -> &[f64] {
        current(&self.window, self.dim)
    }

    /// `xi(-r0)`.
    pub fn oldest(&self) -> &[f64] {
        &self.window[..self.dim]
    }
}

/// `xi(0)` of a raw window.
#[inline]
pub fn current(window: &[f64], dim: usize) -> &[f64] {
    &window[window.len() - dim..]
}

/// `xi(-r0)` of a raw window.
#[inline]
pub fn oldest(window: &[f64], dim: usize) -> &[f64] {
    &window[..dim]
}

pub fn segment_at(path: &Path, t: f64, grid: &TimeGrid) -> Result<Segment> {
    let s = grid.step_of(t)?;
    let start = s * path.dim;
    let end = (s + grid.k + 1) * path.dim;
    if end > path.values.len() {
        return Err(Error::SizeMismatch("path shorter than grid".into()));
    }
    Ok(Segment::new(path.dim, path.values[start..end].to_vec()))
}

pub fn sup_norm(seg: &Segment) -> f64 {
    window_sup_norm(&seg.window, seg.dim)
}

/// Max over window points of the Euclidean norm.
pub fn window_sup_norm(window: &[f64], dim: usize) -> f64 {
    window
        .chunks(dim)
        .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `||a - b||_C` without allocating.
pub fn window_sup_dist(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Borrowed view of `n` segments, each `(k + 1) * dim` long, found at
/// `offset + i * stride` in `data`.
#[derive(Clone, Copy, Debug)]
pub struct LawSlice<'a> {
    data: &'a [f64],
    n: usize,
    dim: usize,
    k: usize,
    stride: usize,
    offset: usize,
}

impl<'a> LawSlice<'a> {
    /// View of contiguous segments.
    pub fn from_segments(data: &'a [f64], n: usize, dim: usize, k: usize) -> Self {
        let len = (k + 1) * dim;
        assert_eq!(data.len(), n * len, "segment array has wrong length");
        Self {
            data,
            n,
            dim,
            k,
            stride: len,
            offset: 0,
        }
    }

    /// View of the segments at forward step `s` of particle-major paths.
    pub fn from_paths(data: &'a [f64], n: usize, dim: usize, grid: &TimeGrid, s: usize) -> Self {
        debug_assert_eq!(data.len(), n * grid.points() * dim);
        Self {
            data,
            n,
            dim,
            k: grid.k,
            stride: grid.points() * dim,
            offset: s * dim,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn segment(&self, i: usize) -> &'a [f64] {
        let start = self.offset + i * self.stride;
        &self.data[start..start + (self.k + 1) * self.dim]
    }

    /// `xi_i(0)`.
    #[inline]
    pub fn current(&self, i: usize) -> &'a [f64] {
        let start = self.offset + i * self.stride + self.k * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        (0..self.n).map(move |i| self.segment(i))
    }

    /// Ensemble mean of `xi_i(0)`, summed in index order.
    pub fn mean_current(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.n {
            for (acc, v) in m.iter_mut().zip(self.current(i)) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.n as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    pub fn to_owned_segments(&self) -> Vec<Segment> {
        self.iter()
            .map(|w| Segment::new(self.dim, w.to_vec()))
            .collect()
    }
}

/// Empirical law flow: the segment clouds of `n` particle paths at the
/// retained forward steps. The path storage is shared, not copied.
#[derive(Clone, Debug)]
pub struct LawFlow {
    pub grid: TimeGrid,
    pub n: usize,
    pub dim: usize,
    storage: Arc<Vec<f64>>,
    stride: usize,
}

impl LawFlow {
    pub fn from_paths(
        grid: TimeGrid,
        n: usize,
        dim: usize,
        storage: Arc<Vec<f64>>,
    ) -> Result<Self> {
        if storage.len() != n * grid.points() * dim {
            return Err(Error::SizeMismatch(format!(
                "flow storage has {} values, expected {}",
                storage.len(),
                n * grid.points() * dim
            )));
        }
        Ok(Self {
            grid,
            n,
            dim,
            storage,
            stride: 1,
        })
    }

    /// Retain only every `stride`-th forward step (plus `T`).
    pub fn thinned(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn is_retained(&self, s: usize) -> bool {
        s <= self.grid.steps() && (s.is_multiple_of(self.stride) || s == self.grid.steps())
    }

    pub fn retained_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.grid.steps()).filter(move |&s| self.is_retained(s))
    }

    pub fn slice(&self, s: usize) -> Result<LawSlice<'_>> {
        if !self.is_retained(s) {
            return Err(Error::OffGrid(self.grid.step_time(s)));
        }
        Ok(LawSlice::from_paths(
            &self.storage,
            self.n,
            self.dim,
            &self.grid,
            s,
        ))
    }

    pub fn storage(&self) -> &Arc<Vec<f64>> {
        &self.storage
    }
}

/// Exact empirical `W_p` between two equally sized segment clouds with
/// sup-norm ground cost.
pub fn empirical_wp(a: &LawSlice, b: &LawSlice, p: f64) -> Result<f64> {
    check_pair(a, b, p)?;
    let n = a.n();
    if n > WP_EXACT_CAP {
        return Err(Error::TooLarge {
            n,
            cap: WP_EXACT_CAP,
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let identity = identity_cost(a, b, p);
    if identity == 0.0 {
        return Ok(0.0);
    }
    // W_p >= W_1 >= max_theta |mean a(theta) - mean b(theta)|; when the
    // identity coupling attains the bound it is optimal.
    let lower = mean_gap(a, b);
    let upper = identity.powf(1.0 / p);
    if upper <= lower * (1.0 + 1e-12) {
        return Ok(upper);
    }
    let dim = a.dim();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let xi = a.segment(i);
        for j in 0..n {
            cost[i * n + j] = window_sup_dist(xi, b.segment(j), dim).powf(p);
        }
    }
    let (total, _) = min_cost_assignment(&cost, n);
    Ok((total.max(0.0) / n as f64).powf(1.0 / p))
}

fn check_pair(a: &LawSlice, b: &LawSlice, p: f64) -> Result<()> {
    if a.n() != b.n() || a.dim() != b.dim() || a.k() != b.k() {
        return Err(Error::SizeMismatch(format!(
            "ensembles ({}, {}, {}) and ({}, {}, {})",
            a.n(),
            a.dim(),
            a.k(),
            b.n(),
            b.dim(),
            b.k()
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p must be at least 1, got {p}"
        )));
    }
    Ok(())
}

fn identity_cost(a: &LawSlice, b: &LawSlice, p: f64) -> f64 {
    let dim = a.dim();
    let total: f64 = (0..a.n())
        .map(|i| window_sup_dist(a.segment(i), b.segment(i), dim).powf(p))
        .sum();
    total / a.n() as f64
}

fn mean_gap(a: &LawSlice, b: &LawSlice) -> f64 {
    let dim = a.dim();
    let len = (a.k() + 1) * dim;
    let mut diff = vec![0.0; len];
    for i in 0..a.n() {
        for ((d, x), y) in diff.iter_mut().zip(a.segment(i)).zip(b.segment(i)) {
            *d += x - y;
        }
    }
    let inv = 1.0 / a.n() as f64;
    diff.iter_mut().for_each(|d| *d *= inv);
    window_sup_norm(&diff, dim)
}

/// `sup_t e^{-lambda t} W_p(a_t, b_t)` over the steps retained by both flows.
pub fn wp_lambda(a: &LawFlow, b: &LawFlow, p: f64, lambda: f64) -> Result<f64> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::GridMismatch);
    }
    if a.n != b.n || a.dim != b.dim {
        return Err(Error::SizeMismatch(format!(
            "flows of {} and {} particles",
            a.n, b.n
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let mut best = 0.0_f64;
    for s in a.retained_steps().filter(|&s| b.is_retained(s)) {
        let weight = (-lambda * a.grid.step_time(s)).exp();
        let (sa, sb) = (a.slice(s)?, b.slice(s)?);
        check_pair(&sa, &sb, p)?;
        // The identity coupling bounds W_p from above; skip slices that
        // cannot raise the running supremum.
        if weight * identity_cost(&sa, &sb, p).powf(1.0 / p) <= best {
            continue;
        }
        best = best.max(weight * empirical_wp(&sa, &sb, p)?);
    }
    Ok(best)
}
