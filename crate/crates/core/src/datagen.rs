//! Seeded PDE data generators.
//!
//! Every sample is a pure function of its spec and a per-sample seed derived
//! from the dataset's root seed, so archives regenerate bit-exactly.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Precision};
use crate::error::{IknoError, Result};
use crate::grid::{boundary_ring, downsample, resample_boundary_to_channel, Grid2d, GridField, WindowPair};
use crate::spectral::fft::{fft_axis, plan};

pub const GENERATOR_VERSION: &str = "ikno-datagen 1";

/// Power-law spectral prior: coefficient standard deviation
/// `τ·(|k|² + shift)^(−α/2)` over integer wavenumbers, zero mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrfSpec {
    pub alpha: f64,
    pub tau: f64,
    pub shift: f64,
}

impl Default for GrfSpec {
    fn default() -> Self {
        Self { alpha: 2.5, tau: 1.0, shift: 1.0 }
    }
}

impl GrfSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(IknoError::Config(format!("spectral decay α must exceed 1, got {}", self.alpha)));
        }
        if !(self.tau >= 0.0) || !(self.shift > 0.0) {
            return Err(IknoError::Config("τ must be nonnegative and the spectral shift positive".into()));
        }
        Ok(())
    }

    fn sigma(&self, k2: f64) -> f64 {
        if k2 == 0.0 {
            0.0
        } else {
            self.tau * (k2 + self.shift).powf(-self.alpha / 2.0)
        }
    }
}

fn signed_wavenumber(j: usize, n: usize) -> f64 {
    if j <= n / 2 {
        j as f64
    } else {
        j as f64 - n as f64
    }
}

/// `Σ_k |k|²`-indexed values over a row-major grid.
fn squared_wavenumbers(shape: &[usize]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut k2 = 0.0;
        for &n in shape.iter().rev() {
            let k = signed_wavenumber(rem % n, n);
            k2 += k * k;
            rem /= n;
        }
        *o = k2;
    }
    out
}

fn check_pow2(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&n| n < 2 || !n.is_power_of_two()) {
        return Err(IknoError::Config(format!("random fields need power-of-two resolutions, got {shape:?}")));
    }
    Ok(())
}

/// Periodic zero-mean Gaussian field on `[0,1)^d`, obtained by filtering
/// white noise so that every node has variance [`grf_variance`].
pub fn sample_grf<R: Rng + ?Sized>(shape: &[usize], grf: &GrfSpec, rng: &mut R) -> Result<ArrayD<f64>> {
    grf.validate()?;
    check_pow2(shape)?;
    let total: usize = shape.iter().product();
    let mut buf: Vec<Complex64> =
        (0..total).map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
    for ax in 0..shape.len() {
        fft_axis(&mut buf, shape, ax, false);
    }
    for (c, k2) in buf.iter_mut().zip(squared_wavenumbers(shape)) {
        *c *= grf.sigma(k2);
    }
    for ax in 0..shape.len() {
        fft_axis(&mut buf, shape, ax, true);
    }
    let scale = 1.0 / (total as f64).sqrt();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), buf.iter().map(|c| c.re * scale).collect()).expect("shape"))
}

pub fn sample_grf_1d<R: Rng + ?Sized>(n: usize, grf: &GrfSpec, rng: &mut R) -> Result<Vec<f64>> {
    Ok(sample_grf(&[n], grf, rng)?.into_raw_vec_and_offset().0)
}

pub fn sample_grf_2d<R: Rng + ?Sized>(n: usize, grf: &GrfSpec, rng: &mut R) -> Result<Array2<f64>> {
    Ok(sample_grf(&[n, n], grf, rng)?.into_dimensionality().expect("rank 2"))
}

/// Pointwise variance of [`sample_grf`] fields: `Σ_k σ_k²`.
pub fn grf_variance(shape: &[usize], grf: &GrfSpec) -> f64 {
    squared_wavenumbers(shape).into_iter().map(|k2| grf.sigma(k2).powi(2)).sum()
}

/// Discretization of the nonlinear term in the split Burgers step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Advection {
    /// `(1/3)[(u²)_x + u·u_x]` with spectral derivatives.
    #[default]
    Spectral,
    /// Conservative Godunov flux for `u²/2`.
    Upwind,
    /// Diffusion only.
    Off,
}

/// `u_t + u·u_x = ν·u_xx` on the periodic unit interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurgersSpec {
    pub nu: f64,
    /// Time between recorded snapshots.
    pub snapshot_dt: f64,
    /// Recorded snapshots including `t = 0`.
    pub snapshots: usize,
    pub fine_resolution: usize,
    pub advection: Advection,
    /// Fixed internal step; `None` picks `safety ×` the stability bound.
    pub internal_step: Option<f64>,
    pub safety: f64,
}

impl Default for BurgersSpec {
    fn default() -> Self {
        Self {
            nu: 0.01,
            snapshot_dt: 0.1,
            snapshots: 30,
            fine_resolution: 1024,
            advection: Advection::Spectral,
            internal_step: None,
            safety: 0.5,
        }
    }
}

/// Largest stable forward-Euler step for the split Burgers scheme on `n`
/// nodes with `max|u| = umax`:
/// diffusion `2/(ν k_max²)`, advective CFL `Δx/umax`, and for the spectral
/// advection (purely imaginary symbols) the damping condition `2ν/umax²`.
pub fn burgers_step_bound(spec: &BurgersSpec, n: usize, umax: f64) -> f64 {
    let kmax = PI * n as f64;
    let mut bound = f64::INFINITY;
    if spec.nu > 0.0 {
        bound = bound.min(2.0 / (spec.nu * kmax * kmax));
    }
    if spec.advection != Advection::Off && umax > 0.0 {
        bound = bound.min(1.0 / (n as f64 * umax));
        if spec.advection == Advection::Spectral {
            bound = bound.min(2.0 * spec.nu / (umax * umax));
        }
    }
    bound
}

struct BurgersWork {
    n: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    scratch: Vec<Complex64>,
    /// Angular wavenumbers with the Nyquist derivative zeroed.
    ik: Vec<Complex64>,
    k2: Vec<f64>,
}

impl BurgersWork {
    fn new(n: usize) -> Self {
        let fwd = plan(n, false);
        let inv = plan(n, true);
        let scratch = vec![Complex64::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
        let ik = (0..n)
            .map(|j| {
                let k = if 2 * j == n { 0.0 } else { 2.0 * PI * signed_wavenumber(j, n) };
                Complex64::new(0.0, k)
            })
            .collect();
        let k2 = (0..n).map(|j| (2.0 * PI * signed_wavenumber(j, n)).powi(2)).collect();
        Self { n, fwd, inv, scratch, ik, k2 }
    }

    fn forward(&mut self, real: &[f64]) -> Vec<Complex64> {
        let mut b: Vec<Complex64> = real.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process_with_scratch(&mut b, &mut self.scratch);
        b
    }

    fn inverse(&mut self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inv.process_with_scratch(&mut spec, &mut self.scratch);
        let s = 1.0 / self.n as f64;
        spec.iter().map(|c| c.re * s).collect()
    }

    fn step(&mut self, u: &[f64], h: f64, nu: f64, advection: Advection) -> Vec<f64> {
        let n = self.n;
        let mut vh = match advection {
            Advection::Spectral => {
                let uh = self.forward(u);
                let ux = self.inverse(uh.iter().zip(&self.ik).map(|(a, b)| a * b).collect());
                let u2: Vec<f64> = u.iter().map(|x| x * x).collect();
                let uux: Vec<f64> = u.iter().zip(&ux).map(|(a, b)| a * b).collect();
                let u2h = self.forward(&u2);
                let uuxh = self.forward(&uux);
                (0..n).map(|j| uh[j] - h * (self.ik[j] * u2h[j] + uuxh[j]) / 3.0).collect()
            }
            Advection::Upwind => {
                let dx = 1.0 / n as f64;
                let flux = |l: f64, r: f64| {
                    let a = l.max(0.0);
                    let b = r.min(0.0);
                    (a * a).max(b * b) / 2.0
                };
                let star: Vec<f64> = (0..n)
                    .map(|j| {
                        let (l, c, r) = (u[(j + n - 1) % n], u[j], u[(j + 1) % n]);
                        c - h * (flux(c, r) - flux(l, c)) / dx
                    })
                    .collect();
                self.forward(&star)
            }
            Advection::Off => self.forward(u),
        };
        for (c, k2) in vh.iter_mut().zip(&self.k2) {
            *c *= 1.0 - h * nu * k2;
        }
        self.inverse(vh)
    }
}

/// Split-step solution recorded every `snapshot_dt`: `n × snapshots`, the
/// first column being `u0`.
pub fn solve_burgers_1d(u0: &[f64], spec: &BurgersSpec) -> Result<Array2<f64>> {
    let n = u0.len();
    if n < 4 {
        return Err(IknoError::Input(format!("Burgers grid needs at least 4 nodes, got {n}")));
    }
    if !(spec.nu >= 0.0) || !(spec.snapshot_dt > 0.0) || spec.snapshots == 0 || !(spec.safety > 0.0) {
        return Err(IknoError::Config("invalid Burgers parameters".into()));
    }
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(IknoError::Input("initial condition is not finite".into()));
    }
    let umax = u0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = burgers_step_bound(spec, n, umax);
    let h_target = match spec.internal_step {
        Some(h) if !(h > 0.0) || h > bound => {
            return Err(IknoError::Config(format!(
                "internal step {h} violates the stability bound {bound:.3e}"
            )))
        }
        Some(h) => h,
        None if bound == 0.0 => {
            return Err(IknoError::Config("spectral advection without viscosity has no stable step".into()))
        }
        None => spec.safety * bound,
    };
    let substeps = if h_target.is_finite() { (spec.snapshot_dt / h_target - 1e-9).ceil().max(1.0) as usize } else { 1 };
    let h = spec.snapshot_dt / substeps as f64;
    let mut work = BurgersWork::new(n);
    let mut out = Array2::zeros((n, spec.snapshots));
    let mut u = u0.to_vec();
    out.column_mut(0).assign(&ndarray::ArrayView1::from(&u));
    for s in 1..spec.snapshots {
        for _ in 0..substeps {
            u = work.step(&u, h, spec.nu, spec.advection);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(IknoError::Solver { iterations: s * substeps, residual: f64::NAN });
        }
        out.column_mut(s).assign(&ndarray::ArrayView1::from(&u));
    }
    Ok(out)
}

/// Steady flow `−∇·(κ∇p) = f` on the unit square with Dirichlet data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcySpec {
    pub kappa: f64,
    pub source: f64,
    /// Relative residual target of the conjugate-gradient solve.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of random boundary samples spread along the perimeter.
    pub boundary_samples: usize,
}

impl Default for DarcySpec {
    fn default() -> Self {
        Self { kappa: 0.1, source: -1.0, tol: 1e-10, max_iter: 20_000, boundary_samples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarcySolution {
    pub pressure: Array2<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Five-point finite differences on an `nx × ny` node grid (boundary nodes
/// included) solved by conjugate gradients. Boundary values are read from
/// the ring of `boundary`; its interior is ignored.
pub fn solve_darcy_2d(
    boundary: &Array2<f64>,
    kappa: f64,
    source: &Array2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DarcySolution> {
    let (nx, ny) = boundary.dim();
    if nx < 3 || ny < 3 || source.dim() != (nx, ny) {
        return Err(IknoError::Shape(format!(
            "Darcy grid {nx}×{ny} with source {:?} (need ≥ 3×3, equal shapes)",
            source.dim()
        )));
    }
    if !(kappa > 0.0) {
        return Err(IknoError::Config(format!("permeability must be positive, got {kappa}")));
    }
    let (mx, my) = (nx - 2, ny - 2);
    let cx = kappa * ((nx - 1) as f64).powi(2);
    let cy = kappa * ((ny - 1) as f64).powi(2);
    let diag = 2.0 * cx + 2.0 * cy;
    let apply = |p: &[f64], out: &mut [f64]| {
        for i in 0..mx {
            for j in 0..my {
                let c = p[i * my + j];
                let mut v = diag * c;
                if i > 0 {
                    v -= cx * p[(i - 1) * my + j];
                }
                if i + 1 < mx {
                    v -= cx * p[(i + 1) * my + j];
                }
                if j > 0 {
                    v -= cy * p[i * my + j - 1];
                }
                if j + 1 < my {
                    v -= cy * p[i * my + j + 1];
                }
                out[i * my + j] = v;
            }
        }
    };
    let mut b = vec![0.0; mx * my];
    for i in 0..mx {
        for j in 0..my {
            let (gi, gj) = (i + 1, j + 1);
            let mut v = source[[gi, gj]];
            if i == 0 {
                v += cx * boundary[[0, gj]];
            }
            if i + 1 == mx {
                v += cx * boundary[[nx - 1, gj]];
            }
            if j == 0 {
                v += cy * boundary[[gi, 0]];
            }
            if j + 1 == my {
                v += cy * boundary[[gi, ny - 1]];
            }
            b[i * my + j] = v;
        }
    }
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; mx * my];
    let mut iterations = 0;
    let mut rel = 0.0;
    if bnorm > 0.0 {
        let mut r = b.clone();
        let mut d = r.clone();
        let mut ad = vec![0.0; mx * my];
        let mut rr = dot(&r, &r);
        rel = rr.sqrt() / bnorm;
        while rel > tol {
            if iterations == max_iter {
                return Err(IknoError::Solver { iterations, residual: rel });
            }
            apply(&d, &mut ad);
            let alpha = rr / dot(&d, &ad);
            for k in 0..x.len() {
                x[k] += alpha * d[k];
                r[k] -= alpha * ad[k];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            for k in 0..d.len() {
                d[k] = r[k] + beta * d[k];
            }
            rr = rr_new;
            rel = rr.sqrt() / bnorm;
            iterations += 1;
        }
    }
    let mut p = boundary.clone();
    for i in 0..mx {
        for j in 0..my {
            p[[i + 1, j + 1]] = x[i * my + j];
        }
    }
    Ok(DarcySolution { pressure: p, iterations, residual: rel })
}

/// Exact periodic heat propagation: every Fourier coefficient of `u0` is
/// multiplied by `exp(−ν|k|²Δt)` per step. Returns `n × n × (steps+1)`.
pub fn solve_heat_2d_exact(u0: &Array2<f64>, nu: f64, dt: f64, steps: usize) -> Result<ndarray::Array3<f64>> {
    let (nx, ny) = u0.dim();
    check_pow2(&[nx, ny])?;
    if !(nu >= 0.0) || !(dt >= 0.0) {
        return Err(IknoError::Config("heat parameters must be nonnegative".into()));
    }
    let shape = [nx, ny];
    let mut hat: Vec<Complex64> = u0.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_axis(&mut hat, &shape, 0, false);
    fft_axis(&mut hat, &shape, 1, false);
    let decay: Vec<f64> = squared_wavenumbers(&shape)
        .into_iter()
        .map(|k2| (-nu * 4.0 * PI * PI * k2 * dt).exp())
        .collect();
    let mut out = ndarray::Array3::zeros((nx, ny, steps + 1));
    out.index_axis_mut(Axis(2), 0).assign(u0);
    let scale = 1.0 / (nx * ny) as f64;
    for s in 1..=steps {
        let factors: Vec<f64> = decay.iter().map(|d| d.powi(s as i32)).collect();
        let mut buf: Vec<Complex64> = hat.iter().zip(&factors).map(|(c, f)| c * f).collect();
        fft_axis(&mut buf, &shape, 0, true);
        fft_axis(&mut buf, &shape, 1, true);
        let snap = Array2::from_shape_vec((nx, ny), buf.iter().map(|c| c.re * scale).collect()).expect("shape");
        out.index_axis_mut(Axis(2), s).assign(&snap);
    }
    Ok(out)
}

/// Periodic heat equation on the unit torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatSpec {
    pub nu: f64,
    pub dt: f64,
    /// Resolution the initial fields are drawn at before downsampling.
    pub fine_resolution: usize,
}

impl Default for HeatSpec {
    fn default() -> Self {
        Self { nu: 0.01, dt: 0.1, fine_resolution: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Burgers1d,
    Darcy2d,
    Heat2d,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Burgers1d => "burgers1d",
            Task::Darcy2d => "darcy2d",
            Task::Heat2d => "heat2d",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = IknoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "burgers1d" => Ok(Task::Burgers1d),
            "darcy2d" => Ok(Task::Darcy2d),
            "heat2d" => Ok(Task::Heat2d),
            _ => Err(IknoError::Config(format!("unknown task '{s}' (expected burgers1d, darcy2d or heat2d)"))),
        }
    }
}

/// Everything that determines a dataset archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Training resolution per spatial axis.
    pub resolution: usize,
    /// Extra test resolutions produced from the same fine samples.
    #[serde(default)]
    pub sweep: Vec<usize>,
    pub window: usize,
    pub horizon: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub grf: GrfSpec,
    #[serde(default)]
    pub burgers: BurgersSpec,
    #[serde(default)]
    pub darcy: DarcySpec,
    #[serde(default)]
    pub heat: HeatSpec,
}

impl DatasetSpec {
    /// Desk-scale defaults for a task.
    pub fn for_task(task: Task) -> Self {
        let base = Self {
            task,
            n_train: 200,
            n_test: 40,
            seed: 0,
            resolution: 32,
            sweep: vec![64, 128],
            window: 10,
            horizon: 20,
            precision: Precision::Double,
            grf: GrfSpec::default(),
            burgers: BurgersSpec::default(),
            darcy: DarcySpec::default(),
            heat: HeatSpec::default(),
        };
        match task {
            Task::Burgers1d => base,
            Task::Heat2d => Self { n_train: 128, n_test: 32, sweep: vec![64], window: 4, horizon: 10, ..base },
            Task::Darcy2d => Self { n_train: 300, n_test: 50, resolution: 64, sweep: vec![], window: 3, horizon: 1, ..base },
        }
    }

    fn fine_resolution(&self) -> usize {
        match self.task {
            Task::Burgers1d => self.burgers.fine_resolution,
            Task::Heat2d => self.heat.fine_resolution,
            Task::Darcy2d => self.resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grf.validate()?;
        if self.n_train == 0 || self.window == 0 || self.horizon == 0 {
            return Err(IknoError::Config("train count, window and horizon must be positive".into()));
        }
        match self.task {
            Task::Darcy2d => {
                if self.window != 3 || self.horizon != 1 {
                    return Err(IknoError::Config(
                        "darcy2d inputs are the channels (x, y, boundary), so window = 3 and horizon = 1".into(),
                    ));
                }
                if !self.sweep.is_empty() {
                    return Err(IknoError::Config("darcy2d has no resolution sweep".into()));
                }
                if self.resolution < 3 || self.darcy.boundary_samples < 2 {
                    return Err(IknoError::Config("darcy2d needs a grid of at least 3×3 and 2 boundary samples".into()));
                }
            }
            Task::Burgers1d | Task::Heat2d => {
                let fine = self.fine_resolution();
                for &r in std::iter::once(&self.resolution).chain(&self.sweep) {
                    if r < 2 || r > fine || fine % r != 0 {
                        return Err(IknoError::Config(format!(
                            "resolution {r} must divide the fine resolution {fine}"
                        )));
                    }
                }
                if self.task == Task::Burgers1d && self.burgers.snapshots < self.window + self.horizon {
                    return Err(IknoError::InsufficientLength {
                        len: self.burgers.snapshots,
                        needed: self.window + self.horizon,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn spatial_rank(&self) -> usize {
        match self.task {
            Task::Burgers1d => 1,
            Task::Darcy2d | Task::Heat2d => 2,
        }
    }

    fn periodic(&self) -> bool {
        self.task != Task::Darcy2d
    }

    fn dt(&self) -> f64 {
        match self.task {
            Task::Burgers1d => self.burgers.snapshot_dt,
            Task::Heat2d => self.heat.dt,
            Task::Darcy2d => 0.0,
        }
    }
}

/// Train and test windows plus zero-shot test sets at other resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: WindowPair,
    pub test: WindowPair,
    pub sweep: Vec<(usize, WindowPair)>,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
}

/// One fine-resolution sample as a `1 × R… × channels` field.
fn generate_sample(spec: &DatasetSpec, seed: u64) -> Result<GridField> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    match spec.task {
        Task::Burgers1d => {
            let n = spec.burgers.fine_resolution;
            let u0 = sample_grf_1d(n, &spec.grf, &mut rng)?;
            let traj = solve_burgers_1d(&u0, &spec.burgers)?;
            let t = spec.window + spec.horizon;
            let data = traj.slice(ndarray::s![.., ..t]).to_owned().insert_axis(Axis(0)).into_dyn();
            GridField::periodic_unit(data, spec.burgers.snapshot_dt)
        }
        Task::Heat2d => {
            let n = spec.heat.fine_resolution;
            let u0 = sample_grf_2d(n, &spec.grf, &mut rng)?;
            let traj = solve_heat_2d_exact(&u0, spec.heat.nu, spec.heat.dt, spec.window + spec.horizon - 1)?;
            GridField::periodic_unit(traj.insert_axis(Axis(0)).into_dyn(), spec.heat.dt)
        }
        Task::Darcy2d => {
            let n = spec.resolution;
            let samples = sample_grf_1d(spec.darcy.boundary_samples.next_power_of_two(), &spec.grf, &mut rng)?;
            let grid = Grid2d::unit(n, n);
            let a = resample_boundary_to_channel(&samples, &grid, 0.0)?;
            let a2: Array2<f64> = a.data().index_axis(Axis(0), 0).index_axis(Axis(2), 0).to_owned().into_dimensionality().expect("rank 2");
            let src = Array2::from_elem((n, n), spec.darcy.source);
            let sol = solve_darcy_2d(&a2, spec.darcy.kappa, &src, spec.darcy.tol, spec.darcy.max_iter)?;
            let mut data = ArrayD::zeros(IxDyn(&[1, n, n, 4]));
            for i in 0..n {
                for j in 0..n {
                    data[[0, i, j, 0]] = grid.coord(0, i);
                    data[[0, i, j, 1]] = grid.coord(1, j);
                    data[[0, i, j, 2]] = a2[[i, j]];
                    data[[0, i, j, 3]] = sol.pressure[[i, j]];
                }
            }
            GridField::new(data, vec![0.0, 0.0], vec![1.0, 1.0], 0.0, false)
        }
    }
}

fn to_windows(field: &GridField, spec: &DatasetSpec) -> WindowPair {
    let ch = Axis(field.data().ndim() - 1);
    let (w, h) = (spec.window, spec.horizon);
    WindowPair {
        input: field.data().slice_axis(ch, ndarray::Slice::from(..w)).to_owned(),
        target: field.data().slice_axis(ch, ndarray::Slice::from(w..w + h)).to_owned(),
    }
}

fn stack(parts: &[ArrayD<f64>]) -> ArrayD<f64> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal sample shapes").as_standard_layout().into_owned()
}

fn split_windows(spec: &DatasetSpec, purpose: &str, count: usize) -> Result<(Vec<(usize, WindowPair)>, Vec<u64>)> {
    let rank = spec.spatial_rank();
    let fine = spec.fine_resolution();
    let mut resolutions = vec![spec.resolution];
    if purpose == "test" {
        resolutions.extend(&spec.sweep);
    }
    let seeds: Vec<u64> = (0..count).map(|i| crate::seed::derive_seed(spec.seed, purpose, i as u64)).collect();
    // samples are independent; collecting in index order keeps the output deterministic
    let windows: Vec<Vec<WindowPair>> = seeds
        .par_iter()
        .map(|&seed| {
            let sample = generate_sample(spec, seed)?;
            resolutions
                .iter()
                .map(|&r| {
                    let field =
                        if spec.periodic() { downsample(&sample, &vec![fine / r; rank])? } else { sample.clone() };
                    Ok(to_windows(&field, spec))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts: Vec<(Vec<ArrayD<f64>>, Vec<ArrayD<f64>>)> = vec![(vec![], vec![]); resolutions.len()];
    for per_sample in windows {
        for (slot, w) in parts.iter_mut().zip(per_sample) {
            slot.0.push(w.input);
            slot.1.push(w.target);
        }
    }
    let out = resolutions
        .into_iter()
        .zip(parts)
        .map(|(r, (i, t))| (r, WindowPair { input: stack(&i), target: stack(&t) }))
        .collect();
    Ok((out, seeds))
}

/// Generates every split of a dataset.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (mut train, train_seeds) = split_windows(spec, "train", spec.n_train)?;
    let (test, test_seeds) = if spec.n_test > 0 {
        split_windows(spec, "test", spec.n_test)?
    } else {
        (vec![], vec![])
    };
    let mut test = test.into_iter();
    let empty = || {
        let mut s = vec![0];
        s.extend(std::iter::repeat_n(spec.resolution, spec.spatial_rank()));
        let mut t = s.clone();
        s.push(spec.window);
        t.push(spec.horizon);
        WindowPair { input: ArrayD::zeros(IxDyn(&s)), target: ArrayD::zeros(IxDyn(&t)) }
    };
    let main_test = test.next().map(|p| p.1).unwrap_or_else(empty);
    Ok(Dataset {
        spec: spec.clone(),
        train: train.remove(0).1,
        test: main_test,
        sweep: test.collect(),
        train_seeds,
        test_seeds,
    })
}

impl Dataset {
    pub fn domain_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.spec.spatial_rank();
        (vec![0.0; r], vec![1.0; r])
    }

    /// Serializes into the shared archive format.
    ///
    /// Arrays: `train/input`, `train/target`, `test/input`, `test/target`,
    /// `test@<R>/input|target` for every sweep resolution, `train/seeds`,
    /// `test/seeds`.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let spec = &self.spec;
        let (lo, hi) = self.domain_bounds();
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        a.set_meta("kind", "dataset");
        a.set_meta("generator", GENERATOR_VERSION);
        a.set_meta("task", spec.task);
        a.set_meta("seed", spec.seed);
        a.set_meta("domain_lo", join(&lo));
        a.set_meta("domain_hi", join(&hi));
        a.set_meta("dt", spec.dt());
        a.set_meta("periodic", spec.periodic());
        a.set_meta("dataset_spec", serde_json::to_string(spec).map_err(|e| IknoError::Format(e.to_string()))?);
        let p = spec.precision;
        a.insert_array("train/input", &self.train.input, p)?;
        a.insert_array("train/target", &self.train.target, p)?;
        a.insert_array("test/input", &self.test.input, p)?;
        a.insert_array("test/target", &self.test.target, p)?;
        for (r, w) in &self.sweep {
            a.insert_array(format!("test@{r}/input"), &w.input, p)?;
            a.insert_array(format!("test@{r}/target"), &w.target, p)?;
        }
        a.insert_u64("train/seeds", &self.train_seeds)?;
        a.insert_u64("test/seeds", &self.test_seeds)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("kind")? != "dataset" {
            return Err(IknoError::Format("archive is not a dataset".into()));
        }
        let spec: DatasetSpec =
            serde_json::from_str(a.meta("dataset_spec")?).map_err(|e| IknoError::Format(e.to_string()))?;
        let pair = |prefix: &str| -> Result<WindowPair> {
            Ok(WindowPair { input: a.array(&format!("{prefix}/input"))?, target: a.array(&format!("{prefix}/target"))? })
        };
        let sweep = spec
            .sweep
            .iter()
            .filter(|_| spec.n_test > 0)
            .map(|&r| Ok((r, pair(&format!("test@{r}"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train: pair("train")?,
            test: pair("test")?,
            sweep,
            train_seeds: a.get_u64("train/seeds")?,
            test_seeds: a.get_u64("test/seeds")?,
            spec,
        })
    }

    /// Test windows at resolution `r` (the training resolution or a sweep entry).
    pub fn test_at(&self, r: usize) -> Option<&WindowPair> {
        if r == self.spec.resolution {
            Some(&self.test)
        } else {
            self.sweep.iter().find(|(s, _)| *s == r).map(|(_, w)| w)
        }
    }
}

/// Ring values of a 2D node grid in [`boundary_ring`] order.
pub fn ring_values(field: &Array2<f64>) -> Vec<f64> {
    let (nx, ny) = field.dim();
    boundary_ring([nx, ny]).into_iter().map(|(i, j)| field[[i, j]]).collect()
}
