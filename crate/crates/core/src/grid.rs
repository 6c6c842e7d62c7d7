//! Discretized fields on uniform Cartesian grids.
//!
//! Data is channel-last: `batch × R_1 × … × R_dx × channels`. Time-dependent
//! trajectories keep their snapshots in the channel axis.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::error::{shape_err, IknoError, Result};

/// A batch of real fields sampled on a uniform grid.
///
/// Periodic grids place `R` nodes at `lo + i·(hi−lo)/R`; non-periodic grids
/// include both endpoints, `lo + i·(hi−lo)/(R−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    data: ArrayD<f64>,
    domain_lo: Vec<f64>,
    domain_hi: Vec<f64>,
    dt: f64,
    periodic: bool,
}

impl GridField {
    pub fn new(
        data: ArrayD<f64>,
        domain_lo: Vec<f64>,
        domain_hi: Vec<f64>,
        dt: f64,
        periodic: bool,
    ) -> Result<Self> {
        let nd = data.ndim();
        if nd < 3 {
            return shape_err(format!(
                "a field needs batch, at least one spatial axis and channels; got rank {nd}"
            ));
        }
        let shape = data.shape();
        if shape[0] < 1 || shape[nd - 1] < 1 {
            return shape_err(format!("empty batch or channel axis in {shape:?}"));
        }
        if let Some(r) = shape[1..nd - 1].iter().find(|&&r| r < 2) {
            return shape_err(format!("spatial resolution {r} < 2 in {shape:?}"));
        }
        let dx = nd - 2;
        if domain_lo.len() != dx || domain_hi.len() != dx {
            return shape_err(format!(
                "domain bounds have {} / {} axes, field has {dx}",
                domain_lo.len(),
                domain_hi.len()
            ));
        }
        if domain_lo.iter().zip(&domain_hi).any(|(lo, hi)| !(hi > lo)) {
            return Err(IknoError::Input("domain_hi must exceed domain_lo on every axis".into()));
        }
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(IknoError::Input(format!("invalid snapshot interval {dt}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(IknoError::Input("field contains non-finite values".into()));
        }
        Ok(Self {
            data,
            domain_lo,
            domain_hi,
            dt,
            periodic,
        })
    }

    /// Periodic field on the unit cube `[0,1)^dx`.
    pub fn periodic_unit(data: ArrayD<f64>, dt: f64) -> Result<Self> {
        let dx = data.ndim().saturating_sub(2);
        Self::new(data, vec![0.0; dx], vec![1.0; dx], dt, true)
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn into_data(self) -> ArrayD<f64> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        *self.data.shape().last().unwrap()
    }

    pub fn spatial_shape(&self) -> &[usize] {
        let s = self.data.shape();
        &s[1..s.len() - 1]
    }

    pub fn spatial_rank(&self) -> usize {
        self.data.ndim() - 2
    }

    pub fn domain_lo(&self) -> &[f64] {
        &self.domain_lo
    }

    pub fn domain_hi(&self) -> &[f64] {
        &self.domain_hi
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn node_coord(&self, axis: usize, i: usize) -> f64 {
        let r = self.spatial_shape()[axis];
        let (lo, hi) = (self.domain_lo[axis], self.domain_hi[axis]);
        let cells = if self.periodic { r } else { r - 1 };
        lo + (hi - lo) * i as f64 / cells as f64
    }

    /// Same metadata, new data.
    pub fn with_data(&self, data: ArrayD<f64>) -> Result<Self> {
        Self::new(
            data,
            self.domain_lo.clone(),
            self.domain_hi.clone(),
            self.dt,
            self.periodic,
        )
    }

    /// Selects a subset of batch entries, in the given order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.batch()) {
            return shape_err(format!("batch index {bad} out of range {}", self.batch()));
        }
        self.with_data(self.data.select(Axis(0), indices))
    }
}

/// Input window and prediction target for time-delay learning.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// `batch × R… × T_d`
    pub input: ArrayD<f64>,
    /// `batch × R… × T_p`
    pub target: ArrayD<f64>,
}

/// Strided subsampling starting at index 0 on every spatial axis.
pub fn downsample(field: &GridField, factors: &[usize]) -> Result<GridField> {
    let spatial = field.spatial_shape();
    if factors.len() != spatial.len() {
        return shape_err(format!(
            "{} downsampling factors for {} spatial axes",
            factors.len(),
            spatial.len()
        ));
    }
    for (&r, &f) in spatial.iter().zip(factors) {
        if f == 0 || r % f != 0 {
            return shape_err(format!("resolution {r} is not divisible by factor {f}"));
        }
        if r / f < 2 {
            return shape_err(format!("downsampling {r} by {f} leaves fewer than 2 nodes"));
        }
    }
    let nd = field.data.ndim();
    let view = field.data.slice_each_axis(|ax| {
        let i = ax.axis.index();
        if i == 0 || i == nd - 1 {
            Slice::from(..)
        } else {
            Slice::new(0, None, factors[i - 1] as isize)
        }
    });
    field.with_data(view.to_owned())
}

/// Sliding `(T_d, T_p)` windows over a trajectory stored in the channel axis.
///
/// Window `k` covers input snapshots `[k·stride, k·stride+T_d)` and target
/// snapshots `[k·stride+T_d, k·stride+T_d+T_p)`.
pub fn make_windows(
    trajectory: &GridField,
    t_d: usize,
    t_p: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if t_d < 1 || t_p < 1 {
        return Err(IknoError::Input(format!(
            "window sizes must be positive (T_d = {t_d}, T_p = {t_p})"
        )));
    }
    if stride < 1 {
        return Err(IknoError::Input("window stride must be positive".into()));
    }
    let len = trajectory.channels();
    let needed = t_d + t_p;
    if len < needed {
        return Err(IknoError::InsufficientLength { len, needed });
    }
    let count = (len - needed) / stride + 1;
    let ch = Axis(trajectory.data.ndim() - 1);
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            let input = trajectory
                .data
                .slice_axis(ch, Slice::from(start..start + t_d))
                .to_owned();
            let target = trajectory
                .data
                .slice_axis(ch, Slice::from(start + t_d..start + needed))
                .to_owned();
            WindowPair { input, target }
        })
        .collect())
}

/// Description of a 2D non-periodic target grid (endpoints included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2d {
    pub shape: [usize; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Grid2d {
    pub fn unit(nx: usize, ny: usize) -> Self {
        Self {
            shape: [nx, ny],
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
        }
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * i as f64 / (self.shape[axis] - 1) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 2) {
            return shape_err(format!("grid shape {:?} needs at least 2 nodes per axis", self.shape));
        }
        if (0..2).any(|a| !(self.hi[a] > self.lo[a])) {
            return Err(IknoError::Input("grid upper bounds must exceed lower bounds".into()));
        }
        Ok(())
    }

    fn field(&self, values: Vec<f64>) -> Result<GridField> {
        let data = ArrayD::from_shape_vec(IxDyn(&[1, self.shape[0], self.shape[1], 1]), values)
            .expect("grid buffer matches shape");
        GridField::new(data, self.lo.to_vec(), self.hi.to_vec(), 0.0, false)
    }
}

/// Piecewise-linear interpolation of scattered 2D samples onto grid nodes.
///
/// The samples are Delaunay-triangulated; nodes inside a triangle get the
/// barycentric combination of its vertex values, nodes outside the convex
/// hull get `fill`. Nodes that coincide with a sample take its value exactly.
pub fn interpolate_to_cartesian(
    points: &[([f64; 2], f64)],
    grid: &Grid2d,
    fill: f64,
) -> Result<GridField> {
    grid.validate()?;
    if points.is_empty() {
        return Err(IknoError::Input("no sample points to interpolate".into()));
    }
    if points.iter().any(|(p, v)| !p[0].is_finite() || !p[1].is_finite() || !v.is_finite()) {
        return Err(IknoError::Input("sample points must be finite".into()));
    }
    let coords: Vec<[f64; 2]> = points.iter().map(|(p, _)| *p).collect();
    let tris = crate::delaunay::triangulate(&coords)?;

    let [nx, ny] = grid.shape;
    let mut out = vec![fill; nx * ny];
    for i in 0..nx {
        let x = grid.coord(0, i);
        for j in 0..ny {
            let y = grid.coord(1, j);
            if let Some((_, v)) = points.iter().find(|(p, _)| p[0] == x && p[1] == y) {
                out[i * ny + j] = *v;
                continue;
            }
            for t in &tris {
                if let Some(w) = barycentric(&coords, t, x, y) {
                    out[i * ny + j] = w[0] * points[t[0]].1 + w[1] * points[t[1]].1 + w[2] * points[t[2]].1;
                    break;
                }
            }
        }
    }
    grid.field(out)
}

fn barycentric(coords: &[[f64; 2]], t: &[usize; 3], x: f64, y: f64) -> Option<[f64; 3]> {
    let [x1, y1] = coords[t[0]];
    let [x2, y2] = coords[t[1]];
    let [x3, y3] = coords[t[2]];
    if x < x1.min(x2).min(x3) || x > x1.max(x2).max(x3) || y < y1.min(y2).min(y3) || y > y1.max(y2).max(y3) {
        return None;
    }
    let det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3);
    let l1 = ((y2 - y3) * (x - x3) + (x3 - x2) * (y - y3)) / det;
    let l2 = ((y3 - y1) * (x - x3) + (x1 - x3) * (y - y3)) / det;
    let l3 = 1.0 - l1 - l2;
    let tol = -1e-12;
    (l1 >= tol && l2 >= tol && l3 >= tol).then_some([l1, l2, l3])
}

/// Boundary ring of a 2D grid, counter-clockwise from node (0, 0).
///
/// Axis 0 is x, axis 1 is y; the ring runs along y = lo first.
pub fn boundary_ring(shape: [usize; 2]) -> Vec<(usize, usize)> {
    let [nx, ny] = shape;
    let mut ring = Vec::with_capacity(2 * (nx + ny) - 4);
    ring.extend((0..nx).map(|i| (i, 0)));
    ring.extend((1..ny).map(|j| (nx - 1, j)));
    ring.extend((0..nx - 1).rev().map(|i| (i, ny - 1)));
    ring.extend((1..ny - 1).rev().map(|j| (0, j)));
    ring
}

/// Spreads boundary samples onto the grid's boundary ring.
///
/// `boundary_values[k]` sits at arc-length fraction `k / K` of the perimeter,
/// traversed as in [`boundary_ring`]. Every ring node takes the nearest
/// sample; interior nodes get `fill`.
pub fn resample_boundary_to_channel(
    boundary_values: &[f64],
    grid: &Grid2d,
    fill: f64,
) -> Result<GridField> {
    grid.validate()?;
    let k = boundary_values.len();
    if k < 2 {
        return Err(IknoError::Input(format!("need at least 2 boundary samples, got {k}")));
    }
    let [nx, ny] = grid.shape;
    let hx = (grid.hi[0] - grid.lo[0]) / (nx - 1) as f64;
    let hy = (grid.hi[1] - grid.lo[1]) / (ny - 1) as f64;
    let perimeter = 2.0 * (grid.hi[0] - grid.lo[0]) + 2.0 * (grid.hi[1] - grid.lo[1]);

    let mut out = vec![fill; nx * ny];
    let ring = boundary_ring(grid.shape);
    let mut arc = 0.0;
    let mut prev = ring[0];
    for &(i, j) in &ring {
        arc += (i as f64 - prev.0 as f64).abs() * hx + (j as f64 - prev.1 as f64).abs() * hy;
        prev = (i, j);
        let idx = ((arc / perimeter) * k as f64).round() as usize % k;
        out[i * ny + j] = boundary_values[idx];
    }
    grid.field(out)
}
