//! Frequency-space Koopman layer.
//!
//! A layer maps `v: batch × O × R…` to
//! `γ(irfft(embed(K^p · truncate(rfft(v)))) + W v + b)`, where `K` holds one
//! complex `O × O` block per retained mode.

pub(crate) mod fft;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, IknoError, Result};

pub type Spectrum = ArrayD<Complex64>;

/// Retained modes per spatial axis and the Koopman power `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub modes: Vec<usize>,
    pub power: usize,
}

impl TruncationSpec {
    pub fn new(modes: Vec<usize>, power: usize) -> Result<Self> {
        let s = Self { modes, power };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.modes.contains(&0) {
            return Err(IknoError::Config(format!("invalid mode counts {:?}", self.modes)));
        }
        if self.power == 0 {
            return Err(IknoError::Config("Koopman power must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.modes.len()
    }

    /// Shape of a truncated spectrum: `2M` on full axes, `M` on the last.
    pub fn truncated_shape(&self) -> Vec<usize> {
        let d = self.modes.len();
        self.modes
            .iter()
            .enumerate()
            .map(|(i, &m)| if i + 1 == d { m } else { 2 * m })
            .collect()
    }

    pub fn mode_count(&self) -> usize {
        self.truncated_shape().iter().product()
    }

    /// Checks that a grid of the given spatial shape can hold the retained band.
    pub fn check_resolution(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.modes.len() {
            return shape_err(format!(
                "spectral truncation has rank {} but the grid has rank {}",
                self.modes.len(),
                spatial.len()
            ));
        }
        let d = spatial.len();
        for (i, (&r, &m)) in spatial.iter().zip(&self.modes).enumerate() {
            let ok = if i + 1 == d { m <= r / 2 + 1 } else { 2 * m <= r };
            if r < 2 || !ok {
                return shape_err(format!("resolution {r} on axis {i} cannot retain {m} modes"));
            }
        }
        Ok(())
    }
}

/// Point-wise nonlinearity applied at the end of each layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    #[default]
    Gelu,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Tanh => x.tanh(),
            Self::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Tanh => 1.0 - x.tanh().powi(2),
            Self::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

impl FromStr for Activation {
    type Err = IknoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "tanh" => Ok(Self::Tanh),
            "gelu" => Ok(Self::Gelu),
            other => Err(IknoError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Tanh => "tanh",
            Self::Gelu => "gelu",
        })
    }
}

/// Parameters of one spectral layer. `K` is stored as separate real and
/// imaginary arrays of shape `O × O × modes` (modes flattened row-major over
/// the truncated shape).
#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanLayerParams {
    pub k_re: Array3<f64>,
    pub k_im: Array3<f64>,
    pub w_hf: Array2<f64>,
    pub b_hf: Array1<f64>,
    pub activation: Activation,
}

impl KoopmanLayerParams {
    pub fn zeros(width: usize, modes: usize, activation: Activation) -> Self {
        Self {
            k_re: Array3::zeros((width, width, modes)),
            k_im: Array3::zeros((width, width, modes)),
            w_hf: Array2::zeros((width, width)),
            b_hf: Array1::zeros(width),
            activation,
        }
    }

    /// Identity Koopman blocks and a zero high-frequency path.
    pub fn identity(width: usize, modes: usize, activation: Activation) -> Self {
        let mut p = Self::zeros(width, modes, activation);
        for o in 0..width {
            p.k_re.slice_mut(ndarray::s![o, o, ..]).fill(1.0);
        }
        p
    }

    /// `K` entries uniform in `±1/O` (real and imaginary), `W` uniform in
    /// `±sqrt(1/O)`, bias zero.
    pub fn init<R: Rng + ?Sized>(width: usize, modes: usize, activation: Activation, rng: &mut R) -> Self {
        let mut p = Self::zeros(width, modes, activation);
        let k = Uniform::new_inclusive(-1.0 / width as f64, 1.0 / width as f64).expect("finite bound");
        p.k_re.iter_mut().for_each(|v| *v = k.sample(rng));
        p.k_im.iter_mut().for_each(|v| *v = k.sample(rng));
        let bound = (1.0 / width as f64).sqrt();
        let w = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        p.w_hf.iter_mut().for_each(|v| *v = w.sample(rng));
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.mode_count(), self.activation)
    }

    pub fn width(&self) -> usize {
        self.w_hf.nrows()
    }

    pub fn mode_count(&self) -> usize {
        self.k_re.dim().2
    }

    fn check(&self, spec: &TruncationSpec) -> Result<()> {
        let o = self.width();
        if self.k_re.dim() != (o, o, spec.mode_count()) || self.k_im.dim() != self.k_re.dim() {
            return shape_err(format!(
                "Koopman blocks {:?} do not match width {o} and {} modes",
                self.k_re.dim(),
                spec.mode_count()
            ));
        }
        if self.w_hf.dim() != (o, o) || self.b_hf.len() != o {
            return shape_err("high-frequency weights do not match the layer width");
        }
        Ok(())
    }
}

/// Splits `batch × O × R…` into `(batch, O, R…)`.
fn split_shape(shape: &[usize], what: &str) -> Result<(usize, usize, Vec<usize>)> {
    if shape.len() < 3 {
        return shape_err(format!("{what} must have shape batch × channels × space, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].to_vec()))
}

fn with_lead(b: usize, o: usize, rest: &[usize]) -> Vec<usize> {
    let mut s = vec![b, o];
    s.extend_from_slice(rest);
    s
}

fn half_shape(spatial: &[usize]) -> Vec<usize> {
    let mut h = spatial.to_vec();
    let last = h.len() - 1;
    h[last] = spatial[last] / 2 + 1;
    h
}

fn contiguous<T: Clone>(a: &ArrayD<T>) -> Vec<T> {
    a.as_standard_layout().iter().cloned().collect()
}

/// Full one-sided transform, divided by the number of spatial points.
pub fn rfft_nd(v: &ArrayD<f64>) -> Result<Spectrum> {
    let (b, o, spatial) = split_shape(v.shape(), "field")?;
    if spatial.iter().any(|&r| r < 2) {
        return shape_err(format!("spatial sizes {spatial:?} must all be at least 2"));
    }
    let d = spatial.len();
    let n = spatial[d - 1];
    let keep = n / 2 + 1;
    let mut buf = fft::r2c_lanes(&contiguous(v), n, keep, false);
    let mut dims = vec![b * o];
    dims.extend(half_shape(&spatial));
    for a in 0..d - 1 {
        fft::fft_axis(&mut buf, &dims, a + 1, false);
    }
    let scale = 1.0 / spatial.iter().product::<usize>() as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    Ok(ArrayD::from_shape_vec(IxDyn(&with_lead(b, o, &half_shape(&spatial))), buf).expect("shape"))
}

/// Inverse of `rfft_nd` onto a grid of `sizes`.
pub fn irfft_nd(v: &Spectrum, sizes: &[usize]) -> Result<ArrayD<f64>> {
    let (b, o, half) = split_shape(v.shape(), "spectrum")?;
    if sizes.len() != half.len() || sizes.iter().any(|&r| r < 2) || half != half_shape(sizes) {
        return shape_err(format!("spectrum of shape {half:?} is incompatible with grid {sizes:?}"));
    }
    let d = sizes.len();
    let mut buf = contiguous(v);
    let mut dims = vec![b * o];
    dims.extend_from_slice(&half);
    for a in 0..d - 1 {
        fft::fft_axis(&mut buf, &dims, a + 1, true);
    }
    let out = fft::c2r_lanes(&buf, half[d - 1], sizes[d - 1], true);
    Ok(ArrayD::from_shape_vec(IxDyn(&with_lead(b, o, sizes)), out).expect("shape"))
}

/// Selects the retained band of a one-sided spectrum.
pub fn truncate(spec: &TruncationSpec, v: &Spectrum) -> Result<Spectrum> {
    let (b, o, half) = split_shape(v.shape(), "spectrum")?;
    if half.len() != spec.rank() {
        return shape_err("spectrum rank does not match the truncation");
    }
    let d = half.len();
    for (i, (&r, &m)) in half.iter().zip(&spec.modes).enumerate() {
        let ok = if i + 1 == d { m <= r } else { 2 * m <= r };
        if !ok {
            return shape_err(format!("spectral axis {i} of length {r} cannot retain {m} modes"));
        }
    }
    let mut buf = contiguous(v);
    let mut dims = vec![b * o];
    dims.extend_from_slice(&half);
    for a in 0..d - 1 {
        buf = fft::truncate_axis(&buf, &dims, a + 1, spec.modes[a]);
        dims[a + 1] = 2 * spec.modes[a];
    }
    buf = fft::prefix_last(&buf, &dims, spec.modes[d - 1]);
    Ok(ArrayD::from_shape_vec(IxDyn(&with_lead(b, o, &spec.truncated_shape())), buf).expect("shape"))
}

/// Places a truncated spectrum into a zero spectrum of shape `target`
/// (one-sided spectral shape, without the batch and channel axes).
pub fn embed_back(spec: &TruncationSpec, t: &Spectrum, target: &[usize]) -> Result<Spectrum> {
    let (b, o, trunc) = split_shape(t.shape(), "truncated spectrum")?;
    if trunc != spec.truncated_shape() || target.len() != trunc.len() {
        return shape_err(format!("truncated spectrum {trunc:?} does not match the truncation"));
    }
    let d = trunc.len();
    for (i, (&r, &m)) in target.iter().zip(&spec.modes).enumerate() {
        let ok = if i + 1 == d { m <= r } else { 2 * m <= r };
        if !ok {
            return shape_err(format!("target axis {i} of length {r} cannot hold {m} modes"));
        }
    }
    let mut buf = contiguous(t);
    let mut dims = vec![b * o];
    dims.extend_from_slice(&trunc);
    for a in 0..d - 1 {
        buf = fft::embed_axis(&buf, &dims, a + 1, target[a]);
        dims[a + 1] = target[a];
    }
    buf = fft::prefix_last(&buf, &dims, target[d - 1]);
    Ok(ArrayD::from_shape_vec(IxDyn(&with_lead(b, o, target)), buf).expect("shape"))
}

/// Multiplies each retained mode's channel fiber by `K[ω]^p`.
pub fn apply_koopman(params: &KoopmanLayerParams, spec: &TruncationSpec, t: &Spectrum) -> Result<Spectrum> {
    params.check(spec)?;
    let (b, o, trunc) = split_shape(t.shape(), "truncated spectrum")?;
    if o != params.width() || trunc != spec.truncated_shape() {
        return shape_err(format!("truncated spectrum {:?} does not match the layer", t.shape()));
    }
    let mut buf = contiguous(t);
    for _ in 0..spec.power {
        buf = koopman_mul(params, &buf, b);
    }
    Ok(ArrayD::from_shape_vec(t.raw_dim(), buf).expect("shape"))
}

/// `W · fiber + b` at every spatial location.
pub fn high_freq_path(params: &KoopmanLayerParams, v: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let (b, o, spatial) = split_shape(v.shape(), "field")?;
    if o != params.width() || params.w_hf.ncols() != o || params.b_hf.len() != o {
        return shape_err(format!("field has {o} channels but the layer expects {}", params.width()));
    }
    let p: usize = spatial.iter().product();
    let v3 = to3(v, b, o, p);
    Ok(from3(hf3(params, &v3), &with_lead(b, o, &spatial)))
}

/// Spectral branch only, synthesized on a grid of `output` sizes.
pub fn spectral_path(
    params: &KoopmanLayerParams,
    spec: &TruncationSpec,
    v: &ArrayD<f64>,
    output: &[usize],
) -> Result<ArrayD<f64>> {
    params.check(spec)?;
    let (b, o, spatial) = split_shape(v.shape(), "field")?;
    if o != params.width() {
        return shape_err(format!("field has {o} channels but the layer expects {}", params.width()));
    }
    let tin = TruncatedTransform::new(spec, &spatial)?;
    let tout = TruncatedTransform::new(spec, output)?;
    let mut t = tin.forward(b * o, &contiguous(v));
    for _ in 0..spec.power {
        t = koopman_mul(params, &t, b);
    }
    let out = tout.inverse(b * o, &t);
    Ok(ArrayD::from_shape_vec(IxDyn(&with_lead(b, o, output)), out).expect("shape"))
}

/// Full layer. Both branches must live on the same grid, so `output` must
/// equal the input's spatial shape.
pub fn spectral_layer(
    params: &KoopmanLayerParams,
    spec: &TruncationSpec,
    v: &ArrayD<f64>,
    output: &[usize],
) -> Result<ArrayD<f64>> {
    let (b, o, spatial) = split_shape(v.shape(), "field")?;
    if spatial != output {
        return shape_err(format!(
            "layer output {output:?} differs from input grid {spatial:?}; feed the input at the target resolution"
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(IknoError::Input("layer input contains non-finite values".into()));
    }
    params.check(spec)?;
    if o != params.width() {
        return shape_err(format!("field has {o} channels but the layer expects {}", params.width()));
    }
    let tt = TruncatedTransform::new(spec, &spatial)?;
    let p: usize = spatial.iter().product();
    let (out, _) = params.forward3(spec, &tt, to3(v, b, o, p), false);
    Ok(from3(out, &with_lead(b, o, &spatial)))
}

pub(crate) fn to3(v: &ArrayD<f64>, b: usize, o: usize, p: usize) -> Array3<f64> {
    Array3::from_shape_vec((b, o, p), contiguous(v)).expect("shape")
}

pub(crate) fn from3(v: Array3<f64>, shape: &[usize]) -> ArrayD<f64> {
    let data = if v.is_standard_layout() { v.into_raw_vec_and_offset().0 } else { v.iter().cloned().collect() };
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape")
}

fn hf3(params: &KoopmanLayerParams, v: &Array3<f64>) -> Array3<f64> {
    let (b, o, p) = v.dim();
    let mut out = Array3::zeros((b, o, p));
    for (mut dst, src) in out.outer_iter_mut().zip(v.outer_iter()) {
        dst.assign(&params.w_hf.dot(&src));
        dst += &params.b_hf.view().insert_axis(Axis(1));
    }
    out
}

/// `out[b, o, ω] = Σ_i K[o, i, ω] x[b, i, ω]`.
fn koopman_mul(params: &KoopmanLayerParams, x: &[Complex64], batch: usize) -> Vec<Complex64> {
    let (o_n, _, m) = params.k_re.dim();
    let kr = params.k_re.as_slice().expect("standard layout");
    let ki = params.k_im.as_slice().expect("standard layout");
    let mut out = vec![Complex64::default(); x.len()];
    for b in 0..batch {
        for o in 0..o_n {
            let dst = &mut out[(b * o_n + o) * m..(b * o_n + o + 1) * m];
            for i in 0..o_n {
                let src = &x[(b * o_n + i) * m..(b * o_n + i + 1) * m];
                let kre = &kr[(o * o_n + i) * m..(o * o_n + i + 1) * m];
                let kim = &ki[(o * o_n + i) * m..(o * o_n + i + 1) * m];
                for w in 0..m {
                    let (xr, xi) = (src[w].re, src[w].im);
                    dst[w].re += kre[w] * xr - kim[w] * xi;
                    dst[w].im += kre[w] * xi + kim[w] * xr;
                }
            }
        }
    }
    out
}

/// `out[b, i, ω] = Σ_o conj(K[o, i, ω]) g[b, o, ω]`.
fn koopman_mul_adjoint(params: &KoopmanLayerParams, g: &[Complex64], batch: usize) -> Vec<Complex64> {
    let (o_n, _, m) = params.k_re.dim();
    let kr = params.k_re.as_slice().expect("standard layout");
    let ki = params.k_im.as_slice().expect("standard layout");
    let mut out = vec![Complex64::default(); g.len()];
    for b in 0..batch {
        for o in 0..o_n {
            let src = &g[(b * o_n + o) * m..(b * o_n + o + 1) * m];
            for i in 0..o_n {
                let dst = &mut out[(b * o_n + i) * m..(b * o_n + i + 1) * m];
                let kre = &kr[(o * o_n + i) * m..(o * o_n + i + 1) * m];
                let kim = &ki[(o * o_n + i) * m..(o * o_n + i + 1) * m];
                for w in 0..m {
                    let (gr, gi) = (src[w].re, src[w].im);
                    dst[w].re += kre[w] * gr + kim[w] * gi;
                    dst[w].im += kre[w] * gi - kim[w] * gr;
                }
            }
        }
    }
    out
}

/// `gK[o, i, ω] += Σ_b g[b, o, ω] conj(x[b, i, ω])`.
fn koopman_grad(grad: &mut KoopmanLayerParams, g: &[Complex64], x: &[Complex64], batch: usize) {
    let (o_n, _, m) = grad.k_re.dim();
    let gr_all = grad.k_re.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for o in 0..o_n {
            let gs = &g[(b * o_n + o) * m..(b * o_n + o + 1) * m];
            for i in 0..o_n {
                let xs = &x[(b * o_n + i) * m..(b * o_n + i + 1) * m];
                let dst = &mut gr_all[(o * o_n + i) * m..(o * o_n + i + 1) * m];
                for w in 0..m {
                    dst[w] += gs[w].re * xs[w].re + gs[w].im * xs[w].im;
                }
            }
        }
    }
    let gi_all = grad.k_im.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for o in 0..o_n {
            let gs = &g[(b * o_n + o) * m..(b * o_n + o + 1) * m];
            for i in 0..o_n {
                let xs = &x[(b * o_n + i) * m..(b * o_n + i + 1) * m];
                let dst = &mut gi_all[(o * o_n + i) * m..(o * o_n + i + 1) * m];
                for w in 0..m {
                    dst[w] += gs[w].im * xs[w].re - gs[w].re * xs[w].im;
                }
            }
        }
    }
}

/// Forward/inverse transforms restricted to the retained band of one grid.
pub(crate) struct TruncatedTransform {
    spatial: Vec<usize>,
    modes: Vec<usize>,
    points: usize,
}

impl TruncatedTransform {
    pub(crate) fn new(spec: &TruncationSpec, spatial: &[usize]) -> Result<Self> {
        spec.check_resolution(spatial)?;
        Ok(Self {
            spatial: spatial.to_vec(),
            modes: spec.modes.clone(),
            points: spatial.iter().product(),
        })
    }

    fn last(&self) -> usize {
        self.spatial.len() - 1
    }

    fn r2c(&self, lead: usize, v: &[f64], folded: bool, scale: f64) -> Vec<Complex64> {
        let d = self.last();
        let mut buf = fft::r2c_lanes(v, self.spatial[d], self.modes[d], folded);
        let mut dims = vec![lead];
        dims.extend_from_slice(&self.spatial[..d]);
        dims.push(self.modes[d]);
        for a in 0..d {
            fft::fft_axis(&mut buf, &dims, a + 1, false);
            buf = fft::truncate_axis(&buf, &dims, a + 1, self.modes[a]);
            dims[a + 1] = 2 * self.modes[a];
        }
        if scale != 1.0 {
            buf.iter_mut().for_each(|c| *c *= scale);
        }
        buf
    }

    fn c2r(&self, lead: usize, t: &[Complex64], hermitian: bool, scale: f64) -> Vec<f64> {
        let d = self.last();
        let mut buf = t.to_vec();
        let mut dims = vec![lead];
        dims.extend(self.modes[..d].iter().map(|m| 2 * m));
        dims.push(self.modes[d]);
        for a in 0..d {
            buf = fft::embed_axis(&buf, &dims, a + 1, self.spatial[a]);
            dims[a + 1] = self.spatial[a];
            fft::fft_axis(&mut buf, &dims, a + 1, true);
        }
        let mut out = fft::c2r_lanes(&buf, self.modes[d], self.spatial[d], hermitian);
        if scale != 1.0 {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        out
    }

    /// Real field to retained coefficients (divided by the point count).
    pub(crate) fn forward(&self, lead: usize, v: &[f64]) -> Vec<Complex64> {
        self.r2c(lead, v, false, 1.0 / self.points as f64)
    }

    /// Retained coefficients to a real field.
    pub(crate) fn inverse(&self, lead: usize, t: &[Complex64]) -> Vec<f64> {
        self.c2r(lead, t, true, 1.0)
    }

    /// Gradient of `forward` with respect to its real input.
    pub(crate) fn forward_adjoint(&self, lead: usize, g: &[Complex64]) -> Vec<f64> {
        self.c2r(lead, g, false, 1.0 / self.points as f64)
    }

    /// Gradient of `inverse` with respect to its complex input.
    pub(crate) fn inverse_adjoint(&self, lead: usize, g: &[f64]) -> Vec<Complex64> {
        self.r2c(lead, g, true, 1.0)
    }
}

/// Activations saved by a layer's forward pass.
pub(crate) struct LayerTape {
    v: Array3<f64>,
    powers: Vec<Vec<Complex64>>,
    pre: Array3<f64>,
}

impl KoopmanLayerParams {
    /// Layer on a `batch × O × points` block; records a tape when asked.
    pub(crate) fn forward3(
        &self,
        spec: &TruncationSpec,
        tt: &TruncatedTransform,
        v: Array3<f64>,
        keep_tape: bool,
    ) -> (Array3<f64>, Option<LayerTape>) {
        let (b, o, p) = v.dim();
        let lead = b * o;
        let mut t = tt.forward(lead, v.as_slice().expect("standard layout"));
        let mut powers = Vec::new();
        for _ in 0..spec.power {
            let next = koopman_mul(self, &t, b);
            if keep_tape {
                powers.push(std::mem::replace(&mut t, next));
            } else {
                t = next;
            }
        }
        let spec_out = Array3::from_shape_vec((b, o, p), tt.inverse(lead, &t)).expect("shape");
        let pre = spec_out + hf3(self, &v);
        let act = self.activation;
        let out = pre.mapv(|x| act.eval(x));
        let tape = keep_tape.then_some(LayerTape { v, powers, pre });
        (out, tape)
    }

    /// Reverse pass; accumulates into `grad` and returns the input gradient.
    pub(crate) fn backward3(
        &self,
        tt: &TruncatedTransform,
        tape: &LayerTape,
        g_out: &Array3<f64>,
        grad: &mut KoopmanLayerParams,
    ) -> Array3<f64> {
        let (b, o, p) = g_out.dim();
        let lead = b * o;
        let act = self.activation;
        let mut g_pre = tape.pre.mapv(|x| act.derivative(x));
        g_pre *= g_out;

        let mut g_v = Array3::zeros((b, o, p));
        for ((gp, vb), mut gv) in g_pre.outer_iter().zip(tape.v.outer_iter()).zip(g_v.outer_iter_mut()) {
            grad.w_hf += &gp.dot(&vb.t());
            grad.b_hf += &gp.sum_axis(Axis(1));
            gv.assign(&self.w_hf.t().dot(&gp));
        }

        let mut g = tt.inverse_adjoint(lead, g_pre.as_slice().expect("standard layout"));
        for z in tape.powers.iter().rev() {
            koopman_grad(grad, &g, z, b);
            g = koopman_mul_adjoint(self, &g, b);
        }
        let back = tt.forward_adjoint(lead, &g);
        g_v.iter_mut().zip(back).for_each(|(a, x)| *a += x);
        g_v
    }
}

#[cfg(test)]
mod tests;
