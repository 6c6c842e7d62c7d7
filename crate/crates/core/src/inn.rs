//! Additive-coupling invertible network used as the observable map `G`.
//!
//! The same parameters drive the forward map and its closed-form inverse.
//! Vector-level operations are generic over the float type; the batched
//! `*_rows` methods act on `positions × channels` matrices in double
//! precision and carry the reverse-mode passes used for training.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, IknoError, Result};

/// Shape plan of the network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InnConfig {
    pub input_dim: usize,
    pub block_dims: Vec<usize>,
    pub hidden_dims: Vec<usize>,
}

impl InnConfig {
    /// `depth` blocks of constant width `block_dim` and hidden width `hidden_dim`.
    pub fn uniform(input_dim: usize, depth: usize, block_dim: usize, hidden_dim: usize) -> Result<Self> {
        let cfg = Self {
            input_dim,
            block_dims: vec![block_dim; depth],
            hidden_dims: vec![hidden_dim; depth],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(IknoError::Config(format!(
                "network input dimension must be at least 2, got {}",
                self.input_dim
            )));
        }
        if self.block_dims.is_empty() {
            return Err(IknoError::Config("network depth must be positive".into()));
        }
        if self.block_dims.len() != self.hidden_dims.len() {
            return Err(IknoError::Config(format!(
                "{} block widths but {} hidden widths",
                self.block_dims.len(),
                self.hidden_dims.len()
            )));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(IknoError::Config("hidden widths must be positive".into()));
        }
        let mut prev = self.input_dim.div_ceil(2);
        for (i, &c) in self.block_dims.iter().enumerate() {
            if c < prev {
                return Err(IknoError::Config(format!(
                    "block {i} width {c} is below the required minimum {prev}"
                )));
            }
            prev = c;
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.block_dims.len()
    }

    /// Observable dimension `O = 2 c_d`.
    pub fn observable_dim(&self) -> usize {
        2 * self.block_dims[self.block_dims.len() - 1]
    }

    /// Per-block `(tilde, bar)` channel lengths entering the block.
    fn entry_lengths(&self, block: usize) -> (usize, usize) {
        if block == 0 {
            let t = self.input_dim / 2;
            (t, self.input_dim - t)
        } else {
            let c = self.block_dims[block - 1];
            (c, c)
        }
    }

    /// Zero-padding counts applied by each block, derived from the config alone.
    pub fn pad_plan(&self) -> Vec<PadRecord> {
        (0..self.depth())
            .map(|i| {
                let (t, b) = self.entry_lengths(i);
                let c = self.block_dims[i];
                PadRecord { tilde: c - t, bar: c - b }
            })
            .collect()
    }
}

/// Number of zeros appended to each channel by `zero_concat`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub tilde: usize,
    pub bar: usize,
}

/// A map `H: R^c -> R^c` usable inside a coupling block.
pub trait CouplingMap<T> {
    fn width(&self) -> usize;
    fn eval(&self, x: &[T]) -> Vec<T>;
}

/// Wraps a closure as a coupling map of fixed width.
pub struct FnCoupling<F> {
    pub width: usize,
    pub f: F,
}

impl<T, F: Fn(&[T]) -> Vec<T>> CouplingMap<T> for FnCoupling<F> {
    fn width(&self) -> usize {
        self.width
    }
    fn eval(&self, x: &[T]) -> Vec<T> {
        (self.f)(x)
    }
}

/// Three-layer tanh MLP with a residual connection on the hidden layer:
/// `z1 = tanh(W1 y + b1)`, `z2 = z1 + tanh(W2 z1 + b2)`, `H(y) = W3 z2 + b3`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

struct MlpTape {
    x: Array2<f64>,
    z1: Array2<f64>,
    t2: Array2<f64>,
    z2: Array2<f64>,
}

impl CouplingMlp {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, width)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((width, hidden)),
            b3: Array1::zeros(width),
        }
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(width, hidden);
        fill_uniform(&mut m.w1, (1.0 / width as f64).sqrt(), rng);
        fill_uniform(&mut m.w2, (1.0 / hidden as f64).sqrt(), rng);
        fill_uniform(&mut m.w3, (1.0 / hidden as f64).sqrt(), rng);
        m
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    fn forward_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let z1 = (x.dot(&self.w1.t()) + &self.b1).mapv_into(f64::tanh);
        let t2 = (z1.dot(&self.w2.t()) + &self.b2).mapv_into(f64::tanh);
        (z1 + t2).dot(&self.w3.t()) + &self.b3
    }

    fn forward_rows_taped(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpTape) {
        let z1 = (x.dot(&self.w1.t()) + &self.b1).mapv_into(f64::tanh);
        let t2 = (z1.dot(&self.w2.t()) + &self.b2).mapv_into(f64::tanh);
        let z2 = &z1 + &t2;
        let out = z2.dot(&self.w3.t()) + &self.b3;
        let tape = MlpTape { x: x.to_owned(), z1, t2, z2 };
        (out, tape)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward_rows(&self, tape: &MlpTape, g_out: ArrayView2<f64>, grad: &mut CouplingMlp) -> Array2<f64> {
        grad.w3 += &g_out.t().dot(&tape.z2);
        grad.b3 += &g_out.sum_axis(Axis(0));
        let g_z2 = g_out.dot(&self.w3);
        let g_a2 = &g_z2 * &tape.t2.mapv(|t| 1.0 - t * t);
        grad.w2 += &g_a2.t().dot(&tape.z1);
        grad.b2 += &g_a2.sum_axis(Axis(0));
        let g_z1 = g_z2 + g_a2.dot(&self.w2);
        let g_a1 = g_z1 * tape.z1.mapv(|t| 1.0 - t * t);
        grad.w1 += &g_a1.t().dot(&tape.x);
        grad.b1 += &g_a1.sum_axis(Axis(0));
        g_a1.dot(&self.w1)
    }
}

fn fill_uniform<R: Rng + ?Sized>(a: &mut Array2<f64>, bound: f64, rng: &mut R) {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    a.iter_mut().for_each(|v| *v = dist.sample(rng));
}

impl<T: Float> CouplingMap<T> for CouplingMlp {
    fn width(&self) -> usize {
        self.w1.ncols()
    }

    fn eval(&self, x: &[T]) -> Vec<T> {
        let cast = |v: f64| T::from(v).expect("float cast");
        let affine = |w: &Array2<f64>, b: &Array1<f64>, v: &[T]| -> Vec<T> {
            w.outer_iter()
                .zip(b.iter())
                .map(|(row, &bi)| {
                    row.iter()
                        .zip(v)
                        .fold(cast(bi), |acc, (&wij, &vj)| acc + cast(wij) * vj)
                })
                .collect()
        };
        let z1: Vec<T> = affine(&self.w1, &self.b1, x).into_iter().map(T::tanh).collect();
        let z2: Vec<T> = affine(&self.w2, &self.b2, &z1)
            .into_iter()
            .zip(&z1)
            .map(|(a, &z)| z + a.tanh())
            .collect();
        affine(&self.w3, &self.b3, &z2)
    }
}

/// Splits `x` into `(x[..m/2], x[m/2..])`.
pub fn split<T: Copy>(x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if x.len() < 2 {
        return shape_err(format!("cannot split a vector of length {}", x.len()));
    }
    let h = x.len() / 2;
    Ok((x[..h].to_vec(), x[h..].to_vec()))
}

pub fn merge<T: Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Tail-pads both channels with zeros to length `c`.
pub fn zero_concat<T: Float>(a: &[T], b: &[T], c: usize) -> Result<(Vec<T>, Vec<T>, PadRecord)> {
    if c < a.len() || c < b.len() {
        return shape_err(format!(
            "block width {c} is smaller than channel lengths ({}, {})",
            a.len(),
            b.len()
        ));
    }
    let pad = |v: &[T]| {
        let mut out = v.to_vec();
        out.resize(c, T::zero());
        out
    };
    Ok((pad(a), pad(b), PadRecord { tilde: c - a.len(), bar: c - b.len() }))
}

/// Inverse of `zero_concat`: drops the recorded tail padding.
pub fn zero_truncate<T: Copy>(a: &[T], b: &[T], pad: PadRecord) -> Result<(Vec<T>, Vec<T>)> {
    if pad.tilde > a.len() || pad.bar > b.len() {
        return shape_err("padding record exceeds channel length");
    }
    Ok((a[..a.len() - pad.tilde].to_vec(), b[..b.len() - pad.bar].to_vec()))
}

fn check_coupling<T, H: CouplingMap<T>>(a: &[T], b: &[T], h: &H) -> Result<()> {
    if a.len() != h.width() || b.len() != h.width() {
        return shape_err(format!(
            "coupling of width {} applied to channels of length ({}, {})",
            h.width(),
            a.len(),
            b.len()
        ));
    }
    Ok(())
}

/// `(y_t, y_b) -> (y_b, H(y_b) + y_t)`.
pub fn coupling_forward<T: Float, H: CouplingMap<T>>(yt: &[T], yb: &[T], h: &H) -> Result<(Vec<T>, Vec<T>)> {
    check_coupling(yt, yb, h)?;
    let hy = h.eval(yb);
    let out = hy.iter().zip(yt).map(|(&a, &b)| a + b).collect();
    Ok((yb.to_vec(), out))
}

/// `(x_t, x_b) -> (x_b - H(x_t), x_t)`.
pub fn coupling_inverse<T: Float, H: CouplingMap<T>>(xt: &[T], xb: &[T], h: &H) -> Result<(Vec<T>, Vec<T>)> {
    check_coupling(xt, xb, h)?;
    let hx = h.eval(xt);
    let yt = xb.iter().zip(&hx).map(|(&a, &b)| a - b).collect();
    Ok((yt, xt.to_vec()))
}

/// Forward map through an arbitrary stack of coupling maps.
pub fn inn_forward<T: Float, H: CouplingMap<T>>(x: &[T], blocks: &[H]) -> Result<Vec<T>> {
    let (mut a, mut b) = split(x)?;
    for h in blocks {
        let (pa, pb, _) = zero_concat(&a, &b, h.width())?;
        (a, b) = coupling_forward(&pa, &pb, h)?;
    }
    Ok(merge(&a, &b))
}

/// Inverse map; `input_dim` fixes the padding to undo at the first block.
pub fn inn_inverse<T: Float, H: CouplingMap<T>>(y: &[T], blocks: &[H], input_dim: usize) -> Result<Vec<T>> {
    let Some(last) = blocks.last() else {
        return shape_err("network has no blocks");
    };
    if y.len() != 2 * last.width() {
        return shape_err(format!("expected length {}, got {}", 2 * last.width(), y.len()));
    }
    let c = last.width();
    let (mut a, mut b) = (y[..c].to_vec(), y[c..].to_vec());
    for (i, h) in blocks.iter().enumerate().rev() {
        let (ya, yb) = coupling_inverse(&a, &b, h)?;
        let (ta, tb) = if i == 0 {
            (input_dim / 2, input_dim - input_dim / 2)
        } else {
            (blocks[i - 1].width(), blocks[i - 1].width())
        };
        if ta > ya.len() || tb > yb.len() {
            return shape_err("block widths are not monotone");
        }
        (a, b) = zero_truncate(&ya, &yb, PadRecord { tilde: ya.len() - ta, bar: yb.len() - tb })?;
    }
    Ok(merge(&a, &b))
}

/// Parameters of the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct InnParams {
    pub config: InnConfig,
    pub blocks: Vec<CouplingMlp>,
}

/// Saved activations of a batched pass, consumed by the matching backward pass.
pub struct InnTape {
    tapes: Vec<MlpTape>,
}

impl InnParams {
    pub fn zeros(config: InnConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .block_dims
            .iter()
            .zip(&config.hidden_dims)
            .map(|(&c, &h)| CouplingMlp::zeros(c, h))
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn init<R: Rng + ?Sized>(config: InnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .block_dims
            .iter()
            .zip(&config.hidden_dims)
            .map(|(&c, &h)| CouplingMlp::init(c, h, rng))
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("validated config")
    }

    pub fn observable_dim(&self) -> usize {
        self.config.observable_dim()
    }

    pub fn forward<T: Float>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.config.input_dim {
            return shape_err(format!("expected length {}, got {}", self.config.input_dim, x.len()));
        }
        inn_forward(x, &self.blocks)
    }

    pub fn inverse<T: Float>(&self, y: &[T]) -> Result<Vec<T>> {
        inn_inverse(y, &self.blocks, self.config.input_dim)
    }

    fn check_cols(&self, m: &ArrayView2<f64>, want: usize) -> Result<()> {
        if m.ncols() != want {
            return shape_err(format!("expected {want} channels per position, got {}", m.ncols()));
        }
        Ok(())
    }

    /// Row-wise forward map: `positions × n_s -> positions × O`.
    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_rows_impl(x, None)
    }

    pub fn forward_rows_taped(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, InnTape)> {
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let y = self.forward_rows_impl(x, Some(&mut tapes))?;
        Ok((y, InnTape { tapes }))
    }

    fn forward_rows_impl(&self, x: ArrayView2<f64>, mut tapes: Option<&mut Vec<MlpTape>>) -> Result<Array2<f64>> {
        self.check_cols(&x, self.config.input_dim)?;
        let n = x.nrows();
        let half = self.config.input_dim / 2;
        let mut a = x.slice(s![.., ..half]).to_owned();
        let mut b = x.slice(s![.., half..]).to_owned();
        for (mlp, &c) in self.blocks.iter().zip(&self.config.block_dims) {
            let ya = pad_cols(&a, c, n);
            let yb = pad_cols(&b, c, n);
            let h = match tapes.as_deref_mut() {
                Some(t) => {
                    let (h, tape) = mlp.forward_rows_taped(yb.view());
                    t.push(tape);
                    h
                }
                None => mlp.forward_rows(yb.view()),
            };
            b = h + ya;
            a = yb;
        }
        Ok(concat_cols(&a, &b))
    }

    /// Reverse pass of `forward_rows_taped`; returns the input gradient.
    pub fn backward_forward_rows(&self, tape: &InnTape, g_y: ArrayView2<f64>, grad: &mut InnParams) -> Array2<f64> {
        let c = g_y.ncols() / 2;
        let mut ga = g_y.slice(s![.., ..c]).to_owned();
        let mut gb = g_y.slice(s![.., c..]).to_owned();
        for i in (0..self.blocks.len()).rev() {
            // outputs: a' = y_b, b' = H(y_b) + y_a
            let g_ya = gb.clone();
            let g_yb = ga + self.blocks[i].backward_rows(&tape.tapes[i], gb.view(), &mut grad.blocks[i]);
            let (ta, tb) = self.config.entry_lengths(i);
            ga = g_ya.slice(s![.., ..ta]).to_owned();
            gb = g_yb.slice(s![.., ..tb]).to_owned();
        }
        concat_cols(&ga, &gb)
    }

    /// Row-wise inverse map: `positions × O -> positions × n_s`.
    pub fn inverse_rows(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inverse_rows_impl(y, None)
    }

    pub fn inverse_rows_taped(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, InnTape)> {
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let x = self.inverse_rows_impl(y, Some(&mut tapes))?;
        tapes.reverse();
        Ok((x, InnTape { tapes }))
    }

    fn inverse_rows_impl(&self, y: ArrayView2<f64>, mut tapes: Option<&mut Vec<MlpTape>>) -> Result<Array2<f64>> {
        self.check_cols(&y, self.observable_dim())?;
        let c = self.observable_dim() / 2;
        let mut a = y.slice(s![.., ..c]).to_owned();
        let mut b = y.slice(s![.., c..]).to_owned();
        for i in (0..self.blocks.len()).rev() {
            let h = match tapes.as_deref_mut() {
                Some(t) => {
                    let (h, tape) = self.blocks[i].forward_rows_taped(a.view());
                    t.push(tape);
                    h
                }
                None => self.blocks[i].forward_rows(a.view()),
            };
            let ya = b - h;
            let (ta, tb) = self.config.entry_lengths(i);
            b = a.slice(s![.., ..tb]).to_owned();
            a = ya.slice(s![.., ..ta]).to_owned();
        }
        Ok(concat_cols(&a, &b))
    }

    /// Reverse pass of `inverse_rows_taped`; returns the gradient w.r.t. `y`.
    pub fn backward_inverse_rows(&self, tape: &InnTape, g_x: ArrayView2<f64>, grad: &mut InnParams) -> Array2<f64> {
        let n = g_x.nrows();
        let half = self.config.input_dim / 2;
        let mut ga = g_x.slice(s![.., ..half]).to_owned();
        let mut gb = g_x.slice(s![.., half..]).to_owned();
        for (i, mlp) in self.blocks.iter().enumerate() {
            let c = self.config.block_dims[i];
            // inputs (a, b) produced y_a = b - H(a), y_b = a
            let g_ya = pad_cols(&ga, c, n);
            let g_yb = pad_cols(&gb, c, n);
            let neg = g_ya.mapv(|v| -v);
            let g_a = g_yb + mlp.backward_rows(&tape.tapes[i], neg.view(), &mut grad.blocks[i]);
            gb = g_ya;
            ga = g_a;
        }
        concat_cols(&ga, &gb)
    }
}

fn pad_cols(a: &Array2<f64>, c: usize, n: usize) -> Array2<f64> {
    if a.ncols() == c {
        return a.clone();
    }
    let mut out = Array2::zeros((n, c));
    out.slice_mut(s![.., ..a.ncols()]).assign(a);
    out
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine_h() -> FnCoupling<impl Fn(&[f64]) -> Vec<f64>> {
        FnCoupling { width: 1, f: |z: &[f64]| vec![2.0 * z[0] + 1.0] }
    }

    #[test]
    fn split_and_merge() {
        assert_eq!(split(&[1, 2, 3, 4]).unwrap(), (vec![1, 2], vec![3, 4]));
        assert_eq!(split(&[1, 2, 3]).unwrap(), (vec![1], vec![2, 3]));
        let x = [0.1, -2.5, 3.75, 1e-300, 7.0];
        let (a, b) = split(&x).unwrap();
        assert_eq!(merge(&a, &b), x.to_vec());
        assert!(split(&[1.0]).is_err());
    }

    #[test]
    fn zero_concat_pads_tail() {
        let (a, b, pad) = zero_concat(&[1.0], &[2.0, 3.0], 3).unwrap();
        assert_eq!(a, vec![1.0, 0.0, 0.0]);
        assert_eq!(b, vec![2.0, 3.0, 0.0]);
        assert_eq!(pad, PadRecord { tilde: 2, bar: 1 });
        assert_eq!(zero_truncate(&a, &b, pad).unwrap(), (vec![1.0], vec![2.0, 3.0]));
        let (a, b, pad) = zero_concat(&[1.0, 2.0], &[3.0, 4.0], 2).unwrap();
        assert_eq!((a, b), (vec![1.0, 2.0], vec![3.0, 4.0]));
        assert_eq!(pad, PadRecord { tilde: 0, bar: 0 });
        assert!(zero_concat(&[1.0, 2.0], &[3.0], 1).is_err());
    }

    #[test]
    fn coupling_hand_examples() {
        let zero = FnCoupling { width: 2, f: |z: &[f64]| vec![0.0; z.len()] };
        assert_eq!(
            coupling_forward(&[1.0, 2.0], &[3.0, 4.0], &zero).unwrap(),
            (vec![3.0, 4.0], vec![1.0, 2.0])
        );
        assert_eq!(
            coupling_inverse(&[3.0, 4.0], &[1.0, 2.0], &zero).unwrap(),
            (vec![1.0, 2.0], vec![3.0, 4.0])
        );
        let h = affine_h();
        assert_eq!(coupling_forward(&[3.0], &[5.0], &h).unwrap(), (vec![5.0], vec![14.0]));
        assert_eq!(coupling_inverse(&[5.0], &[14.0], &h).unwrap(), (vec![3.0], vec![5.0]));
        assert!(coupling_forward(&[1.0, 2.0], &[3.0], &zero).is_err());
    }

    #[test]
    fn chained_hand_example() {
        let h = [affine_h()];
        assert_eq!(inn_forward(&[3.0, 5.0], &h).unwrap(), vec![5.0, 14.0]);
        assert_eq!(inn_inverse(&[5.0, 14.0], &h, 2).unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn config_rules() {
        assert!(InnConfig::uniform(4, 2, 2, 8).is_ok());
        assert!(InnConfig::uniform(5, 2, 2, 8).is_err());
        assert!(InnConfig::uniform(1, 1, 1, 1).is_err());
        let cfg = InnConfig { input_dim: 5, block_dims: vec![3, 4, 4], hidden_dims: vec![2, 2, 2] };
        cfg.validate().unwrap();
        assert_eq!(cfg.observable_dim(), 8);
        assert_eq!(
            cfg.pad_plan(),
            vec![
                PadRecord { tilde: 1, bar: 0 },
                PadRecord { tilde: 1, bar: 1 },
                PadRecord { tilde: 0, bar: 0 }
            ]
        );
        let bad = InnConfig { input_dim: 4, block_dims: vec![3, 2], hidden_dims: vec![1, 1] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_give_fixed_padding_permutation() {
        for hidden in [1, 7] {
            let p = InnParams::zeros(InnConfig::uniform(3, 2, 3, hidden).unwrap()).unwrap();
            let y = p.forward(&[1.0, 2.0, 3.0]).unwrap();
            // two swaps return each half to its original slot
            assert_eq!(y, vec![1.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
            let y1 = InnParams::zeros(InnConfig::uniform(3, 1, 3, hidden).unwrap()).unwrap();
            assert_eq!(y1.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![2.0, 3.0, 0.0, 1.0, 0.0, 0.0]);
            assert_eq!(p.inverse(&[0.0; 6]).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn random_roundtrip_double_and_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = InnConfig { input_dim: 5, block_dims: vec![3, 4, 4, 6], hidden_dims: vec![5, 3, 8, 4] };
        let p = InnParams::init(cfg, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = p.forward(&x).unwrap();
        assert_eq!(y.len(), 12);
        let back = p.inverse(&y).unwrap();
        for (u, v) in x.iter().zip(&back) {
            assert!((u - v).abs() < 1e-12);
        }
        let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let back = p.inverse(&p.forward(&xs).unwrap()).unwrap();
        for (u, v) in xs.iter().zip(&back) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn rows_match_vector_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = InnConfig { input_dim: 3, block_dims: vec![2, 3], hidden_dims: vec![4, 5] };
        let p = InnParams::init(cfg, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = p.forward_rows(x.view()).unwrap();
        for (row, yrow) in x.outer_iter().zip(y.outer_iter()) {
            let v = p.forward(row.as_slice().unwrap()).unwrap();
            for (a, b) in v.iter().zip(yrow) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let back = p.inverse_rows(y.view()).unwrap();
        assert!((back - &x).iter().all(|d| d.abs() < 1e-12));
    }

    fn num_grad(f: &dyn Fn(&InnParams) -> f64, p: &InnParams, pick: impl Fn(&mut InnParams) -> &mut f64) -> f64 {
        let eps = 1e-6;
        let mut hi = p.clone();
        *pick(&mut hi) += eps;
        let mut lo = p.clone();
        *pick(&mut lo) -= eps;
        (f(&hi) - f(&lo)) / (2.0 * eps)
    }

    #[test]
    fn backward_passes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = InnConfig { input_dim: 3, block_dims: vec![2, 3], hidden_dims: vec![3, 4] };
        let mut p = InnParams::init(cfg, &mut rng).unwrap();
        for b in &mut p.blocks {
            b.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            b.b3.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 5 + j) as f64).cos());
        let wy = Array2::from_shape_fn((4, 6), |(i, j)| ((i + 2 * j) as f64 * 0.3).sin());
        let fwd = |q: &InnParams| (q.forward_rows(x.view()).unwrap() * &wy).sum();
        let (_, tape) = p.forward_rows_taped(x.view()).unwrap();
        let mut g = p.zeros_like();
        let gx = p.backward_forward_rows(&tape, wy.view(), &mut g);
        let fd = num_grad(&fwd, &p, |q| &mut q.blocks[0].w1[[1, 0]]);
        assert!((fd - g.blocks[0].w1[[1, 0]]).abs() < 1e-7);
        let fd = num_grad(&fwd, &p, |q| &mut q.blocks[1].b2[2]);
        assert!((fd - g.blocks[1].b2[2]).abs() < 1e-7);
        let mut xp = x.clone();
        xp[[2, 1]] += 1e-6;
        let mut xm = x.clone();
        xm[[2, 1]] -= 1e-6;
        let fdx = ((p.forward_rows(xp.view()).unwrap() - p.forward_rows(xm.view()).unwrap()) * &wy).sum() / 2e-6;
        assert!((fdx - gx[[2, 1]]).abs() < 1e-7);

        let y = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 7 + j) as f64 * 0.2).sin());
        let wx = Array2::from_shape_fn((4, 3), |(i, j)| ((i + j) as f64 * 0.9).cos());
        let inv = |q: &InnParams| (q.inverse_rows(y.view()).unwrap() * &wx).sum();
        let (_, tape) = p.inverse_rows_taped(y.view()).unwrap();
        let mut g = p.zeros_like();
        let gy = p.backward_inverse_rows(&tape, wx.view(), &mut g);
        let fd = num_grad(&inv, &p, |q| &mut q.blocks[0].w3[[1, 2]]);
        assert!((fd - g.blocks[0].w3[[1, 2]]).abs() < 1e-7);
        let fd = num_grad(&inv, &p, |q| &mut q.blocks[1].w2[[0, 3]]);
        assert!((fd - g.blocks[1].w2[[0, 3]]).abs() < 1e-7);
        let mut yp = y.clone();
        yp[[1, 4]] += 1e-6;
        let mut ym = y.clone();
        ym[[1, 4]] -= 1e-6;
        let fdy = ((p.inverse_rows(yp.view()).unwrap() - p.inverse_rows(ym.view()).unwrap()) * &wx).sum() / 2e-6;
        assert!((fdy - gy[[1, 4]]).abs() < 1e-7);
    }
}
