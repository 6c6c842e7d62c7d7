//! The assembled operator: `G`, a stack of spectral layers, then `G⁻¹`.

use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IknoError, Result};
use crate::inn::{CouplingMlp, InnConfig, InnParams, InnTape};
use crate::spectral::{Activation, KoopmanLayerParams, LayerTape, TruncatedTransform, TruncationSpec};

/// Hyperparameters binding window length, network shapes and truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IknoConfig {
    /// Input window length `T_d`.
    pub window: usize,
    /// Default rollout horizon `T_p`.
    pub horizon: usize,
    /// Number of stacked spectral layers `l`.
    pub layers: usize,
    pub inn: InnConfig,
    pub spec: TruncationSpec,
    pub activation: Activation,
}

impl IknoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(IknoError::Config(format!(
                "window length {} is too short to split into two channels",
                self.window
            )));
        }
        if self.horizon == 0 || self.layers == 0 {
            return Err(IknoError::Config("horizon and layer count must be positive".into()));
        }
        if self.inn.input_dim != self.window {
            return Err(IknoError::Config(format!(
                "network input dimension {} differs from window length {}",
                self.inn.input_dim, self.window
            )));
        }
        self.inn.validate()?;
        self.spec.validate()
    }

    pub fn observable_dim(&self) -> usize {
        self.inn.observable_dim()
    }

    pub fn spatial_rank(&self) -> usize {
        self.spec.rank()
    }

    /// Rejects grids too coarse to hold the retained band.
    pub fn check_grid(&self, spatial: &[usize]) -> Result<()> {
        self.spec
            .check_resolution(spatial)
            .map_err(|e| IknoError::Config(e.to_string().trim_start_matches("shape error: ").to_string()))
    }
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IknoParams {
    pub inn: InnParams,
    pub layers: Vec<KoopmanLayerParams>,
}

/// A named view of one parameter array.
pub struct ParamBlock<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

impl IknoParams {
    pub fn init<R: Rng + ?Sized>(config: &IknoConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let inn = InnParams::init(config.inn.clone(), rng)?;
        let o = config.observable_dim();
        let m = config.spec.mode_count();
        let layers = (0..config.layers)
            .map(|_| KoopmanLayerParams::init(o, m, config.activation, rng))
            .collect();
        Ok(Self { inn, layers })
    }

    pub fn zeros(config: &IknoConfig) -> Result<Self> {
        config.validate()?;
        let o = config.observable_dim();
        let m = config.spec.mode_count();
        Ok(Self {
            inn: InnParams::zeros(config.inn.clone())?,
            layers: (0..config.layers)
                .map(|_| KoopmanLayerParams::zeros(o, m, config.activation))
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inn: self.inn.zeros_like(),
            layers: self.layers.iter().map(KoopmanLayerParams::zeros_like).collect(),
        }
    }

    /// Every parameter array in a fixed order.
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        fn block<'a, D: ndarray::Dimension>(name: String, a: &'a ndarray::Array<f64, D>) -> ParamBlock<'a> {
            ParamBlock { name, shape: a.shape().to_vec(), values: a.as_slice().expect("standard layout") }
        }
        let mut out = Vec::new();
        for (i, b) in self.inn.blocks.iter().enumerate() {
            out.push(block(format!("inn.{i}.w1"), &b.w1));
            out.push(block(format!("inn.{i}.b1"), &b.b1));
            out.push(block(format!("inn.{i}.w2"), &b.w2));
            out.push(block(format!("inn.{i}.b2"), &b.b2));
            out.push(block(format!("inn.{i}.w3"), &b.w3));
            out.push(block(format!("inn.{i}.b3"), &b.b3));
        }
        for (k, l) in self.layers.iter().enumerate() {
            out.push(block(format!("layer.{k}.k_re"), &l.k_re));
            out.push(block(format!("layer.{k}.k_im"), &l.k_im));
            out.push(block(format!("layer.{k}.w_hf"), &l.w_hf));
            out.push(block(format!("layer.{k}.b_hf"), &l.b_hf));
        }
        out
    }

    /// Mutable slices over the same arrays, in the order of `blocks`.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.inn.blocks {
            let CouplingMlp { w1, b1, w2, b2, w3, b3 } = b;
            out.push(w1.as_slice_mut().expect("standard layout"));
            out.push(b1.as_slice_mut().expect("standard layout"));
            out.push(w2.as_slice_mut().expect("standard layout"));
            out.push(b2.as_slice_mut().expect("standard layout"));
            out.push(w3.as_slice_mut().expect("standard layout"));
            out.push(b3.as_slice_mut().expect("standard layout"));
        }
        for l in &mut self.layers {
            let KoopmanLayerParams { k_re, k_im, w_hf, b_hf, .. } = l;
            out.push(k_re.as_slice_mut().expect("standard layout"));
            out.push(k_im.as_slice_mut().expect("standard layout"));
            out.push(w_hf.as_slice_mut().expect("standard layout"));
            out.push(b_hf.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }
}

/// Activations of one autoregressive step.
struct StepTape {
    encode: InnTape,
    layers: Vec<LayerTape>,
    decode: InnTape,
}

/// Everything needed to differentiate a rollout.
pub struct RolloutTape {
    steps: Vec<StepTape>,
    batch: usize,
    spatial: Vec<usize>,
}

/// The full operator.
#[derive(Clone, Debug, PartialEq)]
pub struct IknoModel {
    pub config: IknoConfig,
    pub params: IknoParams,
}

impl IknoModel {
    pub fn init<R: Rng + ?Sized>(config: IknoConfig, rng: &mut R) -> Result<Self> {
        let params = IknoParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: IknoConfig, params: IknoParams) -> Result<Self> {
        config.validate()?;
        let want = IknoParams::zeros(&config)?;
        let same = want.blocks().iter().zip(params.blocks()).all(|(a, b)| a.shape == b.shape)
            && want.blocks().len() == params.blocks().len()
            && params.layers.iter().all(|l| l.activation == config.activation);
        if !same {
            return Err(IknoError::Config("parameter shapes do not match the model configuration".into()));
        }
        Ok(Self { config, params })
    }

    /// Validates a `batch × R… × channels` tensor and returns `(batch, spatial)`.
    fn check_input(&self, x: &ArrayD<f64>, channels: usize) -> Result<(usize, Vec<usize>)> {
        let rank = self.config.spatial_rank();
        if x.ndim() != rank + 2 || x.shape()[rank + 1] != channels {
            return Err(IknoError::Shape(format!(
                "expected batch × {rank} spatial axes × {channels} channels, got {:?}",
                x.shape()
            )));
        }
        let spatial = x.shape()[1..=rank].to_vec();
        self.config.check_grid(&spatial)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(IknoError::Input("window contains non-finite values".into()));
        }
        Ok((x.shape()[0], spatial))
    }

    /// Predicts the next snapshot: `batch × R… × T_d -> batch × R… × 1`.
    pub fn forward_one_step(&self, window: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.rollout(window, 1)
    }

    /// Closed-loop prediction of `steps` snapshots: `batch × R… × steps`.
    pub fn rollout(&self, window: &ArrayD<f64>, steps: usize) -> Result<ArrayD<f64>> {
        Ok(self.rollout_impl(window, steps, false)?.0)
    }

    /// Same as `rollout`; the grid may differ from the training grid.
    pub fn infer_at_resolution(&self, window: &ArrayD<f64>, steps: usize) -> Result<ArrayD<f64>> {
        self.rollout(window, steps)
    }

    /// Rollout that records the activations needed by `backward`.
    pub fn rollout_taped(&self, window: &ArrayD<f64>, steps: usize) -> Result<(ArrayD<f64>, RolloutTape)> {
        let (pred, tape) = self.rollout_impl(window, steps, true)?;
        Ok((pred, tape.expect("tape requested")))
    }

    fn rollout_impl(
        &self,
        window: &ArrayD<f64>,
        steps: usize,
        keep_tape: bool,
    ) -> Result<(ArrayD<f64>, Option<RolloutTape>)> {
        if steps == 0 {
            return Err(IknoError::Input("rollout needs at least one step".into()));
        }
        let t_d = self.config.window;
        let (b, spatial) = self.check_input(window, t_d)?;
        let p: usize = spatial.iter().product();
        let tt = TruncatedTransform::new(&self.config.spec, &spatial)?;
        let mut rows = Array2::from_shape_vec((b * p, t_d), window.as_standard_layout().iter().cloned().collect())
            .expect("shape");
        let mut preds = Array2::<f64>::zeros((b * p, steps));
        let mut tapes = Vec::new();
        for j in 0..steps {
            let (next, tape) = self.step(&tt, rows.view(), b, p, keep_tape)?;
            preds.column_mut(j).assign(&next);
            if let Some(t) = tape {
                tapes.push(t);
            }
            let mut slid = Array2::zeros((b * p, t_d));
            slid.slice_mut(s![.., ..t_d - 1]).assign(&rows.slice(s![.., 1..]));
            slid.column_mut(t_d - 1).assign(&next);
            rows = slid;
        }
        let mut shape = vec![b];
        shape.extend(&spatial);
        shape.push(steps);
        let out = ArrayD::from_shape_vec(IxDyn(&shape), preds.into_raw_vec_and_offset().0).expect("shape");
        let tape = keep_tape.then_some(RolloutTape { steps: tapes, batch: b, spatial });
        Ok((out, tape))
    }

    fn step(
        &self,
        tt: &TruncatedTransform,
        rows: ndarray::ArrayView2<f64>,
        b: usize,
        p: usize,
        keep_tape: bool,
    ) -> Result<(ndarray::Array1<f64>, Option<StepTape>)> {
        let o = self.config.observable_dim();
        let (y, encode) = if keep_tape {
            let (y, t) = self.params.inn.forward_rows_taped(rows)?;
            (y, Some(t))
        } else {
            (self.params.inn.forward_rows(rows)?, None)
        };
        let mut v = positions_to_channels(y, b, p, o);
        let mut layer_tapes = Vec::new();
        for layer in &self.params.layers {
            let (next, t) = layer.forward3(&self.config.spec, tt, v, keep_tape);
            v = next;
            layer_tapes.extend(t);
        }
        let yrows = channels_to_positions(&v);
        let (x, decode) = if keep_tape {
            let (x, t) = self.params.inn.inverse_rows_taped(yrows.view())?;
            (x, Some(t))
        } else {
            (self.params.inn.inverse_rows(yrows.view())?, None)
        };
        let next = x.column(self.config.window - 1).to_owned();
        let tape = match (encode, decode) {
            (Some(encode), Some(decode)) => Some(StepTape { encode, layers: layer_tapes, decode }),
            _ => None,
        };
        Ok((next, tape))
    }

    /// Reverse pass of a taped rollout. `g_pred` has the prediction's shape.
    /// Returns parameter gradients and the gradient with respect to the window.
    pub fn backward(&self, tape: &RolloutTape, g_pred: &ArrayD<f64>) -> Result<(IknoParams, ArrayD<f64>)> {
        let t_d = self.config.window;
        let o = self.config.observable_dim();
        let b = tape.batch;
        let p: usize = tape.spatial.iter().product();
        let steps = tape.steps.len();
        if g_pred.len() != b * p * steps {
            return Err(IknoError::Shape(format!(
                "prediction gradient has {} entries, expected {}",
                g_pred.len(),
                b * p * steps
            )));
        }
        let tt = TruncatedTransform::new(&self.config.spec, &tape.spatial)?;
        let g_rows = Array2::from_shape_vec((b * p, steps), g_pred.as_standard_layout().iter().cloned().collect())
            .expect("shape");
        let mut grads = self.params.zeros_like();
        let mut g_next = Array2::<f64>::zeros((b * p, t_d));
        for j in (0..steps).rev() {
            let st = &tape.steps[j];
            let mut g_x = Array2::<f64>::zeros((b * p, t_d));
            let mut last = g_x.column_mut(t_d - 1);
            last.assign(&g_rows.column(j));
            last += &g_next.column(t_d - 1);
            let g_y = self.params.inn.backward_inverse_rows(&st.decode, g_x.view(), &mut grads.inn);
            let mut g_v = positions_to_channels(g_y, b, p, o);
            for (k, layer) in self.params.layers.iter().enumerate().rev() {
                g_v = layer.backward3(&tt, &st.layers[k], &g_v, &mut grads.layers[k]);
            }
            let g_v_rows = channels_to_positions(&g_v);
            let mut g_w = self.params.inn.backward_forward_rows(&st.encode, g_v_rows.view(), &mut grads.inn);
            // window_{j+1}[c] = window_j[c + 1]
            let mut tail = g_w.slice_mut(s![.., 1..]);
            tail += &g_next.slice(s![.., ..t_d - 1]);
            g_next = g_w;
        }
        let mut shape = vec![b];
        shape.extend(&tape.spatial);
        shape.push(t_d);
        let g_window = ArrayD::from_shape_vec(IxDyn(&shape), g_next.iter().cloned().collect()).expect("shape");
        Ok((grads, g_window))
    }
}

/// `(b·p) × o` rows to a `b × o × p` block.
fn positions_to_channels(y: Array2<f64>, b: usize, p: usize, o: usize) -> Array3<f64> {
    let y = if y.is_standard_layout() { y } else { y.as_standard_layout().into_owned() };
    let y3 = y.into_shape_with_order((b, p, o)).expect("shape");
    y3.permuted_axes([0, 2, 1]).as_standard_layout().into_owned()
}

/// `b × o × p` block to `(b·p) × o` rows.
fn channels_to_positions(v: &Array3<f64>) -> Array2<f64> {
    let (b, o, p) = v.dim();
    let t = v.view().permuted_axes([0, 2, 1]);
    let owned = t.as_standard_layout().into_owned();
    owned.into_shape_with_order((b * p, o)).expect("shape")
}

/// Selects one sample of a `batch × …` tensor, keeping the batch axis.
pub fn select_sample(x: &ArrayD<f64>, i: usize) -> ArrayD<f64> {
    x.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tiny_config(window: usize, modes: Vec<usize>) -> IknoConfig {
        let c = window.div_ceil(2).max(2);
        IknoConfig {
            window,
            horizon: 3,
            layers: 2,
            inn: InnConfig::uniform(window, 2, c, 5).unwrap(),
            spec: TruncationSpec::new(modes, 2).unwrap(),
            activation: Activation::Gelu,
        }
    }

    fn random_window(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = IknoModel::init(tiny_config(4, vec![3]), &mut rng).unwrap();
        let w = random_window(&[2, 16, 4], 2);
        let y = m.forward_one_step(&w).unwrap();
        assert_eq!(y.shape(), &[2, 16, 1]);
        assert_eq!(y, m.forward_one_step(&w).unwrap());
        let r = m.rollout(&w, 5).unwrap();
        assert_eq!(r.shape(), &[2, 16, 5]);
        assert_eq!(r.slice(s![.., .., 0..1]).into_dyn(), y.view());
        assert!(m.forward_one_step(&random_window(&[2, 3, 4], 2)).is_err());
        assert!(m.forward_one_step(&random_window(&[2, 16, 3], 2)).is_err());
    }

    #[test]
    fn rollout_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = IknoModel::init(tiny_config(3, vec![2, 3]), &mut rng).unwrap();
        let w = random_window(&[1, 8, 8, 3], 4);
        let full = m.rollout(&w, 5).unwrap();
        let first = m.rollout(&w, 2).unwrap();
        let mut cat = ndarray::concatenate(Axis(3), &[w.view(), first.view()]).unwrap();
        cat = cat.slice(s![.., .., .., 2..]).to_owned().into_dyn();
        let rest = m.rollout(&cat, 3).unwrap();
        let joined = ndarray::concatenate(Axis(3), &[first.view(), rest.view()]).unwrap();
        assert!(joined.iter().zip(&full).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn identity_reduction_returns_last_snapshot() {
        let mut cfg = tiny_config(4, vec![4]);
        cfg.activation = Activation::Identity;
        let mut params = IknoParams::zeros(&cfg).unwrap();
        for l in &mut params.layers {
            *l = KoopmanLayerParams::identity(cfg.observable_dim(), cfg.spec.mode_count(), Activation::Identity);
        }
        let m = IknoModel::from_parts(cfg, params).unwrap();
        let w = ArrayD::from_shape_fn(IxDyn(&[1, 32, 4]), |ix| {
            let x = ix[1] as f64 / 32.0;
            1.0 + (2.0 * PI * x).sin() - 0.5 * (6.0 * PI * x).cos()
        });
        let y = m.forward_one_step(&w).unwrap();
        for i in 0..32 {
            assert!((y[[0, i, 0]] - w[[0, i, 3]]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_window_gives_constant_prediction_at_any_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = IknoModel::init(tiny_config(4, vec![3]), &mut rng).unwrap();
        let value = |r: usize| {
            let w = ArrayD::from_shape_fn(IxDyn(&[1, r, 4]), |ix| 0.2 * ix[2] as f64 - 0.3);
            let y = m.forward_one_step(&w).unwrap();
            let v0 = y[[0, 0, 0]];
            assert!(y.iter().all(|v| (v - v0).abs() < 1e-12));
            v0
        };
        let a = value(8);
        for r in [16, 64, 128] {
            assert!((value(r) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_blocks_are_complete_and_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = IknoParams::init(&tiny_config(4, vec![3]), &mut rng).unwrap();
        let names: Vec<String> = p.blocks().iter().map(|b| b.name.clone()).collect();
        assert_eq!(names.len(), 2 * 6 + 2 * 4);
        assert_eq!(names[0], "inn.0.w1");
        assert_eq!(names.last().unwrap(), "layer.1.b_hf");
        let lens: Vec<usize> = p.blocks().iter().map(|b| b.values.len()).collect();
        let mut_lens: Vec<usize> = p.blocks_mut().iter().map(|b| b.len()).collect();
        assert_eq!(lens, mut_lens);
        p.blocks_mut()[13][0] = 42.0;
        assert_eq!(p.layers[0].k_im.as_slice().unwrap()[0], 42.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = IknoModel::init(tiny_config(3, vec![3]), &mut rng).unwrap();
        let w = random_window(&[2, 8, 3], 8);
        let wts = random_window(&[2, 8, 3], 9);
        let f = |model: &IknoModel, win: &ArrayD<f64>| (model.rollout(win, 3).unwrap() * &wts).sum();
        let (_, tape) = m.rollout_taped(&w, 3).unwrap();
        let (g, gw) = m.backward(&tape, &wts).unwrap();
        let h = 1e-6;
        for (bi, k) in [(0usize, 0usize), (5, 1), (12, 2), (13, 4), (15, 0), (19, 1)] {
            let mut a = m.clone();
            a.params.blocks_mut()[bi][k] += h;
            let mut b = m.clone();
            b.params.blocks_mut()[bi][k] -= h;
            let fd = (f(&a, &w) - f(&b, &w)) / (2.0 * h);
            let an = g.blocks()[bi].values[k];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "block {bi}: {fd} vs {an}");
        }
        for ix in [[0, 0, 0], [1, 7, 2], [0, 3, 1]] {
            let mut a = w.clone();
            a[ix] += h;
            let mut b = w.clone();
            b[ix] -= h;
            let fd = (f(&m, &a) - f(&m, &b)) / (2.0 * h);
            assert!((fd - gw[ix]).abs() < 1e-6, "window {ix:?}: {fd} vs {}", gw[ix]);
        }
    }
}
