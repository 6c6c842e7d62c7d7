//! Training objective, Adam, step schedule, checkpoints and gradient checks.

use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Precision};
use crate::error::{IknoError, Result};
use crate::grid::WindowPair;
use crate::model::{IknoConfig, IknoModel, IknoParams};

/// Optimization settings. Defaults: `lr0 = 1e-3`, batch 10, 500 epochs,
/// learning rate halved every 100 epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_halving_period: usize,
    /// Rollout horizon used in the loss; `None` means the dataset horizon.
    pub horizon: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Ramp the training horizon from 1 to its full value over the first
    /// half of training.
    pub curriculum: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            batch_size: 10,
            epochs: 500,
            lr_halving_period: 100,
            horizon: None,
            seed: 0,
            precision: Precision::Double,
            grad_clip: None,
            curriculum: false,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(IknoError::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_halving_period == 0 {
            return Err(IknoError::Config("batch size, epochs and halving period must be positive".into()));
        }
        if self.horizon == Some(0) {
            return Err(IknoError::Config("training horizon must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(IknoError::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `lr0 · 0.5^floor(epoch / period)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.lr_halving_period) as i32)
}

/// Per-(sample, step) norms of `pred − target` and `target` over space.
fn step_norms(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if pred.shape() != target.shape() || pred.ndim() < 3 {
        return Err(IknoError::Shape(format!(
            "prediction {:?} and target {:?} must share a batch × space × steps shape",
            pred.shape(),
            target.shape()
        )));
    }
    let b = pred.shape()[0];
    let t = pred.shape()[pred.ndim() - 1];
    let mut err = vec![0.0f64; b * t];
    let mut nrm = vec![0.0f64; b * t];
    for ((ix, &p), &u) in pred.indexed_iter().zip(target.iter()) {
        let k = ix[0] * t + ix[pred.ndim() - 1];
        err[k] += (p - u) * (p - u);
        nrm[k] += u * u;
    }
    for k in 0..b * t {
        if nrm[k] == 0.0 {
            return Err(IknoError::DegenerateTarget { sample: k / t, step: k % t });
        }
        err[k] = err[k].sqrt();
        nrm[k] = nrm[k].sqrt();
    }
    Ok((err, nrm, b, t))
}

/// Mean over samples and steps of `‖û_j − u_j‖ / ‖u_j‖`.
pub fn relative_l2_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    let (err, nrm, b, t) = step_norms(pred, target)?;
    let total: f64 = err.iter().zip(&nrm).map(|(e, n)| e / n).sum();
    Ok(total / (b * t) as f64)
}

/// Loss and its gradient with respect to `pred`.
pub fn relative_l2_loss_grad(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<(f64, ArrayD<f64>)> {
    let (err, nrm, b, t) = step_norms(pred, target)?;
    let total: f64 = err.iter().zip(&nrm).map(|(e, n)| e / n).sum();
    let scale = 1.0 / (b * t) as f64;
    let last = pred.ndim() - 1;
    let mut g = ArrayD::zeros(pred.raw_dim());
    for ((ix, gv), (&p, &u)) in g.indexed_iter_mut().zip(pred.iter().zip(target.iter())) {
        let k = ix[0] * t + ix[last];
        if err[k] > 0.0 {
            *gv = scale * (p - u) / (err[k] * nrm[k]);
        }
    }
    Ok((total * scale, g))
}

/// Adam moments for every parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &IknoParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.values.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update on a flat slice.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + EPSILON);
    }
}

/// Applies one Adam step to every block. Non-finite gradients abort before
/// any parameter changes.
pub fn adam_step(
    params: &mut IknoParams,
    grads: &IknoParams,
    state: &mut AdamState,
    lr: f64,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    for b in grads.blocks() {
        if b.values.iter().any(|g| !g.is_finite()) {
            return Err(IknoError::NonFinite { what: format!("gradient of {}", b.name), epoch, batch });
        }
    }
    state.t += 1;
    let gblocks = grads.blocks();
    for (k, p) in params.blocks_mut().into_iter().enumerate() {
        adam_update(p, gblocks[k].values, &mut state.m[k], &mut state.v[k], lr, state.t);
    }
    Ok(())
}

fn clip_gradients(grads: &mut IknoParams, max_norm: f64) {
    let norm: f64 = grads.blocks().iter().flat_map(|b| b.values.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for b in grads.blocks_mut() {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Rollout loss on a batch and its parameter gradient.
pub fn loss_and_grad(model: &IknoModel, input: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<(f64, IknoParams)> {
    let steps = target.shape()[target.ndim() - 1];
    let (pred, tape) = model.rollout_taped(input, steps)?;
    let (loss, g_pred) = relative_l2_loss_grad(&pred, target)?;
    let (grads, _) = model.backward(&tape, &g_pred)?;
    Ok((loss, grads))
}

/// Rollout loss without gradients, evaluated in chunks of `chunk` samples.
pub fn evaluate_loss(model: &IknoModel, data: &WindowPair, horizon: usize, chunk: usize) -> Result<f64> {
    let n = data.input.shape()[0];
    let target = truncate_horizon(&data.target, horizon);
    let mut total = 0.0;
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let pred = model.rollout(&data.input.select(Axis(0), &idx), horizon)?;
        total += relative_l2_loss(&pred, &target.select(Axis(0), &idx))? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

fn truncate_horizon(target: &ArrayD<f64>, horizon: usize) -> ArrayD<f64> {
    let last = Axis(target.ndim() - 1);
    target.slice_axis(last, ndarray::Slice::from(..horizon)).to_owned()
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Plain-text loss table with a fixed header; values printed round-trip exact.
pub fn format_history(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch\tlr\ttrain_loss\tval_loss\n");
    for r in history {
        let val = r.val_loss.map_or_else(|| "nan".to_string(), |v| format!("{v:.17e}"));
        s.push_str(&format!("{}\t{:.17e}\t{:.17e}\t{}\n", r.epoch, r.lr, r.train_loss, val));
    }
    s
}

/// Mutable training state; everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: IknoModel,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    /// Lowest validation loss so far with its epoch and parameters.
    pub best: Option<BestSnapshot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: IknoParams,
}

impl Trainer {
    pub fn new(model: IknoModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params);
        let rng = crate::seed::rng_for(cfg.seed, "shuffle", 0);
        Ok(Self { model, cfg, adam, rng, epoch: 0, history: Vec::new(), best: None })
    }

    fn check_data(&self, data: &WindowPair) -> Result<usize> {
        let t_d = self.model.config.window;
        let nd = data.input.ndim();
        if data.input.shape()[nd - 1] != t_d {
            return Err(IknoError::Shape(format!(
                "dataset windows have {} snapshots, model expects {t_d}",
                data.input.shape()[nd - 1]
            )));
        }
        if data.target.shape()[..nd - 1] != data.input.shape()[..nd - 1] {
            return Err(IknoError::Shape("dataset inputs and targets differ in batch or grid".into()));
        }
        let available = data.target.shape()[nd - 1];
        let horizon = self.cfg.horizon.unwrap_or(available);
        if horizon > available {
            return Err(IknoError::Config(format!(
                "training horizon {horizon} exceeds the dataset horizon {available}"
            )));
        }
        Ok(horizon)
    }

    /// Horizon used in the given epoch.
    pub fn horizon_at(&self, epoch: usize, full: usize) -> usize {
        if !self.cfg.curriculum {
            return full;
        }
        let ramp = (self.cfg.epochs / 2).max(1);
        (1 + epoch * full / ramp).min(full)
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self, train: &WindowPair, val: Option<&WindowPair>) -> Result<LossRecord> {
        let full = self.check_data(train)?;
        let epoch = self.epoch;
        let horizon = self.horizon_at(epoch, full);
        let lr = lr_schedule(epoch, &self.cfg);
        let n = train.input.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let target = truncate_horizon(&train.target, horizon);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let x = train.input.select(Axis(0), idx);
            let y = target.select(Axis(0), idx);
            let (loss, mut grads) = loss_and_grad(&self.model, &x, &y)?;
            if !loss.is_finite() {
                return Err(IknoError::NonFinite { what: "training loss".into(), epoch, batch: bi });
            }
            if let Some(c) = self.cfg.grad_clip {
                clip_gradients(&mut grads, c);
            }
            adam_step(&mut self.model.params, &grads, &mut self.adam, lr, epoch, bi)?;
            total += loss * idx.len() as f64;
        }
        let val_loss = match val {
            Some(v) => Some(evaluate_loss(&self.model, v, full, self.cfg.batch_size)?),
            None => None,
        };
        let rec = LossRecord { epoch, lr, train_loss: total / n as f64, val_loss };
        if let Some(v) = val_loss {
            if self.best.as_ref().is_none_or(|b| v < b.val_loss) {
                self.best = Some(BestSnapshot { epoch, val_loss: v, params: self.model.params.clone() });
            }
        }
        self.history.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }

    /// Serializes model, optimizer, rng, epoch and configuration echoes.
    pub fn checkpoint(&self) -> Result<Archive> {
        let mut a = model_archive(&self.model)?;
        a.set_meta("kind", "checkpoint");
        a.set_meta("train_config", to_json(&self.cfg)?);
        a.set_meta("epoch", self.epoch);
        a.set_meta("adam.t", self.adam.t);
        a.set_meta("rng.seed", hex(&self.rng.get_seed()));
        a.set_meta("rng.word_pos", self.rng.get_word_pos());
        a.set_meta("rng.stream", self.rng.get_stream());
        a.set_meta("history", format_history(&self.history));
        for (k, b) in self.model.params.blocks().iter().enumerate() {
            a.insert_f64(format!("adam.m/{}", b.name), &b.shape, &self.adam.m[k], Precision::Double)?;
            a.insert_f64(format!("adam.v/{}", b.name), &b.shape, &self.adam.v[k], Precision::Double)?;
        }
        if let Some(best) = &self.best {
            a.set_meta("best.epoch", best.epoch);
            a.set_meta("best.val_loss", format!("{:.17e}", best.val_loss));
            for b in best.params.blocks() {
                a.insert_f64(format!("best/{}", b.name), &b.shape, b.values, Precision::Double)?;
            }
        }
        Ok(a)
    }

    pub fn from_checkpoint(a: &Archive) -> Result<Self> {
        let model = model_from_archive(a)?;
        let cfg: TrainConfig = from_json(a.meta("train_config")?)?;
        cfg.validate()?;
        let mut adam = AdamState::new(&model.params);
        adam.t = a.meta_parse("adam.t")?;
        for (k, b) in model.params.blocks().iter().enumerate() {
            adam.m[k] = a.get_f64(&format!("adam.m/{}", b.name))?.1;
            adam.v[k] = a.get_f64(&format!("adam.v/{}", b.name))?.1;
            if adam.m[k].len() != b.values.len() || adam.v[k].len() != b.values.len() {
                return Err(IknoError::Format(format!("optimizer moments for {} have the wrong size", b.name)));
            }
        }
        let seed = unhex(a.meta("rng.seed")?)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(a.meta_parse("rng.stream")?);
        rng.set_word_pos(a.meta_parse("rng.word_pos")?);
        let history = parse_history(a.meta("history")?)?;
        let best = if a.metadata.contains_key("best.epoch") {
            let mut params = model.params.zeros_like();
            read_params(a, "best", &mut params)?;
            Some(BestSnapshot { epoch: a.meta_parse("best.epoch")?, val_loss: a.meta_parse("best.val_loss")?, params })
        } else {
            None
        };
        Ok(Self { model, cfg, adam, rng, epoch: a.meta_parse("epoch")?, history, best })
    }

    /// Runs the remaining epochs. `on_epoch` sees the trainer after every
    /// epoch and may write checkpoints; an error from it stops training.
    /// On a numerical failure the trainer is left at its last good state.
    pub fn train<F>(&mut self, train: &WindowPair, val: Option<&WindowPair>, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &LossRecord) -> Result<()>,
    {
        while self.epoch < self.cfg.epochs {
            let snapshot = (self.model.params.clone(), self.adam.clone(), self.rng.clone());
            let rec = match self.run_epoch(train, val) {
                Ok(r) => r,
                Err(e) => {
                    (self.model.params, self.adam, self.rng) = snapshot;
                    return Err(e);
                }
            };
            on_epoch(self, &rec)?;
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| IknoError::Format(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| IknoError::Format(e.to_string()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || IknoError::Format(format!("invalid rng seed '{s}'"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn parse_history(s: &str) -> Result<Vec<LossRecord>> {
    let bad = |l: &str| IknoError::Format(format!("malformed loss history row '{l}'"));
    s.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            let val: f64 = f[3].parse().map_err(|_| bad(l))?;
            Ok(LossRecord {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                lr: f[1].parse().map_err(|_| bad(l))?,
                train_loss: f[2].parse().map_err(|_| bad(l))?,
                val_loss: (!val.is_nan()).then_some(val),
            })
        })
        .collect()
}

/// Model parameters and configuration as an archive (always double precision).
pub fn model_archive(model: &IknoModel) -> Result<Archive> {
    let mut a = Archive::new();
    a.set_meta("kind", "model");
    a.set_meta("model_config", to_json(&model.config)?);
    for b in model.params.blocks() {
        a.insert_f64(format!("param/{}", b.name), &b.shape, b.values, Precision::Double)?;
    }
    Ok(a)
}

pub fn model_from_archive(a: &Archive) -> Result<IknoModel> {
    let config: IknoConfig = from_json(a.meta("model_config")?)?;
    let mut params = IknoParams::zeros(&config)?;
    read_params(a, "param", &mut params)?;
    IknoModel::from_parts(config, params)
}

fn read_params(a: &Archive, prefix: &str, params: &mut IknoParams) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = params.blocks().iter().map(|b| (b.name.clone(), b.shape.clone())).collect();
    for ((name, shape), dst) in names.iter().zip(params.blocks_mut()) {
        let (got_shape, data) = a.get_f64(&format!("{prefix}/{name}"))?;
        if &got_shape != shape {
            return Err(IknoError::Format(format!("parameter {name} has shape {got_shape:?}, expected {shape:?}")));
        }
        dst.copy_from_slice(&data);
    }
    Ok(())
}

/// Per-block result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }
}

/// Denominator floor of the relative error, well below the gradient
/// magnitudes of interest and well above finite-difference round-off.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of the rollout loss with central
/// differences `(f(θ+δ) − f(θ−δ)) / 2δ` on at least `samples` scalars
/// spread over every parameter block (or all scalars if fewer exist).
pub fn gradient_check<R: Rng + ?Sized>(
    model: &IknoModel,
    input: &ArrayD<f64>,
    target: &ArrayD<f64>,
    delta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(model, input, target)?;
    let steps = target.shape()[target.ndim() - 1];
    let loss_at = |m: &IknoModel| -> Result<f64> { relative_l2_loss(&m.rollout(input, steps)?, target) };
    let gblocks = grads.blocks();
    let lens: Vec<usize> = gblocks.iter().map(|b| b.values.len()).collect();
    let picks = sample_indices(&lens, samples, rng);
    let mut probe = model.clone();
    let mut report = Vec::with_capacity(lens.len());
    for (k, idx) in picks.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for &i in idx {
            let orig = probe.params.blocks_mut()[k][i];
            probe.params.blocks_mut()[k][i] = orig + delta;
            let hi = loss_at(&probe)?;
            probe.params.blocks_mut()[k][i] = orig - delta;
            let lo = loss_at(&probe)?;
            probe.params.blocks_mut()[k][i] = orig;
            let fd = (hi - lo) / (2.0 * delta);
            let an = gblocks[k].values[i];
            let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + GRADCHECK_FLOOR);
            worst = worst.max(rel);
        }
        report.push(BlockCheck { name: gblocks[k].name.clone(), checked: idx.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { blocks: report })
}

/// Distinct indices per block: an even share of `samples`, topped up from
/// larger blocks when small blocks run out.
fn sample_indices<R: Rng + ?Sized>(lens: &[usize], samples: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let share = samples.div_ceil(lens.len().max(1));
    let mut want: Vec<usize> = lens.iter().map(|&l| l.min(share)).collect();
    let mut short = samples.saturating_sub(want.iter().sum());
    while short > 0 {
        let mut moved = false;
        for (w, &l) in want.iter_mut().zip(lens) {
            if short > 0 && *w < l {
                *w += 1;
                short -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    lens.iter()
        .zip(want)
        .map(|(&l, w)| {
            let mut idx = rand::seq::index::sample(rng, l, w).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inn::InnConfig;
    use crate::spectral::{Activation, TruncationSpec};
    use ndarray::IxDyn;

    fn tiny() -> IknoConfig {
        IknoConfig {
            window: 4,
            horizon: 2,
            layers: 1,
            inn: InnConfig::uniform(4, 2, 2, 8).unwrap(),
            spec: TruncationSpec::new(vec![2], 2).unwrap(),
            activation: Activation::Gelu,
        }
    }

    fn data(n: usize, seed: u64) -> WindowPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |shape: &[usize]| ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(0.5..1.5));
        WindowPair { input: f(&[n, 16, 4]), target: f(&[n, 16, 2]) }
    }

    #[test]
    fn loss_identities() {
        let u = data(3, 1).target;
        assert_eq!(relative_l2_loss(&u, &u).unwrap(), 0.0);
        let two = ArrayD::from_elem(IxDyn(&[1, 7, 1]), 2.0);
        let two2 = ArrayD::from_elem(IxDyn(&[1, 7, 1]), 2.2);
        assert!((relative_l2_loss(&two2, &two).unwrap() - 0.1).abs() < 1e-15);
        let p = data(3, 2).target;
        let a = relative_l2_loss(&p, &u).unwrap();
        let b = relative_l2_loss(&(&p * 3.7), &(&u * 3.7)).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut z = u.clone();
        z.index_axis_mut(Axis(2), 1).index_axis_mut(Axis(0), 2).fill(0.0);
        assert!(matches!(
            relative_l2_loss(&p, &z),
            Err(IknoError::DegenerateTarget { sample: 2, step: 1 })
        ));
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let p = data(2, 3).target;
        let u = data(2, 4).target;
        let (l, g) = relative_l2_loss_grad(&p, &u).unwrap();
        assert_eq!(l, relative_l2_loss(&p, &u).unwrap());
        for ix in [[0, 0, 0], [1, 5, 1], [0, 15, 1]] {
            let mut a = p.clone();
            a[ix] += 1e-6;
            let mut b = p.clone();
            b[ix] -= 1e-6;
            let fd = (relative_l2_loss(&a, &u).unwrap() - relative_l2_loss(&b, &u).unwrap()) / 2e-6;
            assert!((fd - g[ix]).abs() < 1e-8);
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-3);
        assert_eq!(lr_schedule(99, &cfg), 1e-3);
        assert_eq!(lr_schedule(100, &cfg), 5e-4);
        assert_eq!(lr_schedule(499, &cfg), 1e-3 * 0.0625);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let (mut p, g, mut m, mut v) = ([1.0], [1.0], [0.0], [0.0]);
        adam_update(&mut p, &g, &mut m, &mut v, 1e-3, 1);
        // bias-corrected moments are exactly g and g²
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + EPSILON))).abs() < 1e-15);
        let (mut p, g, mut m, mut v) = ([2.0], [0.0], [0.5], [0.25]);
        adam_update(&mut p, &g, &mut m, &mut v, 0.0, 3);
        assert_eq!(p[0], 2.0);
        assert_eq!((m[0], v[0]), (0.45, 0.25 * 0.999));
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = IknoModel::init(tiny(), &mut rng).unwrap();
        let mut g = model.params.zeros_like();
        g.layers[0].k_im[[0, 1, 0]] = f64::NAN;
        let mut st = AdamState::new(&model.params);
        let before = model.params.clone();
        let err = adam_step(&mut model.params, &g, &mut st, 1e-3, 4, 7).unwrap_err();
        match err {
            IknoError::NonFinite { what, epoch, batch } => {
                assert!(what.contains("layer.0.k_im"));
                assert_eq!((epoch, batch), (4, 7));
            }
            e => panic!("unexpected {e}"),
        }
        assert_eq!(model.params, before);
    }

    #[test]
    fn gradient_check_tiny_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let d = data(2, 5);
        let rep = gradient_check(&model, &d.input, &d.target, 1e-5, 200, &mut rng).unwrap();
        assert!(rep.checked() >= 200);
        assert_eq!(rep.blocks.len(), model.params.blocks().len());
        assert!(rep.max_rel_error() < 1e-4, "{rep:?}");
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let cfg = TrainConfig { batch_size: 3, epochs: 4, seed: 11, ..TrainConfig::default() };
        let train = data(7, 6);
        let mut a = Trainer::new(model, cfg).unwrap();
        a.run_epoch(&train, None).unwrap();
        let mut bytes = Vec::new();
        a.checkpoint().unwrap().write_to(&mut bytes).unwrap();
        let mut b = Trainer::from_checkpoint(&Archive::read_from(&bytes[..]).unwrap()).unwrap();
        let ra = a.run_epoch(&train, None).unwrap();
        let rb = b.run_epoch(&train, None).unwrap();
        assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(format_history(&a.history), format_history(&b.history));
    }

    #[test]
    fn curriculum_ramps_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 10, curriculum: true, ..TrainConfig::default() };
        let t = Trainer::new(model, cfg).unwrap();
        let hs: Vec<usize> = (0..10).map(|e| t.horizon_at(e, 4)).collect();
        assert_eq!(hs[0], 1);
        assert!(hs.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(hs[5], 4);
    }

    fn wave_data(n: usize, horizon: usize) -> WindowPair {
        // travelling sinusoids with per-sample phase and amplitude
        let f = |s: usize, x: usize, t: usize| {
            let ph = 0.7 * s as f64;
            let amp = 1.0 + 0.25 * s as f64;
            let xx = 2.0 * std::f64::consts::PI * x as f64 / 16.0;
            1.5 + amp * (xx - 0.3 * t as f64 + ph).sin()
        };
        WindowPair {
            input: ArrayD::from_shape_fn(IxDyn(&[n, 16, 4]), |ix| f(ix[0], ix[1], ix[2])),
            target: ArrayD::from_shape_fn(IxDyn(&[n, 16, horizon]), |ix| f(ix[0], ix[1], ix[2] + 4)),
        }
    }

    #[test]
    fn overfits_four_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let cfg = TrainConfig { lr0: 1e-2, batch_size: 4, epochs: 500, ..TrainConfig::default() };
        let mut t = Trainer::new(model, cfg).unwrap();
        let d = wave_data(4, 1);
        t.train(&d, None, |_, _| Ok(())).unwrap();
        let last = t.history.last().unwrap().train_loss;
        assert!(last < 1e-2, "final train loss {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let cfg = TrainConfig { lr0: 1e-300, batch_size: 4, epochs: 3, ..TrainConfig::default() };
        let mut t = Trainer::new(model, cfg).unwrap();
        let d = wave_data(4, 2);
        t.train(&d, None, |_, _| Ok(())).unwrap();
        let l: Vec<f64> = t.history.iter().map(|r| r.train_loss).collect();
        assert!((l[0] - l[2]).abs() <= 1e-12 * l[0]);
    }

    #[test]
    fn objective_is_the_rollout_loss_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let d = wave_data(3, 2);
        let (l, _) = loss_and_grad(&model, &d.input, &d.target).unwrap();
        let direct = relative_l2_loss(&model.rollout(&d.input, 2).unwrap(), &d.target).unwrap();
        assert_eq!(l, direct);
        // a perfect predictor scores zero, so no reconstruction term is present
        assert_eq!(relative_l2_loss(&d.target, &d.target).unwrap(), 0.0);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let model = IknoModel::init(tiny(), &mut rng).unwrap();
            let cfg = TrainConfig { batch_size: 2, epochs: 3, seed: 9, ..TrainConfig::default() };
            let mut t = Trainer::new(model, cfg).unwrap();
            let d = wave_data(5, 2);
            t.train(&d, Some(&d), |_, _| Ok(())).unwrap();
            let mut bytes = Vec::new();
            t.checkpoint().unwrap().write_to(&mut bytes).unwrap();
            (format_history(&t.history), bytes)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn linear_submodel_gradient_matches_closed_form() {
        // zero coupling weights make G a fixed linear selection and identity
        // activation makes a one-step prediction affine in (w_hf, b_hf)
        let cfg = IknoConfig { activation: Activation::Identity, ..tiny() };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = IknoModel::init(cfg, &mut rng).unwrap();
        model.params.inn = model.params.inn.zeros_like();
        let d = wave_data(2, 1);
        let (_, grads) = loss_and_grad(&model, &d.input, &d.target).unwrap();
        let pred = model.rollout(&d.input, 1).unwrap();
        let (_, g_pred) = relative_l2_loss_grad(&pred, &d.target).unwrap();

        let o = model.config.observable_dim();
        let rows = ndarray::Array2::from_shape_vec((32, 4), d.input.iter().cloned().collect()).unwrap();
        let v = model.params.inn.forward_rows(rows.view()).unwrap();
        let eye = ndarray::Array2::<f64>::eye(o);
        let sel = model.params.inn.inverse_rows(eye.view()).unwrap();
        let coef = sel.column(3).to_owned();
        let g = g_pred.iter().cloned().collect::<Vec<f64>>();
        for oo in 0..o {
            let gb: f64 = g.iter().sum::<f64>() * coef[oo];
            assert!((grads.layers[0].b_hf[oo] - gb).abs() < 1e-10);
            for i in 0..o {
                let gw: f64 = (0..32).map(|r| g[r] * v[[r, i]]).sum::<f64>() * coef[oo];
                assert!((grads.layers[0].w_hf[[oo, i]] - gw).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn best_snapshot_survives_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = IknoModel::init(tiny(), &mut rng).unwrap();
        let cfg = TrainConfig { batch_size: 2, epochs: 2, ..TrainConfig::default() };
        let mut t = Trainer::new(model, cfg).unwrap();
        let d = wave_data(4, 1);
        t.train(&d, Some(&d), |_, _| Ok(())).unwrap();
        let best = t.best.clone().unwrap();
        let min = t.history.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best.val_loss, min);
        let back = Trainer::from_checkpoint(&t.checkpoint().unwrap()).unwrap();
        assert_eq!(back.best, t.best);
        assert_eq!(back.history, t.history);
    }
}
