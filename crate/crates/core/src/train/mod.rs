//! L1 loss, Adam, the training loop and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::degrade::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::{fdvm_forward, ModelWeights, IMAGE_CHANNELS};
use crate::rng::{self, Rng};
use crate::tensor::{ops, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Also checkpoint after every `k`-th epoch; 0 means only at the end.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Take random `patch_size` crops each batch instead of resizing whole images.
    pub random_crop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            epochs: 10,
            patch_size: 64,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            random_crop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patch_size < 8 {
            return Err(Error::Config(format!("patch_size must be >= 8, got {}", self.patch_size)));
        }
        Ok(())
    }
}

/// Mean absolute difference as a scalar tensor.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let loss = g.l1_loss(p, t)?;
    Ok(g.value(loss).clone())
}

/// First and second moments for every parameter, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros: Vec<Tensor> = weights.named_params().iter().map(|(_, p)| Tensor::zeros(p.dims())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!("optimizer state covers {} parameters, not {}", state.m.len(), params.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || state.m[i].dims() != p.dims() || state.v[i].dims() != p.dims() {
            return Err(Error::Contract(format!("gradient {i} has dims {:?}, parameter {:?}", g.dims(), p.dims())));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("gradient {i} is not finite")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Degraded/clean training pairs, each `(3, H, W)`.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

fn resize_to(img: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w]: [usize; 3] = img.dims().try_into().unwrap();
    if h == size && w == size {
        return Ok(img.clone());
    }
    ops::bilinear_resize(&img.clone().reshape([1, c, h, w])?, size, size)?.reshape([c, size, size])
}

impl TrainingSet {
    pub fn from_pairs(inputs: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Input(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            if x.dims() != y.dims() || x.rank() != 3 || x.dims()[0] != IMAGE_CHANNELS {
                return Err(Error::shape("training pair", format!("{:?} vs {:?}", x.dims(), y.dims())));
            }
        }
        Ok(TrainingSet { inputs, targets })
    }

    /// Loads the train split. Pairs that fail to decode are skipped with a
    /// warning. Unless `keep_size` is set, images are resized to `patch`.
    pub fn from_manifest(manifest: &DatasetManifest, patch: usize, keep_size: bool) -> Result<Self> {
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        let mut seen = 0;
        for r in manifest.split(Split::Train) {
            seen += 1;
            let pair = imageio::load_rgb(&manifest.resolve(&r.degraded))
                .and_then(|x| Ok((x, imageio::load_rgb(&manifest.resolve(&r.clean))?)));
            match pair {
                Ok((x, y)) if x.dims() == y.dims() => {
                    let (x, y) = if keep_size { (x, y) } else { (resize_to(&x, patch)?, resize_to(&y, patch)?) };
                    inputs.push(x);
                    targets.push(y);
                }
                Ok((x, y)) => log::warn!("skipping {}: size {:?} vs {:?}", r.degraded.display(), x.dims(), y.dims()),
                Err(e) => log::warn!("skipping {}: {e}", r.degraded.display()),
            }
        }
        if seen == 0 {
            return Err(Error::Input("manifest has no train records".into()));
        }
        if inputs.is_empty() {
            return Err(Error::Input(format!("all {seen} train pairs failed to load")));
        }
        Ok(TrainingSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let mut dims = vec![items.len()];
    dims.extend_from_slice(items[0].dims());
    Tensor::new(dims, items.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn crop(img: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let [c, h, w]: [usize; 3] = img.dims().try_into().unwrap();
    debug_assert!(y0 + size <= h && x0 + size <= w);
    Tensor::from_fn([c, size, size], |i| {
        let (ch, r) = (i / (size * size), i % (size * size));
        img.data()[(ch * h + y0 + r / size) * w + x0 + r % size]
    })
}

/// Splits a shuffled order into batches, dropping a final ragged batch of one.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if let Some(last) = out.last() {
        if last.len() < batch_size && last.len() < 2 {
            log::info!("dropping ragged final batch of {}", last.len());
            out.pop();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Per-epoch means plus every step loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<f64>,
}

impl TrainLog {
    /// `epoch<TAB>mean_loss` lines; losses print in shortest round-trip form.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}\t{}", e.epoch, e.mean_loss).unwrap();
        }
        s
    }

    pub fn render_steps(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.steps.iter().enumerate() {
            writeln!(s, "{}\t{}", i + 1, l).unwrap();
        }
        s
    }
}

/// Model, optimizer and shuffle stream for one training run.
pub struct Trainer {
    pub weights: ModelWeights,
    pub adam: AdamState,
    pub epoch: usize,
    cfg: TrainConfig,
    rng: Rng,
}

impl Trainer {
    pub fn new(weights: ModelWeights, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&weights);
        let rng = rng::substream(cfg.seed, rng::SHUFFLE);
        Ok(Trainer { weights, adam, epoch: 0, cfg, rng })
    }

    /// Continues from a checkpoint, restoring optimizer and shuffle state when present.
    pub fn resume(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Trainer::new(ck.weights, cfg)?;
        if let Some(adam) = ck.adam {
            t.adam = adam;
        }
        if let Some(r) = ck.rng {
            t.rng = r.restore();
        }
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Forward, L1 loss, backward and one Adam update on a `(B, 3, H, W)` batch.
    pub fn step(&mut self, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let w = self.weights.bind(&mut g);
        let out = fdvm_forward(&mut g, &w, inputs)?;
        let target = g.constant(targets.clone());
        let loss = g.l1_loss(out, target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = w.named_params().into_iter().map(|(_, v)| grads.take(*v)).collect();
        adam_step(&mut self.weights.params_mut(), &grads, &mut self.adam, &self.cfg)?;
        Ok(value)
    }

    fn assemble(&mut self, set: &TrainingSet, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let p = self.cfg.patch_size;
        let (mut xs, mut ys) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
        for &i in idx {
            let (x, y) = (&set.inputs[i], &set.targets[i]);
            let (h, w) = (x.dims()[1], x.dims()[2]);
            if self.cfg.random_crop && h >= p && w >= p {
                let y0 = self.rng.random_range(0..=h - p);
                let x0 = self.rng.random_range(0..=w - p);
                xs.push(crop(x, y0, x0, p));
                ys.push(crop(y, y0, x0, p));
            } else {
                xs.push(resize_to(x, p)?);
                ys.push(resize_to(y, p)?);
            }
        }
        Ok((stack(&xs)?, stack(&ys)?))
    }

    /// One pass over `set` in a freshly shuffled order. Returns the step losses.
    pub fn run_epoch(&mut self, set: &TrainingSet) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut self.rng);
        let groups: Vec<Vec<usize>> = batches(&order, self.cfg.batch_size).into_iter().map(<[usize]>::to_vec).collect();
        if groups.is_empty() {
            return Err(Error::Input(format!(
                "{} training pair(s) cannot fill a batch of {}",
                set.len(),
                self.cfg.batch_size
            )));
        }
        let mut losses = Vec::with_capacity(groups.len());
        for idx in &groups {
            let (x, y) = self.assemble(set, idx)?;
            let loss = self.step(&x, &y)?;
            log::debug!("epoch {} step {}: loss {loss}", self.epoch + 1, self.adam.t);
            losses.push(loss);
        }
        self.epoch += 1;
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            weights: self.weights.clone(),
            adam: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
            epoch: self.epoch,
        }
    }

    fn save(&self) -> Result<()> {
        if let Some(path) = &self.cfg.checkpoint_path {
            self.checkpoint().save(path)?;
            log::info!("checkpoint written to {} (epoch {})", path.display(), self.epoch);
        }
        Ok(())
    }

    /// Runs the configured number of epochs, writing checkpoints as configured.
    pub fn run(&mut self, set: &TrainingSet) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for _ in 0..self.cfg.epochs {
            let losses = self.run_epoch(set)?;
            let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            log::info!("epoch {}\tmean loss {mean_loss}", self.epoch);
            log.epochs.push(EpochRecord { epoch: self.epoch, mean_loss });
            log.steps.extend(losses);
            let k = self.cfg.checkpoint_every;
            if k > 0 && self.epoch.is_multiple_of(k) {
                self.save()?;
            }
        }
        self.save()?;
        Ok(log)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains `model` on an in-memory set.
pub fn train_on(model: ModelWeights, set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let log = trainer.run(set)?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), log })
}

/// Trains `model` on the train split of `manifest`.
pub fn train_loop(model: ModelWeights, manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = TrainingSet::from_manifest(manifest, cfg.patch_size, cfg.random_crop)?;
    train_on(model, &set, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { channels: 4, blocks_per_path: 1, ssm_state_dim: 3, ssm_fixed_hw: 8, ..Default::default() }
    }

    fn tiny_set(n: usize, seed: u64) -> TrainingSet {
        let crf = crate::degrade::CrfModel::default();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in 0..n {
            let clean = crate::degrade::synthetic_source(12, 12, seed + i as u64);
            xs.push(crate::degrade::lecarm_apply(&clean, if i % 2 == 0 { -0.7 } else { 0.6 }, &crf).unwrap());
            ys.push(clean);
        }
        TrainingSet::from_pairs(xs, ys).unwrap()
    }

    #[test]
    fn l1_values() {
        let a = Tensor::new([2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap().data(), &[0.0]);
        assert_eq!(l1_loss(&a, &b).unwrap().data(), &[0.5]);
        assert!(l1_loss(&a, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut w = Tensor::zeros([1]);
        let mut state = AdamState::for_params(&[&w]);
        let cfg = TrainConfig { lr: 1e-3, ..Default::default() };
        adam_step(&mut [&mut w], &[Tensor::ones([1])], &mut state, &cfg).unwrap();
        assert!((w.data()[0] + 1e-3).abs() < 1e-9);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut w = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
        let before = w.clone();
        let mut state = AdamState::for_params(&[&w]);
        for _ in 0..5 {
            adam_step(&mut [&mut w], &[Tensor::zeros([3])], &mut state, &TrainConfig::default()).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_rejects_missing_or_mismatched_gradients() {
        let mut w = Tensor::zeros([2]);
        let mut state = AdamState::for_params(&[&w]);
        let cfg = TrainConfig::default();
        assert!(matches!(adam_step(&mut [&mut w], &[], &mut state, &cfg), Err(Error::Contract(_))));
        assert!(matches!(adam_step(&mut [&mut w], &[Tensor::zeros([3])], &mut state, &cfg), Err(Error::Contract(_))));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn adam_step_size_is_bounded_and_v_nonnegative() {
        use crate::rng::substream;
        let mut r = substream(4, "adam");
        let cfg = TrainConfig { lr: 1e-2, ..Default::default() };
        let mut w = Tensor::zeros([16]);
        let mut state = AdamState::for_params(&[&w]);
        for step in 0..200 {
            let g = Tensor::from_fn([16], |_| r.random_range(-5.0..5.0) * if r.random::<f64>() < 0.1 { 100.0 } else { 1.0 });
            let before = w.clone();
            adam_step(&mut [&mut w], &[g], &mut state, &cfg).unwrap();
            assert!(state.v[0].data().iter().all(|&v| v >= 0.0));
            if step >= 10 {
                assert!(w.max_abs_diff(&before) <= 10.0 * cfg.lr);
            }
        }
    }

    #[test]
    fn ragged_batches() {
        let order: Vec<usize> = (0..9).collect();
        assert_eq!(batches(&order, 4).len(), 2);
        assert_eq!(batches(&order, 3).len(), 3);
        assert_eq!(batches(&order[..6], 4).len(), 2);
        assert_eq!(batches(&order[..5], 1).len(), 5);
        assert!(batches(&order[..1], 4).is_empty());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let model = build_model(&tiny_cfg(), 1).unwrap();
        let cfg = TrainConfig { epochs: 0, patch_size: 8, batch_size: 2, ..Default::default() };
        let out = train_on(model.clone(), &tiny_set(2, 0), &cfg).unwrap();
        assert_eq!(out.checkpoint.weights, model);
        assert!(out.log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_moves_weights() {
        let cfg = TrainConfig { epochs: 2, patch_size: 8, batch_size: 2, lr: 1e-3, seed: 5, ..Default::default() };
        let set = tiny_set(5, 3);
        let run = || train_on(build_model(&tiny_cfg(), 5).unwrap(), &set, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.steps.len(), 4);
        assert_eq!(a.log.render(), b.log.render());
        assert_ne!(a.checkpoint.weights, build_model(&tiny_cfg(), 5).unwrap());
        assert_eq!(a.checkpoint.adam.as_ref().unwrap().t, 4);
    }

    #[test]
    fn random_crop_uses_patches() {
        let cfg = TrainConfig {
            epochs: 1,
            patch_size: 8,
            batch_size: 2,
            random_crop: true,
            ..Default::default()
        };
        let out = train_on(build_model(&tiny_cfg(), 2).unwrap(), &tiny_set(2, 1), &cfg).unwrap();
        assert_eq!(out.log.steps.len(), 1);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
