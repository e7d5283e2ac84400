//! Training: Adam with a cosine-annealed learning rate on random aligned
//! patches of degraded/clean pairs, minimizing the PSNR loss.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_ppm, save_checkpoint, Config};
use crate::metrics::psnr_from_mse;
use crate::model::{Model, SIZE_MULTIPLE};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub flip_augment: bool,
    /// Steps between checkpoints; zero saves only at the end.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 2,
            patch: 64,
            lr_init: 5e-4,
            lr_final: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            flip_augment: true,
            checkpoint_every: 500,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "iterations",
        "batch",
        "patch",
        "lr_init",
        "lr_final",
        "beta1",
        "beta2",
        "adam_eps",
        "seed",
        "flip_augment",
        "checkpoint_every",
        "clip_norm",
    ];

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            iterations: cfg.get_or("iterations", d.iterations)?,
            batch: cfg.get_or("batch", d.batch)?,
            patch: cfg.get_or("patch", d.patch)?,
            lr_init: cfg.get_or("lr_init", d.lr_init)?,
            lr_final: cfg.get_or("lr_final", d.lr_final)?,
            beta1: cfg.get_or("beta1", d.beta1)?,
            beta2: cfg.get_or("beta2", d.beta2)?,
            adam_eps: cfg.get_or("adam_eps", d.adam_eps)?,
            seed: cfg.get_or("seed", d.seed)?,
            flip_augment: cfg.get_or("flip_augment", d.flip_augment)?,
            checkpoint_every: cfg.get_or("checkpoint_every", d.checkpoint_every)?,
            clip_norm: cfg.get("clip_norm")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_final < self.lr_init) || self.lr_final < 0.0 {
            return bad(format!("need 0 <= lr_final < lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(SIZE_MULTIPLE) {
            return bad(format!("patch {} must be a positive multiple of {SIZE_MULTIPLE}", self.patch));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs betas in [0,1) and a positive eps".into());
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// `lr_final + (lr_init − lr_final)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    if step >= total {
        return lr_final;
    }
    let frac = step as f64 / total as f64;
    lr_final + (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Bias-corrected Adam over every tensor of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParameterStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Returns `false`, leaving parameters and state
    /// untouched, when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<bool> {
        if grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (g, m) in grads.iter().zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::shape("adam", format!("gradient {} for parameter {}", g.shape(), m.shape())));
            }
        }
        if !grads.iter().all(Tensor::is_finite) {
            return Ok(false);
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2, teps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(self.eps));
        let (one, step) = (T::one(), T::from_f64(lr / c1));
        let sc2 = T::from_f64(1.0 / c2);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[k].data()) {
                *m = tb1 * *m + (one - tb1) * g;
                *v = tb2 * *v + (one - tb2) * g * g;
                *p = *p - step * *m / ((*v * sc2).sqrt() + teps);
            }
        }
        Ok(true)
    }
}

/// Aligned degraded/clean images, each `1×3×H×W`.
#[derive(Clone, Debug)]
pub struct Pair {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pairs: Vec<Pair>,
}

impl Corpus {
    pub fn new(pairs: Vec<Pair>, patch: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty training corpus".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            let (d, c) = (p.degraded.shape(), p.clean.shape());
            if d != c || d.n != 1 || d.c != 3 {
                return Err(Error::shape("corpus", format!("pair {i}: degraded {d}, clean {c}")));
            }
            if d.h < patch || d.w < patch {
                return Err(Error::shape("corpus", format!("pair {i}: {}x{} smaller than patch {patch}", d.h, d.w)));
            }
        }
        Ok(Corpus { pairs })
    }

    /// Loads `dir/clean/*.ppm` paired by file name with `dir/degraded/`.
    pub fn load_dir(dir: &Path, patch: usize) -> Result<Self> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir.join("clean"))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|p| p.extension().is_some_and(|e| e == "ppm" || e == "pgm"));
        names.sort();
        let pairs = names
            .iter()
            .map(|clean| {
                let degraded = dir.join("degraded").join(clean.file_name().expect("file name"));
                Ok(Pair {
                    degraded: read_ppm(&degraded)?.to_rgb().to_tensor(),
                    clean: read_ppm(clean)?.to_rgb().to_tensor(),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(pairs, patch)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Crop {
    pub fn apply(&self, t: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
        let mut x = t.crop(self.top, self.left, patch, patch)?;
        if self.flip_h {
            x = x.flip_horizontal();
        }
        if self.flip_v {
            x = x.flip_vertical();
        }
        Ok(x)
    }
}

pub struct Batch {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub crops: Vec<Crop>,
}

pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    patch: usize,
    batch: usize,
    rng: &mut R,
    flip_augment: bool,
) -> Result<Batch> {
    let mut crops = Vec::with_capacity(batch);
    let (mut deg, mut clean) = (Vec::with_capacity(batch), Vec::with_capacity(batch));
    for _ in 0..batch {
        let index = rng.random_range(0..corpus.pairs.len());
        let pair = &corpus.pairs[index];
        let s = pair.clean.shape();
        let top = rng.random_range(0..=s.h - patch);
        let left = rng.random_range(0..=s.w - patch);
        let (flip_h, flip_v) = if flip_augment {
            (rng.random(), rng.random())
        } else {
            (false, false)
        };
        let crop = Crop {
            index,
            top,
            left,
            flip_h,
            flip_v,
        };
        deg.push(crop.apply(&pair.degraded, patch)?);
        clean.push(crop.apply(&pair.clean, patch)?);
        crops.push(crop);
    }
    Ok(Batch {
        degraded: Tensor::stack(&deg)?,
        clean: Tensor::stack(&clean)?,
        crops,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} loss={:.6} psnr={:.4}",
            self.step, self.lr, self.loss, self.psnr
        )
    }
}

/// Where and how often to write checkpoints. The previous file is kept
/// alongside as `<path>.prev`.
pub struct CheckpointPlan<'a> {
    pub path: &'a Path,
    pub every: usize,
}

fn rotate_and_save(model: &Model, path: &Path) -> Result<()> {
    if path.exists() {
        let mut prev = path.as_os_str().to_owned();
        prev.push(".prev");
        std::fs::rename(path, prev)?;
    }
    save_checkpoint(model, path)
}

fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Runs the optimization loop, calling `trace` once per step. On a
/// non-finite loss the run stops with an error naming the step; checkpoints
/// already written are left in place.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    corpus: &Corpus,
    checkpoints: Option<CheckpointPlan<'_>>,
    mut trace: impl FnMut(&TraceRecord),
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut records = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let lr = cosine_lr(step, cfg.iterations, cfg.lr_init, cfg.lr_final);
        let batch = sample_batch(corpus, cfg.patch, cfg.batch, &mut rng, cfg.flip_augment)?;
        let (loss, mut grads) = {
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let x = tape.constant(batch.degraded);
            let y = model.net.forward(&tape, &p, &x)?;
            let loss = tape.psnr_loss(&y, &tape.constant(batch.clean))?;
            let g = tape.backward(&loss)?;
            let grads: Vec<Tensor<f32>> = p.vars().iter().map(|v| g.get(v).expect("tracked parameter")).collect();
            (loss.item() as f64, grads)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        if let Some(max) = cfg.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                let k = (max / norm) as f32;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
            }
        }
        if !adam.step(&mut model.params, &grads, lr)? {
            log::warn!("step {step}: non-finite gradient, update skipped");
        }
        model.net.clamp(&mut model.params);
        let mse = 10f64.powf(loss / 10.0) - crate::tensor::ops::PSNR_LOSS_EPS;
        let rec = TraceRecord {
            step,
            lr,
            loss,
            psnr: psnr_from_mse(mse.max(0.0), 1.0),
        };
        trace(&rec);
        records.push(rec);
        if let Some(plan) = &checkpoints {
            if plan.every > 0 && (step + 1) % plan.every == 0 && step + 1 < cfg.iterations {
                rotate_and_save(model, plan.path)?;
            }
        }
    }
    if let Some(plan) = &checkpoints {
        rotate_and_save(model, plan.path)?;
    }
    Ok(records)
}

/// Mean of `values[end-window..end]`.
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let w = &values[start..end];
    w.iter().sum::<f64>() / w.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Shape;

    #[test]
    fn cosine_boundaries() {
        let (a, b) = (5e-4, 1e-7);
        assert_eq!(cosine_lr(0, 100, a, b), a);
        assert_eq!(cosine_lr(100, 100, a, b), b);
        assert!((cosine_lr(50, 100, a, b) - (a + b) / 2.0).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, a, b)).collect();
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
    }

    fn scalar_store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn adam_hand_step() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        assert!(adam.step(&mut s, &[Tensor::scalar(1.0)], 0.1).unwrap());
        let p = s.iter().next().unwrap().1.data()[0];
        assert!((p + 0.1).abs() < 1e-8, "{p}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_gradient_and_nan_skip() {
        let mut s = scalar_store(0.25);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        adam.step(&mut s, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data()[0], 0.25);
        assert!(!adam.step(&mut s, &[Tensor::scalar(f64::NAN)], 0.1).unwrap());
        assert_eq!(s.iter().next().unwrap().1.data()[0], 0.25);
        assert_eq!(adam.t, 1);
        assert!(adam.step(&mut s, &[], 0.1).is_err());
    }

    #[test]
    fn adam_matches_closed_form_sequence() {
        let grads = [0.3, -1.2, 0.7, 0.05];
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(&mut s, &[Tensor::scalar(g)], 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.iter().next().unwrap().1.data()[0] - p).abs() < 1e-12);
    }

    fn corpus(seed: u64, h: usize, w: usize) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..2)
            .map(|_| Pair {
                degraded: Tensor::rand_uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng),
                clean: Tensor::rand_uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng),
            })
            .collect();
        Corpus::new(pairs, 16).unwrap()
    }

    #[test]
    fn batches_deterministic_and_aligned() {
        let c = corpus(1, 40, 33);
        for flip in [false, true] {
            let a = sample_batch(&c, 16, 3, &mut ChaCha8Rng::seed_from_u64(2), flip).unwrap();
            let b = sample_batch(&c, 16, 3, &mut ChaCha8Rng::seed_from_u64(2), flip).unwrap();
            assert_eq!(a.degraded, b.degraded);
            assert_eq!(a.clean.shape(), Shape::new(3, 3, 16, 16));
            for (i, crop) in a.crops.iter().enumerate() {
                let pair = &c.pairs()[crop.index];
                let mut got = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, ch, y, x| a.clean.at(i, ch, y, x));
                if crop.flip_h {
                    got = got.flip_horizontal();
                }
                if crop.flip_v {
                    got = got.flip_vertical();
                }
                assert_eq!(got, pair.clean.crop(crop.top, crop.left, 16, 16).unwrap());
                let d = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, ch, y, x| a.degraded.at(i, ch, y, x));
                assert_eq!(d, crop.apply(&pair.degraded, 16).unwrap());
            }
        }
    }

    #[test]
    fn corpus_rejects_small_or_mismatched() {
        let small = Pair {
            degraded: Tensor::zeros(Shape::new(1, 3, 8, 32)),
            clean: Tensor::zeros(Shape::new(1, 3, 8, 32)),
        };
        assert!(Corpus::new(vec![small], 16).is_err());
        let odd = Pair {
            degraded: Tensor::zeros(Shape::new(1, 3, 16, 16)),
            clean: Tensor::zeros(Shape::new(1, 3, 16, 32)),
        };
        assert!(Corpus::new(vec![odd], 16).is_err());
        assert!(Corpus::new(vec![], 16).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_final: 1e-3, ..Default::default() },
            TrainConfig { patch: 40, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let c = TrainConfig::from_config(&Config::parse("iterations = 5\nflip_augment = false\nclip_norm = 1.5\n").unwrap()).unwrap();
        assert_eq!((c.iterations, c.flip_augment, c.clip_norm), (5, false, Some(1.5)));
    }

    #[test]
    fn zero_iterations_keeps_parameters() {
        let mut m = Model::new(&ModelConfig::tiny(8), 3).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig { iterations: 0, patch: 16, ..Default::default() };
        let recs = train(&mut m, &cfg, &corpus(4, 16, 16), None, |_| {}).unwrap();
        assert!(recs.is_empty());
        for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn short_run_traces_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.mhnt");
        let mut m = Model::new(&ModelConfig::tiny(8), 5).unwrap();
        let cfg = TrainConfig { iterations: 4, batch: 1, patch: 16, checkpoint_every: 2, ..Default::default() };
        let mut lines = Vec::new();
        let recs = train(
            &mut m,
            &cfg,
            &corpus(6, 16, 32),
            Some(CheckpointPlan { path: &path, every: cfg.checkpoint_every }),
            |r| lines.push(r.to_string()),
        )
        .unwrap();
        assert_eq!(recs.len(), 4);
        assert!(lines[0].starts_with("step=0 lr=5.000000e-4 loss="), "{}", lines[0]);
        for (r, s) in recs.iter().enumerate() {
            assert_eq!(s.lr, cosine_lr(r, 4, 5e-4, 1e-7));
            assert!((s.psnr + s.loss).abs() < 1e-3);
        }
        assert!(path.exists());
        assert!(dir.path().join("run.mhnt.prev").exists());
        let loaded = crate::io::load_checkpoint(&path, None).unwrap();
        assert!(loaded.params.iter().all(|(_, t)| t.is_finite()));
    }
}
