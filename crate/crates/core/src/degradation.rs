//! Synthetic degradations for building paired training and evaluation data:
//! additive rain streaks, motion blur and Gaussian noise.
//!
//! Every random draw comes from a `ChaCha8Rng` seeded with the spec's seed,
//! so a `(spec, seed)` pair always yields the same output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::Config;
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAX_KERNEL: usize = 31;

#[derive(Clone, Debug, PartialEq)]
pub struct RainSpec {
    pub streak_count: usize,
    pub length_px: f64,
    pub angle_deg: f64,
    pub jitter_deg: f64,
    pub intensity: f64,
}

impl Default for RainSpec {
    fn default() -> Self {
        RainSpec {
            streak_count: 200,
            length_px: 12.0,
            angle_deg: 75.0,
            jitter_deg: 10.0,
            intensity: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    Linear,
    RandomWalk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurSpec {
    pub kernel_size: usize,
    pub trajectory: Trajectory,
    /// Segment length in pixels (linear) or number of steps (random walk).
    pub length: f64,
    /// Segment direction for the linear trajectory.
    pub angle_deg: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        BlurSpec {
            kernel_size: 15,
            trajectory: Trajectory::RandomWalk,
            length: 12.0,
            angle_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    Rain(RainSpec),
    MotionBlur(BlurSpec),
    /// Standard deviation on the `[0,1]` scale.
    Noise(f64),
    /// Stages applied in order, sharing one random stream.
    Compose(Vec<Degradation>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradeSpec {
    pub kind: Degradation,
    pub seed: u64,
}

/// Additive layer of `streak_count` anti-aliased line segments with values
/// in `[0,1]`.
pub fn rain_streaks<R: Rng + ?Sized>(spec: &RainSpec, h: usize, w: usize, rng: &mut R) -> Tensor<f64> {
    let mut layer = vec![0.0f64; h * w];
    for _ in 0..spec.streak_count {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let jitter = if spec.jitter_deg > 0.0 {
            rng.random_range(-spec.jitter_deg..=spec.jitter_deg)
        } else {
            0.0
        };
        let a = (spec.angle_deg + jitter).to_radians();
        let (dx, dy) = (a.cos(), a.sin());
        let len = spec.length_px.max(0.0);
        let steps = (2.0 * len).ceil().max(1.0) as usize;
        let weight = spec.intensity * len.max(1.0) / steps as f64;
        for i in 0..steps {
            let t = (i as f64 + 0.5) / steps as f64 - 0.5;
            let (x, y) = (cx + t * len * dx - 0.5, cy + t * len * dy - 0.5);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let (px, py) = (x0 as i64 + ox, y0 as i64 + oy);
                    if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                        layer[py as usize * w + px as usize] += weight * wx * wy;
                    }
                }
            }
        }
    }
    for v in &mut layer {
        *v = v.min(1.0);
    }
    Tensor::new(Shape::new(1, 1, h, w), layer).expect("layer size")
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k.is_multiple_of(2) || k > MAX_KERNEL {
        return Err(Error::Invalid(format!(
            "blur kernel size {k} must be odd and at most {MAX_KERNEL}"
        )));
    }
    Ok(())
}

/// `k×k` row-major kernel with non-negative entries summing to one.
pub fn motion_blur_kernel<R: Rng + ?Sized>(spec: &BlurSpec, rng: &mut R) -> Result<Vec<f64>> {
    let k = spec.kernel_size;
    check_kernel_size(k)?;
    let r = (k / 2) as f64;
    let mut kernel = vec![0.0f64; k * k];
    let deposit = |x: f64, y: f64, kernel: &mut Vec<f64>| {
        let (ix, iy) = ((x + r).round(), (y + r).round());
        if ix >= 0.0 && iy >= 0.0 && ix < k as f64 && iy < k as f64 {
            kernel[iy as usize * k + ix as usize] += 1.0;
        }
    };
    match spec.trajectory {
        Trajectory::Linear => {
            let len = spec.length.max(0.0);
            if len == 0.0 {
                deposit(0.0, 0.0, &mut kernel);
            } else {
                // Box rasterization: each sample stands for an equal share of
                // the segment and lands in the cell containing it.
                let a = spec.angle_deg.to_radians();
                let (dx, dy) = (a.cos(), a.sin());
                let steps = 16 * len.ceil() as usize;
                for i in 0..steps {
                    let t = ((i as f64 + 0.5) / steps as f64 - 0.5) * len;
                    deposit(t * dx, t * dy, &mut kernel);
                }
            }
        }
        Trajectory::RandomWalk => {
            let (mut x, mut y) = (0i64, 0i64);
            let lim = (k / 2) as i64;
            deposit(0.0, 0.0, &mut kernel);
            for _ in 0..spec.length.max(0.0).round() as usize {
                x = (x + rng.random_range(-1..=1)).clamp(-lim, lim);
                y = (y + rng.random_range(-1..=1)).clamp(-lim, lim);
                deposit(x as f64, y as f64, &mut kernel);
            }
        }
    }
    let total: f64 = kernel.iter().sum();
    if total == 0.0 {
        kernel[(k / 2) * k + k / 2] = 1.0;
    } else {
        kernel.iter_mut().for_each(|v| *v /= total);
    }
    Ok(kernel)
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Correlates every plane with `kernel`, reflecting at the borders.
pub fn blur<T: Scalar>(img: &Tensor<T>, kernel: &[f64], k: usize) -> Tensor<T> {
    let s = img.shape();
    let r = (k / 2) as i64;
    Tensor::from_fn(s, |n, c, y, x| {
        let plane = img.plane(n, c);
        let mut acc = 0.0;
        for a in 0..k {
            let yy = reflect(y as i64 + a as i64 - r, s.h);
            for b in 0..k {
                let kv = kernel[a * k + b];
                if kv != 0.0 {
                    let xx = reflect(x as i64 + b as i64 - r, s.w);
                    acc += kv * plane[yy * s.w + xx].as_f64();
                }
            }
        }
        T::from_f64(acc)
    })
}

/// Seeded standard-normal deviates scaled by `sigma`.
pub fn gaussian_noise<R: Rng + ?Sized>(sigma: f64, shape: Shape, rng: &mut R) -> Tensor<f64> {
    if sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let data = (0..shape.numel())
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("noise size")
}

fn apply_stage<T: Scalar>(d: &Degradation, img: Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let s = img.shape();
    Ok(match d {
        Degradation::Rain(spec) => {
            let mut out = img;
            for n in 0..s.n {
                let layer = rain_streaks(spec, s.h, s.w, rng);
                for c in 0..s.c {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            let v = out.at(n, c, y, x).as_f64() + layer.at(0, 0, y, x);
                            out.set(n, c, y, x, T::from_f64(v));
                        }
                    }
                }
            }
            out
        }
        Degradation::MotionBlur(spec) => {
            let mut planes = Vec::with_capacity(s.n);
            for n in 0..s.n {
                let kernel = motion_blur_kernel(spec, rng)?;
                let one = Tensor::from_fn(Shape::new(1, s.c, s.h, s.w), |_, c, y, x| img.at(n, c, y, x));
                planes.push(blur(&one, &kernel, spec.kernel_size));
            }
            Tensor::stack(&planes)?
        }
        Degradation::Noise(sigma) => {
            if *sigma < 0.0 || !sigma.is_finite() {
                return Err(Error::Invalid(format!("noise sigma {sigma} must be finite and >= 0")));
            }
            let noise = gaussian_noise(*sigma, s, rng);
            let mut out = img;
            for (o, z) in out.data_mut().iter_mut().zip(noise.data()) {
                *o = T::from_f64(o.as_f64() + z);
            }
            out
        }
        Degradation::Compose(stages) => {
            let mut out = img;
            for st in stages {
                out = apply_stage(st, out, rng)?;
            }
            out
        }
    })
}

/// Degrades a clean `[0,1]` image; the result is clamped to `[0,1]`.
pub fn apply<T: Scalar>(spec: &DegradeSpec, clean: &Tensor<T>) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = apply_stage(&spec.kind, clean.clone(), &mut rng)?;
    Ok(out.map(|v| v.max(T::zero()).min(T::one())))
}

impl DegradeSpec {
    pub const KEYS: [&'static str; 13] = [
        "kind",
        "stages",
        "seed",
        "rain.count",
        "rain.length",
        "rain.angle",
        "rain.jitter",
        "rain.intensity",
        "blur.kernel",
        "blur.trajectory",
        "blur.length",
        "blur.angle",
        "noise.sigma",
    ];

    fn stage(cfg: &Config, kind: &str) -> Result<Degradation> {
        Ok(match kind {
            "rain" => {
                let d = RainSpec::default();
                Degradation::Rain(RainSpec {
                    streak_count: cfg.get_or("rain.count", d.streak_count)?,
                    length_px: cfg.get_or("rain.length", d.length_px)?,
                    angle_deg: cfg.get_or("rain.angle", d.angle_deg)?,
                    jitter_deg: cfg.get_or("rain.jitter", d.jitter_deg)?,
                    intensity: cfg.get_or("rain.intensity", d.intensity)?,
                })
            }
            "motion_blur" => {
                let d = BlurSpec::default();
                let trajectory = match cfg.raw("blur.trajectory").unwrap_or("random_walk") {
                    "linear" => Trajectory::Linear,
                    "random_walk" => Trajectory::RandomWalk,
                    t => return Err(Error::Config(format!("unknown blur trajectory '{t}'"))),
                };
                let spec = BlurSpec {
                    kernel_size: cfg.get_or("blur.kernel", d.kernel_size)?,
                    trajectory,
                    length: cfg.get_or("blur.length", d.length)?,
                    angle_deg: cfg.get_or("blur.angle", d.angle_deg)?,
                };
                check_kernel_size(spec.kernel_size).map_err(|e| Error::Config(e.to_string()))?;
                Degradation::MotionBlur(spec)
            }
            "noise" => Degradation::Noise(cfg.get_or("noise.sigma", 0.02)?),
            other => return Err(Error::Config(format!("unknown degradation kind '{other}'"))),
        })
    }

    /// Reads a spec from configuration keys. `kind = compose` takes its
    /// stage list from `stages = rain,noise`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.check_known(&Self::KEYS)?;
        let kind: String = cfg.require("kind")?;
        let kind = if kind == "compose" {
            let stages: Vec<String> = cfg
                .get_list("stages")?
                .ok_or_else(|| Error::Config("compose needs 'stages'".into()))?;
            Degradation::Compose(stages.iter().map(|s| Self::stage(cfg, s)).collect::<Result<_>>()?)
        } else {
            Self::stage(cfg, &kind)?
        };
        Ok(DegradeSpec {
            kind,
            seed: cfg.get_or("seed", 0)?,
        })
    }
}
