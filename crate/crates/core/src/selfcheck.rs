//! Finite-difference gradient checks of every differentiable building
//! block, from single ops up to a small full network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Smam;
use crate::error::{Error, Result};
use crate::model::{Affm, Model, ModelConfig};
use crate::nn::{sca, simple_gate, Bound, Conv, Init, NafBlock, ParamId, ParameterStore};
use crate::tensor::{gradcheck_inputs, GradcheckOptions, GradcheckReport, Scalar, Shape, Tape, Tensor, Var};

/// Relative error every check must stay below.
pub const TOLERANCE: f64 = 1e-4;

fn rnd<T: Scalar>(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

fn build<M>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> M) -> (M, ParameterStore<f32>) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Init { store: &mut store, rng: &mut rng });
    (m, store)
}

/// Uniform `±amp` everywhere, except the listed ids which are drawn from `[0.5, 1.5]`.
fn randomize(store: &mut ParameterStore<f32>, seed: u64, amp: f64, positive: &[ParamId]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let s = store.get(id).shape();
        let t = if positive.contains(&id) {
            Tensor::rand_uniform(s, 0.5, 1.5, &mut rng)
        } else {
            Tensor::rand_uniform(s, -amp, amp, &mut rng)
        };
        store.set(id, t)?;
    }
    Ok(())
}

/// `mean(y ⊙ r)` for a fixed random `r`.
fn project(tape: &Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = rnd::<f64>(y.shape(), seed, -1.0, 1.0);
    let k = 1.0 / r.numel() as f64;
    Ok(tape.scale_const(&tape.sum(&tape.mul(y, &tape.constant(r))?), k))
}

fn check_fn(
    data: Vec<Tensor<f64>>,
    store: Option<&ParameterStore<f32>>,
    max_coords: Option<usize>,
    seed: u64,
    f: impl Fn(&Tape<f64>, &Bound<f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<GradcheckReport> {
    let k = data.len();
    let mut inputs = data;
    if let Some(s) = store {
        inputs.extend(s.cast::<f64>().iter().map(|(_, t)| t.clone()));
    }
    let opts = GradcheckOptions { max_coords, seed, ..Default::default() };
    gradcheck_inputs(
        |tape, v| {
            let b = Bound::from_vars(v[k..].to_vec());
            f(tape, &b, &v[..k])
        },
        &inputs,
        &opts,
    )
}

type Case = Box<dyn Fn(u64) -> Result<GradcheckReport>>;

fn cases() -> Vec<(&'static str, Case)> {
    let none: Option<&ParameterStore<f32>> = None;
    vec![
        (
            "conv2d_1x1",
            Box::new(move |s| {
                let data = vec![
                    rnd(Shape::new(2, 3, 4, 5), s, -1.0, 1.0),
                    rnd(Shape::new(4, 3, 1, 1), s + 1, -1.0, 1.0),
                    rnd(Shape::vector(4), s + 2, -1.0, 1.0),
                ];
                check_fn(data, none, None, s, |t, _, v| project(t, &t.conv2d_1x1(&v[0], &v[1], Some(&v[2]))?, s))
            }),
        ),
        (
            "dwconv2d_3x3",
            Box::new(move |s| {
                let data = vec![
                    rnd(Shape::new(2, 3, 5, 4), s, -1.0, 1.0),
                    rnd(Shape::new(3, 1, 3, 3), s + 1, -1.0, 1.0),
                    rnd(Shape::vector(3), s + 2, -1.0, 1.0),
                ];
                check_fn(data, none, None, s, |t, _, v| project(t, &t.dwconv2d_3x3(&v[0], &v[1], Some(&v[2]))?, s))
            }),
        ),
        (
            "downsample",
            Box::new(move |s| {
                let data = vec![
                    rnd(Shape::new(2, 3, 6, 4), s, -1.0, 1.0),
                    rnd(Shape::new(6, 3, 2, 2), s + 1, -1.0, 1.0),
                ];
                check_fn(data, none, None, s, |t, _, v| project(t, &t.downsample(&v[0], &v[1])?, s))
            }),
        ),
        (
            "pixel_shuffle",
            Box::new(move |s| {
                let data = vec![
                    rnd(Shape::new(1, 4, 3, 3), s, -1.0, 1.0),
                    rnd(Shape::new(8, 4, 1, 1), s + 1, -1.0, 1.0),
                    rnd(Shape::vector(8), s + 2, -1.0, 1.0),
                ];
                check_fn(data, none, None, s, |t, _, v| {
                    let y = t.conv2d_1x1(&v[0], &v[1], Some(&v[2]))?;
                    project(t, &t.pixel_shuffle(&y, 2)?, s)
                })
            }),
        ),
        (
            "layer_norm_channel",
            Box::new(move |s| {
                let data = vec![
                    rnd(Shape::new(2, 5, 3, 3), s, -2.0, 2.0),
                    rnd(Shape::vector(5), s + 1, 0.5, 1.5),
                    rnd(Shape::vector(5), s + 2, -1.0, 1.0),
                ];
                check_fn(data, none, None, s, |t, _, v| {
                    project(t, &t.layer_norm_channel(&v[0], &v[1], &v[2], 1e-6)?, s)
                })
            }),
        ),
        (
            "softmax",
            Box::new(move |s| {
                let data = vec![rnd(Shape::new(2, 2, 4, 4), s, -2.0, 2.0)];
                check_fn(data, none, None, s, |t, _, v| project(t, &t.softmax_lastdim(&v[0], None)?, s))
            }),
        ),
        (
            "masked_softmax",
            Box::new(move |s| {
                let data = vec![rnd(Shape::new(2, 2, 4, 4), s, -2.0, 2.0)];
                check_fn(data, none, None, s, |t, _, v| project(t, &t.select_softmax(&v[0], 0.0)?, s))
            }),
        ),
        (
            "simple_gate",
            Box::new(move |s| {
                let data = vec![rnd(Shape::new(2, 6, 3, 3), s, -1.0, 1.0)];
                check_fn(data, none, None, s, |t, _, v| project(t, &simple_gate(t, &v[0])?, s))
            }),
        ),
        (
            "sca",
            Box::new(move |s| {
                let (proj, mut store) = build(s, |i| Conv::pointwise(i, "sca", 4, 4));
                randomize(&mut store, s + 1, 0.5, &[])?;
                let data = vec![rnd(Shape::new(2, 4, 3, 3), s + 2, -1.0, 1.0)];
                check_fn(data, Some(&store), None, s, |t, p, v| project(t, &sca(t, &proj, p, &v[0])?, s))
            }),
        ),
        (
            "naf_block",
            Box::new(move |s| {
                let (b, mut store) = build(s, |i| NafBlock::new(i, "b", 4));
                randomize(&mut store, s + 1, 0.5, &[])?;
                let data = vec![rnd(Shape::new(1, 4, 4, 4), s + 2, -1.0, 1.0)];
                check_fn(data, Some(&store), None, s, |t, p, v| project(t, &b.forward(t, p, &v[0])?, s))
            }),
        ),
        (
            "smam",
            Box::new(move |s| {
                let (m, mut store) = build(s, |i| Smam::new(i, "a", 8, 2, 0.0));
                let m = m?;
                randomize(&mut store, s + 1, 0.5, &[m.beta])?;
                let data = vec![rnd(Shape::new(1, 8, 4, 4), s + 2, -1.0, 1.0)];
                check_fn(data, Some(&store), None, s, |t, p, v| project(t, &m.forward(t, p, &v[0])?, s))
            }),
        ),
        (
            "affm",
            Box::new(move |s| {
                let (f, mut store) = build(s, |i| Affm::new(i, "f", 8, 1));
                randomize(&mut store, s + 1, 0.5, &[])?;
                let data = vec![
                    rnd(Shape::new(1, 8, 4, 4), s + 2, -1.0, 1.0),
                    rnd(Shape::new(1, 16, 2, 2), s + 3, -1.0, 1.0),
                    rnd(Shape::new(1, 16, 2, 2), s + 4, -1.0, 1.0),
                ];
                check_fn(data, Some(&store), None, s, |t, p, v| project(t, &f.forward(t, p, &v[0], &v[1], &v[2])?, s))
            }),
        ),
        (
            "mhnet",
            Box::new(move |s| {
                let mut m = Model::new(&ModelConfig::tiny(8), s)?;
                let betas: Vec<ParamId> = m.net.encdec.middle.iter().map(|b| b.attn.beta).collect();
                randomize(&mut m.params, s + 1, 0.3, &betas)?;
                let data = vec![rnd(Shape::new(1, 3, 16, 16), s + 2, 0.0, 1.0)];
                let net = m.net.clone();
                check_fn(data, Some(&m.params), Some(200), s, move |t, p, v| project(t, &net.forward(t, p, &v[0])?, s))
            }),
        ),
        (
            "psnr_loss",
            Box::new(move |s| {
                let data = vec![
                    rnd(Shape::new(2, 3, 4, 4), s, 0.0, 1.0),
                    rnd(Shape::new(2, 3, 4, 4), s + 1, 0.0, 1.0),
                ];
                check_fn(data, none, None, s, |t, _, v| t.psnr_loss(&v[0], &v[1]))
            }),
        ),
    ]
}

/// Names accepted by [`run`].
pub fn names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs `trials` seeded checks of each selected block. `only` picks a single
/// block by name.
pub fn run(only: Option<&str>, trials: u64) -> Result<Vec<(&'static str, GradcheckReport)>> {
    let selected: Vec<_> = cases().into_iter().filter(|(n, _)| only.is_none_or(|o| o == *n)).collect();
    if selected.is_empty() {
        return Err(Error::Invalid(format!(
            "unknown gradcheck module {:?}; expected one of {}",
            only.unwrap_or_default(),
            names().join(", ")
        )));
    }
    let mut out = Vec::new();
    for (name, case) in selected {
        for trial in 0..trials {
            out.push((name, case(1000 + 17 * trial)?));
        }
    }
    Ok(out)
}
