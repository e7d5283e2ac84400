//! Selective multi-head attention across channels, plus the closed-form
//! cost expressions for spatial self-attention and for the selective
//! channel variant.
//!
//! Each head attends over its `d = C / heads` channels: the score matrix is
//! `d × d`, formed from `H·W`-long channel rows of the projected query and
//! key. Scores are divided by a learnable per-head `β`, entries below the
//! threshold `t` are dropped from the softmax, and the surviving
//! probabilities mix the value rows.

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, ConvKind, Init, ParamId, ParameterStore};
use crate::tensor::{Scalar, Shape, Tape, Var};

/// Threshold that keeps every score.
pub const NO_SELECTION: f64 = f64::NEG_INFINITY;

/// 1×1 projection followed by a 3×3 depth-wise convolution.
#[derive(Clone, Debug)]
pub struct Projection {
    pub pointwise: Conv,
    pub depthwise: Conv,
}

impl Projection {
    fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        Projection {
            pointwise: Conv::pointwise(init, &format!("{name}.pw"), c, c),
            depthwise: Conv::new(init, &format!("{name}.dw"), ConvKind::Depthwise3x3, c, c),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.pointwise.forward(tape, p, x)?;
        self.depthwise.forward(tape, p, &y)
    }
}

#[derive(Clone, Debug)]
pub struct Smam {
    pub width: usize,
    pub heads: usize,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Conv,
    /// Per-head scale, shape `1×heads×1×1`, initialized to one.
    pub beta: ParamId,
    /// Selection threshold; a fixed hyperparameter.
    pub threshold: f64,
}

impl Smam {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, heads: usize, threshold: f64) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Smam {
            width,
            heads,
            q: Projection::new(init, &format!("{name}.q"), width),
            k: Projection::new(init, &format!("{name}.k"), width),
            v: Projection::new(init, &format!("{name}.v"), width),
            out: Conv::pointwise(init, &format!("{name}.out"), width, width),
            beta: init.vector(&format!("{name}.beta"), heads, 1.0),
            threshold,
        })
    }

    /// Attention probabilities, shape `N×heads×d×d`, for input `f`.
    pub fn attention<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, f: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if f.shape().c != self.width {
            return Err(Error::shape(
                "smam",
                format!("input {} into attention of width {}", f.shape(), self.width),
            ));
        }
        let q = self.q.forward(tape, p, f)?;
        let k = self.k.forward(tape, p, f)?;
        let v = self.v.forward(tape, p, f)?;
        let scores = tape.channel_gram(&q, &k, self.heads)?;
        let scores = tape.head_div(&scores, &p[self.beta])?;
        let probs = tape.select_softmax(&scores, T::from_f64(self.threshold))?;
        Ok((probs, v))
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, f: &Var<T>) -> Result<Var<T>> {
        let (probs, v) = self.attention(tape, p, f)?;
        let mixed = tape.attend(&probs, &v, self.heads)?;
        self.out.forward(tape, p, &mixed)
    }

    /// Scales learned `β` back above the floor after an optimizer step.
    pub fn clamp_beta<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        let floor = T::from_f64(crate::tensor::ops::BETA_FLOOR);
        for b in store.get_mut(self.beta).data_mut() {
            *b = b.max(floor);
        }
    }
}

/// Multiply-accumulate count of global spatial self-attention over an
/// `h×w` map with `c` channels: `4hwC² + 2(hw)²C`.
pub fn msa_macs(h: u64, w: u64, c: u64) -> u64 {
    let hw = h * w;
    4 * hw * c * c + 2 * hw * hw * c
}

/// Multiply-accumulate count of selective channel attention: `5hwC² + hwC`.
pub fn smam_macs(h: u64, w: u64, c: u64) -> u64 {
    let hw = h * w;
    5 * hw * c * c + hw * c
}

/// Number of scores that survive threshold `t`.
pub fn survivor_count<T: Scalar>(scores: &crate::tensor::Tensor<T>, t: f64) -> usize {
    crate::tensor::ops::selection_mask(scores, T::from_f64(t))
        .into_iter()
        .filter(|&k| k)
        .count()
}

/// Shape of the per-head score matrix for an input of shape `s`.
pub fn score_shape(s: Shape, heads: usize) -> Shape {
    Shape::new(s.n, heads, s.c / heads, s.c / heads)
}
