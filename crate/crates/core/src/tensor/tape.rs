use std::cell::RefCell;
use std::rc::Rc;

use super::ops;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<Option<usize>>,
    shape: Shape,
    backward: Option<Backward<T>>,
}

/// A value flowing through a [`Tape`]. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar = f32> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    /// Whether the value is recorded on a tape.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Scalar value of a `1×1×1×1` variable.
    pub fn item(&self) -> T {
        self.value.data()[0]
    }
}

/// Records operations in execution order so that gradients can be pulled
/// back through them in strict reverse order.
///
/// A tape built with [`Tape::no_grad`] records nothing: intermediate values
/// are dropped as soon as their `Var`s go out of scope. Selection patterns
/// from thresholded softmax are logged either way, which is what the
/// finite-difference checker uses to detect kinks.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    selections: RefCell<Vec<u32>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            selections: RefCell::new(Vec::new()),
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Selection decisions made by thresholded softmax ops, in execution order.
    pub fn selection_log(&self) -> Vec<u32> {
        self.selections.borrow().clone()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.leaf_shared(Rc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let id = if requires_grad && self.grad_enabled {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: "leaf",
                inputs: Vec::new(),
                shape: value.shape(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var { id, value }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Var {
                id: None,
                value: Rc::new(value),
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            shape: value.shape(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.shape() != Shape::scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1x1x1, got {}", loss.shape()),
            ));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::Invalid("loss is not recorded on this tape".into()))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(Shape::scalar()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (input, gi) in node.inputs.iter().zip(backward(&g)) {
                let (Some(input), Some(gi)) = (input, gi) else {
                    continue;
                };
                debug_assert!(*input < id, "tape inputs must precede their consumers");
                match &mut grads[*input] {
                    Some(acc) => acc.axpy(T::one(), &gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.shape).collect();
        Ok(Gradients { grads, shapes })
    }

    // -- primitive ops ------------------------------------------------------

    pub fn conv2d_1x1(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = ops::conv2d_1x1(&x.value, &w.value, b.map(|b| &*b.value))?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let bshape = b.map(|b| b.shape());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record("conv2d_1x1", y, &inputs, move |g| {
            let (dx, dw, db) = ops::conv2d_1x1_backward(&xv, &wv, g);
            let mut out = vec![Some(dx), Some(dw)];
            if let Some(s) = bshape {
                out.push(Some(db.reshape(s).expect("bias size checked")));
            }
            out
        }))
    }

    pub fn dwconv2d_3x3(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = ops::dwconv2d_3x3(&x.value, &w.value, b.map(|b| &*b.value))?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let bshape = b.map(|b| b.shape());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record("dwconv2d_3x3", y, &inputs, move |g| {
            let (dx, dw, db) = ops::dwconv2d_3x3_backward(&xv, &wv, g);
            let mut out = vec![Some(dx), Some(dw)];
            if let Some(s) = bshape {
                out.push(Some(db.reshape(s).expect("bias size checked")));
            }
            out
        }))
    }

    pub fn conv2d_3x3(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = ops::conv2d_3x3(&x.value, &w.value, b.map(|b| &*b.value))?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let bshape = b.map(|b| b.shape());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record("conv2d_3x3", y, &inputs, move |g| {
            let (dx, dw, db) = ops::conv2d_3x3_backward(&xv, &wv, g);
            let mut out = vec![Some(dx), Some(dw)];
            if let Some(s) = bshape {
                out.push(Some(db.reshape(s).expect("bias size checked")));
            }
            out
        }))
    }

    pub fn downsample(&self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let y = ops::downsample(&x.value, &w.value)?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        Ok(self.record("downsample", y, &[x, w], move |g| {
            let (dx, dw) = ops::downsample_backward(&xv, &wv, g);
            vec![Some(dx), Some(dw)]
        }))
    }

    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let y = ops::pixel_shuffle(&x.value, r)?;
        Ok(self.record("pixel_shuffle", y, &[x], move |g| {
            vec![Some(ops::pixel_unshuffle(g, r).expect("shape fixed by forward"))]
        }))
    }

    pub fn gap(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = ops::gap(&x.value)?;
        let xs = x.shape();
        Ok(self.record("gap", y, &[x], move |g| vec![Some(ops::gap_backward(xs, g))]))
    }

    pub fn layer_norm_channel(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let y = ops::layer_norm_channel(&x.value, &gamma.value, &beta.value, eps)?;
        let (xv, gv) = (x.value.clone(), gamma.value.clone());
        let (gs, bs) = (gamma.shape(), beta.shape());
        Ok(self.record("layer_norm_channel", y, &[x, gamma, beta], move |g| {
            let (dx, dg, db) = ops::layer_norm_channel_backward(&xv, &gv, g, eps);
            vec![
                Some(dx),
                Some(dg.reshape(gs).expect("size checked")),
                Some(db.reshape(bs).expect("size checked")),
            ]
        }))
    }

    /// Softmax over the last axis with an explicit keep-mask.
    pub fn softmax_lastdim(&self, x: &Var<T>, mask: Option<&[bool]>) -> Result<Var<T>> {
        let (p, fallback) = ops::softmax_lastdim(&x.value, mask)?;
        if let Some(m) = mask {
            self.log_selection(m, &fallback);
        }
        let pv = Rc::new(p.clone());
        Ok(self.record("softmax_lastdim", p, &[x], move |g| vec![Some(ops::softmax_lastdim_backward(&pv, g))]))
    }

    /// Selection operator followed by masked softmax: scores below `t` are
    /// dropped from the normalization. `t = -inf` keeps every entry.
    pub fn select_softmax(&self, x: &Var<T>, t: T) -> Result<Var<T>> {
        let mask = ops::selection_mask(&x.value, t);
        self.softmax_lastdim(x, Some(&mask))
    }

    fn log_selection(&self, mask: &[bool], fallback: &[Option<usize>]) {
        let mut log = self.selections.borrow_mut();
        log.extend(mask.iter().map(|&m| m as u32));
        // fallback rows depend on which entry is the maximum
        log.extend(fallback.iter().map(|f| f.map_or(u32::MAX, |a| a as u32)));
    }

    pub fn group_softmax(&self, x: &Var<T>, groups: usize) -> Result<Var<T>> {
        let p = ops::group_softmax(&x.value, groups)?;
        let pv = Rc::new(p.clone());
        Ok(self.record("group_softmax", p, &[x], move |g| {
            vec![Some(ops::group_softmax_backward(&pv, g, groups))]
        }))
    }

    /// `a + b`, where `b` may also be an `N×C×1×1` descriptor or an `N×1×H×W`
    /// map. Either operand may be the broadcast one.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (a, b) = order_broadcast(a, b);
        let kind = ops::broadcast_kind("add", a.shape(), b.shape())?;
        let y = ops::add(&a.value, &b.value)?;
        Ok(self.record("add", y, &[a, b], move |g| {
            vec![Some(g.clone()), Some(ops::reduce_broadcast(g, kind))]
        }))
    }

    /// Elementwise product with the same broadcast rules as [`Tape::add`].
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (a, b) = order_broadcast(a, b);
        let kind = ops::broadcast_kind("mul", a.shape(), b.shape())?;
        let y = ops::mul(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record("mul", y, &[a, b], move |g| {
            let da = ops::mul_broadcast(g, &bv, kind);
            let db = ops::reduce_broadcast(&ops::mul(g, &av).expect("same shape"), kind);
            vec![Some(da), Some(db)]
        }))
    }

    pub fn add_n(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Invalid("add_n of zero terms".into()))?;
        let mut acc = (*first).clone();
        for p in rest {
            acc = self.add(&acc, p)?;
        }
        Ok(acc)
    }

    /// Multiplies by a `1×1×1×1` variable.
    pub fn scale(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.shape() != Shape::scalar() {
            return Err(Error::shape("scale", format!("scale factor must be 1x1x1x1, got {}", s.shape())));
        }
        let k = s.item();
        let y = x.value.map(|v| v * k);
        let xv = x.value.clone();
        Ok(self.record("scale", y, &[x, s], move |g| {
            let ds: T = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
            vec![Some(g.map(|v| v * k)), Some(Tensor::scalar(ds))]
        }))
    }

    pub fn scale_const(&self, x: &Var<T>, k: T) -> Var<T> {
        let y = x.value.map(|v| v * k);
        self.record("scale_const", y, &[x], move |g| vec![Some(g.map(|v| v * k))])
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let y = Tensor::scalar(x.value.sum());
        let xs = x.shape();
        self.record("sum", y, &[x], move |g| vec![Some(Tensor::full(xs, g.data()[0]))])
    }

    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &*v.value).collect();
        let y = ops::concat_channels(&tensors)?;
        let widths: Vec<usize> = parts.iter().map(|v| v.shape().c).collect();
        Ok(self.record("concat_channels", y, parts, move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&c| {
                    let piece = ops::narrow_channels(g, start, c).expect("widths from forward");
                    start += c;
                    Some(piece)
                })
                .collect()
        }))
    }

    pub fn narrow_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let y = ops::narrow_channels(&x.value, start, len)?;
        let xs = x.shape();
        Ok(self.record("narrow_channels", y, &[x], move |g| vec![Some(ops::narrow_backward(xs, g, start))]))
    }

    pub fn split_channels_half(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let c = x.shape().c;
        if !c.is_multiple_of(2) {
            return Err(Error::shape("split_channels_half", format!("odd channel count {c}")));
        }
        Ok((self.narrow_channels(x, 0, c / 2)?, self.narrow_channels(x, c / 2, c / 2)?))
    }

    pub fn channel_gram(&self, q: &Var<T>, k: &Var<T>, heads: usize) -> Result<Var<T>> {
        let y = ops::channel_gram(&q.value, &k.value, heads)?;
        let (qv, kv) = (q.value.clone(), k.value.clone());
        Ok(self.record("channel_gram", y, &[q, k], move |g| {
            let (dq, dk) = ops::channel_gram_backward(&qv, &kv, g, heads);
            vec![Some(dq), Some(dk)]
        }))
    }

    pub fn attend(&self, a: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
        let y = ops::attend(&a.value, &v.value, heads)?;
        let (av, vv) = (a.value.clone(), v.value.clone());
        Ok(self.record("attend", y, &[a, v], move |g| {
            let (da, dv) = ops::attend_backward(&av, &vv, g, heads);
            vec![Some(da), Some(dv)]
        }))
    }

    pub fn head_div(&self, s: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let y = ops::head_div(&s.value, &beta.value)?;
        let (sv, bv) = (s.value.clone(), beta.value.clone());
        Ok(self.record("head_div", y, &[s, beta], move |g| {
            let (ds, db) = ops::head_div_backward(&sv, &bv, g);
            vec![Some(ds), Some(db)]
        }))
    }

    /// `10·log10(MSE(pred, target) + ε)`; gradient flows into `pred` only.
    pub fn psnr_loss(&self, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let l = ops::psnr_loss(&pred.value, &target.value)?;
        let (pv, tv) = (pred.value.clone(), target.value.clone());
        Ok(self.record("psnr_loss", Tensor::scalar(l), &[pred, target], move |g| {
            let dp = ops::psnr_loss_backward(&pv, &tv, g.data()[0]);
            let dt = dp.map(|v| -v);
            vec![Some(dp), Some(dt)]
        }))
    }
}

/// Puts the broadcast operand (if any) second.
fn order_broadcast<'a, T: Scalar>(a: &'a Var<T>, b: &'a Var<T>) -> (&'a Var<T>, &'a Var<T>) {
    if a.value.numel() < b.value.numel() {
        (b, a)
    } else {
        (a, b)
    }
}

/// Gradients from one backward sweep, indexed by recorded variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`. Tracked variables the loss does not
    /// depend on get zeros; untracked variables get `None`.
    pub fn get(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.id?;
        Some(
            self.grads
                .get(id)?
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[id])),
        )
    }
}
