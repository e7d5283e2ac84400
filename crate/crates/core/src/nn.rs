//! Parameter storage, convolution and normalization layers, and the gated
//! convolution block (simple gate + simplified channel attention) that the
//! rest of the network is assembled from.

use std::ops::Index;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered learnable arrays. Insertion order is the serialization
/// order of a checkpoint.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T: Scalar = f32> {
    entries: Vec<(String, Rc<Tensor<T>>)>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, Rc::new(value)));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    /// Mutable access; copies the tensor first if a forward pass still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.entries[id.0].1)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), &**t))
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Rc::new(t.cast::<U>())))
                .collect(),
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let current = self.get(id).shape();
        if value.shape() != current {
            return Err(Error::shape(
                "ParameterStore::set",
                format!("{} expects {current}, got {}", self.name(id), value.shape()),
            ));
        }
        self.entries[id.0].1 = Rc::new(value);
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape<T>, requires_grad: bool) -> Bound<T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf_shared(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Parameters bound to one tape, indexable by [`ParamId`].
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Wraps variables laid out in store order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T: Scalar> Index<ParamId> for Bound<T> {
    type Output = Var<T>;
    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Registers parameters with the initialization rules used throughout the
/// network: conv weights uniform in `±1/√fan_in`, biases zero, norm gains one.
pub struct Init<'a> {
    pub store: &'a mut ParameterStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: Shape, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: Shape, value: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn scalar(&mut self, name: &str, value: f32) -> ParamId {
        self.constant(name.to_string(), Shape::scalar(), value)
    }

    pub fn vector(&mut self, name: &str, len: usize, value: f32) -> ParamId {
        self.constant(name.to_string(), Shape::vector(len), value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// 1×1 convolution.
    Pointwise,
    /// 3×3 depth-wise convolution, zero padding 1.
    Depthwise3x3,
    /// Dense 3×3 convolution, zero padding 1.
    Full3x3,
    /// 2×2 stride-2 convolution without bias.
    Down2x2,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new(init: &mut Init<'_>, name: &str, kind: ConvKind, cin: usize, cout: usize) -> Self {
        let (shape, fan_in, bias) = match kind {
            ConvKind::Pointwise => (Shape::new(cout, cin, 1, 1), cin, true),
            ConvKind::Depthwise3x3 => {
                assert_eq!(cin, cout, "depth-wise conv keeps the channel count");
                (Shape::new(cout, 1, 3, 3), 9, true)
            }
            ConvKind::Full3x3 => (Shape::new(cout, cin, 3, 3), cin * 9, true),
            ConvKind::Down2x2 => (Shape::new(cout, cin, 2, 2), cin * 4, false),
        };
        let weight = init.uniform(format!("{name}.weight"), shape, fan_in);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), Shape::vector(cout), 0.0));
        Conv {
            kind,
            cin,
            cout,
            weight,
            bias,
        }
    }

    pub fn pointwise(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, ConvKind::Pointwise, cin, cout)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = &p[self.weight];
        let b = self.bias.map(|b| &p[b]);
        match self.kind {
            ConvKind::Pointwise => tape.conv2d_1x1(x, w, b),
            ConvKind::Depthwise3x3 => tape.dwconv2d_3x3(x, w, b),
            ConvKind::Full3x3 => tape.conv2d_3x3(x, w, b),
            ConvKind::Down2x2 => tape.downsample(x, w),
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Channel-axis layer normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub width: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize) -> Self {
        LayerNorm {
            width,
            gamma: init.vector(&format!("{name}.gamma"), width, 1.0),
            beta: init.vector(&format!("{name}.beta"), width, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.layer_norm_channel(x, &p[self.gamma], &p[self.beta], T::from_f64(LAYER_NORM_EPS))
    }
}

/// Splits channels in half and multiplies the halves.
pub fn simple_gate<T: Scalar>(tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let (a, b) = tape.split_channels_half(x)?;
    tape.mul(&a, &b)
}

/// Simplified channel attention: rescales each channel by a 1×1 projection
/// of the globally pooled descriptor.
pub fn sca<T: Scalar>(tape: &Tape<T>, proj: &Conv, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
    let pooled = tape.gap(x)?;
    let gate = proj.forward(tape, p, &pooled)?;
    tape.mul(x, &gate)
}

/// Nonlinear-activation-free block. Both branches expand to twice the width
/// before a simple gate folds them back:
///
/// ```text
/// x1 = x  + pw2(SCA(SG(dw(pw1(LN1(x))))))
/// y  = x1 + ffn2(SG(ffn1(LN2(x1))))
/// ```
#[derive(Clone, Debug)]
pub struct NafBlock {
    pub width: usize,
    pub ln1: LayerNorm,
    pub pw1: Conv,
    pub dw: Conv,
    pub sca_proj: Conv,
    pub pw2: Conv,
    pub ln2: LayerNorm,
    pub ffn1: Conv,
    pub ffn2: Conv,
}

impl NafBlock {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize) -> Self {
        let c = width;
        NafBlock {
            width,
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), c),
            pw1: Conv::pointwise(init, &format!("{name}.pw1"), c, 2 * c),
            dw: Conv::new(init, &format!("{name}.dw"), ConvKind::Depthwise3x3, 2 * c, 2 * c),
            sca_proj: Conv::pointwise(init, &format!("{name}.sca"), c, c),
            pw2: Conv::pointwise(init, &format!("{name}.pw2"), c, c),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), c),
            ffn1: Conv::pointwise(init, &format!("{name}.ffn1"), c, 2 * c),
            ffn2: Conv::pointwise(init, &format!("{name}.ffn2"), c, c),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.width {
            return Err(Error::shape(
                "naf_block",
                format!("input {} into block of width {}", x.shape(), self.width),
            ));
        }
        let y = self.ln1.forward(tape, p, x)?;
        let y = self.pw1.forward(tape, p, &y)?;
        let y = self.dw.forward(tape, p, &y)?;
        let y = simple_gate(tape, &y)?;
        let y = sca(tape, &self.sca_proj, p, &y)?;
        let y = self.pw2.forward(tape, p, &y)?;
        let x1 = tape.add(x, &y)?;

        let z = self.ln2.forward(tape, p, &x1)?;
        let z = self.ffn1.forward(tape, p, &z)?;
        let z = simple_gate(tape, &z)?;
        let z = self.ffn2.forward(tape, p, &z)?;
        tape.add(&x1, &z)
    }

    /// Zeroes both output projections, turning the block into the identity.
    pub fn zero_output_projections<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        self.pw2.zero(store);
        self.ffn2.zero(store);
    }
}

/// Parameter count of a [`NafBlock`] of width `c`, in closed form.
pub fn naf_block_param_count(c: usize) -> usize {
    let ln = 2 * c;
    let pw1 = 2 * c * c + 2 * c;
    let dw = 2 * c * 9 + 2 * c;
    let square = c * c + c;
    let ffn1 = 2 * c * c + 2 * c;
    2 * ln + pw1 + dw + 3 * square + ffn1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck_inputs, GradcheckOptions};
    use rand::SeedableRng;

    fn block(width: usize, seed: u64) -> (NafBlock, ParameterStore<f32>) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = NafBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "b", width);
        (b, store)
    }

    fn randomize(store: &mut ParameterStore<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape();
            store.set(id, Tensor::rand_uniform(s, -0.5, 0.5, &mut rng)).unwrap();
        }
    }

    fn rnd(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn simple_gate_cases() {
        let tape = Tape::<f64>::no_grad();
        let ones = tape.constant(Tensor::ones(Shape::new(1, 4, 2, 2)));
        assert!(simple_gate(&tape, &ones).unwrap().value().data().iter().all(|&v| v == 1.0));

        let x = tape.constant(Tensor::from_f64_slice(Shape::new(1, 2, 1, 1), &[2.0, 3.0]).unwrap());
        assert_eq!(simple_gate(&tape, &x).unwrap().value().data(), &[6.0]);

        let x = rnd(Shape::new(1, 3, 2, 2), 1);
        let z = Tensor::zeros(x.shape());
        let xz = tape.concat_channels(&[&tape.constant(x.clone()), &tape.constant(z)]).unwrap();
        assert!(simple_gate(&tape, &xz).unwrap().value().data().iter().all(|&v| v == 0.0));

        let xo = tape.concat_channels(&[&tape.constant(x.clone()), &tape.constant(Tensor::ones(x.shape()))]).unwrap();
        assert_eq!(simple_gate(&tape, &xo).unwrap().value(), &x);

        let odd = tape.constant(Tensor::ones(Shape::new(1, 3, 1, 1)));
        assert!(simple_gate(&tape, &odd).is_err());
    }

    #[test]
    fn sca_closed_forms() {
        let mut store = ParameterStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = Conv::pointwise(&mut Init { store: &mut store, rng: &mut rng }, "p", 2, 2);
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, _, _| if c == 0 { 1.5f32 } else { -2.0 });

        store.set(proj.weight, Tensor::from_fn(Shape::new(2, 2, 1, 1), |o, i, _, _| (o == i) as u8 as f32)).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let y = sca(&tape, &proj, &p, &tape.constant(x.clone())).unwrap();
        assert!(y.value().plane(0, 0).iter().all(|&v| v == 2.25));
        assert!(y.value().plane(0, 1).iter().all(|&v| v == 4.0));

        proj.zero(&mut store);
        store.set(proj.bias.unwrap(), Tensor::ones(Shape::vector(2))).unwrap();
        let p = store.bind(&tape, false);
        let y = sca(&tape, &proj, &p, &tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);

        proj.zero(&mut store);
        let p = store.bind(&tape, false);
        let y = sca(&tape, &proj, &p, &tape.constant(x)).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naf_block_zero_projections_is_identity() {
        let (b, mut store) = block(4, 3);
        b.zero_output_projections(&mut store);
        let x = rnd(Shape::new(2, 4, 6, 6), 4).cast::<f32>();
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let y = b.forward(&tape, &p, &tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn naf_block_shapes_and_width_check() {
        for c in [2, 4, 8] {
            for hw in [4, 6] {
                let (b, store) = block(c, c as u64);
                let tape = Tape::no_grad();
                let p = store.bind(&tape, false);
                let x = tape.constant(Tensor::ones(Shape::new(1, c, hw, hw)));
                assert_eq!(b.forward(&tape, &p, &x).unwrap().shape(), x.shape());
            }
        }
        let (b, store) = block(4, 0);
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::ones(Shape::new(1, 6, 4, 4)));
        assert!(b.forward(&tape, &p, &x).is_err());
    }

    #[test]
    fn naf_block_param_count_matches_store() {
        for c in [2, 4, 32] {
            let (_, store) = block(c, 0);
            assert_eq!(store.numel(), naf_block_param_count(c));
        }
    }

    #[test]
    fn naf_block_gradcheck() {
        let (b, mut store) = block(4, 5);
        randomize(&mut store, 6);
        let params = store.cast::<f64>();
        let x = rnd(Shape::new(1, 4, 6, 6), 7);
        let mut inputs = vec![x];
        inputs.extend(params.iter().map(|(_, t)| t.clone()));
        let target = rnd(Shape::new(1, 4, 6, 6), 8);
        let report = gradcheck_inputs(
            |tape, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let y = b.forward(tape, &bound, &v[0])?;
                tape.psnr_loss(&y, &tape.constant(target.clone()))
            },
            &inputs,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn naf_block_has_no_activation_ops() {
        let (b, store) = block(4, 9);
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let x = tape.leaf(Tensor::ones(Shape::new(1, 4, 4, 4)), true);
        b.forward(&tape, &p, &x).unwrap();
        let allowed = [
            "leaf", "conv2d_1x1", "dwconv2d_3x3", "layer_norm_channel", "narrow_channels",
            "mul", "add", "gap",
        ];
        for op in tape.op_names() {
            assert!(allowed.contains(&op), "unexpected op {op}");
        }
    }
}
