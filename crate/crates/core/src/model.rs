//! The restoration network: a four-level encoder-decoder with a selective
//! attention bottleneck, followed by a full-resolution branch of gated
//! block groups that re-inject multi-scale encoder and decoder features
//! through adaptive fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Smam;
use crate::error::{Error, Result};
use crate::io::Config;
use crate::nn::{Bound, Conv, ConvKind, Init, LayerNorm, NafBlock, ParamId, ParameterStore};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

pub const LEVELS: usize = 4;

/// Spatial dimensions must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << LEVELS;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub enc_blocks: [usize; LEVELS],
    pub dec_blocks: [usize; LEVELS],
    pub middle_blocks: usize,
    pub heads: usize,
    pub nafg_count: usize,
    pub blocks_per_nafg: usize,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            enc_blocks: [1, 1, 1, 28],
            dec_blocks: [1, 1, 1, 1],
            middle_blocks: 1,
            heads: 8,
            nafg_count: LEVELS,
            blocks_per_nafg: 8,
            threshold: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn with_width(width: usize) -> Self {
        ModelConfig {
            width,
            ..Default::default()
        }
    }

    /// Small configuration used for fast tests and smoke runs.
    pub fn tiny(width: usize) -> Self {
        ModelConfig {
            width,
            enc_blocks: [1, 1, 1, 2],
            dec_blocks: [1, 1, 1, 1],
            middle_blocks: 1,
            heads: 8,
            nafg_count: LEVELS,
            blocks_per_nafg: 1,
            threshold: 0.0,
        }
    }

    /// Channel count of encoder level `l` (0-based).
    pub fn level_width(&self, l: usize) -> usize {
        self.width << l
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width << LEVELS
    }

    pub const KEYS: [&'static str; 8] = [
        "width",
        "enc_blocks",
        "dec_blocks",
        "middle_blocks",
        "heads",
        "nafg_count",
        "blocks_per_nafg",
        "threshold",
    ];

    /// Reads the model keys of `cfg`, falling back to defaults; other keys
    /// are ignored.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = ModelConfig::default();
        let levels = |key: &str, default: [usize; LEVELS]| -> Result<[usize; LEVELS]> {
            match cfg.get_list::<usize>(key)? {
                None => Ok(default),
                Some(v) => v
                    .try_into()
                    .map_err(|_| Error::Config(format!("'{key}' needs {LEVELS} entries"))),
            }
        };
        let c = ModelConfig {
            width: cfg.get_or("width", d.width)?,
            enc_blocks: levels("enc_blocks", d.enc_blocks)?,
            dec_blocks: levels("dec_blocks", d.dec_blocks)?,
            middle_blocks: cfg.get_or("middle_blocks", d.middle_blocks)?,
            heads: cfg.get_or("heads", d.heads)?,
            nafg_count: cfg.get_or("nafg_count", d.nafg_count)?,
            blocks_per_nafg: cfg.get_or("blocks_per_nafg", d.blocks_per_nafg)?,
            threshold: cfg.get_or("threshold", d.threshold)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_config(&self) -> Config {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut c = Config::default();
        c.set("width", self.width);
        c.set("enc_blocks", join(&self.enc_blocks));
        c.set("dec_blocks", join(&self.dec_blocks));
        c.set("middle_blocks", self.middle_blocks);
        c.set("heads", self.heads);
        c.set("nafg_count", self.nafg_count);
        c.set("blocks_per_nafg", self.blocks_per_nafg);
        c.set("threshold", self.threshold);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.nafg_count != LEVELS {
            return Err(Error::Config(format!(
                "nafg_count must be {LEVELS}, got {}",
                self.nafg_count
            )));
        }
        if self.width == 0 || !self.width.is_multiple_of(1 << (LEVELS - 1)) {
            return Err(Error::Config(format!(
                "width must be a positive multiple of {}, got {}",
                1 << (LEVELS - 1),
                self.width
            )));
        }
        if self.heads == 0 || !self.bottleneck_width().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "bottleneck width {} not divisible by {} heads",
                self.bottleneck_width(),
                self.heads
            )));
        }
        if self.threshold.is_nan() {
            return Err(Error::Config("threshold is NaN".into()));
        }
        Ok(())
    }
}

fn blocks(init: &mut Init<'_>, name: &str, width: usize, count: usize) -> Vec<NafBlock> {
    (0..count)
        .map(|i| NafBlock::new(init, &format!("{name}.{i}"), width))
        .collect()
}

fn run_blocks<T: Scalar>(blocks: &[NafBlock], tape: &Tape<T>, p: &Bound<T>, x: Var<T>) -> Result<Var<T>> {
    blocks.iter().try_fold(x, |x, b| b.forward(tape, p, &x))
}

/// `x + smam(LN(x))`.
#[derive(Clone, Debug)]
pub struct MiddleBlock {
    pub norm: LayerNorm,
    pub attn: Smam,
}

impl MiddleBlock {
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.norm.forward(tape, p, x)?;
        let y = self.attn.forward(tape, p, &y)?;
        tape.add(x, &y)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub blocks: Vec<NafBlock>,
    /// 2×2 stride-2 convolution doubling the width.
    pub down: Conv,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    /// 1×1 convolution to twice the width, followed by a ×2 pixel shuffle.
    pub up: Conv,
    pub blocks: Vec<NafBlock>,
}

/// Encoder outputs `enc[l]` (before downsampling, full resolution first) and
/// decoder outputs `dec[k]` (lowest resolution first, `dec[3]` at full
/// resolution).
#[derive(Clone, Debug)]
pub struct EncDecFeatures<T: Scalar> {
    pub enc: Vec<Var<T>>,
    pub dec: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub width: usize,
    pub enc: Vec<EncoderLevel>,
    pub middle: Vec<MiddleBlock>,
    pub dec: Vec<DecoderLevel>,
}

impl EncoderDecoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let enc = (0..LEVELS)
            .map(|l| {
                let c = cfg.level_width(l);
                EncoderLevel {
                    blocks: blocks(init, &format!("{name}.enc{l}"), c, cfg.enc_blocks[l]),
                    down: Conv::new(init, &format!("{name}.down{l}"), ConvKind::Down2x2, c, 2 * c),
                }
            })
            .collect();
        let wb = cfg.bottleneck_width();
        let middle = (0..cfg.middle_blocks)
            .map(|i| {
                Ok(MiddleBlock {
                    norm: LayerNorm::new(init, &format!("{name}.middle{i}.norm"), wb),
                    attn: Smam::new(init, &format!("{name}.middle{i}.attn"), wb, cfg.heads, cfg.threshold)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..LEVELS)
            .map(|k| {
                let l = LEVELS - 1 - k;
                let c = cfg.level_width(l);
                DecoderLevel {
                    up: Conv::pointwise(init, &format!("{name}.up{k}"), 2 * c, 4 * c),
                    blocks: blocks(init, &format!("{name}.dec{k}"), c, cfg.dec_blocks[k]),
                }
            })
            .collect();
        Ok(EncoderDecoder {
            width: cfg.width,
            enc,
            middle,
            dec,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        x0: &Var<T>,
    ) -> Result<(Var<T>, EncDecFeatures<T>)> {
        let s = x0.shape();
        if s.c != self.width {
            return Err(Error::shape(
                "encoder_decoder",
                format!("input {s} into width {}", self.width),
            ));
        }
        check_size(s)?;
        let mut enc = Vec::with_capacity(LEVELS);
        let mut x = x0.clone();
        for level in &self.enc {
            let e = run_blocks(&level.blocks, tape, p, x)?;
            x = level.down.forward(tape, p, &e)?;
            enc.push(e);
        }
        for m in &self.middle {
            x = m.forward(tape, p, &x)?;
        }
        let mut dec = Vec::with_capacity(LEVELS);
        for (k, level) in self.dec.iter().enumerate() {
            let up = level.up.forward(tape, p, &x)?;
            let up = tape.pixel_shuffle(&up, 2)?;
            let skip = tape.add(&up, &enc[LEVELS - 1 - k])?;
            x = run_blocks(&level.blocks, tape, p, skip)?;
            dec.push(x.clone());
        }
        Ok((x, EncDecFeatures { enc, dec }))
    }
}

fn check_size(s: Shape) -> Result<()> {
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(SIZE_MULTIPLE) || !s.w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::shape(
            "mhnet",
            format!("spatial size {}x{} is not a multiple of {SIZE_MULTIPLE}", s.h, s.w),
        ));
    }
    Ok(())
}

/// Group of gated blocks with an outer residual: `x + scale·chain(x)`, where
/// `scale` starts at zero.
#[derive(Clone, Debug)]
pub struct Nafg {
    pub blocks: Vec<NafBlock>,
    pub scale: ParamId,
}

impl Nafg {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, count: usize) -> Self {
        Nafg {
            blocks: blocks(init, &format!("{name}.block"), width, count),
            scale: init.scalar(&format!("{name}.scale"), 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let chain = run_blocks(&self.blocks, tape, p, x.clone())?;
        let chain = tape.scale(&chain, &p[self.scale])?;
        tape.add(x, &chain)
    }
}

/// Adaptive fusion of a full-resolution feature with one encoder and one
/// decoder feature of the same pyramid level.
#[derive(Clone, Debug)]
pub struct Affm {
    pub width: usize,
    /// Pixel-shuffle factor that brings the level back to full resolution.
    pub factor: usize,
    pub align_e: Conv,
    pub align_d: Conv,
    pub squeeze: Conv,
    pub expand_e: Conv,
    pub expand_d: Conv,
    pub expand_x: Conv,
}

/// Intermediate values of one fusion step.
pub struct AffmParts<T: Scalar> {
    pub e: Var<T>,
    pub d: Var<T>,
    /// Branch weights, `N×3C×1×1`: encoder, decoder, then the input branch.
    pub weights: Var<T>,
}

impl Affm {
    /// Fusion for pyramid level `l` (0 = full resolution).
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, l: usize) -> Self {
        let factor = 1 << l;
        let shuffled = (width << l) / (factor * factor);
        let c = width;
        Affm {
            width,
            factor,
            align_e: Conv::pointwise(init, &format!("{name}.align_e"), shuffled, c),
            align_d: Conv::pointwise(init, &format!("{name}.align_d"), shuffled, c),
            squeeze: Conv::pointwise(init, &format!("{name}.squeeze"), c, c),
            expand_e: Conv::pointwise(init, &format!("{name}.expand_e"), c / 2, c),
            expand_d: Conv::pointwise(init, &format!("{name}.expand_d"), c / 2, c),
            expand_x: Conv::pointwise(init, &format!("{name}.expand_x"), c / 2, c),
        }
    }

    fn lift<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, align: &Conv, f: &Var<T>, x: Shape) -> Result<Var<T>> {
        let s = f.shape();
        let want = Shape::new(x.n, self.width * self.factor, x.h / self.factor, x.w / self.factor);
        if s != want || !x.h.is_multiple_of(self.factor) || !x.w.is_multiple_of(self.factor) {
            return Err(Error::shape(
                "affm",
                format!("level feature {s} does not match {want} for input {x}"),
            ));
        }
        let y = tape.pixel_shuffle(f, self.factor)?;
        align.forward(tape, p, &y)
    }

    pub fn parts<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        x: &Var<T>,
        e: &Var<T>,
        d: &Var<T>,
    ) -> Result<AffmParts<T>> {
        let xs = x.shape();
        if xs.c != self.width {
            return Err(Error::shape("affm", format!("input {xs} into width {}", self.width)));
        }
        let e = self.lift(tape, p, &self.align_e, e, xs)?;
        let d = self.lift(tape, p, &self.align_d, d, xs)?;
        let sum = tape.add_n(&[x, &e, &d])?;
        let desc = tape.gap(&sum)?;
        let desc = self.squeeze.forward(tape, p, &desc)?;
        let desc = crate::nn::simple_gate(tape, &desc)?;
        let le = self.expand_e.forward(tape, p, &desc)?;
        let ld = self.expand_d.forward(tape, p, &desc)?;
        let lx = self.expand_x.forward(tape, p, &desc)?;
        let logits = tape.concat_channels(&[&le, &ld, &lx])?;
        let weights = tape.group_softmax(&logits, 3)?;
        Ok(AffmParts { e, d, weights })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        x: &Var<T>,
        e: &Var<T>,
        d: &Var<T>,
    ) -> Result<Var<T>> {
        let parts = self.parts(tape, p, x, e, d)?;
        let c = self.width;
        let we = tape.narrow_channels(&parts.weights, 0, c)?;
        let wd = tape.narrow_channels(&parts.weights, c, c)?;
        let wx = tape.narrow_channels(&parts.weights, 2 * c, c)?;
        let a = tape.mul(&parts.e, &we)?;
        let b = tape.mul(&parts.d, &wd)?;
        let z = tape.mul(x, &wx)?;
        tape.add_n(&[&a, &b, &z])
    }
}

/// Layer layout of the full network. Parameters live in a separate
/// [`ParameterStore`] so the same layout can run in either precision.
#[derive(Clone, Debug)]
pub struct MhNet {
    pub config: ModelConfig,
    pub head: Conv,
    pub encdec: EncoderDecoder,
    pub fuse: Conv,
    pub groups: Vec<Nafg>,
    pub fusions: Vec<Affm>,
    pub tail: Conv,
}

impl MhNet {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let head = Conv::new(init, "head", ConvKind::Full3x3, 3, c);
        let encdec = EncoderDecoder::new(init, "encdec", cfg)?;
        let fuse = Conv::pointwise(init, "fuse", 2 * c, c);
        let mut groups = Vec::with_capacity(LEVELS);
        let mut fusions = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            groups.push(Nafg::new(init, &format!("nafg{l}"), c, cfg.blocks_per_nafg));
            fusions.push(Affm::new(init, &format!("affm{l}"), c, l));
        }
        let tail = Conv::new(init, "tail", ConvKind::Full3x3, c, 3);
        Ok(MhNet {
            config: cfg.clone(),
            head,
            encdec,
            fuse,
            groups,
            fusions,
            tail,
        })
    }

    /// Output projections that start at zero.
    fn zero_init<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        for g in &self.groups {
            if let Some(last) = g.blocks.last() {
                last.zero_output_projections(store);
            }
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound<T>, img: &Var<T>) -> Result<Var<T>> {
        let s = img.shape();
        if s.c != 3 {
            return Err(Error::shape("mhnet", format!("expected 3 channels, got {s}")));
        }
        check_size(s)?;
        let x0 = self.head.forward(tape, p, img)?;
        let (d4, feats) = self.encdec.forward(tape, p, &x0)?;
        let mut x = self.fuse.forward(tape, p, &tape.concat_channels(&[&x0, &d4])?)?;
        for (l, (g, f)) in self.groups.iter().zip(&self.fusions).enumerate() {
            let y = g.forward(tape, p, &x)?;
            x = f.forward(tape, p, &y, &feats.enc[l], &feats.dec[LEVELS - 1 - l])?;
        }
        let r = self.tail.forward(tape, p, &x)?;
        tape.add(img, &r)
    }

    /// Keeps every attention `β` above its floor.
    pub fn clamp<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        for m in &self.encdec.middle {
            m.attn.clamp_beta(store);
        }
    }
}

/// A network together with its `f32` parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: MhNet,
    pub params: ParameterStore<f32>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MhNet::new(&mut Init { store: &mut params, rng: &mut rng }, cfg)?;
        net.zero_init(&mut params);
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Inference without gradient bookkeeping.
    pub fn restore(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(img.clone());
        let y = self.net.forward(&tape, &p, &x)?;
        Ok((*y.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck_inputs, GradcheckOptions};

    fn rnd<T: Scalar>(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, lo, hi, &mut rng)
    }

    fn randomize(store: &mut ParameterStore<f32>, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape();
            store.set(id, Tensor::rand_uniform(s, -amp, amp, &mut rng)).unwrap();
        }
    }

    fn with_init<R>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> R) -> (R, ParameterStore<f32>) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = f(&mut Init { store: &mut store, rng: &mut rng });
        (r, store)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::with_width(64).validate().is_ok());
        let bad = [
            ModelConfig { nafg_count: 2, ..ModelConfig::tiny(8) },
            ModelConfig { width: 4, ..ModelConfig::tiny(8) },
            ModelConfig { heads: 7, ..ModelConfig::tiny(8) },
            ModelConfig { threshold: f64::NAN, ..ModelConfig::tiny(8) },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn config_text_round_trip() {
        let c = ModelConfig { threshold: f64::NEG_INFINITY, ..ModelConfig::tiny(16) };
        assert_eq!(ModelConfig::from_config(&c.to_config()).unwrap(), c);
        let parsed = Config::parse("width = 64\nenc_blocks = 2,2,2,2\n").unwrap();
        let m = ModelConfig::from_config(&parsed).unwrap();
        assert_eq!((m.width, m.enc_blocks, m.heads), (64, [2; 4], 8));
        let short = Config::parse("enc_blocks = 1,1\n").unwrap();
        assert!(ModelConfig::from_config(&short).is_err());
    }

    #[test]
    fn encoder_decoder_shapes() {
        let cfg = ModelConfig { enc_blocks: [1, 1, 1, 1], ..ModelConfig::with_width(32) };
        let (ed, store) = with_init(1, |i| EncoderDecoder::new(i, "ed", &cfg).unwrap());
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let x0 = tape.constant(rnd::<f32>(Shape::new(1, 32, 64, 64), 2, -1.0, 1.0));
        let (d4, f) = ed.forward(&tape, &p, &x0).unwrap();
        assert_eq!(d4.shape(), x0.shape());
        let widths: Vec<usize> = f.enc.iter().map(|e| e.shape().c).collect();
        let sizes: Vec<usize> = f.enc.iter().map(|e| e.shape().h).collect();
        assert_eq!(widths, [32, 64, 128, 256]);
        assert_eq!(sizes, [64, 32, 16, 8]);
        for l in 0..LEVELS {
            assert_eq!(f.enc[l].shape(), f.dec[LEVELS - 1 - l].shape());
        }
    }

    #[test]
    fn encoder_decoder_rejects_bad_sizes() {
        let cfg = ModelConfig::tiny(8);
        let (ed, store) = with_init(1, |i| EncoderDecoder::new(i, "ed", &cfg).unwrap());
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        for (h, w) in [(24, 16), (16, 8), (0, 16)] {
            let x = tape.constant(Tensor::<f32>::zeros(Shape::new(1, 8, h, w)));
            assert!(matches!(ed.forward(&tape, &p, &x), Err(Error::Shape { .. })));
        }
    }

    #[test]
    fn encoder_decoder_identity_with_silent_branches() {
        let cfg = ModelConfig::tiny(8);
        let (ed, mut store) = with_init(3, |i| EncoderDecoder::new(i, "ed", &cfg).unwrap());
        for level in &ed.enc {
            level.blocks.iter().for_each(|b| b.zero_output_projections(&mut store));
        }
        for level in &ed.dec {
            level.blocks.iter().for_each(|b| b.zero_output_projections(&mut store));
            level.up.zero(&mut store);
        }
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let x0 = tape.constant(rnd::<f32>(Shape::new(1, 8, 32, 16), 4, -1.0, 1.0));
        let (d4, _) = ed.forward(&tape, &p, &x0).unwrap();
        assert_eq!(d4.value(), x0.value());
    }

    #[test]
    fn nafg_identity_at_init_and_definition() {
        let (g, mut store) = with_init(5, |i| Nafg::new(i, "g", 8, 2));
        let tape = Tape::no_grad();
        let x = tape.constant(rnd::<f32>(Shape::new(1, 8, 6, 6), 6, -1.0, 1.0));
        {
            let p = store.bind(&tape, false);
            assert_eq!(g.forward(&tape, &p, &x).unwrap().value(), x.value());
        }
        randomize(&mut store, 7, 0.3);
        let p = store.bind(&tape, false);
        let y = g.forward(&tape, &p, &x).unwrap();
        let s = store.get(g.scale).data()[0];
        let mut chain = x.clone();
        for b in &g.blocks {
            chain = b.forward(&tape, &p, &chain).unwrap();
        }
        let want = Tensor::from_fn(x.shape(), |n, c, h, w| x.value().at(n, c, h, w) + s * chain.value().at(n, c, h, w));
        assert!(y.value().max_abs_diff(&want).unwrap() < 1e-6);
        let wrong = tape.constant(Tensor::<f32>::zeros(Shape::new(1, 4, 6, 6)));
        assert!(g.forward(&tape, &p, &wrong).is_err());
    }

    fn affm_inputs(l: usize, c: usize, seed: u64) -> [Tensor<f32>; 3] {
        let s = 16;
        [
            rnd(Shape::new(2, c, s, s), seed, -1.0, 1.0),
            rnd(Shape::new(2, c << l, s >> l, s >> l), seed + 1, -1.0, 1.0),
            rnd(Shape::new(2, c << l, s >> l, s >> l), seed + 2, -1.0, 1.0),
        ]
    }

    #[test]
    fn affm_symmetric_branches_average() {
        for l in 0..LEVELS {
            let (f, mut store) = with_init(10 + l as u64, |i| Affm::new(i, "f", 8, l));
            randomize(&mut store, 20 + l as u64, 0.5);
            for a in [&f.expand_e, &f.expand_d] {
                let b = &f.expand_x;
                let w = store.get(b.weight).clone();
                store.set(a.weight, w).unwrap();
                let bias = store.get(b.bias.unwrap()).clone();
                store.set(a.bias.unwrap(), bias).unwrap();
            }
            let tape = Tape::no_grad();
            let p = store.bind(&tape, false);
            let [x, e, d] = affm_inputs(l, 8, 30).map(|t| tape.constant(t));
            let parts = f.parts(&tape, &p, &x, &e, &d).unwrap();
            assert!(parts.weights.value().data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-7));
            let y = f.forward(&tape, &p, &x, &e, &d).unwrap();
            let want = Tensor::from_fn(x.shape(), |n, c, h, w| {
                (parts.e.value().at(n, c, h, w) + parts.d.value().at(n, c, h, w) + x.value().at(n, c, h, w)) / 3.0
            });
            assert!(y.value().max_abs_diff(&want).unwrap() < 1e-5);
        }
    }

    #[test]
    fn affm_weights_on_simplex() {
        let (f, mut store) = with_init(40, |i| Affm::new(i, "f", 16, 2));
        randomize(&mut store, 41, 1.0);
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let [x, e, d] = affm_inputs(2, 16, 42).map(|t| tape.constant(t));
        let wv = f.parts(&tape, &p, &x, &e, &d).unwrap().weights;
        let w = wv.value();
        for n in 0..2 {
            for c in 0..16 {
                let ws = [w.at(n, c, 0, 0), w.at(n, 16 + c, 0, 0), w.at(n, 32 + c, 0, 0)];
                assert!(ws.iter().all(|&v| v >= 0.0));
                assert!((ws.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affm_saturated_input_branch() {
        let (f, mut store) = with_init(50, |i| Affm::new(i, "f", 8, 1));
        for conv in [&f.expand_e, &f.expand_d, &f.expand_x] {
            conv.zero(&mut store);
        }
        let b = f.expand_x.bias.unwrap();
        store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 50.0);
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let [x, e, d] = affm_inputs(1, 8, 51).map(|t| tape.constant(t));
        let y = f.forward(&tape, &p, &x, &e, &d).unwrap();
        assert!(y.value().max_abs_diff(x.value()).unwrap() < 1e-5);
    }

    #[test]
    fn affm_rejects_level_mismatch() {
        let (f, store) = with_init(60, |i| Affm::new(i, "f", 8, 2));
        let tape = Tape::no_grad();
        let p = store.bind(&tape, false);
        let [x, e, d] = affm_inputs(1, 8, 61).map(|t| tape.constant(t));
        assert!(matches!(f.forward(&tape, &p, &x, &e, &d), Err(Error::Shape { .. })));
    }

    #[test]
    fn global_residual_identity() {
        let mut m = Model::new(&ModelConfig::tiny(8), 70).unwrap();
        randomize(&mut m.params, 71, 0.3);
        m.net.tail.zero(&mut m.params);
        let img = rnd::<f32>(Shape::new(1, 3, 32, 16), 72, 0.0, 1.0);
        assert_eq!(m.restore(&img).unwrap(), img);
    }

    #[test]
    fn forward_shape_width_32() {
        let m = Model::new(&ModelConfig::with_width(32), 80).unwrap();
        let img = rnd::<f32>(Shape::new(1, 3, 64, 64), 81, 0.0, 1.0);
        let y = m.restore(&img).unwrap();
        assert_eq!(y.shape(), img.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = Model::new(&ModelConfig::tiny(8), 90).unwrap();
        for s in [Shape::new(1, 1, 16, 16), Shape::new(1, 3, 20, 16)] {
            assert!(m.restore(&Tensor::zeros(s)).is_err());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut m = Model::new(&ModelConfig::tiny(8), 100).unwrap();
        randomize(&mut m.params, 101, 0.3);
        let img = rnd::<f32>(Shape::new(2, 3, 32, 32), 102, 0.0, 1.0);
        let a = m.restore(&img).unwrap();
        let b = m.restore(&img).unwrap();
        assert_eq!(a.data(), b.data());
        let again = {
            let mut m2 = Model::new(&ModelConfig::tiny(8), 100).unwrap();
            randomize(&mut m2.params, 101, 0.3);
            m2.restore(&img).unwrap()
        };
        assert_eq!(a.data(), again.data());
    }

    #[test]
    fn full_model_gradcheck() {
        let mut m = Model::new(&ModelConfig::tiny(8), 110).unwrap();
        randomize(&mut m.params, 111, 0.3);
        let params = m.params.cast::<f64>();
        let img = rnd::<f64>(Shape::new(1, 3, 16, 16), 112, 0.0, 1.0);
        let target = rnd::<f64>(Shape::new(1, 3, 16, 16), 113, -1.0, 1.0);
        let mut inputs = vec![img];
        inputs.extend(params.iter().map(|(_, t)| t.clone()));
        let opts = GradcheckOptions { max_coords: Some(300), seed: 114, ..Default::default() };
        let net = &m.net;
        let r = gradcheck_inputs(
            |tape, v| {
                let b = Bound::from_vars(v[1..].to_vec());
                let y = net.forward(tape, &b, &v[0])?;
                let k = 1.0 / target.numel() as f64;
                Ok(tape.scale_const(&tape.sum(&tape.mul(&y, &tape.constant(target.clone()))?), k))
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
