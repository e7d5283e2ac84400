//! Analytic parameter and multiply-accumulate accounting.
//!
//! Counting rules: a convolution costs `Cout·Cin·k²·Hout·Wout` MACs
//! (`C·k²·Hout·Wout` when depth-wise); normalization, gating, residual
//! additions, pooling, softmax and branch weighting cost one MAC per output
//! element; the selective attention core costs `5hwC² + hwC`, which covers
//! its point-wise projections. Data movement (pixel shuffle, concatenation,
//! channel splits) is free.

use std::fmt::Write as _;

use crate::attention::{msa_macs, smam_macs, Smam};
use crate::error::{Error, Result};
use crate::model::{Affm, MhNet, MiddleBlock, LEVELS, SIZE_MULTIPLE};
use crate::nn::{Conv, ConvKind, LayerNorm, NafBlock};

pub const CSV_HEADER: &str = "layer,name,params,macs";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Spatial self-attention cost at the bottleneck, for comparison.
    pub bottleneck_msa_macs: u64,
    pub bottleneck_smam_macs: u64,
}

pub fn conv_params(c: &Conv) -> u64 {
    let (cin, cout) = (c.cin as u64, c.cout as u64);
    let weights = match c.kind {
        ConvKind::Pointwise => cout * cin,
        ConvKind::Depthwise3x3 => cout * 9,
        ConvKind::Full3x3 => cout * cin * 9,
        ConvKind::Down2x2 => cout * cin * 4,
    };
    weights + if c.bias.is_some() { cout } else { 0 }
}

/// MACs of `c` applied to an `h×w` input.
pub fn conv_macs(c: &Conv, h: usize, w: usize) -> u64 {
    let (cin, cout) = (c.cin as u64, c.cout as u64);
    let p = (h * w) as u64;
    match c.kind {
        ConvKind::Pointwise => cout * cin * p,
        ConvKind::Depthwise3x3 => cout * 9 * p,
        ConvKind::Full3x3 => cout * cin * 9 * p,
        ConvKind::Down2x2 => cout * cin * 4 * (p / 4),
    }
}

struct Ledger {
    layers: Vec<LayerCost>,
}

impl Ledger {
    fn push(&mut self, name: impl Into<String>, params: u64, macs: u64) {
        self.layers.push(LayerCost {
            name: name.into(),
            params,
            macs,
        });
    }

    fn conv(&mut self, name: &str, c: &Conv, h: usize, w: usize) {
        self.push(name, conv_params(c), conv_macs(c, h, w));
    }

    fn norm(&mut self, name: &str, n: &LayerNorm, p: u64) {
        self.push(name, 2 * n.width as u64, n.width as u64 * p);
    }

    fn naf_block(&mut self, name: &str, b: &NafBlock, h: usize, w: usize) {
        let c = b.width as u64;
        let p = (h * w) as u64;
        self.norm(&format!("{name}.ln1"), &b.ln1, p);
        self.conv(&format!("{name}.pw1"), &b.pw1, h, w);
        self.conv(&format!("{name}.dw"), &b.dw, h, w);
        self.conv(&format!("{name}.sca"), &b.sca_proj, 1, 1);
        self.conv(&format!("{name}.pw2"), &b.pw2, h, w);
        self.norm(&format!("{name}.ln2"), &b.ln2, p);
        self.conv(&format!("{name}.ffn1"), &b.ffn1, h, w);
        self.conv(&format!("{name}.ffn2"), &b.ffn2, h, w);
        // two gates, pooling, channel rescale, two residual additions
        self.push(format!("{name}.ops"), 0, 6 * c * p);
    }

    fn smam(&mut self, name: &str, a: &Smam, h: usize, w: usize) {
        for (tag, proj) in [("q", &a.q), ("k", &a.k), ("v", &a.v)] {
            self.push(format!("{name}.{tag}.pw"), conv_params(&proj.pointwise), 0);
            self.conv(&format!("{name}.{tag}.dw"), &proj.depthwise, h, w);
        }
        self.push(format!("{name}.out"), conv_params(&a.out), 0);
        self.push(format!("{name}.beta"), a.heads as u64, 0);
        self.push(format!("{name}.core"), 0, smam_macs(h as u64, w as u64, a.width as u64));
    }

    fn middle(&mut self, name: &str, m: &MiddleBlock, h: usize, w: usize) {
        let p = (h * w) as u64;
        self.norm(&format!("{name}.norm"), &m.norm, p);
        self.smam(&format!("{name}.attn"), &m.attn, h, w);
        self.push(format!("{name}.ops"), 0, m.attn.width as u64 * p);
    }

    fn affm(&mut self, name: &str, f: &Affm, h: usize, w: usize) {
        let c = f.width as u64;
        let p = (h * w) as u64;
        self.conv(&format!("{name}.align_e"), &f.align_e, h, w);
        self.conv(&format!("{name}.align_d"), &f.align_d, h, w);
        self.conv(&format!("{name}.squeeze"), &f.squeeze, 1, 1);
        self.conv(&format!("{name}.expand_e"), &f.expand_e, 1, 1);
        self.conv(&format!("{name}.expand_d"), &f.expand_d, 1, 1);
        self.conv(&format!("{name}.expand_x"), &f.expand_x, 1, 1);
        // descriptor gate and branch softmax
        self.push(format!("{name}.select"), 0, c / 2 + 3 * c);
        // branch sum, pooling, weighting and weighted sum
        self.push(format!("{name}.ops"), 0, 8 * c * p);
    }
}

/// Per-layer costs of `net` on an `h×w` input.
pub fn emit_report(net: &MhNet, h: usize, w: usize) -> Result<ComplexityReport> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::shape(
            "complexity",
            format!("size {h}x{w} is not a multiple of {SIZE_MULTIPLE}"),
        ));
    }
    let cfg = &net.config;
    let c = cfg.width as u64;
    let p = (h * w) as u64;
    let mut l = Ledger { layers: Vec::new() };
    l.conv("head", &net.head, h, w);

    let ed = &net.encdec;
    for (i, level) in ed.enc.iter().enumerate() {
        let (lh, lw) = (h >> i, w >> i);
        for (j, b) in level.blocks.iter().enumerate() {
            l.naf_block(&format!("encdec.enc{i}.{j}"), b, lh, lw);
        }
        l.conv(&format!("encdec.down{i}"), &level.down, lh, lw);
    }
    let (bh, bw) = (h >> LEVELS, w >> LEVELS);
    for (i, m) in ed.middle.iter().enumerate() {
        l.middle(&format!("encdec.middle{i}"), m, bh, bw);
    }
    for (k, level) in ed.dec.iter().enumerate() {
        let shift = LEVELS - 1 - k;
        let (lh, lw) = (h >> shift, w >> shift);
        l.conv(&format!("encdec.up{k}"), &level.up, lh / 2, lw / 2);
        l.push(format!("encdec.skip{k}"), 0, (c << shift) * (lh * lw) as u64);
        for (j, b) in level.blocks.iter().enumerate() {
            l.naf_block(&format!("encdec.dec{k}.{j}"), b, lh, lw);
        }
    }

    l.conv("fuse", &net.fuse, h, w);
    for (i, (g, f)) in net.groups.iter().zip(&net.fusions).enumerate() {
        for (j, b) in g.blocks.iter().enumerate() {
            l.naf_block(&format!("nafg{i}.block.{j}"), b, h, w);
        }
        l.push(format!("nafg{i}.scale"), 1, 2 * c * p);
        l.affm(&format!("affm{i}"), f, h, w);
    }
    l.conv("tail", &net.tail, h, w);
    l.push("residual", 0, 3 * p);

    let total_params = l.layers.iter().map(|x| x.params).sum();
    let total_macs = l.layers.iter().map(|x| x.macs).sum();
    let wb = cfg.bottleneck_width() as u64;
    Ok(ComplexityReport {
        height: h,
        width: w,
        layers: l.layers,
        total_params,
        total_macs,
        bottleneck_msa_macs: msa_macs(bh as u64, bw as u64, wb),
        bottleneck_smam_macs: smam_macs(bh as u64, bw as u64, wb),
    })
}

pub fn count_params(net: &MhNet) -> u64 {
    emit_report(net, SIZE_MULTIPLE, SIZE_MULTIPLE)
        .expect("minimal size is valid")
        .total_params
}

pub fn count_macs(net: &MhNet, h: usize, w: usize) -> Result<u64> {
    Ok(emit_report(net, h, w)?.total_macs)
}

impl ComplexityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", l.name, l.params, l.macs);
        }
        out
    }

    /// Layers sorted by MACs, largest first.
    pub fn heaviest(&self, n: usize) -> Vec<&LayerCost> {
        let mut v: Vec<&LayerCost> = self.layers.iter().collect();
        v.sort_by(|a, b| b.macs.cmp(&a.macs).then_with(|| a.name.cmp(&b.name)));
        v.truncate(n);
        v
    }

    pub fn summary(&self) -> String {
        format!(
            "size={}x{} params={} ({:.2}M) macs={} ({:.2}G) bottleneck_msa_macs={} bottleneck_smam_macs={}",
            self.height,
            self.width,
            self.total_params,
            self.total_params as f64 / 1e6,
            self.total_macs,
            self.total_macs as f64 / 1e9,
            self.bottleneck_msa_macs,
            self.bottleneck_smam_macs
        )
    }
}
