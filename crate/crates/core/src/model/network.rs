//! U-Net skeleton shared by LDC-Unet and the DRUNet-style baseline.

use rand::Rng;

use crate::nn::layers::{Conv2d, Down2, LrBlock, LrSaved, ResBlock, ResSaved, Up2};
use crate::nn::{Grads, Params, Real, Tensor};

pub(crate) enum Block {
    Lr(LrBlock),
    Res(ResBlock),
}

pub(crate) enum BlockSaved<T> {
    Lr(LrSaved<T>),
    Res(ResSaved<T>),
}

impl Block {
    fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, BlockSaved<T>) {
        match self {
            Block::Lr(b) => {
                let (y, s) = b.forward(p, x);
                (y, BlockSaved::Lr(s))
            }
            Block::Res(b) => {
                let (y, s) = b.forward(p, x);
                (y, BlockSaved::Res(s))
            }
        }
    }

    fn backward<T: Real>(&self, p: &Params<T>, s: &BlockSaved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        match (self, s) {
            (Block::Lr(b), BlockSaved::Lr(s)) => b.backward(p, s, gy, g),
            (Block::Res(b), BlockSaved::Res(s)) => b.backward(p, s, gy, g),
            _ => unreachable!("block/cache kind mismatch"),
        }
    }
}

/// Which residual block fills each stage.
#[derive(Clone, Copy, Debug)]
pub(crate) enum BlockKind {
    Lr { reduction: usize },
    Res,
}

pub(crate) struct Layout<'a> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels: &'a [usize],
    pub blocks: usize,
    pub kind: BlockKind,
    pub bias: bool,
    pub zero_head: bool,
    pub residual: bool,
}

pub(crate) struct Network {
    stem: Conv2d,
    enc: Vec<Vec<Block>>,
    downs: Vec<Down2>,
    bottleneck: Vec<Block>,
    ups: Vec<Up2>,
    dec: Vec<Vec<Block>>,
    head: Conv2d,
    residual: bool,
    out_channels: usize,
    pub(crate) scales: usize,
}

pub(crate) struct NetSaved<T> {
    stem: crate::nn::layers::Saved<T>,
    enc: Vec<Vec<BlockSaved<T>>>,
    downs: Vec<crate::nn::layers::Saved<T>>,
    bottleneck: Vec<BlockSaved<T>>,
    ups: Vec<crate::nn::layers::Saved<T>>,
    dec: Vec<Vec<BlockSaved<T>>>,
    head: crate::nn::layers::Saved<T>,
    pub(crate) trace: Vec<(String, [usize; 4])>,
}

fn stage<T: Real>(p: &mut Params<T>, prefix: &str, c: usize, l: &Layout, rng: &mut impl Rng) -> Vec<Block> {
    (0..l.blocks)
        .map(|i| {
            let name = format!("{prefix}.block{i}");
            match l.kind {
                BlockKind::Lr { reduction } => Block::Lr(LrBlock::new(p, &name, c, reduction, rng)),
                BlockKind::Res => Block::Res(ResBlock::new(p, &name, c, l.bias, rng)),
            }
        })
        .collect()
}

impl Network {
    pub(crate) fn build<T: Real>(l: &Layout, p: &mut Params<T>, rng: &mut impl Rng) -> Network {
        let s = l.channels.len();
        let ch = l.channels;
        let stem = Conv2d::new(p, "stem", l.in_channels, ch[0], 3, l.bias, 1.0, rng);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for k in 0..s - 1 {
            enc.push(stage(p, &format!("enc{k}"), ch[k], l, rng));
            downs.push(Down2::new(p, &format!("down{k}"), ch[k], ch[k + 1], l.bias, rng));
        }
        let bottleneck = stage(p, &format!("enc{}", s - 1), ch[s - 1], l, rng);
        let mut ups: Vec<Up2> = Vec::new();
        let mut dec = Vec::new();
        for k in (0..s - 1).rev() {
            ups.push(Up2::new(p, &format!("up{k}"), ch[k + 1], ch[k], l.bias, rng));
            dec.push(stage(p, &format!("dec{k}"), ch[k], l, rng));
        }
        ups.reverse();
        dec.reverse();
        let head_gain = if l.zero_head { 0.0 } else { 1.0 };
        let head = Conv2d::new(p, "head", ch[0], l.out_channels, 3, l.bias, head_gain, rng);
        Network {
            stem,
            enc,
            downs,
            bottleneck,
            ups,
            dec,
            head,
            residual: l.residual,
            out_channels: l.out_channels,
            scales: s,
        }
    }

    pub(crate) fn in_channels(&self) -> usize {
        self.stem.cin
    }

    /// Spatial sizes must be divisible by this.
    pub(crate) fn multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub(crate) fn forward_train<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, NetSaved<T>) {
        let m = self.multiple();
        assert!(x.h.is_multiple_of(m) && x.w.is_multiple_of(m), "input {}×{} not divisible by {m}", x.h, x.w);
        assert_eq!(x.c, self.in_channels(), "network input channels");
        let mut trace = vec![("input".to_string(), x.shape())];
        let run = |blocks: &[Block], mut h: Tensor<T>, name: &str, trace: &mut Vec<(String, [usize; 4])>| {
            let mut saved = Vec::with_capacity(blocks.len());
            for (i, b) in blocks.iter().enumerate() {
                let (y, s) = b.forward(p, &h);
                trace.push((format!("{name}.block{i}"), y.shape()));
                saved.push(s);
                h = y;
            }
            (h, saved)
        };
        let (mut h, stem) = self.stem.forward(p, x);
        trace.push(("stem".into(), h.shape()));
        let mut skips = Vec::new();
        let (mut enc, mut downs) = (Vec::new(), Vec::new());
        for k in 0..self.scales - 1 {
            let (y, s) = run(&self.enc[k], h, &format!("enc{k}"), &mut trace);
            enc.push(s);
            let (d, sd) = self.downs[k].forward(p, &y);
            trace.push((format!("down{k}"), d.shape()));
            downs.push(sd);
            skips.push(y);
            h = d;
        }
        let (mut h2, bottleneck) = run(&self.bottleneck, h, &format!("enc{}", self.scales - 1), &mut trace);
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for k in (0..self.scales - 1).rev() {
            let (mut u, su) = self.ups[k].forward(p, &h2);
            trace.push((format!("up{k}"), u.shape()));
            ups.push(su);
            u.add_assign(&skips[k]);
            let (y, s) = run(&self.dec[k], u, &format!("dec{k}"), &mut trace);
            dec.push(s);
            h2 = y;
        }
        ups.reverse();
        dec.reverse();
        let (mut y, head) = self.head.forward(p, &h2);
        if self.residual {
            y.add_assign(&x.channels_prefix(self.out_channels));
        }
        trace.push(("head".into(), y.shape()));
        (
            y,
            NetSaved {
                stem,
                enc,
                downs,
                bottleneck,
                ups,
                dec,
                head,
                trace,
            },
        )
    }

    /// Forward pass that keeps no caches beyond the skip tensors.
    pub(crate) fn forward<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        let m = self.multiple();
        assert!(x.h.is_multiple_of(m) && x.w.is_multiple_of(m), "input {}×{} not divisible by {m}", x.h, x.w);
        let run = |blocks: &[Block], mut h: Tensor<T>| {
            for b in blocks {
                h = b.forward(p, &h).0;
            }
            h
        };
        let mut h = self.stem.forward(p, x).0;
        let mut skips = Vec::new();
        for k in 0..self.scales - 1 {
            let y = run(&self.enc[k], h);
            h = self.downs[k].forward(p, &y).0;
            skips.push(y);
        }
        h = run(&self.bottleneck, h);
        for k in (0..self.scales - 1).rev() {
            let mut u = self.ups[k].forward(p, &h).0;
            u.add_assign(&skips[k]);
            h = run(&self.dec[k], u);
        }
        let mut y = self.head.forward(p, &h).0;
        if self.residual {
            y.add_assign(&x.channels_prefix(self.out_channels));
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub(crate) fn backward<T: Real>(&self, p: &Params<T>, s: &NetSaved<T>, gy: &Tensor<T>, g: &mut Grads<T>) -> Tensor<T> {
        let back_run = |blocks: &[Block], saved: &[BlockSaved<T>], mut gh: Tensor<T>, g: &mut Grads<T>| {
            for (b, sv) in blocks.iter().zip(saved).rev() {
                gh = b.backward(p, sv, &gh, g);
            }
            gh
        };
        let mut gh = self.head.backward(p, &s.head, gy, g);
        let mut skip_grads = Vec::with_capacity(self.scales - 1);
        // decoder stages run coarse→fine forward, so fine→coarse here
        for k in 0..self.scales - 1 {
            let gu = back_run(&self.dec[k], &s.dec[k], gh, g);
            gh = self.ups[k].backward(p, &s.ups[k], &gu, g);
            skip_grads.push(gu);
        }
        gh = back_run(&self.bottleneck, &s.bottleneck, gh, g);
        for k in (0..self.scales - 1).rev() {
            let mut gd = self.downs[k].backward(p, &s.downs[k], &gh, g);
            gd.add_assign(&skip_grads[k]);
            gh = back_run(&self.enc[k], &s.enc[k], gd, g);
        }
        let mut gx = self.stem.backward(p, &s.stem, &gh, g);
        if self.residual {
            let hw = gy.hw();
            for i in 0..gy.n {
                let dst = &mut gx.sample_mut(i)[..self.out_channels * hw];
                for (a, &b) in dst.iter_mut().zip(gy.sample(i)) {
                    *a += b;
                }
            }
        }
        gx
    }
}
