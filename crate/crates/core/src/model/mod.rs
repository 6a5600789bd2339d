//! LDC-Unet and the DRUNet-style baseline.

mod checkpoint;
mod enhance;
mod network;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{ContextGate, Depthwise, Dsc, LrBlock, Pointwise};
use crate::nn::{Grads, Params, Real, Tensor};

pub use checkpoint::CHECKPOINT_FORMAT_VERSION;
pub use enhance::{enhance, EnhanceOptions};
use network::{BlockKind, Layout, NetSaved, Network};

fn contract(msg: impl Into<String>) -> Error {
    Error::contract("model", msg)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdcUnetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub scales: usize,
    pub base_channels: Vec<usize>,
    pub blocks_per_scale: usize,
    pub context_reduction: usize,
    pub residual_output: bool,
    /// Start with a zero head so the untrained network is the identity on RGB.
    pub zero_init_head: bool,
}

impl Default for LdcUnetConfig {
    fn default() -> Self {
        LdcUnetConfig {
            in_channels: 4,
            out_channels: 3,
            scales: 4,
            base_channels: vec![64, 128, 256, 512],
            blocks_per_scale: 2,
            context_reduction: 8,
            residual_output: true,
            zero_init_head: true,
        }
    }
}

/// Checks shared by both architectures.
fn validate_common(in_c: usize, out_c: usize, channels: &[usize], blocks: usize, residual: bool) -> Result<()> {
    if channels.is_empty() || channels.contains(&0) {
        return Err(contract("channel widths must be nonempty and positive"));
    }
    if channels.len() > 12 {
        return Err(contract("at most 12 scales are supported"));
    }
    if blocks == 0 {
        return Err(contract("blocks per scale must be at least 1"));
    }
    if in_c == 0 || out_c == 0 {
        return Err(contract("channel counts must be positive"));
    }
    if residual && out_c > in_c {
        return Err(contract("residual output needs at least as many input channels as outputs"));
    }
    Ok(())
}

impl LdcUnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales != self.base_channels.len() {
            return Err(contract(format!(
                "scales ({}) must equal the number of base channels ({})",
                self.scales,
                self.base_channels.len()
            )));
        }
        validate_common(self.in_channels, self.out_channels, &self.base_channels, self.blocks_per_scale, self.residual_output)?;
        if self.context_reduction == 0 {
            return Err(contract("context reduction must be positive"));
        }
        if let Some(c) = self.base_channels.iter().find(|&&c| c % self.context_reduction != 0) {
            return Err(contract(format!("{c} channels not divisible by reduction {}", self.context_reduction)));
        }
        Ok(())
    }
}

/// DRUNet-style comparison network: plain residual blocks, no biases.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrunetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_scale: usize,
    pub bias: bool,
    pub residual_output: bool,
    pub zero_init_head: bool,
}

impl Default for DrunetConfig {
    fn default() -> Self {
        DrunetConfig {
            in_channels: 4,
            out_channels: 3,
            channels: vec![64, 128, 256, 512],
            blocks_per_scale: 4,
            bias: false,
            residual_output: true,
            zero_init_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    LdcUnet(LdcUnetConfig),
    Drunet(DrunetConfig),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::LdcUnet(c) => c.validate(),
            Architecture::Drunet(c) => {
                validate_common(c.in_channels, c.out_channels, &c.channels, c.blocks_per_scale, c.residual_output)
            }
        }
    }

    fn layout(&self) -> Layout<'_> {
        match self {
            Architecture::LdcUnet(c) => Layout {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                channels: &c.base_channels,
                blocks: c.blocks_per_scale,
                kind: BlockKind::Lr {
                    reduction: c.context_reduction,
                },
                bias: true,
                zero_head: c.zero_init_head,
                residual: c.residual_output,
            },
            Architecture::Drunet(c) => Layout {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                channels: &c.channels,
                blocks: c.blocks_per_scale,
                kind: BlockKind::Res,
                bias: c.bias,
                zero_head: c.zero_init_head,
                residual: c.residual_output,
            },
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layout().in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layout().out_channels
    }

    pub fn scales(&self) -> usize {
        self.layout().channels.len()
    }
}

/// A built network with its named weights.
pub struct ModelHandle {
    arch: Architecture,
    net: Network,
    params: Params<f32>,
    metadata: BTreeMap<String, String>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("arch", &self.arch)
            .field("param_count", &self.param_count())
            .finish()
    }
}

pub fn build_ldc_unet(cfg: &LdcUnetConfig, seed: u64) -> Result<ModelHandle> {
    ModelHandle::build(Architecture::LdcUnet(cfg.clone()), seed)
}

pub fn build_drunet_baseline(seed: u64) -> Result<ModelHandle> {
    ModelHandle::build(Architecture::Drunet(DrunetConfig::default()), seed)
}

/// Number of scalar weights and biases.
pub fn count_params(m: &ModelHandle) -> usize {
    m.param_count()
}

impl ModelHandle {
    pub fn build(arch: Architecture, seed: u64) -> Result<ModelHandle> {
        arch.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&arch.layout(), &mut params, &mut rng);
        Ok(ModelHandle {
            arch,
            net,
            params,
            metadata: BTreeMap::new(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<f32> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Spatial dimensions fed to [`ModelHandle::forward`] must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.net.multiple()
    }

    /// Zeroes the head so the model reproduces its RGB input.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(id) = self.params.find(name) {
                self.params.get_mut(id).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.size_multiple();
        if x.c != self.net.in_channels() {
            return Err(contract(format!("expected {} input channels, got {}", self.net.in_channels(), x.c)));
        }
        if x.n == 0 || x.h == 0 || x.w == 0 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return Err(contract(format!("input {}×{} must be nonempty multiples of {m}", x.h, x.w)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        Ok(self.net.forward(&self.params, x))
    }

    /// Forward with caches, in any precision, for training and gradient checks.
    pub fn forward_train<T: Real>(&self, p: &Params<T>, x: &Tensor<T>) -> Result<(Tensor<T>, TrainCache<T>)> {
        self.check_input(x)?;
        let (y, saved) = self.net.forward_train(p, x);
        Ok((y, TrainCache(saved)))
    }

    /// Accumulates gradients of the loss whose output gradient is `gy`.
    pub fn backward<T: Real>(&self, p: &Params<T>, cache: &TrainCache<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        self.net.backward(p, &cache.0, gy, grads)
    }

    /// Declared (name, shape) of every stage output for an `n×C×h×w` input.
    pub fn shape_program(&self, n: usize, h: usize, w: usize) -> Vec<(String, [usize; 4])> {
        let l = self.arch.layout();
        let s = l.channels.len();
        let mut out = vec![("input".to_string(), [n, l.in_channels, h, w]), ("stem".into(), [n, l.channels[0], h, w])];
        let at = |k: usize| [n, l.channels[k], h >> k, w >> k];
        for k in 0..s - 1 {
            for i in 0..l.blocks {
                out.push((format!("enc{k}.block{i}"), at(k)));
            }
            out.push((format!("down{k}"), at(k + 1)));
        }
        for i in 0..l.blocks {
            out.push((format!("enc{}.block{i}", s - 1), at(s - 1)));
        }
        for k in (0..s - 1).rev() {
            out.push((format!("up{k}"), at(k)));
            for i in 0..l.blocks {
                out.push((format!("dec{k}.block{i}"), at(k)));
            }
        }
        out.push(("head".into(), [n, l.out_channels, h, w]));
        out
    }
}

/// Opaque activations kept for the backward pass.
pub struct TrainCache<T>(NetSaved<T>);

impl<T> TrainCache<T> {
    /// Runtime (name, shape) of every stage output, comparable to
    /// [`ModelHandle::shape_program`].
    pub fn trace(&self) -> &[(String, [usize; 4])] {
        &self.0.trace
    }
}

/// Depthwise k×k (`depth_kernel` is `[C_in, 1, k, k]`) then pointwise
/// (`point_kernel` is `[C_out, C_in]`) convolution with optional biases.
pub fn dsc_forward<T: Real>(
    x: &Tensor<T>,
    depth_kernel: &[T],
    point_kernel: &[T],
    k: usize,
    biases: Option<(&[T], &[T])>,
) -> Result<Tensor<T>> {
    let cin = x.c;
    if k.is_multiple_of(2) {
        return Err(contract("depthwise kernel size must be odd"));
    }
    if depth_kernel.len() != cin * k * k {
        return Err(contract(format!("depth kernel has {} values, expected {}", depth_kernel.len(), cin * k * k)));
    }
    if point_kernel.is_empty() || !point_kernel.len().is_multiple_of(cin) {
        return Err(contract("point kernel must be C_out×C_in"));
    }
    let cout = point_kernel.len() / cin;
    let mut p = Params::new();
    let dw = p.add_zeros("depthwise.weight".into(), vec![cin, 1, k, k]);
    let pw = p.add_zeros("pointwise.weight".into(), vec![cout, cin, 1, 1]);
    p.get_mut(dw).copy_from_slice(depth_kernel);
    p.get_mut(pw).copy_from_slice(point_kernel);
    let (db, pb) = match biases {
        Some((bd, bp)) => {
            if bd.len() != cin || bp.len() != cout {
                return Err(contract("bias lengths must be C_in and C_out"));
            }
            let a = p.add_zeros("depthwise.bias".into(), vec![cin]);
            let b = p.add_zeros("pointwise.bias".into(), vec![cout]);
            p.get_mut(a).copy_from_slice(bd);
            p.get_mut(b).copy_from_slice(bp);
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let dsc = Dsc {
        depthwise: Depthwise {
            weight: dw,
            bias: db,
            c: cin,
            k,
        },
        pointwise: Pointwise {
            weight: pw,
            bias: pb,
            cin,
            cout,
        },
    };
    Ok(dsc.forward(&p, x).0)
}

/// Runs the LR block stored under `prefix` (e.g. `enc0.block1`) in `params`.
pub fn lr_block_forward<T: Real>(x: &Tensor<T>, params: &Params<T>, prefix: &str) -> Result<Tensor<T>> {
    let find = |suffix: &str, shape: &[usize]| {
        let name = format!("{prefix}.{suffix}");
        let id = params.find(&name).ok_or_else(|| contract(format!("missing parameter {name}")))?;
        let actual = params.shape(id);
        if actual != shape {
            return Err(contract(format!("{name} has shape {actual:?}, expected {shape:?}")));
        }
        Ok(id)
    };
    let c = x.c;
    let dsc = |n: &str| -> Result<Dsc> {
        Ok(Dsc {
            depthwise: Depthwise {
                weight: find(&format!("{n}.depthwise.weight"), &[c, 1, 3, 3])?,
                bias: Some(find(&format!("{n}.depthwise.bias"), &[c])?),
                c,
                k: 3,
            },
            pointwise: Pointwise {
                weight: find(&format!("{n}.pointwise.weight"), &[c, c, 1, 1])?,
                bias: Some(find(&format!("{n}.pointwise.bias"), &[c])?),
                cin: c,
                cout: c,
            },
        })
    };
    let fc1_b = params
        .find(&format!("{prefix}.gate.fc1.bias"))
        .ok_or_else(|| contract(format!("missing parameter {prefix}.gate.fc1.bias")))?;
    let hidden = params.get(fc1_b).len();
    let block = LrBlock {
        dsc1: dsc("dsc1")?,
        dsc2: dsc("dsc2")?,
        gate: ContextGate {
            fc1_w: find("gate.fc1.weight", &[hidden, c])?,
            fc1_b,
            fc2_w: find("gate.fc2.weight", &[c, hidden])?,
            fc2_b: find("gate.fc2.bias", &[c])?,
            c,
            hidden,
        },
    };
    Ok(block.forward(params, x).0)
}
