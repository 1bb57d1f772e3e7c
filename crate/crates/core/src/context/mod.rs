//! Context modules placed between the backbone and the classifier.
//!
//! All modules share one channel plan: a backbone map with `backbone_ch`
//! channels goes in, a map with `out_ch` channels and the same spatial extent
//! comes out. Each reduction, fusion and projection convolution is followed by
//! batch normalization and ReLU.

mod asp;
mod base;
mod pyramid;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use asp::AspOc;
pub use base::BaseOc;
pub use pyramid::{pyramid_partition, PyramidOc, Region};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, join, Conv2d, ConvBnRelu, ConvGeometry, Mode, Parameterized, Slot,
};
use crate::ocp::{ObjectContextMap, OcpParams};
use crate::tensor::{concat_channels, Element, Tensor};

/// Channel counts at the module boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    /// Channels of the backbone output.
    pub backbone_ch: usize,
    /// Channels after the dimension-reduction convolution.
    pub mid_ch: usize,
    /// Channels of the module output.
    pub out_ch: usize,
}

impl ChannelPlan {
    pub const FULL: ChannelPlan = ChannelPlan {
        backbone_ch: 2048,
        mid_ch: 512,
        out_ch: 512,
    };

    pub const TOY: ChannelPlan = ChannelPlan {
        backbone_ch: 64,
        mid_ch: 16,
        out_ch: 16,
    };

    pub fn new(backbone_ch: usize, mid_ch: usize, out_ch: usize) -> Result<Self> {
        if backbone_ch == 0 || mid_ch == 0 || out_ch == 0 {
            return Err(Error::contract(format!(
                "channel plan ({backbone_ch}, {mid_ch}, {out_ch}) must be positive"
            )));
        }
        Ok(ChannelPlan {
            backbone_ch,
            mid_ch,
            out_ch,
        })
    }

    /// Key/query width used when none is configured: half the module output.
    pub fn default_key_ch(&self) -> usize {
        (self.out_ch / 2).max(1)
    }
}

/// Which context module sits on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    /// A single 3×3 convolution, no context aggregation.
    Baseline,
    /// Image-level average pooling concatenated to the local features.
    GlobalPool,
    BaseOc,
    PyramidOc,
    AspOc,
}

impl ContextKind {
    pub const ALL: [ContextKind; 5] = [
        ContextKind::Baseline,
        ContextKind::GlobalPool,
        ContextKind::BaseOc,
        ContextKind::PyramidOc,
        ContextKind::AspOc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ContextKind::Baseline => "baseline",
            ContextKind::GlobalPool => "gp",
            ContextKind::BaseOc => "base-oc",
            ContextKind::PyramidOc => "pyramid-oc",
            ContextKind::AspOc => "asp-oc",
        }
    }

    pub fn has_object_context(&self) -> bool {
        matches!(
            self,
            ContextKind::BaseOc | ContextKind::PyramidOc | ContextKind::AspOc
        )
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContextKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ContextKind::ALL.iter().map(|k| k.name()).collect();
                Error::contract(format!("unknown module '{s}', expected one of {names:?}"))
            })
    }
}

/// Everything needed to build a context module.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub kind: ContextKind,
    pub plan: ChannelPlan,
    /// Query/key width; `None` uses [`ChannelPlan::default_key_ch`].
    pub key_ch: Option<usize>,
    pub pyramid_scales: Vec<usize>,
    pub dilation_rates: Vec<usize>,
    pub scaled_similarity: bool,
    /// One transform for both query and key.
    pub shared_query_key: bool,
}

impl ContextConfig {
    pub fn new(kind: ContextKind, plan: ChannelPlan) -> Self {
        ContextConfig {
            kind,
            plan,
            key_ch: None,
            pyramid_scales: vec![1, 2, 3, 6],
            dilation_rates: vec![12, 24, 36],
            scaled_similarity: false,
            shared_query_key: true,
        }
    }

    pub fn key_ch(&self) -> usize {
        self.key_ch.unwrap_or_else(|| self.plan.default_key_ch())
    }
}

/// Output of a context module.
pub struct ContextOutput<E: Element> {
    pub features: Tensor<E>,
    /// Channel count of the concatenation feeding the fusion convolution.
    pub concat_channels: usize,
    /// The object context map over the whole feature map, when the module has one.
    pub context_map: Option<ObjectContextMap<E>>,
}

/// Plain 3×3 convolution with the same output width as the context modules.
pub struct PlainContext<E: Element> {
    pub conv: ConvBnRelu<E>,
}

impl<E: Element> PlainContext<E> {
    pub fn new<R: Rng>(plan: ChannelPlan, rng: &mut R) -> Self {
        PlainContext {
            conv: ConvBnRelu::new(plan.backbone_ch, plan.out_ch, 3, ConvGeometry::same3(1), rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<ContextOutput<E>> {
        Ok(ContextOutput {
            features: self.conv.forward(x, mode)?,
            concat_channels: 0,
            context_map: None,
        })
    }
}

/// Reduced features concatenated with a broadcast image-level descriptor.
pub struct GlobalPoolContext<E: Element> {
    pub reduce: ConvBnRelu<E>,
    pub global: Conv2d<E>,
    pub fuse: ConvBnRelu<E>,
}

impl<E: Element> GlobalPoolContext<E> {
    pub fn new<R: Rng>(plan: ChannelPlan, rng: &mut R) -> Self {
        let reduce = ConvBnRelu::new(plan.backbone_ch, plan.mid_ch, 3, ConvGeometry::same3(1), rng);
        let global = Conv2d::pointwise(plan.mid_ch, plan.mid_ch, true, rng);
        let fuse = ConvBnRelu::pointwise(2 * plan.mid_ch, plan.out_ch, rng);
        GlobalPoolContext {
            reduce,
            global,
            fuse,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<ContextOutput<E>> {
        let reduced = self.reduce.forward(x, mode)?;
        let s = reduced.shape4()?;
        let pooled = self.global.forward(&global_avg_pool(&reduced)?)?.relu();
        let cat = concat_channels(&[reduced, pooled.expand_spatial(s.height, s.width)?])?;
        let concat_channels = cat.shape()[1];
        Ok(ContextOutput {
            features: self.fuse.forward(&cat, mode)?,
            concat_channels,
            context_map: None,
        })
    }
}

/// One of the interchangeable context modules.
pub enum ContextModule<E: Element> {
    Baseline(PlainContext<E>),
    GlobalPool(GlobalPoolContext<E>),
    BaseOc(BaseOc<E>),
    PyramidOc(PyramidOc<E>),
    AspOc(AspOc<E>),
}

impl<E: Element> ContextModule<E> {
    pub fn build<R: Rng>(cfg: &ContextConfig, rng: &mut R) -> Result<Self> {
        let plan = ChannelPlan::new(cfg.plan.backbone_ch, cfg.plan.mid_ch, cfg.plan.out_ch)?;
        let key_ch = cfg.key_ch();
        if key_ch == 0 {
            return Err(Error::contract("key channels must be >= 1"));
        }
        let mut module = match cfg.kind {
            ContextKind::Baseline => ContextModule::Baseline(PlainContext::new(plan, rng)),
            ContextKind::GlobalPool => ContextModule::GlobalPool(GlobalPoolContext::new(plan, rng)),
            ContextKind::BaseOc => ContextModule::BaseOc(BaseOc::new(plan, key_ch, rng)),
            ContextKind::PyramidOc => {
                ContextModule::PyramidOc(PyramidOc::new(plan, key_ch, &cfg.pyramid_scales, rng)?)
            }
            ContextKind::AspOc => {
                ContextModule::AspOc(AspOc::new(plan, key_ch, &cfg.dilation_rates, rng)?)
            }
        };
        let set = |p: &mut OcpParams<E>| {
            p.scaled = cfg.scaled_similarity;
            if cfg.shared_query_key {
                p.key = None;
            }
        };
        match &mut module {
            ContextModule::BaseOc(m) => set(&mut m.ocp),
            ContextModule::PyramidOc(m) => m.branches.iter_mut().for_each(|b| set(&mut b.ocp)),
            ContextModule::AspOc(m) => set(&mut m.ocp),
            _ => {}
        }
        Ok(module)
    }

    pub fn kind(&self) -> ContextKind {
        match self {
            ContextModule::Baseline(_) => ContextKind::Baseline,
            ContextModule::GlobalPool(_) => ContextKind::GlobalPool,
            ContextModule::BaseOc(_) => ContextKind::BaseOc,
            ContextModule::PyramidOc(_) => ContextKind::PyramidOc,
            ContextModule::AspOc(_) => ContextKind::AspOc,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<ContextOutput<E>> {
        match self {
            ContextModule::Baseline(m) => m.forward(x, mode),
            ContextModule::GlobalPool(m) => m.forward(x, mode),
            ContextModule::BaseOc(m) => m.forward(x, mode),
            ContextModule::PyramidOc(m) => m.forward(x, mode),
            ContextModule::AspOc(m) => m.forward(x, mode),
        }
    }
}

impl<E: Element> Parameterized<E> for ContextModule<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        match self {
            ContextModule::Baseline(m) => m.conv.collect_slots(&join(prefix, "conv"), out),
            ContextModule::GlobalPool(m) => {
                m.reduce.collect_slots(&join(prefix, "reduce"), out);
                m.global.collect_slots(&join(prefix, "global"), out);
                m.fuse.collect_slots(&join(prefix, "fuse"), out);
            }
            ContextModule::BaseOc(m) => m.collect_slots(prefix, out),
            ContextModule::PyramidOc(m) => m.collect_slots(prefix, out),
            ContextModule::AspOc(m) => m.collect_slots(prefix, out),
        }
    }
}

fn check_input<E: Element>(x: &Tensor<E>, plan: &ChannelPlan) -> Result<()> {
    let s = x.shape4()?;
    if s.channels != plan.backbone_ch {
        return Err(Error::Dimension(format!(
            "context module expects {} backbone channels, got {:?}",
            plan.backbone_ch,
            x.shape()
        )));
    }
    Ok(())
}
