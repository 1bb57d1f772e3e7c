//! Segmentation network: a small dilated backbone with output stride 8, a
//! context module, a classifier, and an auxiliary classifier on the
//! second-to-last backbone stage.

use rand::Rng;

use crate::context::{ContextConfig, ContextModule};
use crate::error::{Error, Result};
use crate::nn::{bilinear_upsample, join, Conv2d, ConvBnRelu, ConvGeometry, Mode, Parameterized, Slot};
use crate::ocp::ObjectContextMap;
use crate::tensor::{Element, Tensor};

pub const OUTPUT_STRIDE: usize = 8;

/// Shape of the backbone.
///
/// The first three stages are 3×3 stride-2 convolutions; the last two are
/// stride-1 3×3 convolutions with dilations 2 and 4.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 5],
    /// Stage whose output feeds the auxiliary classifier.
    pub aux_stage: usize,
}

impl BackboneConfig {
    pub const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
    pub const DILATIONS: [usize; 5] = [1, 1, 1, 2, 4];

    pub fn toy(out_channels: usize) -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: [16, 32, out_channels, out_channels, out_channels],
            aux_stage: 3,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels[4]
    }

    /// Receptive field of the last stage, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1, 1);
        for (s, d) in Self::STRIDES.iter().zip(Self::DILATIONS) {
            rf += 2 * d * jump;
            jump *= s;
        }
        rf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub context: ContextConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn toy(context: ContextConfig, num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(context.plan.backbone_ch),
            context,
            num_classes,
        }
    }
}

pub struct Backbone<E: Element> {
    pub stages: Vec<ConvBnRelu<E>>,
    pub aux_stage: usize,
}

impl<E: Element> Backbone<E> {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        if cfg.aux_stage >= 4 {
            return Err(Error::contract(format!(
                "auxiliary tap must precede the last stage, got stage {}",
                cfg.aux_stage
            )));
        }
        let mut in_ch = cfg.in_channels;
        let mut stages = Vec::with_capacity(5);
        for i in 0..5 {
            let (stride, dilation) = (BackboneConfig::STRIDES[i], BackboneConfig::DILATIONS[i]);
            let geom = ConvGeometry {
                stride,
                padding: dilation,
                dilation,
            };
            stages.push(ConvBnRelu::new(in_ch, cfg.stage_channels[i], 3, geom, rng));
            in_ch = cfg.stage_channels[i];
        }
        Ok(Backbone {
            stages,
            aux_stage: cfg.aux_stage,
        })
    }

    /// Final features and the auxiliary tap, both at stride 8.
    pub fn forward(&self, image: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, Tensor<E>)> {
        let s = image.shape4()?;
        if s.height % OUTPUT_STRIDE != 0 || s.width % OUTPUT_STRIDE != 0 {
            return Err(Error::contract(format!(
                "input {}x{} is not divisible by {OUTPUT_STRIDE}",
                s.height, s.width
            )));
        }
        let mut x = image.clone();
        let mut aux = None;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x, mode)?;
            if i == self.aux_stage {
                aux = Some(x.clone());
            }
        }
        Ok((x, aux.expect("aux stage is within the stack")))
    }
}

impl<E: Element> Parameterized<E> for Backbone<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.collect_slots(&join(prefix, &format!("stage{i}")), out);
        }
    }
}

pub struct ModelOutput<E: Element> {
    /// Main logits upsampled to the input size.
    pub logits: Tensor<E>,
    /// Auxiliary logits upsampled to the input size.
    pub aux_logits: Tensor<E>,
    pub context_map: Option<ObjectContextMap<E>>,
}

pub struct SegModel<E: Element> {
    pub config: ModelConfig,
    pub backbone: Backbone<E>,
    pub context: ContextModule<E>,
    pub classifier: Conv2d<E>,
    pub aux_classifier: Conv2d<E>,
}

impl<E: Element> SegModel<E> {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::contract("a segmentation model needs at least 2 classes"));
        }
        if config.backbone.out_channels() != config.context.plan.backbone_ch {
            return Err(Error::contract(format!(
                "backbone emits {} channels but the context module expects {}",
                config.backbone.out_channels(),
                config.context.plan.backbone_ch
            )));
        }
        let backbone = Backbone::new(&config.backbone, rng)?;
        let context = ContextModule::build(&config.context, rng)?;
        let k = config.num_classes;
        let classifier = Conv2d::pointwise(config.context.plan.out_ch, k, true, rng);
        let aux_ch = config.backbone.stage_channels[config.backbone.aux_stage];
        let aux_classifier = Conv2d::pointwise(aux_ch, k, true, rng);
        Ok(SegModel {
            config: config.clone(),
            backbone,
            context,
            classifier,
            aux_classifier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Logits at stride 8 plus the auxiliary logits and context map, before upsampling.
    pub fn forward_features(
        &self,
        image: &Tensor<E>,
        mode: Mode,
    ) -> Result<(Tensor<E>, Tensor<E>, Option<ObjectContextMap<E>>)> {
        let (features, aux) = self.backbone.forward(image, mode)?;
        let ctx = self.context.forward(&features, mode)?;
        let logits = self.classifier.forward(&ctx.features)?;
        let aux_logits = self.aux_classifier.forward(&aux)?;
        Ok((logits, aux_logits, ctx.context_map))
    }

    pub fn forward(&self, image: &Tensor<E>, mode: Mode) -> Result<ModelOutput<E>> {
        let (logits, aux_logits, context_map) = self.forward_features(image, mode)?;
        Ok(ModelOutput {
            logits: bilinear_upsample(&logits, OUTPUT_STRIDE)?,
            aux_logits: bilinear_upsample(&aux_logits, OUTPUT_STRIDE)?,
            context_map,
        })
    }
}

impl<E: Element> Parameterized<E> for SegModel<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        self.backbone.collect_slots(&join(prefix, "backbone"), out);
        self.context.collect_slots(&join(prefix, "context"), out);
        self.classifier.collect_slots(&join(prefix, "classifier"), out);
        self.aux_classifier.collect_slots(&join(prefix, "aux_classifier"), out);
    }
}
