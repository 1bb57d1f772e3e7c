use rand::Rng;

use super::{check_input, ChannelPlan, ContextOutput};
use crate::error::{Error, Result};
use crate::nn::{join, ConvBnRelu, ConvGeometry, Mode, Parameterized, Slot};
use crate::ocp::{ocp_forward_with_map, OcpParams};
use crate::tensor::{concat_channels, Element, Tensor};

/// Object context pooling in parallel with the convolutional ASPP branches.
///
/// Five branches, each producing `mid` channels: reduce + OCP, a 1×1
/// convolution, and three dilated 3×3 convolutions. No image-level pooling
/// branch. The concatenation (5·mid) is fused to `out` and projected.
pub struct AspOc<E: Element> {
    pub plan: ChannelPlan,
    pub reduce: ConvBnRelu<E>,
    pub ocp: OcpParams<E>,
    pub pointwise: ConvBnRelu<E>,
    pub dilated: Vec<ConvBnRelu<E>>,
    pub fuse: ConvBnRelu<E>,
    pub project: ConvBnRelu<E>,
}

impl<E: Element> AspOc<E> {
    pub fn new<R: Rng>(
        plan: ChannelPlan,
        key_ch: usize,
        dilation_rates: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if dilation_rates.len() != 3 || dilation_rates.contains(&0) {
            return Err(Error::Contract(format!(
                "ASP-OC needs exactly three positive dilation rates, got {dilation_rates:?}"
            )));
        }
        let (bb, mid) = (plan.backbone_ch, plan.mid_ch);
        let reduce = ConvBnRelu::new(bb, mid, 3, ConvGeometry::same3(1), rng);
        let ocp = OcpParams::new(mid, key_ch, mid, rng);
        let pointwise = ConvBnRelu::pointwise(bb, mid, rng);
        let dilated = dilation_rates
            .iter()
            .map(|&r| ConvBnRelu::new(bb, mid, 3, ConvGeometry::same3(r), rng))
            .collect();
        Ok(AspOc {
            plan,
            reduce,
            ocp,
            pointwise,
            dilated,
            fuse: ConvBnRelu::pointwise(5 * mid, plan.out_ch, rng),
            project: ConvBnRelu::pointwise(plan.out_ch, plan.out_ch, rng),
        })
    }

    pub fn dilation_rates(&self) -> Vec<usize> {
        self.dilated.iter().map(|b| b.conv.geom.dilation).collect()
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<ContextOutput<E>> {
        check_input(x, &self.plan)?;
        let reduced = self.reduce.forward(x, mode)?;
        let (context, map) = ocp_forward_with_map(&reduced, &self.ocp)?;
        let mut branches = vec![context, self.pointwise.forward(x, mode)?];
        for b in &self.dilated {
            branches.push(b.forward(x, mode)?);
        }
        let cat = concat_channels(&branches)?;
        let concat_channels = cat.shape()[1];
        let fused = self.fuse.forward(&cat, mode)?;
        Ok(ContextOutput {
            features: self.project.forward(&fused, mode)?,
            concat_channels,
            context_map: Some(map),
        })
    }
}

impl<E: Element> Parameterized<E> for AspOc<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        self.reduce.collect_slots(&join(prefix, "reduce"), out);
        self.ocp.collect_slots(&join(prefix, "ocp"), out);
        self.pointwise.collect_slots(&join(prefix, "pointwise"), out);
        for (i, b) in self.dilated.iter().enumerate() {
            b.collect_slots(&join(prefix, &format!("dilated{i}")), out);
        }
        self.fuse.collect_slots(&join(prefix, "fuse"), out);
        self.project.collect_slots(&join(prefix, "project"), out);
    }
}
