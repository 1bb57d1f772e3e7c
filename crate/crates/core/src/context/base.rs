use rand::Rng;

use super::{check_input, ChannelPlan, ContextOutput};
use crate::error::Result;
use crate::nn::{join, ConvBnRelu, ConvGeometry, Mode, Parameterized, Slot};
use crate::ocp::{ocp_forward_with_map, OcpParams};
use crate::tensor::{concat_channels, Element, Tensor};

/// Object context pooling over the whole map, concatenated with its own input.
///
/// `reduce` (3×3, backbone → mid) → OCP (mid → mid) → concat with the reduced
/// map (2·mid) → `fuse` (1×1 → out) → `project` (1×1, out → out).
pub struct BaseOc<E: Element> {
    pub plan: ChannelPlan,
    pub reduce: ConvBnRelu<E>,
    pub ocp: OcpParams<E>,
    pub fuse: ConvBnRelu<E>,
    pub project: ConvBnRelu<E>,
}

impl<E: Element> BaseOc<E> {
    pub fn new<R: Rng>(plan: ChannelPlan, key_ch: usize, rng: &mut R) -> Self {
        let mid = plan.mid_ch;
        BaseOc {
            plan,
            reduce: ConvBnRelu::new(plan.backbone_ch, mid, 3, ConvGeometry::same3(1), rng),
            ocp: OcpParams::new(mid, key_ch, mid, rng),
            fuse: ConvBnRelu::pointwise(2 * mid, plan.out_ch, rng),
            project: ConvBnRelu::pointwise(plan.out_ch, plan.out_ch, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<ContextOutput<E>> {
        check_input(x, &self.plan)?;
        let reduced = self.reduce.forward(x, mode)?;
        let (context, map) = ocp_forward_with_map(&reduced, &self.ocp)?;
        let cat = concat_channels(&[context, reduced])?;
        let concat_channels = cat.shape()[1];
        let fused = self.fuse.forward(&cat, mode)?;
        Ok(ContextOutput {
            features: self.project.forward(&fused, mode)?,
            concat_channels,
            context_map: Some(map),
        })
    }
}

impl<E: Element> Parameterized<E> for BaseOc<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        self.reduce.collect_slots(&join(prefix, "reduce"), out);
        self.ocp.collect_slots(&join(prefix, "ocp"), out);
        self.fuse.collect_slots(&join(prefix, "fuse"), out);
        self.project.collect_slots(&join(prefix, "project"), out);
    }
}
