use rand::Rng;

use super::{check_input, ChannelPlan, ContextOutput};
use crate::error::{Error, Result};
use crate::nn::{join, ConvBnRelu, ConvGeometry, Mode, Parameterized, Slot};
use crate::ocp::{ocp_forward_with_map, ObjectContextMap, OcpParams};
use crate::tensor::ops::assemble;
use crate::tensor::{concat_channels, Element, Tensor};

/// Rectangular block of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.rows).contains(&y) && (self.left..self.left + self.cols).contains(&x)
    }
}

/// Splits an `h×w` grid into `s×s` regions. Region `(r, c)` spans rows
/// `[⌊r·h/s⌋, ⌊(r+1)·h/s⌋)` and the analogous columns; regions are listed row-major.
pub fn pyramid_partition(h: usize, w: usize, s: usize) -> Result<Vec<Region>> {
    if s == 0 || h == 0 || w == 0 {
        return Err(Error::Contract(format!(
            "pyramid partition needs positive sizes, got {h}x{w} at scale {s}"
        )));
    }
    if s > h || s > w {
        return Err(Error::Contract(format!(
            "pyramid scale {s} exceeds the {h}x{w} feature map"
        )));
    }
    let bound = |i: usize, len: usize| i * len / s;
    let mut regions = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            let (top, left) = (bound(r, h), bound(c, w));
            regions.push(Region {
                top,
                left,
                rows: bound(r + 1, h) - top,
                cols: bound(c + 1, w) - left,
            });
        }
    }
    Ok(regions)
}

/// One pyramid level: a single OCP shared by every region of that level.
pub struct PyramidBranch<E: Element> {
    pub scale: usize,
    pub ocp: OcpParams<E>,
}

/// Object context pooling inside the regions of several pyramid levels.
///
/// `reduce` (3×3) → per level, OCP applied region by region → concat of the
/// level outputs with an `expand`ed copy of the reduced map
/// (`levels·mid` channels) → `fuse` (1×1 → out) → `project`.
pub struct PyramidOc<E: Element> {
    pub plan: ChannelPlan,
    pub reduce: ConvBnRelu<E>,
    pub branches: Vec<PyramidBranch<E>>,
    pub expand: ConvBnRelu<E>,
    pub fuse: ConvBnRelu<E>,
    pub project: ConvBnRelu<E>,
}

impl<E: Element> PyramidOc<E> {
    pub fn new<R: Rng>(
        plan: ChannelPlan,
        key_ch: usize,
        scales: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if scales.is_empty() || scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "pyramid scales must be positive and strictly increasing, got {scales:?}"
            )));
        }
        let mid = plan.mid_ch;
        let levels = scales.len();
        let reduce = ConvBnRelu::new(plan.backbone_ch, mid, 3, ConvGeometry::same3(1), rng);
        let branches = scales
            .iter()
            .map(|&scale| PyramidBranch {
                scale,
                ocp: OcpParams::new(mid, key_ch, mid, rng),
            })
            .collect();
        Ok(PyramidOc {
            plan,
            reduce,
            branches,
            expand: ConvBnRelu::pointwise(mid, levels * mid, rng),
            fuse: ConvBnRelu::pointwise(2 * levels * mid, plan.out_ch, rng),
            project: ConvBnRelu::pointwise(plan.out_ch, plan.out_ch, rng),
        })
    }

    pub fn scales(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.scale).collect()
    }

    /// Output of level `index` on an already reduced map, plus the context
    /// map when the level is a single region.
    pub fn branch_forward(
        &self,
        reduced: &Tensor<E>,
        index: usize,
    ) -> Result<(Tensor<E>, Option<ObjectContextMap<E>>)> {
        let branch = self
            .branches
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no pyramid level {index}")))?;
        let s = reduced.shape4()?;
        let regions = pyramid_partition(s.height, s.width, branch.scale)?;
        if let [whole] = regions.as_slice() {
            debug_assert_eq!((whole.rows, whole.cols), (s.height, s.width));
            let (out, map) = ocp_forward_with_map(reduced, &branch.ocp)?;
            return Ok((out, Some(map)));
        }
        let mut parts = Vec::with_capacity(regions.len());
        for r in &regions {
            let window = reduced.crop(r.top, r.left, r.rows, r.cols)?;
            let (out, _) = ocp_forward_with_map(&window, &branch.ocp)?;
            parts.push((out, r.top, r.left));
        }
        Ok((assemble(&parts, s.height, s.width)?, None))
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<ContextOutput<E>> {
        check_input(x, &self.plan)?;
        let reduced = self.reduce.forward(x, mode)?;
        let mut levels = Vec::with_capacity(self.branches.len() + 1);
        let mut context_map = None;
        for i in 0..self.branches.len() {
            let (out, map) = self.branch_forward(&reduced, i)?;
            context_map = context_map.or(map);
            levels.push(out);
        }
        levels.push(self.expand.forward(&reduced, mode)?);
        let cat = concat_channels(&levels)?;
        let concat_channels = cat.shape()[1];
        let fused = self.fuse.forward(&cat, mode)?;
        Ok(ContextOutput {
            features: self.project.forward(&fused, mode)?,
            concat_channels,
            context_map,
        })
    }
}

impl<E: Element> Parameterized<E> for PyramidOc<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        self.reduce.collect_slots(&join(prefix, "reduce"), out);
        for b in &self.branches {
            b.ocp.collect_slots(&join(prefix, &format!("ocp_s{}", b.scale)), out);
        }
        self.expand.collect_slots(&join(prefix, "expand"), out);
        self.fuse.collect_slots(&join(prefix, "fuse"), out);
        self.project.collect_slots(&join(prefix, "project"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_partition() {
        let regions = pyramid_partition(12, 12, 6).unwrap();
        assert_eq!(regions.len(), 36);
        assert!(regions.iter().all(|r| r.rows == 2 && r.cols == 2));
    }

    #[test]
    fn single_scale_covers_everything() {
        let regions = pyramid_partition(7, 5, 1).unwrap();
        assert_eq!(
            regions,
            vec![Region {
                top: 0,
                left: 0,
                rows: 7,
                cols: 5
            }]
        );
    }

    #[test]
    fn floor_rule_bands() {
        let regions = pyramid_partition(13, 4, 2).unwrap();
        assert_eq!(regions[0].rows, 6);
        assert_eq!(regions[2].top, 6);
        assert_eq!(regions[2].rows, 7);
    }

    #[test]
    fn oversized_scale_rejected() {
        assert!(matches!(pyramid_partition(4, 8, 6), Err(Error::Contract(_))));
        assert!(matches!(pyramid_partition(8, 4, 6), Err(Error::Contract(_))));
        assert!(matches!(pyramid_partition(8, 8, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn exhaustive_tiling() {
        for h in 1..=16 {
            for w in 1..=16 {
                for s in 1..=h.min(w) {
                    let mut hits = vec![0u8; h * w];
                    for r in pyramid_partition(h, w, s).unwrap() {
                        assert!(r.rows > 0 && r.cols > 0);
                        for y in r.top..r.top + r.rows {
                            for x in r.left..r.left + r.cols {
                                hits[y * w + x] += 1;
                            }
                        }
                    }
                    assert!(hits.iter().all(|&c| c == 1), "h={h} w={w} s={s}");
                }
            }
        }
    }

    #[test]
    fn bad_scales_rejected() {
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        let plan = ChannelPlan::new(4, 2, 2).unwrap();
        assert!(PyramidOc::<f64>::new(plan, 1, &[2, 1], &mut rng).is_err());
        assert!(PyramidOc::<f64>::new(plan, 1, &[], &mut rng).is_err());
        assert!(PyramidOc::<f64>::new(plan, 1, &[0, 1], &mut rng).is_err());
    }
}
