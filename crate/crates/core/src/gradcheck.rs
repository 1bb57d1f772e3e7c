//! Double-precision finite-difference checks of every differentiable op and
//! of the three object context modules.
//!
//! Each check builds a scalar `L = Σ R ⊙ f(inputs)` with a fixed random `R`,
//! back-propagates once, and compares every input coordinate's gradient with
//! the central difference `(L(v + h) − L(v − h)) / 2h` at `h = 1e-4`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::context::{ChannelPlan, ContextConfig, ContextKind, ContextModule};
use crate::error::{Error, Result};
use crate::nn::{batchnorm, conv2d, global_avg_pool, resize_bilinear, BatchNorm2d, ConvGeometry, Mode, Parameterized, Slot};
use crate::ocp::{ocp_forward, OcpParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{concat_channels, matmul, no_grad, ops::assemble, with_relu_pattern, Tensor};
use crate::training::class_balanced_ce;

pub const STEP: f64 = 1e-4;
/// Tolerance for ops built from products, sums and convolutions.
pub const TOL: f64 = 1e-4;
/// Tolerance for softmax and linear ops.
pub const TOL_STRICT: f64 = 1e-6;
/// Coordinates probed per parameter group in the module checks.
pub const MODULE_COORDS: usize = 256;

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    /// Coordinates probed.
    pub coords: usize,
    /// Probed coordinates on a relu kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub selector: &'static str,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Every name accepted by [`run`].
pub const SELECTORS: [&str; 26] = [
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "relu",
    "reshape",
    "matmul",
    "bmm",
    "softmax",
    "concat",
    "slice",
    "crop",
    "expand",
    "assemble",
    "conv",
    "batchnorm",
    "resize",
    "pool",
    "ce",
    "ocp",
    "ocp-shared",
    "base-oc",
    "pyramid-oc",
    "asp-oc",
];

/// Compares analytic and numeric gradients of `Σ R ⊙ f()` for the slots in
/// `vars`; `f` must read its inputs from those slots.
///
/// At most `max_coords` randomly chosen coordinates per slot are probed when
/// a limit is given. Coordinates whose `±h` evaluations switch any relu input
/// across zero sit on a kink, where the difference quotient is meaningless;
/// they are counted as skipped rather than compared.
pub fn check_slots(
    vars: &[(String, &Slot<f64>)],
    f: &dyn Fn() -> Result<Tensor<f64>>,
    max_coords: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupReport>> {
    let (out, pattern) = with_relu_pattern(f);
    let out = out?;
    let r = random(out.shape(), rng, 0.0);
    out.mul(&r)?.sum().backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|(_, s)| {
            let t = s.get();
            t.grad().unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    let _guard = no_grad();
    let probe_loss = |slot: &Slot<f64>, data: Vec<f64>| -> Result<(f64, bool)> {
        slot.set_data(data)?;
        let (o, p) = with_relu_pattern(f);
        Ok((o?.mul(&r)?.sum().item(), p == pattern))
    };
    let mut reports = Vec::with_capacity(vars.len());
    for ((name, slot), grad) in vars.iter().zip(&analytic) {
        let base = slot.get().to_vec();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < base.len() => sample(rng, base.len(), m).into_vec(),
            _ => (0..base.len()).collect(),
        };
        let (mut worst, mut skipped) = (0.0f64, 0);
        let mut probe = base.clone();
        for &i in &coords {
            probe[i] = base[i] + STEP;
            let (plus, same_plus) = probe_loss(slot, probe.clone())?;
            probe[i] = base[i] - STEP;
            let (minus, same_minus) = probe_loss(slot, probe.clone())?;
            probe[i] = base[i];
            if !(same_plus && same_minus) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        slot.set_data(base)?;
        reports.push(GroupReport {
            name: name.clone(),
            coords: coords.len(),
            skipped,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

/// Uniform values in `[-1, 1]` whose magnitude is at least `margin`.
fn random(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn slot(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Slot<f64> {
    Slot::param(shape, random(shape, rng, margin).to_vec())
}

fn named<'a>(slots: &'a [Slot<f64>]) -> Vec<(String, &'a Slot<f64>)> {
    slots.iter().enumerate().map(|(i, s)| (format!("input{i}"), s)).collect()
}

/// Runs `f` over each shape set, labelling groups with the shapes.
fn over_shapes(
    rng: &mut ChaCha8Rng,
    shapes: &[&[&[usize]]],
    margin: f64,
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<Vec<GroupReport>> {
    let mut out = Vec::new();
    for set in shapes {
        let slots: Vec<Slot<f64>> = set.iter().map(|s| slot(s, rng, margin)).collect();
        let call = || f(&slots.iter().map(Slot::get).collect::<Vec<_>>());
        for mut g in check_slots(&named(&slots), &call, None, rng)? {
            g.name = format!("{} {:?}", g.name, set);
            out.push(g);
        }
    }
    Ok(out)
}

fn module_check(cfg: &ContextConfig, input: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let module = ContextModule::<f64>::build(cfg, rng)?;
    let x = slot(input, rng, 0.0);
    let mut vars = vec![("input".to_string(), &x)];
    vars.extend(module.params());
    let f = || Ok(module.forward(&x.get(), Mode::Train)?.features);
    check_slots(&vars, &f, Some(MODULE_COORDS), rng)
}

/// Runs the check named `selector`; the draw of all random values depends on `seed`.
pub fn run(selector: &str, seed: u64) -> Result<CheckReport> {
    let idx = SELECTORS.iter().position(|s| *s == selector).ok_or_else(|| {
        Error::contract(format!("unknown gradcheck selector '{selector}', expected one of {SELECTORS:?}"))
    })?;
    let selector = SELECTORS[idx];
    let rng = &mut stream_rng(seed, Stream::Probe, idx as u64, 0);
    let t4: [&[&[usize]]; 3] = [&[&[1, 2, 3, 3]], &[&[2, 3, 2, 4]], &[&[1, 1, 5, 2]]];
    let pair: [&[&[usize]]; 3] = [
        &[&[1, 2, 3, 3], &[1, 2, 3, 3]],
        &[&[2, 3, 2, 4], &[2, 3, 2, 4]],
        &[&[4, 5], &[4, 5]],
    ];
    let (tolerance, groups) = match selector {
        "add" => (TOL_STRICT, over_shapes(rng, &pair, 0.0, &|t| t[0].add(&t[1]))?),
        "sub" => (TOL_STRICT, over_shapes(rng, &pair, 0.0, &|t| t[0].sub(&t[1]))?),
        "mul" => (TOL, over_shapes(rng, &pair, 0.0, &|t| t[0].mul(&t[1]))?),
        "scale" => (TOL_STRICT, over_shapes(rng, &t4, 0.0, &|t| Ok(t[0].scale(-1.7)))?),
        "sum" => (TOL_STRICT, over_shapes(rng, &t4, 0.0, &|t| Ok(t[0].sum()))?),
        "mean" => (TOL_STRICT, over_shapes(rng, &t4, 0.0, &|t| Ok(t[0].mean()))?),
        // inputs stay at least 0.1 away from the kink
        "relu" => (TOL_STRICT, over_shapes(rng, &t4, 0.1, &|t| Ok(t[0].relu()))?),
        "reshape" => (
            TOL_STRICT,
            over_shapes(rng, &t4, 0.0, &|t| {
                let n = t[0].numel();
                t[0].reshape(&[n / t[0].shape()[0], t[0].shape()[0]])
            })?,
        ),
        "matmul" => (
            TOL,
            over_shapes(
                rng,
                &[&[&[3, 4], &[4, 2]], &[&[1, 5], &[5, 3]], &[&[6, 2], &[2, 6]]],
                0.0,
                &|t| matmul(&t[0], &t[1]),
            )?,
        ),
        "bmm" => {
            let mut g = over_shapes(rng, &[&[&[2, 3, 4], &[2, 4, 5]]], 0.0, &|t| t[0].bmm(&t[1], false, false))?;
            g.extend(over_shapes(rng, &[&[&[2, 4, 3], &[2, 4, 5]]], 0.0, &|t| t[0].bmm(&t[1], true, false))?);
            g.extend(over_shapes(rng, &[&[&[1, 3, 4], &[1, 5, 4]]], 0.0, &|t| t[0].bmm(&t[1], false, true))?);
            (TOL, g)
        }
        "softmax" => (
            TOL_STRICT,
            over_shapes(rng, &[&[&[1, 3, 4]], &[&[2, 5, 5]], &[&[1, 1, 7]]], 0.0, &|t| {
                t[0].scale(3.0).softmax_rows()
            })?,
        ),
        "concat" => (
            TOL_STRICT,
            over_shapes(
                rng,
                &[
                    &[&[1, 2, 3, 3], &[1, 1, 3, 3]],
                    &[&[2, 1, 2, 2], &[2, 3, 2, 2], &[2, 2, 2, 2]],
                    &[&[1, 4, 1, 5], &[1, 4, 1, 5]],
                ],
                0.0,
                &|t| concat_channels(t),
            )?,
        ),
        "slice" => (
            TOL_STRICT,
            over_shapes(rng, &[&[&[1, 4, 3, 3]], &[&[2, 5, 2, 2]], &[&[1, 3, 1, 4]]], 0.0, &|t| {
                t[0].slice_channels(1, 2)
            })?,
        ),
        "crop" => (
            TOL_STRICT,
            over_shapes(rng, &[&[&[1, 2, 4, 4]], &[&[2, 1, 5, 3]], &[&[1, 3, 3, 6]]], 0.0, &|t| {
                t[0].crop(1, 1, 2, 2)
            })?,
        ),
        "expand" => (
            TOL_STRICT,
            over_shapes(rng, &[&[&[1, 2, 1, 1]], &[&[2, 3, 1, 1]], &[&[1, 1, 1, 1]]], 0.0, &|t| {
                t[0].expand_spatial(3, 2)
            })?,
        ),
        "assemble" => (
            TOL_STRICT,
            over_shapes(
                rng,
                &[
                    &[&[1, 2, 2, 3], &[1, 2, 2, 3]],
                    &[&[2, 1, 3, 2], &[2, 1, 2, 4]],
                    &[&[1, 3, 1, 1], &[1, 3, 3, 3]],
                ],
                0.0,
                &|t| assemble(&[(t[0].clone(), 0, 0), (t[1].clone(), 1, 1)], 4, 5),
            )?,
        ),
        "conv" => {
            let mut g = Vec::new();
            for (k, stride, pad, dil, x) in [
                (1, 1, 0, 1, [1, 3, 4, 4]),
                (3, 1, 1, 1, [2, 2, 5, 4]),
                (3, 2, 1, 1, [1, 2, 7, 6]),
                (3, 1, 2, 2, [1, 2, 6, 6]),
                (3, 1, 4, 4, [1, 2, 9, 9]),
            ] {
                let geom = ConvGeometry {
                    stride,
                    padding: pad,
                    dilation: dil,
                };
                let shapes: &[&[usize]] = &[&x, &[3, x[1], k, k], &[3]];
                g.extend(over_shapes(rng, &[shapes], 0.0, &|t| conv2d(&t[0], &t[1], Some(&t[2]), geom))?);
            }
            (TOL, g)
        }
        "batchnorm" => {
            let mut g = Vec::new();
            for x in [[2usize, 3, 3, 3], [4, 2, 2, 1], [1, 2, 3, 4]] {
                let bn = BatchNorm2d::<f64>::new(x[1]);
                bn.scale.set_data(random(&[x[1]], rng, 0.2).to_vec())?;
                bn.shift.set_data(random(&[x[1]], rng, 0.0).to_vec())?;
                let input = slot(&x, rng, 0.0);
                let mut vars = vec![(format!("input {x:?}"), &input)];
                vars.extend(bn.params());
                g.extend(check_slots(&vars, &|| batchnorm(&input.get(), &bn, Mode::Train), None, rng)?);
                g.extend(check_slots(&vars, &|| batchnorm(&input.get(), &bn, Mode::Eval), None, rng)?);
            }
            (TOL, g)
        }
        "resize" => {
            let mut g = over_shapes(rng, &[&[&[1, 2, 3, 3]]], 0.0, &|t| resize_bilinear(&t[0], 7, 5))?;
            g.extend(over_shapes(rng, &[&[&[2, 1, 6, 4]]], 0.0, &|t| resize_bilinear(&t[0], 3, 3))?);
            g.extend(over_shapes(rng, &[&[&[1, 1, 2, 2]]], 0.0, &|t| resize_bilinear(&t[0], 16, 16))?);
            (TOL_STRICT, g)
        }
        "pool" => (TOL_STRICT, over_shapes(rng, &t4, 0.0, &|t| global_avg_pool(&t[0]))?),
        "ce" => {
            let mut g = Vec::new();
            for (shape, weighted) in [([1usize, 3, 2, 3], false), ([2, 4, 2, 2], true), ([1, 2, 3, 1], true)] {
                let k = shape[1];
                let n = shape[0] * shape[2] * shape[3];
                let labels: Vec<u8> = (0..n)
                    .map(|i| if i == 1 { 255 } else { rng.gen_range(0..k) as u8 })
                    .collect();
                let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
                let w = weighted.then_some(weights.as_slice());
                g.extend(over_shapes(rng, &[&[&shape]], 0.0, &|t| {
                    class_balanced_ce(&t[0], &labels, w, 255, None)
                })?);
            }
            (TOL, g)
        }
        "ocp" | "ocp-shared" => {
            let mut g = Vec::new();
            for x in [[1usize, 3, 2, 3], [2, 4, 3, 3], [1, 2, 1, 4]] {
                let p = if selector == "ocp" {
                    OcpParams::<f64>::new(x[1], 2, 3, rng)
                } else {
                    OcpParams::<f64>::shared(x[1], 2, 3, rng)
                };
                let input = slot(&x, rng, 0.0);
                let mut vars = vec![(format!("input {x:?}"), &input)];
                vars.extend(p.params());
                g.extend(check_slots(&vars, &|| ocp_forward(&input.get(), &p), None, rng)?);
            }
            (TOL, g)
        }
        "base-oc" => (TOL, module_check(&toy(ContextKind::BaseOc), &[2, 64, 4, 4], rng)?),
        "pyramid-oc" => (TOL, module_check(&toy(ContextKind::PyramidOc), &[2, 64, 6, 6], rng)?),
        "asp-oc" => {
            // small rates so the dilated taps land inside a 4×4 map
            let mut cfg = toy(ContextKind::AspOc);
            cfg.dilation_rates = vec![1, 2, 3];
            (TOL, module_check(&cfg, &[2, 64, 4, 4], rng)?)
        }
        _ => unreachable!("selector list and match arms agree"),
    };
    Ok(CheckReport {
        selector,
        tolerance,
        groups,
    })
}

fn toy(kind: ContextKind) -> ContextConfig {
    ContextConfig::new(kind, ChannelPlan::TOY)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-5, 2e-5) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_selector_lists_choices() {
        let err = run("nope", 0).unwrap_err().to_string();
        assert!(err.contains("base-oc"));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // the analytic rule of scale(0.5) applied to a function that is doubled
        let x = Slot::param(&[3], vec![0.3, -1.0, 2.0]);
        let vars = vec![("x".to_string(), &x)];
        let mut rng = stream_rng(0, Stream::Probe, 0, 0);
        let f = || {
            let v = x.get();
            let doubled = Tensor::new(v.shape(), v.data().iter().map(|a| 2.0 * a).collect())?;
            Ok(v.scale(0.5).add(&doubled.sub(&v.detach().scale(0.5))?)?)
        };
        let g = check_slots(&vars, &f, None, &mut rng).unwrap();
        assert!(g[0].max_rel_err > 0.5);
    }

    #[test]
    fn kink_coordinates_are_skipped() {
        let x = Slot::param(&[2], vec![0.0, 1.0]);
        let vars = vec![("x".to_string(), &x)];
        let mut rng = stream_rng(0, Stream::Probe, 0, 0);
        let g = check_slots(&vars, &|| Ok(x.get().relu()), None, &mut rng).unwrap();
        assert_eq!((g[0].coords, g[0].skipped), (2, 1));
        assert!(g[0].max_rel_err < 1e-9);
    }

    #[test]
    fn coordinate_limit() {
        let x = Slot::param(&[10], vec![0.5; 10]);
        let vars = vec![("x".to_string(), &x)];
        let mut rng = stream_rng(0, Stream::Probe, 0, 0);
        let g = check_slots(&vars, &|| Ok(x.get().scale(2.0)), Some(4), &mut rng).unwrap();
        assert_eq!(g[0].coords, 4);
    }
}
