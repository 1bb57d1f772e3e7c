use super::gemm::{gemm_nn, gemm_nt, gemm_tn, transpose};
use super::{lit, Element, Shape4, Tensor};
use crate::error::{Error, Result};

fn same_shape<E: Element>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `op(x) · op(y)` where `op` optionally transposes; logical shapes `[m×k]·[k×n]`.
fn mm<E: Element>(
    x: &[E],
    tx: bool,
    y: &[E],
    ty: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    match (tx, ty) {
        (false, false) => gemm_nn(m, k, n, x, y, &mut c),
        (true, false) => gemm_tn(m, k, n, x, y, &mut c),
        (false, true) => gemm_nt(m, k, n, x, y, &mut c),
        (true, true) => {
            let xt = transpose(k, m, x);
            gemm_nt(m, k, n, &xt, y, &mut c);
        }
    }
    c
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    a.matmul(b)
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels<E: Element>(tensors: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::contract("concat_channels needs at least one tensor"))?;
    let s0 = first.shape4()?;
    let mut chans = Vec::with_capacity(tensors.len());
    for t in tensors {
        let s = t.shape4()?;
        if (s.batch, s.height, s.width) != (s0.batch, s0.height, s0.width) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} does not match {:?} outside the channel axis",
                t.shape(),
                first.shape()
            )));
        }
        chans.push(s.channels);
    }
    if tensors.len() == 1 {
        return Ok(first.clone());
    }
    let hw = s0.pixels();
    let total: usize = chans.iter().sum();
    let mut data = Vec::with_capacity(s0.batch * total * hw);
    for b in 0..s0.batch {
        for (t, &c) in tensors.iter().zip(&chans) {
            data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    let batch = s0.batch;
    Ok(Tensor::from_op(
        vec![batch, total, s0.height, s0.width],
        data,
        "concat_channels",
        tensors.to_vec(),
        move |g| {
            let mut out: Vec<Vec<E>> = chans
                .iter()
                .map(|&c| Vec::with_capacity(batch * c * hw))
                .collect();
            for b in 0..batch {
                let mut off = b * total * hw;
                for (dst, &c) in out.iter_mut().zip(&chans) {
                    dst.extend_from_slice(&g[off..off + c * hw]);
                    off += c * hw;
                }
            }
            out.into_iter().map(Some).collect()
        },
    ))
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<E> {
        let f: E = lit(factor);
        let data = self.data().iter().map(|&v| v * f).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "scale",
            vec![self.clone()],
            move |g| vec![Some(g.iter().map(|&v| v * f).collect())],
        )
    }

    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], "sum", vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn relu(&self) -> Tensor<E> {
        super::note_relu_signs(self.data());
        let data = self.data().iter().map(|&v| v.max(E::zero())).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "relu",
            vec![self.clone()],
            move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            "reshape",
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner extents differ in {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.reshape(&[1, m, k])?;
        let b = other.reshape(&[1, k, n])?;
        a.bmm(&b, false, false)?.reshape(&[m, n])
    }

    /// Batched product of rank-3 tensors, `op(self[b]) · op(other[b])`, where
    /// `op` transposes the trailing two axes when the matching flag is set.
    pub fn bmm(&self, other: &Tensor<E>, trans_a: bool, trans_b: bool) -> Result<Tensor<E>> {
        let (&[ba, ra, ca], &[bb, rb, cb]) = (self.shape(), other.shape()) else {
            return Err(Error::dim(format!(
                "bmm needs rank-3 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::dim(format!(
                "bmm: incompatible {:?}{} x {:?}{}",
                self.shape(),
                if trans_a { "ᵀ" } else { "" },
                other.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let batch = ba;
        let (sa, sb) = (m * k, k * n);
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let x = &self.data()[i * sa..(i + 1) * sa];
            let y = &other.data()[i * sb..(i + 1) * sb];
            data.extend(mm(x, trans_a, y, trans_b, m, k, n));
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![batch, m, n],
            data,
            "bmm",
            vec![self.clone(), other.clone()],
            move |g| {
                let mut ga = Vec::with_capacity(batch * sa);
                let mut gb = Vec::with_capacity(batch * sb);
                for i in 0..batch {
                    let x = &a.data()[i * sa..(i + 1) * sa];
                    let y = &b.data()[i * sb..(i + 1) * sb];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if trans_a {
                        ga.extend(mm(y, trans_b, gi, true, k, n, m));
                    } else {
                        ga.extend(mm(gi, false, y, !trans_b, m, n, k));
                    }
                    if trans_b {
                        gb.extend(mm(gi, true, x, trans_a, n, m, k));
                    } else {
                        gb.extend(mm(x, !trans_a, gi, false, k, m, n));
                    }
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let cols = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax_rows on a rank-0 tensor"))?;
        if cols == 0 {
            return Err(Error::dim("softmax_rows over an empty axis"));
        }
        if let Some(bad) = self.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("softmax_rows input contains {bad}")));
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "softmax_rows",
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); g.len()];
                for ((gx, g), y) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.chunks_exact(cols))
                {
                    let dot: E = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Channels `[start, start + len)` of a feature map.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let s = self.shape4()?;
        if len == 0 || start + len > s.channels {
            return Err(Error::dim(format!(
                "channel slice [{start}, {}) outside {:?}",
                start + len,
                self.shape()
            )));
        }
        let hw = s.pixels();
        let mut data = Vec::with_capacity(s.batch * len * hw);
        for b in 0..s.batch {
            let base = (b * s.channels + start) * hw;
            data.extend_from_slice(&self.data()[base..base + len * hw]);
        }
        Ok(Tensor::from_op(
            vec![s.batch, len, s.height, s.width],
            data,
            "slice_channels",
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); s.batch * s.channels * hw];
                for b in 0..s.batch {
                    let base = (b * s.channels + start) * hw;
                    gx[base..base + len * hw]
                        .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Spatial window `rows × cols` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Tensor<E>> {
        let s = self.shape4()?;
        if rows == 0 || cols == 0 || top + rows > s.height || left + cols > s.width {
            return Err(Error::dim(format!(
                "crop {rows}x{cols} at ({top}, {left}) outside {:?}",
                self.shape()
            )));
        }
        let planes = s.batch * s.channels;
        let mut data = Vec::with_capacity(planes * rows * cols);
        for p in 0..planes {
            let plane = &self.data()[p * s.pixels()..(p + 1) * s.pixels()];
            for y in top..top + rows {
                data.extend_from_slice(&plane[y * s.width + left..y * s.width + left + cols]);
            }
        }
        Ok(Tensor::from_op(
            vec![s.batch, s.channels, rows, cols],
            data,
            "crop",
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); planes * s.pixels()];
                for p in 0..planes {
                    for y in 0..rows {
                        let src = &g[(p * rows + y) * cols..(p * rows + y + 1) * cols];
                        let dst = p * s.pixels() + (top + y) * s.width + left;
                        gx[dst..dst + cols].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Broadcasts a `[B, C, 1, 1]` map to `[B, C, height, width]`.
    pub fn expand_spatial(&self, height: usize, width: usize) -> Result<Tensor<E>> {
        let s = self.shape4()?;
        if s.height != 1 || s.width != 1 {
            return Err(Error::dim(format!(
                "expand_spatial needs a 1x1 map, got {:?}",
                self.shape()
            )));
        }
        let hw = height * width;
        let planes = s.batch * s.channels;
        let mut data = Vec::with_capacity(planes * hw);
        for &v in self.data() {
            data.extend(std::iter::repeat(v).take(hw));
        }
        Ok(Tensor::from_op(
            vec![s.batch, s.channels, height, width],
            data,
            "expand_spatial",
            vec![self.clone()],
            move |g| vec![Some(g.chunks_exact(hw).map(|c| c.iter().copied().sum()).collect())],
        ))
    }
}

/// Writes each part into a zero canvas at its `(top, left)` offset, summing
/// where parts overlap.
pub fn assemble<E: Element>(
    parts: &[(Tensor<E>, usize, usize)],
    height: usize,
    width: usize,
) -> Result<Tensor<E>> {
    let (first, _, _) = parts
        .first()
        .ok_or_else(|| Error::contract("assemble needs at least one part"))?;
    let s0 = first.shape4()?;
    let out = Shape4::new(s0.batch, s0.channels, height, width)?;
    let mut geo = Vec::with_capacity(parts.len());
    for (t, top, left) in parts {
        let s = t.shape4()?;
        if s.batch != s0.batch
            || s.channels != s0.channels
            || top + s.height > height
            || left + s.width > width
        {
            return Err(Error::dim(format!(
                "part {:?} at ({top}, {left}) does not fit [{}, {}, {height}, {width}]",
                t.shape(),
                s0.batch,
                s0.channels
            )));
        }
        geo.push((*top, *left, s.height, s.width));
    }
    let planes = out.batch * out.channels;
    let mut data = vec![E::zero(); planes * out.pixels()];
    for ((t, _, _), &(top, left, rows, cols)) in parts.iter().zip(&geo) {
        for p in 0..planes {
            for y in 0..rows {
                let src = &t.data()[(p * rows + y) * cols..(p * rows + y + 1) * cols];
                let dst = p * out.pixels() + (top + y) * width + left;
                for (d, &s) in data[dst..dst + cols].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out.dims().to_vec(),
        data,
        "assemble",
        parts.iter().map(|(t, _, _)| t.clone()).collect(),
        move |g| {
            geo.iter()
                .map(|&(top, left, rows, cols)| {
                    let mut gp = Vec::with_capacity(planes * rows * cols);
                    for p in 0..planes {
                        for y in 0..rows {
                            let src = p * height * width + (top + y) * width + left;
                            gp.extend_from_slice(&g[src..src + cols]);
                        }
                    }
                    Some(gp)
                })
                .collect()
        },
    ))
}

pub(crate) fn softmax_in_place<E: Element>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut z = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
