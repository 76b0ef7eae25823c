//! f32 operator kernels with ONNX semantics for the supported subset.

use crate::error::{Error, Result};
use crate::graph::{AttrExt, Attributes, OpKind};
use crate::tensor::{numel, Tensor};

use super::kernels::{self, ConvGeometry};

/// Opset assumed by [`run_op`] when the caller has no graph context.
pub const DEFAULT_OPSET: i64 = 13;

fn fail(message: impl Into<String>) -> Error {
    Error::exec("", message)
}

/// Runs a single operator on f32 inputs.
pub fn run_op(kind: OpKind, inputs: &[&Tensor], attrs: &Attributes) -> Result<Vec<Tensor>> {
    let slots: Vec<Option<&Tensor>> = inputs.iter().map(|t| Some(*t)).collect();
    run_op_with(kind, &slots, attrs, DEFAULT_OPSET)
}

/// Like [`run_op`] but with optional input slots (`None` for an omitted
/// optional input) and an explicit opset for version-dependent semantics.
pub fn run_op_with(
    kind: OpKind,
    inputs: &[Option<&Tensor>],
    attrs: &Attributes,
    opset: i64,
) -> Result<Vec<Tensor>> {
    let (lo, hi) = kind.arity();
    if inputs.len() < lo || inputs.len() > hi {
        return Err(fail(format!("{kind} takes {lo}..={hi} inputs, got {}", inputs.len())));
    }
    let x = required(inputs, 0)?;
    let out = match kind {
        OpKind::Relu => map(x, |v| if v > 0.0 { v } else { 0.0 })?,
        OpKind::Clip => clip(x, inputs, attrs, opset)?,
        OpKind::Conv => conv(x, required(inputs, 1)?, opt(inputs, 2), attrs)?,
        OpKind::MaxPool => pool(x, attrs, PoolKind::Max)?,
        OpKind::AveragePool => pool(x, attrs, PoolKind::Average)?,
        OpKind::GlobalAveragePool => global_average_pool(x)?,
        OpKind::Add => add(x, required(inputs, 1)?)?,
        OpKind::Gemm => gemm(x, required(inputs, 1)?, opt(inputs, 2), attrs)?,
        OpKind::MatMul => matmul(x, required(inputs, 1)?)?,
        OpKind::Flatten => flatten(x, attrs)?,
        OpKind::Reshape => reshape(x, required(inputs, 1)?, attrs)?,
        OpKind::Softmax => softmax(x, attrs, opset)?,
        OpKind::BatchNormalization => batch_norm(x, inputs, attrs)?,
    };
    Ok(vec![out])
}

fn required<'a>(inputs: &[Option<&'a Tensor>], slot: usize) -> Result<&'a Tensor> {
    inputs
        .get(slot)
        .copied()
        .flatten()
        .ok_or_else(|| fail(format!("missing required input {slot}")))
}

fn opt<'a>(inputs: &[Option<&'a Tensor>], slot: usize) -> Option<&'a Tensor> {
    inputs.get(slot).copied().flatten()
}

fn f32s(t: &Tensor) -> Result<&[f32]> {
    t.as_f32().map_err(|e| fail(e.to_string()))
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    Tensor::from_f32(x.shape().to_vec(), f32s(x)?.iter().map(|&v| f(v)).collect())
}

fn scalar_value(t: &Tensor, what: &str) -> Result<f32> {
    let v = f32s(t)?;
    if v.len() != 1 {
        return Err(fail(format!("{what} must be a scalar, has {} elements", v.len())));
    }
    Ok(v[0])
}

fn clip(x: &Tensor, inputs: &[Option<&Tensor>], attrs: &Attributes, opset: i64) -> Result<Tensor> {
    let (lo, hi) = if opset < 11 {
        (attrs.float("min", f32::NEG_INFINITY)?, attrs.float("max", f32::INFINITY)?)
    } else {
        let lo = opt(inputs, 1).map(|t| scalar_value(t, "Clip min")).transpose()?;
        let hi = opt(inputs, 2).map(|t| scalar_value(t, "Clip max")).transpose()?;
        (lo.unwrap_or(f32::NEG_INFINITY), hi.unwrap_or(f32::INFINITY))
    };
    map(x, |v| {
        if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            v
        }
    })
}

/// Reads a two-element spatial attribute, defaulting to `[default; 2]`.
fn spatial2(attrs: &Attributes, name: &str, default: usize) -> Result<[usize; 2]> {
    match attrs.ints(name)? {
        None => Ok([default; 2]),
        Some(v) if v.len() == 2 && v.iter().all(|&d| d >= 0) => Ok([v[0] as usize, v[1] as usize]),
        Some(v) => Err(fail(format!("attribute {name} must hold two non-negative values, got {v:?}"))),
    }
}

/// Pads as `[top, left, bottom, right]`, honouring `auto_pad`.
fn pads4(attrs: &Attributes) -> Result<[usize; 4]> {
    match attrs.string("auto_pad")? {
        None | Some("NOTSET") | Some("") => {}
        Some("VALID") => return Ok([0; 4]),
        Some(other) => return Err(fail(format!("unsupported auto_pad {other}"))),
    }
    match attrs.ints("pads")? {
        None => Ok([0; 4]),
        Some(v) if v.len() == 4 && v.iter().all(|&d| d >= 0) => {
            Ok([v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize])
        }
        Some(v) => Err(fail(format!("pads must hold four non-negative values, got {v:?}"))),
    }
}

fn nchw(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match x.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        other => Err(fail(format!("{what} expects a rank-4 NCHW input, got {other:?}"))),
    }
}

/// Convolution geometry from tensor shapes and attributes.
pub(crate) fn conv_geometry(x: &[usize], w: &[usize], attrs: &Attributes) -> Result<ConvGeometry> {
    let &[n, c, h, wd] = x else {
        return Err(fail(format!("Conv expects a rank-4 input, got {x:?}")));
    };
    let &[m, cg, kh, kw] = w else {
        return Err(fail(format!("Conv expects a rank-4 weight, got {w:?}")));
    };
    let group = attrs.int("group", 1)?;
    if group < 1 {
        return Err(fail(format!("group must be positive, got {group}")));
    }
    let group = group as usize;
    if cg * group != c {
        return Err(fail(format!(
            "weight expects {} input channels, input has {c}",
            cg * group
        )));
    }
    if let Some(k) = attrs.ints("kernel_shape")? {
        if k != [kh as i64, kw as i64] {
            return Err(fail(format!("kernel_shape {k:?} disagrees with weight shape {w:?}")));
        }
    }
    let geom = ConvGeometry {
        batch: n,
        in_channels: c,
        in_h: h,
        in_w: wd,
        out_channels: m,
        kernel_h: kh,
        kernel_w: kw,
        stride: spatial2(attrs, "strides", 1)?,
        dilation: spatial2(attrs, "dilations", 1)?,
        pads: pads4(attrs)?,
        group,
    };
    geom.validate().map_err(|e| fail(e.to_string()))?;
    Ok(geom)
}

fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, attrs: &Attributes) -> Result<Tensor> {
    let g = conv_geometry(x.shape(), w.shape(), attrs)?;
    let bias = b.map(f32s).transpose()?;
    if let Some(bias) = bias {
        if bias.len() != g.out_channels {
            return Err(fail(format!(
                "bias has {} values for {} output channels",
                bias.len(),
                g.out_channels
            )));
        }
    }
    let out = kernels::conv2d(f32s(x)?, f32s(w)?, bias, &g);
    Tensor::from_f32(vec![g.batch, g.out_channels, g.out_h(), g.out_w()], out)
}

enum PoolKind {
    Max,
    Average,
}

fn pool_extent(input: usize, pad_begin: usize, pad_end: usize, k: usize, s: usize, ceil: bool) -> Result<usize> {
    let padded = input + pad_begin + pad_end;
    if k == 0 || s == 0 || padded < k {
        return Err(fail("pooling window larger than padded input"));
    }
    let span = padded - k;
    let mut out = if ceil { span.div_ceil(s) } else { span / s } + 1;
    // the last window must start inside the input or its leading pad
    if ceil && (out - 1) * s >= input + pad_begin {
        out -= 1;
    }
    Ok(out)
}

fn pool(x: &Tensor, attrs: &Attributes, kind: PoolKind) -> Result<Tensor> {
    let [n, c, h, w] = nchw(x, "pooling")?;
    let k = spatial2(attrs, "kernel_shape", 0)?;
    let s = spatial2(attrs, "strides", 1)?;
    let d = spatial2(attrs, "dilations", 1)?;
    if d != [1, 1] {
        return Err(fail("dilated pooling is not supported"));
    }
    let pads = pads4(attrs)?;
    let ceil = attrs.int("ceil_mode", 0)? != 0;
    let include_pad = attrs.int("count_include_pad", 0)? != 0;
    let oh = pool_extent(h, pads[0], pads[2], k[0], s[0], ceil)?;
    let ow = pool_extent(w, pads[1], pads[3], k[1], s[1], ceil)?;
    let xs = f32s(x)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * s[0]) as isize - pads[0] as isize;
                let x0 = (ox * s[1]) as isize - pads[1] as isize;
                let mut max = f32::NEG_INFINITY;
                let mut sum = 0.0f32;
                let mut valid = 0usize;
                let mut padded = 0usize;
                for ky in 0..k[0] as isize {
                    let iy = y0 + ky;
                    for kx in 0..k[1] as isize {
                        let ix = x0 + kx;
                        if iy >= -(pads[0] as isize)
                            && iy < (h + pads[2]) as isize
                            && ix >= -(pads[1] as isize)
                            && ix < (w + pads[3]) as isize
                        {
                            padded += 1;
                        }
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let v = xs[base + iy as usize * w + ix as usize];
                        if v > max {
                            max = v;
                        }
                        sum += v;
                        valid += 1;
                    }
                }
                out.push(match kind {
                    PoolKind::Max => max,
                    PoolKind::Average => {
                        let count = if include_pad { padded } else { valid };
                        if count == 0 {
                            0.0
                        } else {
                            sum / count as f32
                        }
                    }
                });
            }
        }
    }
    Tensor::from_f32(vec![n, c, oh, ow], out)
}

fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(fail(format!(
            "GlobalAveragePool expects rank >= 3, got {:?}",
            x.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial = numel(&x.shape()[2..]);
    let xs = f32s(x)?;
    let out = xs
        .chunks(spatial.max(1))
        .take(n * c)
        .map(|plane| plane.iter().fold(0.0f32, |acc, &v| acc + v) / spatial as f32)
        .collect();
    let mut shape = vec![n, c];
    shape.extend(std::iter::repeat_n(1, x.rank() - 2));
    Tensor::from_f32(shape, out)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(fail(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// Element strides of `shape` when viewed as `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut step = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + out.len() - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { step };
        step *= shape[i];
    }
    strides
}

/// Calls `f(ia, ib)` for every output element in row-major order.
fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total = numel(out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        f(ia, ib);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            ia -= sa[axis] * out[axis];
            ib -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (xa, xb) = (f32s(a)?, f32s(b)?);
    let mut out = Vec::with_capacity(numel(&shape));
    for_each_broadcast(a.shape(), b.shape(), &shape, |i, j| out.push(xa[i] + xb[j]));
    Tensor::from_f32(shape, out)
}

fn gemm(a: &Tensor, b: &Tensor, c: Option<&Tensor>, attrs: &Attributes) -> Result<Tensor> {
    let trans_a = attrs.int("transA", 0)? != 0;
    let trans_b = attrs.int("transB", 0)? != 0;
    let alpha = attrs.float("alpha", 1.0)?;
    let beta = attrs.float("beta", 1.0)?;
    let (&[ar, ac], &[br, bc]) = (a.shape(), b.shape()) else {
        return Err(fail(format!(
            "Gemm expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(fail(format!(
            "Gemm inner extents disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let prod = kernels::matmul(f32s(a)?, f32s(b)?, m, k, n, trans_a, trans_b, None);
    let mut out: Vec<f32> = if alpha == 1.0 {
        prod
    } else {
        prod.into_iter().map(|v| alpha * v).collect()
    };
    if let Some(c) = c {
        let shape = broadcast_shape(c.shape(), &[m, n])?;
        if shape != [m, n] {
            return Err(fail(format!("Gemm C {:?} does not broadcast to [{m}, {n}]", c.shape())));
        }
        let cs = f32s(c)?;
        let mut pos = 0;
        for_each_broadcast(c.shape(), &[m, n], &[m, n], |ic, _| {
            out[pos] += beta * cs[ic];
            pos += 1;
        });
    }
    Tensor::from_f32(vec![m, n], out)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 || b.rank() == 0 {
        return Err(fail("MatMul operands must have rank >= 1"));
    }
    let mut ash = a.shape().to_vec();
    let mut bsh = b.shape().to_vec();
    let a_vec = ash.len() == 1;
    let b_vec = bsh.len() == 1;
    if a_vec {
        ash.insert(0, 1);
    }
    if b_vec {
        bsh.push(1);
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(fail(format!(
            "MatMul inner extents disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let abatch = &ash[..ash.len() - 2];
    let bbatch = &bsh[..bsh.len() - 2];
    let batch = broadcast_shape(abatch, bbatch)?;
    let (xa, xb) = (f32s(a)?, f32s(b)?);
    let mut out = Vec::with_capacity(numel(&batch) * m * n);
    let mut pairs = Vec::with_capacity(numel(&batch));
    for_each_broadcast(abatch, bbatch, &batch, |i, j| pairs.push((i, j)));
    for (i, j) in pairs {
        let sa = &xa[i * m * k..(i + 1) * m * k];
        let sb = &xb[j * k * n..(j + 1) * k * n];
        out.extend(kernels::matmul(sa, sb, m, k, n, false, false, None));
    }
    let mut shape = batch;
    if !a_vec {
        shape.push(m);
    }
    if !b_vec {
        shape.push(n);
    }
    Tensor::from_f32(shape, out)
}

fn normalize_axis(axis: i64, rank: usize) -> Result<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a > r {
        return Err(fail(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

fn flatten(x: &Tensor, attrs: &Attributes) -> Result<Tensor> {
    let axis = normalize_axis(attrs.int("axis", 1)?, x.rank())?;
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis..]);
    x.reshaped(vec![outer, inner])
}

fn reshape(x: &Tensor, spec: &Tensor, attrs: &Attributes) -> Result<Tensor> {
    let spec = spec.as_i64().map_err(|e| fail(e.to_string()))?;
    let allow_zero = attrs.int("allowzero", 0)? != 0;
    let mut shape = Vec::with_capacity(spec.len());
    let mut infer = None;
    for (i, &d) in spec.iter().enumerate() {
        match d {
            -1 if infer.is_none() => {
                infer = Some(i);
                shape.push(1);
            }
            0 if !allow_zero => {
                let copied = *x
                    .shape()
                    .get(i)
                    .ok_or_else(|| fail(format!("Reshape dim {i} copies a missing input dim")))?;
                shape.push(copied);
            }
            d if d >= 0 => shape.push(d as usize),
            _ => return Err(fail(format!("invalid Reshape target {spec:?}"))),
        }
    }
    if let Some(i) = infer {
        let known = numel(&shape);
        if known == 0 || !x.len().is_multiple_of(known) {
            return Err(fail(format!(
                "cannot reshape {:?} into {spec:?}",
                x.shape()
            )));
        }
        shape[i] = x.len() / known;
    }
    if numel(&shape) != x.len() {
        return Err(fail(format!("cannot reshape {:?} into {spec:?}", x.shape())));
    }
    x.reshaped(shape)
}

fn softmax(x: &Tensor, attrs: &Attributes, opset: i64) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(fail("Softmax needs rank >= 1"));
    }
    let legacy = opset < 13;
    let axis = normalize_axis(attrs.int("axis", if legacy { 1 } else { -1 })?, x.rank())?;
    if axis == x.rank() && !legacy {
        return Err(fail(format!("axis {axis} out of range for rank {}", x.rank())));
    }
    // the legacy form coerces to 2-D at `axis`
    let (outer, dim, inner) = if legacy {
        (numel(&x.shape()[..axis]), numel(&x.shape()[axis..]), 1)
    } else {
        (
            numel(&x.shape()[..axis]),
            x.shape()[axis],
            numel(&x.shape()[axis + 1..]),
        )
    };
    let xs = f32s(x)?;
    let mut out = vec![0.0f32; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * dim * inner + j * inner + i;
            let max = (0..dim).map(|j| xs[at(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..dim {
                let e = (xs[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..dim {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::from_f32(x.shape().to_vec(), out)
}

fn batch_norm(x: &Tensor, inputs: &[Option<&Tensor>], attrs: &Attributes) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(fail("BatchNormalization expects rank >= 2"));
    }
    let eps = attrs.float("epsilon", 1e-5)?;
    let c = x.shape()[1];
    let param = |slot: usize, what: &str| -> Result<&[f32]> {
        let v = f32s(required(inputs, slot)?)?;
        if v.len() != c {
            return Err(fail(format!("{what} has {} values for {c} channels", v.len())));
        }
        Ok(v)
    };
    let (scale, bias, mean, var) = (
        param(1, "scale")?,
        param(2, "bias")?,
        param(3, "mean")?,
        param(4, "var")?,
    );
    let spatial = numel(&x.shape()[2..]);
    let xs = f32s(x)?;
    let out = xs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / spatial.max(1)) % c;
            (v - mean[ch]) / (var[ch] + eps).sqrt() * scale[ch] + bias[ch]
        })
        .collect();
    Tensor::from_f32(x.shape().to_vec(), out)
}
