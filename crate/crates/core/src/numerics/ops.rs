//! Differentiable tensor primitives.
//!
//! Each primitive validates shapes, computes the forward value, and registers
//! a backward rule when any input is tracked. The set is deliberately small:
//! matrix product, elementwise arithmetic, axis concat/slice, permutation,
//! softmax over the last axis, layer normalization, embedding lookup, masked
//! fill, reductions, and a strided 3x3 convolution for the acoustic front end.

use crate::error::{XmError, XmResult};
use crate::numerics::tensor::{BackwardArgs, Tensor};

// ── raw matrix kernels ──────────────────────────────────────────────

/// out += a (m×k) · b (k×n), row-major.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bpj) in crow.iter_mut().zip(brow) {
                *c += aip * bpj;
            }
        }
    }
}

/// out += a (m×n) · bᵀ where b is (k×n); result is (m×k).
///
/// Materializes bᵀ so the inner loop is a vectorizable axpy instead of a
/// serialized dot product.
fn mm_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, &aij) in arow.iter().enumerate() {
            if aij == 0.0 {
                continue;
            }
            let btrow = &bt[j * k..(j + 1) * k];
            for (o, &btj) in orow.iter_mut().zip(btrow) {
                *o += aij * btj;
            }
        }
    }
}

/// out += aᵀ · c where a is (m×k) and c is (m×n); result is (k×n).
fn mm_at_acc(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cij) in orow.iter_mut().zip(crow) {
                *o += aip * cij;
            }
        }
    }
}

fn shape_err(primitive: &'static str, lhs: &[usize], rhs: &[usize]) -> XmError {
    XmError::ShapeMismatch {
        primitive,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// ── primitives ──────────────────────────────────────────────────────

/// 2-D matrix product: (m×k) · (k×n) -> (m×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> XmResult<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    mm_acc(&a.data(), &b.data(), m, k, n, &mut out);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            // dA = dC · Bᵀ ; dB = Aᵀ · dC
            mm_bt_acc(args.out_grad, args.parents[1], m, n, k, &mut args.grads[0]);
            mm_at_acc(args.parents[0], args.out_grad, m, k, n, &mut args.grads[1]);
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> XmResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|args: BackwardArgs<'_>| {
            for (g, &u) in args.grads[0].iter_mut().zip(args.out_grad) {
                *g += u;
            }
            for (g, &u) in args.grads[1].iter_mut().zip(args.out_grad) {
                *g += u;
            }
        }),
    ))
}

/// Elementwise (Hadamard) product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> XmResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|args: BackwardArgs<'_>| {
            for i in 0..args.out_grad.len() {
                args.grads[0][i] += args.out_grad[i] * args.parents[1][i];
                args.grads[1][i] += args.out_grad[i] * args.parents[0][i];
            }
        }),
    ))
}

/// Multiply every element by a constant.
pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            for (g, &u) in args.grads[0].iter_mut().zip(args.out_grad) {
                *g += factor * u;
            }
        }),
    )
}

/// Add a rank-1 bias over the last axis: (…×d) + (d).
pub fn bias_add(a: &Tensor, b: &Tensor) -> XmResult<Tensor> {
    let d = *a.shape().last().unwrap_or(&0);
    if b.shape().len() != 1 || b.shape()[0] != d {
        return Err(shape_err("bias_add", a.shape(), b.shape()));
    }
    let bd = b.data();
    let out: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + bd[i % d])
        .collect();
    drop(bd);
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            for (i, &u) in args.out_grad.iter().enumerate() {
                args.grads[0][i] += u;
                args.grads[1][i % d] += u;
            }
        }),
    ))
}

/// Concatenate tensors along `axis`; all other dims must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> XmResult<Tensor> {
    if parts.is_empty() {
        return Err(XmError::InvalidArgument("concat of zero tensors".into()));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(XmError::InvalidArgument(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for p in parts {
        if p.shape().len() != rank {
            return Err(shape_err("concat", parts[0].shape(), p.shape()));
        }
        for (k, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if k != axis && a != b {
                return Err(shape_err("concat", parts[0].shape(), p.shape()));
            }
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let out_axis = out_shape[axis];
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let ax = p.shape()[axis];
        spans.push((offset, ax));
        let pd = p.data();
        for o in 0..outer {
            let src = &pd[o * ax * inner..(o + 1) * ax * inner];
            let dst = &mut out[(o * out_axis + offset) * inner..(o * out_axis + offset + ax) * inner];
            dst.copy_from_slice(src);
        }
        offset += ax;
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        parts.iter().map(|p| (*p).clone()).collect(),
        Box::new(move |args: BackwardArgs<'_>| {
            for (idx, &(off, ax)) in spans.iter().enumerate() {
                for o in 0..outer {
                    let src = &args.out_grad
                        [(o * out_axis + off) * inner..(o * out_axis + off + ax) * inner];
                    let dst = &mut args.grads[idx][o * ax * inner..(o + 1) * ax * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }),
    ))
}

/// Slice `len` entries starting at `offset` along `axis` (the split primitive).
pub fn narrow(a: &Tensor, axis: usize, offset: usize, len: usize) -> XmResult<Tensor> {
    let shape = a.shape();
    if axis >= shape.len() || offset + len > shape[axis] {
        return Err(XmError::InvalidArgument(format!(
            "split [{offset}, {offset}+{len}) on axis {axis} of shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![0.0; outer * len * inner];
    {
        let ad = a.data();
        for o in 0..outer {
            let src = &ad[(o * ax + offset) * inner..(o * ax + offset + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            for o in 0..outer {
                let dst = &mut args.grads[0][(o * ax + offset) * inner..(o * ax + offset + len) * inner];
                let src = &args.out_grad[o * len * inner..(o + 1) * len * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }),
    ))
}

/// 2-D transpose.
pub fn transpose(a: &Tensor) -> XmResult<Tensor> {
    if a.shape().len() != 2 {
        return Err(XmError::InvalidArgument(format!(
            "transpose expects rank 2, got {:?}",
            a.shape()
        )));
    }
    permute(a, &[1, 0])
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_raw(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    let rank = shape.len();
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        let mut dst = 0;
        for (d, &stride) in in_strides.iter().enumerate().take(rank) {
            let coord = rem / stride;
            rem %= stride;
            // position of input axis d in the output
            let od = perm.iter().position(|&p| p == d).unwrap();
            dst += coord * out_strides[od];
        }
        out[dst] = v;
    }
    (out_shape, out)
}

/// Reorder axes by `perm` (a permutation of 0..rank).
pub fn permute(a: &Tensor, perm: &[usize]) -> XmResult<Tensor> {
    let rank = a.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(XmError::InvalidArgument(format!(
            "invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let (out_shape, out) = permute_raw(&a.data(), a.shape(), perm);
    let in_shape = a.shape().to_vec();
    let perm_owned = perm.to_vec();
    Ok(Tensor::from_op(
        out_shape.clone(),
        out,
        vec![a.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            // inverse permutation maps output grads back to input layout
            let mut inv = vec![0; perm_owned.len()];
            for (i, &p) in perm_owned.iter().enumerate() {
                inv[p] = i;
            }
            let (_, g) = permute_raw(args.out_grad, &out_shape, &inv);
            debug_assert_eq!(g.len(), in_shape.iter().product::<usize>());
            for (d, s) in args.grads[0].iter_mut().zip(g) {
                *d += s;
            }
        }),
    ))
}

/// Numerically stable softmax over the last axis.
pub fn softmax(a: &Tensor) -> XmResult<Tensor> {
    let d = *a.shape().last().ok_or_else(|| {
        XmError::InvalidArgument("softmax on rank-0 tensor".into())
    })?;
    if d == 0 {
        return Err(XmError::InvalidArgument("softmax over empty axis".into()));
    }
    let ad = a.data();
    let rows = ad.len() / d;
    let mut out = vec![0.0; ad.len()];
    for r in 0..rows {
        let row = &ad[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // a fully masked row is an error; NaN rows propagate NaN instead so
        // poisoned values surface downstream as a non-finite loss
        if !max.is_finite() && !row.iter().any(|x| x.is_nan()) {
            return Err(XmError::InvalidArgument(format!(
                "softmax row {r} has no finite entries"
            )));
        }
        let orow = &mut out[r * d..(r + 1) * d];
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    drop(ad);
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            // dx_i = y_i * (dy_i - Σ_j dy_j y_j), per row
            let rows = args.out_data.len() / d;
            for r in 0..rows {
                let y = &args.out_data[r * d..(r + 1) * d];
                let dy = &args.out_grad[r * d..(r + 1) * d];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                let g = &mut args.grads[0][r * d..(r + 1) * d];
                for i in 0..d {
                    g[i] += y[i] * (dy[i] - dot);
                }
            }
        }),
    ))
}

/// Natural log, elementwise.
pub fn log(a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.data().iter().map(|x| x.ln()).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(|args: BackwardArgs<'_>| {
            for i in 0..args.out_grad.len() {
                args.grads[0][i] += args.out_grad[i] / args.parents[0][i];
            }
        }),
    )
}

/// Rectified linear unit, elementwise. NaN propagates rather than being
/// silently clamped, so poisoned inputs surface as a non-finite loss.
pub fn relu(a: &Tensor) -> Tensor {
    let out: Vec<f64> = a
        .data()
        .iter()
        .map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(|args: BackwardArgs<'_>| {
            for i in 0..args.out_grad.len() {
                if args.parents[0][i] > 0.0 {
                    args.grads[0][i] += args.out_grad[i];
                }
            }
        }),
    )
}

/// Layer normalization over the last axis with learned gain and bias.
///
/// With gain 1 and bias 0, a constant row maps to zero output: the epsilon
/// inside the square root absorbs the zero variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> XmResult<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err("layernorm", x.shape(), gain.shape()));
    }
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let rows = xd.len() / d;
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = gd[i] * (row[i] - mean) * inv_std + bd[i];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            let rows = args.out_grad.len() / d;
            let xv = args.parents[0];
            let gv = args.parents[1];
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let dy = &args.out_grad[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();

                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for i in 0..d {
                    let xhat = (row[i] - mean) * inv_std;
                    let dxhat = dy[i] * gv[i];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;

                for i in 0..d {
                    let xhat = (row[i] - mean) * inv_std;
                    let dxhat = dy[i] * gv[i];
                    args.grads[0][r * d + i] +=
                        inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    args.grads[1][i] += dy[i] * xhat;
                    args.grads[2][i] += dy[i];
                }
            }
        }),
    ))
}

/// Row gather from an embedding table: (V×d), ids -> (len×d).
pub fn embedding_lookup(table: &Tensor, ids: &[u32]) -> XmResult<Tensor> {
    if table.shape().len() != 2 {
        return Err(XmError::InvalidArgument(format!(
            "embedding table must be rank 2, got {:?}",
            table.shape()
        )));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    for &id in ids {
        if id as usize >= v {
            return Err(XmError::VocabOutOfRange { id, vocab_size: v });
        }
    }
    let td = table.data();
    let mut out = vec![0.0; ids.len() * d];
    for (j, &id) in ids.iter().enumerate() {
        out[j * d..(j + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
    }
    drop(td);
    let ids_owned: Vec<u32> = ids.to_vec();
    Ok(Tensor::from_op(
        vec![ids.len(), d],
        out,
        vec![table.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            for (j, &id) in ids_owned.iter().enumerate() {
                let src = &args.out_grad[j * d..(j + 1) * d];
                let dst = &mut args.grads[0][id as usize * d..(id as usize + 1) * d];
                for (g, &s) in dst.iter_mut().zip(src) {
                    *g += s;
                }
            }
        }),
    ))
}

/// Reinterpret the flat data under a new shape of equal element count.
pub fn reshape(a: &Tensor, shape: &[usize]) -> XmResult<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(shape_err("reshape", a.shape(), shape));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(|args: BackwardArgs<'_>| {
            for (g, &u) in args.grads[0].iter_mut().zip(args.out_grad) {
                *g += u;
            }
        }),
    ))
}

/// Replace entries where `mask` is true with `value`. The mask length must
/// evenly divide the element count and is applied cyclically over the
/// trailing dimensions (so a (q×k) mask broadcasts over a leading head axis).
pub fn masked_fill(a: &Tensor, mask: &[bool], value: f64) -> XmResult<Tensor> {
    if mask.is_empty() || !a.numel().is_multiple_of(mask.len()) {
        return Err(XmError::InvalidArgument(format!(
            "masked-fill: mask of length {} does not tile shape {:?}",
            mask.len(),
            a.shape()
        )));
    }
    let out: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if mask[i % mask.len()] { value } else { x })
        .collect();
    let mask_owned: Vec<bool> = mask.to_vec();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            for (i, &u) in args.out_grad.iter().enumerate() {
                if !mask_owned[i % mask_owned.len()] {
                    args.grads[0][i] += u;
                }
            }
        }),
    ))
}

fn reduce(a: &Tensor, axis: Option<usize>, mean: bool) -> Tensor {
    match axis {
        None => {
            let n = a.numel() as f64;
            let sum: f64 = a.data().iter().sum();
            let value = if mean { sum / n } else { sum };
            let denom = if mean { n } else { 1.0 };
            Tensor::from_op(
                vec![1],
                vec![value],
                vec![a.clone()],
                Box::new(move |args: BackwardArgs<'_>| {
                    let u = args.out_grad[0] / denom;
                    for g in args.grads[0].iter_mut() {
                        *g += u;
                    }
                }),
            )
        }
        Some(ax) => {
            let shape = a.shape().to_vec();
            assert!(ax < shape.len(), "reduce axis {ax} out of range");
            let outer: usize = shape[..ax].iter().product();
            let len = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let mut out_shape = shape.clone();
            out_shape.remove(ax);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            let denom = if mean { len as f64 } else { 1.0 };
            let ad = a.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += ad[(o * len + l) * inner + i];
                    }
                }
            }
            for v in out.iter_mut() {
                *v /= denom;
            }
            drop(ad);
            Tensor::from_op(
                out_shape,
                out,
                vec![a.clone()],
                Box::new(move |args: BackwardArgs<'_>| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                args.grads[0][(o * len + l) * inner + i] +=
                                    args.out_grad[o * inner + i] / denom;
                            }
                        }
                    }
                }),
            )
        }
    }
}

/// Sum of all elements (axis `None`) or along an axis.
pub fn reduce_sum(a: &Tensor, axis: Option<usize>) -> Tensor {
    reduce(a, axis, false)
}

/// Mean of all elements (axis `None`) or along an axis.
pub fn reduce_mean(a: &Tensor, axis: Option<usize>) -> Tensor {
    reduce(a, axis, true)
}

/// 3×3 convolution with stride 2 and one-pixel zero padding on both axes:
/// (C_in×H×W) ⋆ (C_out×C_in×3×3) + bias -> (C_out×⌈H/2⌉×⌈W/2⌉).
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> XmResult<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[0] != ws[1] {
        return Err(shape_err("conv2d", xs, ws));
    }
    let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
    let cout = ws[0];
    if b.shape() != [cout] {
        return Err(shape_err("conv2d", ws, b.shape()));
    }
    let oh = h.div_ceil(2);
    let ow = wdt.div_ceil(2);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = bd[co];
                for ci in 0..cin {
                    for kh in 0..3usize {
                        let ih = (y * 2 + kh) as isize - 1;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kw in 0..3usize {
                            let iw = (xo * 2 + kw) as isize - 1;
                            if iw < 0 || iw as usize >= wdt {
                                continue;
                            }
                            acc += xd[(ci * h + ih as usize) * wdt + iw as usize]
                                * wd[((co * cin + ci) * 3 + kh) * 3 + kw];
                        }
                    }
                }
                out[(co * oh + y) * ow + xo] = acc;
            }
        }
    }
    drop(xd);
    drop(wd);
    drop(bd);
    Ok(Tensor::from_op(
        vec![cout, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |args: BackwardArgs<'_>| {
            let xv = args.parents[0];
            let wv = args.parents[1];
            for co in 0..cout {
                for y in 0..oh {
                    for xo in 0..ow {
                        let g = args.out_grad[(co * oh + y) * ow + xo];
                        if g == 0.0 {
                            continue;
                        }
                        args.grads[2][co] += g;
                        for ci in 0..cin {
                            for kh in 0..3usize {
                                let ih = (y * 2 + kh) as isize - 1;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                for kw in 0..3usize {
                                    let iw = (xo * 2 + kw) as isize - 1;
                                    if iw < 0 || iw as usize >= wdt {
                                        continue;
                                    }
                                    let xi = (ci * h + ih as usize) * wdt + iw as usize;
                                    let wi = ((co * cin + ci) * 3 + kh) * 3 + kw;
                                    args.grads[0][xi] += g * wv[wi];
                                    args.grads[1][wi] += g * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }),
    ))
}

// ── uniform dispatch surface ────────────────────────────────────────

/// Primitive kind plus its attributes, for table-driven application.
#[derive(Clone, Debug)]
pub enum Primitive {
    Matmul,
    Add,
    Mul,
    Scale { factor: f64 },
    BiasAdd,
    Concat { axis: usize },
    Split { axis: usize, offset: usize, len: usize },
    Transpose { perm: Option<Vec<usize>> },
    Softmax,
    Log,
    Relu,
    LayerNorm { eps: f64 },
    EmbeddingLookup { ids: Vec<u32> },
    Reshape { shape: Vec<usize> },
    MaskedFill { mask: Vec<bool>, value: f64 },
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    Conv2d,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::BiasAdd => "bias-add",
            Primitive::Concat { .. } => "concat",
            Primitive::Split { .. } => "split",
            Primitive::Transpose { .. } => "transpose",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Relu => "relu",
            Primitive::LayerNorm { .. } => "layernorm",
            Primitive::EmbeddingLookup { .. } => "embedding-lookup",
            Primitive::Reshape { .. } => "reshape",
            Primitive::MaskedFill { .. } => "masked-fill",
            Primitive::ReduceSum { .. } => "reduce-sum",
            Primitive::ReduceMean { .. } => "reduce-mean",
            Primitive::Conv2d => "conv2d",
        }
    }
}

fn expect_inputs(p: &Primitive, inputs: &[&Tensor], n: usize) -> XmResult<()> {
    if inputs.len() != n {
        return Err(XmError::InvalidArgument(format!(
            "{} expects {} inputs, got {}",
            p.name(),
            n,
            inputs.len()
        )));
    }
    Ok(())
}

/// Apply a primitive by kind. Every differentiable operation in the crate is
/// reachable through this table, which the gradient-check harness iterates.
pub fn apply_primitive(p: &Primitive, inputs: &[&Tensor]) -> XmResult<Tensor> {
    match p {
        Primitive::Matmul => {
            expect_inputs(p, inputs, 2)?;
            matmul(inputs[0], inputs[1])
        }
        Primitive::Add => {
            expect_inputs(p, inputs, 2)?;
            add(inputs[0], inputs[1])
        }
        Primitive::Mul => {
            expect_inputs(p, inputs, 2)?;
            mul(inputs[0], inputs[1])
        }
        Primitive::Scale { factor } => {
            expect_inputs(p, inputs, 1)?;
            Ok(scale(inputs[0], *factor))
        }
        Primitive::BiasAdd => {
            expect_inputs(p, inputs, 2)?;
            bias_add(inputs[0], inputs[1])
        }
        Primitive::Concat { axis } => concat(inputs, *axis),
        Primitive::Split { axis, offset, len } => {
            expect_inputs(p, inputs, 1)?;
            narrow(inputs[0], *axis, *offset, *len)
        }
        Primitive::Transpose { perm } => {
            expect_inputs(p, inputs, 1)?;
            match perm {
                Some(perm) => permute(inputs[0], perm),
                None => transpose(inputs[0]),
            }
        }
        Primitive::Softmax => {
            expect_inputs(p, inputs, 1)?;
            softmax(inputs[0])
        }
        Primitive::Log => {
            expect_inputs(p, inputs, 1)?;
            Ok(log(inputs[0]))
        }
        Primitive::Relu => {
            expect_inputs(p, inputs, 1)?;
            Ok(relu(inputs[0]))
        }
        Primitive::LayerNorm { eps } => {
            expect_inputs(p, inputs, 3)?;
            layer_norm(inputs[0], inputs[1], inputs[2], *eps)
        }
        Primitive::EmbeddingLookup { ids } => {
            expect_inputs(p, inputs, 1)?;
            embedding_lookup(inputs[0], ids)
        }
        Primitive::Reshape { shape } => {
            expect_inputs(p, inputs, 1)?;
            reshape(inputs[0], shape)
        }
        Primitive::MaskedFill { mask, value } => {
            expect_inputs(p, inputs, 1)?;
            masked_fill(inputs[0], mask, *value)
        }
        Primitive::ReduceSum { axis } => {
            expect_inputs(p, inputs, 1)?;
            Ok(reduce_sum(inputs[0], *axis))
        }
        Primitive::ReduceMean { axis } => {
            expect_inputs(p, inputs, 1)?;
            Ok(reduce_mean(inputs[0], *axis))
        }
        Primitive::Conv2d => {
            expect_inputs(p, inputs, 3)?;
            conv2d(inputs[0], inputs[1], inputs[2])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let s = softmax(&Tensor::from_vec(vec![2], vec![0.0, 0.0])).unwrap();
        assert_close(&s.to_vec(), &[0.5, 0.5], 1e-15);

        let s = softmax(&Tensor::from_vec(vec![2], vec![0.0, 3f64.ln()])).unwrap();
        assert_close(&s.to_vec(), &[0.25, 0.75], 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = crate::numerics::rng::Rng::seed_from_u64(5);
        for _ in 0..50 {
            let row: Vec<f64> = (0..7).map(|_| rng.uniform_in(-30.0, 30.0)).collect();
            let shifted: Vec<f64> = row.iter().map(|x| x + 13.75).collect();
            let a = softmax(&Tensor::from_vec(vec![7], row)).unwrap().to_vec();
            let b = softmax(&Tensor::from_vec(vec![7], shifted)).unwrap().to_vec();
            let sum: f64 = a.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(a.iter().all(|&p| p > 0.0));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let t = Tensor::from_vec(vec![2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(softmax(&t).is_err());
    }

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let i2 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::from_vec(vec![2, 2], vec![3.0, -2.0, 0.5, 7.0]);
        let out = matmul(&i2, &a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_shape_mismatch_names_primitive() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let x = Tensor::from_vec(vec![1, 4], vec![5.0; 4]);
        let gain = Tensor::from_vec(vec![4], vec![1.0; 4]);
        let bias = Tensor::from_vec(vec![4], vec![0.0; 4]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in y.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::zeros(vec![4, 3]);
        let err = embedding_lookup(&table, &[1, 9]).unwrap_err();
        assert!(matches!(err, XmError::VocabOutOfRange { id: 9, vocab_size: 4 }));
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = narrow(&c, 1, 0, 2).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        let tail = narrow(&c, 1, 2, 3).unwrap();
        assert_eq!(tail.to_vec(), b.to_vec());
    }

    #[test]
    fn masked_fill_tiles_over_leading_axis() {
        let x = Tensor::from_vec(vec![2, 2, 2], vec![1.0; 8]);
        let mask = vec![false, true, false, false];
        let y = masked_fill(&x, &mask, -9.0).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, -9.0, 1.0, 1.0, 1.0, -9.0, 1.0, 1.0]);
    }

    #[test]
    fn conv2d_output_geometry_matches_ceil_halving() {
        for (h, expect) in [(16usize, 8usize), (17, 9), (4, 2), (5, 3)] {
            let x = Tensor::zeros(vec![1, h, 6]);
            let w = Tensor::zeros(vec![2, 1, 3, 3]);
            let b = Tensor::zeros(vec![2]);
            let y = conv2d(&x, &w, &b).unwrap();
            assert_eq!(y.shape(), &[2, expect, 3]);
        }
    }

    #[test]
    fn permute_roundtrip_restores_layout() {
        let x = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|i| i as f64).collect());
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn reduce_axis_matches_manual_sums() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(reduce_sum(&x, Some(0)).to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_sum(&x, Some(1)).to_vec(), vec![6.0, 15.0]);
        assert_eq!(reduce_mean(&x, None).value(), 3.5);
    }
}
