//! Primitive differentiable operations.
//!
//! Each op validates shapes, computes the forward value, and registers a
//! backward closure producing one gradient buffer per parent. Gradient
//! accumulation order is fixed by the recorded graph, so results are
//! bit-reproducible for a given seed and precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};
use crate::nn::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    SiLU,
    ReLU,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// `[B,C,L] -> [B,C]`, mean over time.
    GlobalAvgTime,
    /// `[B,C,L] -> [B,C]`, max over time.
    GlobalMaxTime,
    /// `[B,C,L] -> [B,1,L]`, mean over channels.
    AvgOverChannels,
    /// `[B,C,L] -> [B,1,L]`, max over channels.
    MaxOverChannels,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "add: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::node(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.to_vec()]),
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "mul: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::node(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = pa.data();
            let bv = pb.data();
            let da: Vec<T> = g.iter().zip(bv.iter()).map(|(&gi, &y)| gi * y).collect();
            let db: Vec<T> = g.iter().zip(av.iter()).map(|(&gi, &x)| gi * x).collect();
            vec![da, db]
        }),
    ))
}

/// Elementwise `scale * x + shift`.
pub fn affine<T: Real>(x: &Tensor<T>, scale: f64, shift: f64) -> Tensor<T> {
    let k = T::cast(scale);
    let c = T::cast(shift);
    let data: Vec<T> = x.data().iter().map(|&v| k * v + c).collect();
    Tensor::node(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| vec![g.iter().map(|&gi| gi * k).collect()]),
    )
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::node(
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(move |g| vec![vec![g[0]; n]]),
    )
}

/// Mean of all elements, as a scalar tensor.
pub fn mean_all<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::cast(1.0 / n as f64);
    let s: T = x.data().iter().copied().sum();
    Tensor::node(
        vec![1],
        vec![s * inv],
        vec![x.clone()],
        Box::new(move |g| vec![vec![g[0] * inv; n]]),
    )
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Elementwise activation.
pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    let xs = x.to_vec();
    let data: Vec<T> = match kind {
        Activation::SiLU => xs.iter().map(|&v| v * sigmoid_scalar(v)).collect(),
        Activation::ReLU => xs.iter().map(|&v| v.max(T::zero())).collect(),
        Activation::Sigmoid => xs.iter().map(|&v| sigmoid_scalar(v)).collect(),
        Activation::Tanh => xs.iter().map(|&v| v.tanh()).collect(),
    };
    let y = data.clone();
    Tensor::node(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let dx: Vec<T> = match kind {
                Activation::SiLU => g
                    .iter()
                    .zip(xs.iter())
                    .map(|(&gi, &v)| {
                        let s = sigmoid_scalar(v);
                        gi * s * (T::one() + v * (T::one() - s))
                    })
                    .collect(),
                Activation::ReLU => g
                    .iter()
                    .zip(xs.iter())
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect(),
                Activation::Sigmoid => g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect(),
                Activation::Tanh => g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &t)| gi * (T::one() - t * t))
                    .collect(),
            };
            vec![dx]
        }),
    )
}

/// Concatenate along `axis`; all non-axis dimensions must agree.
pub fn concat<T: Real>(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if tensors.is_empty() {
        return Err(shape_err("concat: empty input list"));
    }
    let rank = tensors[0].rank();
    if axis >= rank {
        return Err(shape_err(format!("concat: axis {axis} out of rank {rank}")));
    }
    for t in tensors {
        if t.rank() != rank {
            return Err(shape_err("concat: rank mismatch"));
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != tensors[0].shape()[d] {
                return Err(shape_err(format!(
                    "concat: non-axis dim {d} mismatch: {:?} vs {:?}",
                    t.shape(),
                    tensors[0].shape()
                )));
            }
        }
    }
    let mut shape = tensors[0].shape().to_vec();
    shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let blocks: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
    let out_row: usize = shape[axis] * inner;

    let mut data = vec![T::zero(); shape.iter().product()];
    for o in 0..outer {
        let mut offset = 0;
        for (t, &blk) in tensors.iter().zip(&blocks) {
            let src = t.data();
            data[o * out_row + offset..o * out_row + offset + blk]
                .copy_from_slice(&src[o * blk..(o + 1) * blk]);
            offset += blk;
        }
    }
    Ok(Tensor::node(
        shape,
        data,
        tensors.to_vec(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<T>> =
                blocks.iter().map(|&blk| vec![T::zero(); outer * blk]).collect();
            for o in 0..outer {
                let mut offset = 0;
                for (gi, &blk) in grads.iter_mut().zip(&blocks) {
                    gi[o * blk..(o + 1) * blk]
                        .copy_from_slice(&g[o * out_row + offset..o * out_row + offset + blk]);
                    offset += blk;
                }
            }
            grads
        }),
    ))
}

/// View with a new shape of equal element count.
pub fn reshape<T: Real>(x: &Tensor<T>, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
    let shape = shape.into();
    if shape.iter().product::<usize>() != x.numel() {
        return Err(shape_err(format!(
            "reshape: {:?} -> {:?} changes element count",
            x.shape(),
            shape
        )));
    }
    Ok(Tensor::node(
        shape,
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g| vec![g.to_vec()]),
    ))
}

/// `[B,C,L] -> [B,L,C]` permutation.
pub fn transpose_cl<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, l] = x.shape() else {
        return Err(shape_err(format!("transpose_cl: expected rank 3, got {:?}", x.shape())));
    };
    let src = x.data();
    let mut data = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for li in 0..l {
                data[bi * l * c + li * c + ci] = src[bi * c * l + ci * l + li];
            }
        }
    }
    drop(src);
    Ok(Tensor::node(
        vec![b, l, c],
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for bi in 0..b {
                for ci in 0..c {
                    for li in 0..l {
                        dx[bi * c * l + ci * l + li] = g[bi * l * c + li * c + ci];
                    }
                }
            }
            vec![dx]
        }),
    ))
}

/// `[B,L,N] -> [B,N]` at time index `t`.
pub fn slice_time<T: Real>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let &[b, l, n] = x.shape() else {
        return Err(shape_err(format!("slice_time: expected rank 3, got {:?}", x.shape())));
    };
    if t >= l {
        return Err(shape_err(format!("slice_time: t={t} out of length {l}")));
    }
    let src = x.data();
    let mut data = vec![T::zero(); b * n];
    for bi in 0..b {
        data[bi * n..(bi + 1) * n].copy_from_slice(&src[bi * l * n + t * n..bi * l * n + (t + 1) * n]);
    }
    drop(src);
    Ok(Tensor::node(
        vec![b, n],
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); b * l * n];
            for bi in 0..b {
                dx[bi * l * n + t * n..bi * l * n + (t + 1) * n]
                    .copy_from_slice(&g[bi * n..(bi + 1) * n]);
            }
            vec![dx]
        }),
    ))
}

/// Stack `L` tensors of shape `[B,N]` into `[B,L,N]`.
pub fn stack_time<T: Real>(steps: &[Tensor<T>]) -> Result<Tensor<T>> {
    if steps.is_empty() {
        return Err(shape_err("stack_time: empty input"));
    }
    let &[b, n] = steps[0].shape() else {
        return Err(shape_err("stack_time: steps must be rank 2"));
    };
    for s in steps {
        if s.shape() != [b, n] {
            return Err(shape_err("stack_time: inconsistent step shapes"));
        }
    }
    let l = steps.len();
    let mut data = vec![T::zero(); b * l * n];
    for (t, s) in steps.iter().enumerate() {
        let sv = s.data();
        for bi in 0..b {
            data[bi * l * n + t * n..bi * l * n + (t + 1) * n]
                .copy_from_slice(&sv[bi * n..(bi + 1) * n]);
        }
    }
    Ok(Tensor::node(
        vec![b, l, n],
        data,
        steps.to_vec(),
        Box::new(move |g| {
            (0..l)
                .map(|t| {
                    let mut ds = vec![T::zero(); b * n];
                    for bi in 0..b {
                        ds[bi * n..(bi + 1) * n]
                            .copy_from_slice(&g[bi * l * n + t * n..bi * l * n + (t + 1) * n]);
                    }
                    ds
                })
                .collect()
        }),
    ))
}

/// Pooling reductions over time or channels.
pub fn pool<T: Real>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let &[b, c, l] = x.shape() else {
        return Err(shape_err(format!("pool: expected rank 3, got {:?}", x.shape())));
    };
    let src = x.data();
    match kind {
        PoolKind::GlobalAvgTime => {
            let inv = T::cast(1.0 / l as f64);
            let mut data = vec![T::zero(); b * c];
            for bi in 0..b {
                for ci in 0..c {
                    let row = &src[bi * c * l + ci * l..bi * c * l + (ci + 1) * l];
                    data[bi * c + ci] = row.iter().copied().sum::<T>() * inv;
                }
            }
            drop(src);
            Ok(Tensor::node(
                vec![b, c],
                data,
                vec![x.clone()],
                Box::new(move |g| {
                    let mut dx = vec![T::zero(); b * c * l];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[bi * c + ci] * inv;
                            for v in &mut dx[bi * c * l + ci * l..bi * c * l + (ci + 1) * l] {
                                *v = gv;
                            }
                        }
                    }
                    vec![dx]
                }),
            ))
        }
        PoolKind::GlobalMaxTime => {
            let mut data = vec![T::zero(); b * c];
            let mut arg = vec![0usize; b * c];
            for bi in 0..b {
                for ci in 0..c {
                    let row = &src[bi * c * l + ci * l..bi * c * l + (ci + 1) * l];
                    let (mut best, mut best_i) = (row[0], 0usize);
                    for (i, &v) in row.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                    data[bi * c + ci] = best;
                    arg[bi * c + ci] = best_i;
                }
            }
            drop(src);
            Ok(Tensor::node(
                vec![b, c],
                data,
                vec![x.clone()],
                Box::new(move |g| {
                    let mut dx = vec![T::zero(); b * c * l];
                    for bi in 0..b {
                        for ci in 0..c {
                            dx[bi * c * l + ci * l + arg[bi * c + ci]] = g[bi * c + ci];
                        }
                    }
                    vec![dx]
                }),
            ))
        }
        PoolKind::AvgOverChannels => {
            let inv = T::cast(1.0 / c as f64);
            let mut data = vec![T::zero(); b * l];
            for bi in 0..b {
                for ci in 0..c {
                    for li in 0..l {
                        data[bi * l + li] += src[bi * c * l + ci * l + li];
                    }
                }
            }
            for v in &mut data {
                *v *= inv;
            }
            drop(src);
            Ok(Tensor::node(
                vec![b, 1, l],
                data,
                vec![x.clone()],
                Box::new(move |g| {
                    let mut dx = vec![T::zero(); b * c * l];
                    for bi in 0..b {
                        for ci in 0..c {
                            for li in 0..l {
                                dx[bi * c * l + ci * l + li] = g[bi * l + li] * inv;
                            }
                        }
                    }
                    vec![dx]
                }),
            ))
        }
        PoolKind::MaxOverChannels => {
            let mut data = vec![T::zero(); b * l];
            let mut arg = vec![0usize; b * l];
            for bi in 0..b {
                for li in 0..l {
                    let (mut best, mut best_c) = (src[bi * c * l + li], 0usize);
                    for ci in 1..c {
                        let v = src[bi * c * l + ci * l + li];
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    data[bi * l + li] = best;
                    arg[bi * l + li] = best_c;
                }
            }
            drop(src);
            Ok(Tensor::node(
                vec![b, 1, l],
                data,
                vec![x.clone()],
                Box::new(move |g| {
                    let mut dx = vec![T::zero(); b * c * l];
                    for bi in 0..b {
                        for li in 0..l {
                            dx[bi * c * l + arg[bi * l + li] * l + li] = g[bi * l + li];
                        }
                    }
                    vec![dx]
                }),
            ))
        }
    }
}

/// Fully connected map `y = x Wᵀ + b` with `x:[B,n]`, `w:[m,n]`, `b:[m]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let &[batch, n] = x.shape() else {
        return Err(shape_err(format!("linear: x must be rank 2, got {:?}", x.shape())));
    };
    let &[m, wn] = w.shape() else {
        return Err(shape_err(format!("linear: w must be rank 2, got {:?}", w.shape())));
    };
    if wn != n {
        return Err(shape_err(format!("linear: x width {n} vs w width {wn}")));
    }
    if let Some(bias) = b {
        if bias.shape() != [m] {
            return Err(shape_err(format!(
                "linear: bias shape {:?}, expected [{m}]",
                bias.shape()
            )));
        }
    }
    let xv = x.data();
    let wv = w.data();
    let mut data = vec![T::zero(); batch * m];
    for bi in 0..batch {
        let xrow = &xv[bi * n..(bi + 1) * n];
        for j in 0..m {
            let wrow = &wv[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for i in 0..n {
                acc += xrow[i] * wrow[i];
            }
            data[bi * m + j] = acc;
        }
    }
    drop(xv);
    drop(wv);
    if let Some(bias) = b {
        let bv = bias.data();
        for bi in 0..batch {
            for j in 0..m {
                data[bi * m + j] += bv[j];
            }
        }
    }

    let px = x.clone();
    let pw = w.clone();
    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = b.is_some();
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    Ok(Tensor::node(
        vec![batch, m],
        data,
        parents,
        Box::new(move |g| {
            let xv = px.data();
            let wv = pw.data();
            let mut dx = vec![T::zero(); batch * n];
            let mut dw = vec![T::zero(); m * n];
            for bi in 0..batch {
                let grow = &g[bi * m..(bi + 1) * m];
                let xrow = &xv[bi * n..(bi + 1) * n];
                for j in 0..m {
                    let gv = grow[j];
                    if gv == T::zero() {
                        continue;
                    }
                    let wrow = &wv[j * n..(j + 1) * n];
                    let dwrow = &mut dw[j * n..(j + 1) * n];
                    for i in 0..n {
                        dx[bi * n + i] += gv * wrow[i];
                        dwrow[i] += gv * xrow[i];
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![T::zero(); m];
                for bi in 0..batch {
                    for j in 0..m {
                        db[j] += g[bi * m + j];
                    }
                }
                grads.push(db);
            }
            grads
        }),
    ))
}

/// Batched matrix product `[B,p,q] x [B,q,r] -> [B,p,r]`.
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let &[ba, p, q] = a.shape() else {
        return Err(shape_err(format!("bmm: lhs must be rank 3, got {:?}", a.shape())));
    };
    let &[bb, qb, r] = b.shape() else {
        return Err(shape_err(format!("bmm: rhs must be rank 3, got {:?}", b.shape())));
    };
    if ba != bb || q != qb {
        return Err(shape_err(format!(
            "bmm: incompatible shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.data();
    let bv = b.data();
    let mut data = vec![T::zero(); ba * p * r];
    for bi in 0..ba {
        for i in 0..p {
            for k in 0..q {
                let x = av[bi * p * q + i * q + k];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[bi * q * r + k * r..bi * q * r + (k + 1) * r];
                let orow = &mut data[bi * p * r + i * r..bi * p * r + (i + 1) * r];
                for j in 0..r {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
    drop(av);
    drop(bv);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::node(
        vec![ba, p, r],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = pa.data();
            let bv = pb.data();
            let mut da = vec![T::zero(); ba * p * q];
            let mut db = vec![T::zero(); ba * q * r];
            for bi in 0..ba {
                for i in 0..p {
                    for j in 0..r {
                        let gv = g[bi * p * r + i * r + j];
                        if gv == T::zero() {
                            continue;
                        }
                        for k in 0..q {
                            da[bi * p * q + i * q + k] += gv * bv[bi * q * r + k * r + j];
                            db[bi * q * r + k * r + j] += gv * av[bi * p * q + i * q + k];
                        }
                    }
                }
            }
            vec![da, db]
        }),
    ))
}

/// Softmax over the last dimension.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let n = *shape
        .last()
        .ok_or_else(|| shape_err("softmax: rank 0 input"))?;
    let rows = x.numel() / n;
    let src = x.data();
    let mut data = vec![T::zero(); x.numel()];
    for ri in 0..rows {
        let row = &src[ri * n..(ri + 1) * n];
        let mx = row.iter().copied().fold(row[0], |a, b| a.max(b));
        let mut denom = T::zero();
        for (o, &v) in data[ri * n..(ri + 1) * n].iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        for o in &mut data[ri * n..(ri + 1) * n] {
            *o = *o / denom;
        }
    }
    drop(src);
    let y = data.clone();
    Ok(Tensor::node(
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for ri in 0..rows {
                let yr = &y[ri * n..(ri + 1) * n];
                let gr = &g[ri * n..(ri + 1) * n];
                let mut dot = T::zero();
                for i in 0..n {
                    dot += yr[i] * gr[i];
                }
                for i in 0..n {
                    dx[ri * n + i] = yr[i] * (gr[i] - dot);
                }
            }
            vec![dx]
        }),
    ))
}

/// Scale each channel of `y:[B,C,L]` by `a:[B,C]`.
pub fn scale_channels<T: Real>(y: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, l] = y.shape() else {
        return Err(shape_err(format!("scale_channels: y must be rank 3, got {:?}", y.shape())));
    };
    if a.shape() != [b, c] {
        return Err(shape_err(format!(
            "scale_channels: weights {:?}, expected [{b},{c}]",
            a.shape()
        )));
    }
    let yv = y.data();
    let av = a.data();
    let mut data = vec![T::zero(); b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let w = av[bi * c + ci];
            let row = &yv[bi * c * l + ci * l..bi * c * l + (ci + 1) * l];
            let orow = &mut data[bi * c * l + ci * l..bi * c * l + (ci + 1) * l];
            for i in 0..l {
                orow[i] = row[i] * w;
            }
        }
    }
    drop(yv);
    drop(av);
    let (py, pa) = (y.clone(), a.clone());
    Ok(Tensor::node(
        vec![b, c, l],
        data,
        vec![y.clone(), a.clone()],
        Box::new(move |g| {
            let yv = py.data();
            let av = pa.data();
            let mut dy = vec![T::zero(); b * c * l];
            let mut da = vec![T::zero(); b * c];
            for bi in 0..b {
                for ci in 0..c {
                    let w = av[bi * c + ci];
                    let base = bi * c * l + ci * l;
                    let mut acc = T::zero();
                    for i in 0..l {
                        dy[base + i] = g[base + i] * w;
                        acc += g[base + i] * yv[base + i];
                    }
                    da[bi * c + ci] = acc;
                }
            }
            vec![dy, da]
        }),
    ))
}

/// Scale each time step of `y:[B,C,L]` by `s:[B,L]`.
pub fn scale_time<T: Real>(y: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, l] = y.shape() else {
        return Err(shape_err(format!("scale_time: y must be rank 3, got {:?}", y.shape())));
    };
    if s.shape() != [b, l] {
        return Err(shape_err(format!(
            "scale_time: weights {:?}, expected [{b},{l}]",
            s.shape()
        )));
    }
    let yv = y.data();
    let sv = s.data();
    let mut data = vec![T::zero(); b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let base = bi * c * l + ci * l;
            for i in 0..l {
                data[base + i] = yv[base + i] * sv[bi * l + i];
            }
        }
    }
    drop(yv);
    drop(sv);
    let (py, ps) = (y.clone(), s.clone());
    Ok(Tensor::node(
        vec![b, c, l],
        data,
        vec![y.clone(), s.clone()],
        Box::new(move |g| {
            let yv = py.data();
            let sv = ps.data();
            let mut dy = vec![T::zero(); b * c * l];
            let mut ds = vec![T::zero(); b * l];
            for bi in 0..b {
                for ci in 0..c {
                    let base = bi * c * l + ci * l;
                    for i in 0..l {
                        dy[base + i] = g[base + i] * sv[bi * l + i];
                        ds[bi * l + i] += g[base + i] * yv[base + i];
                    }
                }
            }
            vec![dy, ds]
        }),
    ))
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout<T: Real>(x: &Tensor<T>, p: f64, rng: &mut ChaCha8Rng, phase: Phase) -> Tensor<T> {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
    if phase == Phase::Eval || p == 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let scale = T::cast(1.0 / keep);
    let mask: Vec<bool> = (0..x.numel()).map(|_| rng.gen::<f64>() >= p).collect();
    let data: Vec<T> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v * scale } else { T::zero() })
        .collect();
    Tensor::node(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(&mask)
                .map(|(&gi, &m)| if m { gi * scale } else { T::zero() })
                .collect()]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn linear_hand_example() {
        // W=[[1,2]], b=[0.5], x=[3,4] -> 11.5
        let x = t(&[1, 2], &[3.0, 4.0]);
        let w = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1], &[0.5]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![11.5]);
    }

    #[test]
    fn linear_identity() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn linear_shape_mismatch_is_error() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(linear(&x, &w, None), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn silu_values() {
        let x = t(&[3], &[0.0, 1.0, -2.0]);
        let y = activation(Activation::SiLU, &x);
        let v = y.to_vec();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] - 0.731059).abs() < 1e-5);
        let relu = activation(Activation::ReLU, &x);
        assert_eq!(relu.to_vec()[2], 0.0);
        let sig = activation(Activation::Sigmoid, &t(&[1], &[0.0]));
        assert_eq!(sig.item(), 0.5);
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool(&x, PoolKind::GlobalAvgTime).unwrap().item(), 2.5);
        assert_eq!(pool(&x, PoolKind::GlobalMaxTime).unwrap().item(), 4.0);
        // channels [[1,5],[3,2]] -> elementwise max over channels [3,5]
        let y = t(&[1, 2, 2], &[1.0, 5.0, 3.0, 2.0]);
        assert_eq!(pool(&y, PoolKind::MaxOverChannels).unwrap().to_vec(), vec![3.0, 5.0]);
        assert_eq!(pool(&y, PoolKind::AvgOverChannels).unwrap().to_vec(), vec![2.0, 3.5]);
    }

    #[test]
    fn max_pool_grad_routes_to_first_argmax() {
        let x = Tensor::from_vec(vec![1, 1, 4], vec![1.0f64, 7.0, 7.0, 2.0]).requires_grad();
        let m = pool(&x, PoolKind::GlobalMaxTime).unwrap();
        let loss = sum_all(&m);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let b = t(&[2, 1, 3], &[13., 14., 15., 16., 17., 18.]);
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        let cv = c.to_vec();
        assert_eq!(&cv[0..6], &a.to_vec()[0..6]);
        assert_eq!(&cv[6..9], &b.to_vec()[0..3]);
        assert_eq!(&cv[9..15], &a.to_vec()[6..12]);
        assert_eq!(&cv[15..18], &b.to_vec()[3..6]);

        let single = concat(&[a.clone()], 1).unwrap();
        assert_eq!(single.to_vec(), a.to_vec());
    }

    #[test]
    fn concat_mismatch_is_error() {
        let a = t(&[1, 2, 3], &[0.0; 6]);
        let b = t(&[1, 2, 4], &[0.0; 8]);
        assert!(concat(&[a, b], 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 10.0, 10.0, 10.0]);
        let y = softmax_lastdim(&x).unwrap();
        let v = y.to_vec();
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn transpose_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let y = transpose_cl(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        assert_eq!(y.data()[0 * 12 + 0 * 3 + 2], x.data()[0 * 12 + 2 * 4 + 0]);
    }

    #[test]
    fn stack_slice_inverse() {
        let s0 = t(&[2, 2], &[1., 2., 3., 4.]);
        let s1 = t(&[2, 2], &[5., 6., 7., 8.]);
        let seq = stack_time(&[s0.clone(), s1.clone()]).unwrap();
        assert_eq!(seq.shape(), &[2, 2, 2]);
        assert_eq!(slice_time(&seq, 0).unwrap().to_vec(), s0.to_vec());
        assert_eq!(slice_time(&seq, 1).unwrap().to_vec(), s1.to_vec());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks() {
        use crate::rng::RngStream;
        let x = t(&[1, 100], &[1.0; 100]);
        let mut rng = RngStream::new(1).rng();
        let y = dropout(&x, 0.5, &mut rng, Phase::Eval);
        assert_eq!(y.to_vec(), x.to_vec());
        let z = dropout(&x, 0.5, &mut rng, Phase::Train);
        let kept = z.to_vec().iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 20 && kept < 80);
        assert!(z.to_vec().iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }
}
