//! 1D convolution (cross-correlation) ops.

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// Output length for a 1D convolution.
pub fn conv_out_len(l: usize, k: usize, stride: usize, padding: usize) -> usize {
    (l + 2 * padding - k) / stride + 1
}

/// Cross-correlation of `x:[B,Cin,L]` with `w:[Cout,Cin,k]` and optional
/// `bias:[Cout]`. No kernel flip. Output `[B,Cout,L']` with
/// `L' = (L + 2*padding - k)/stride + 1`.
pub fn conv1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let &[b, cin, l] = x.shape() else {
        return Err(Error::Shape(format!(
            "conv1d: input must be [B,Cin,L], got {:?}",
            x.shape()
        )));
    };
    let &[cout, wcin, k] = w.shape() else {
        return Err(Error::Shape(format!(
            "conv1d: weight must be [Cout,Cin,k], got {:?}",
            w.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv1d: input channels {cin} but weight expects {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv1d: stride must be >= 1".into()));
    }
    if l + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv1d: kernel {k} longer than padded input {}",
            l + 2 * padding
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv1d: bias shape {:?}, expected [{cout}]",
                bt.shape()
            )));
        }
    }
    let lo = conv_out_len(l, k, stride, padding);

    let xv = x.data();
    let wv = w.data();
    let mut data = vec![T::zero(); b * cout * lo];
    for bi in 0..b {
        for co in 0..cout {
            let base_o = bi * cout * lo + co * lo;
            for p in 0..lo {
                // valid kernel tap range for this output position
                let start = (p * stride) as isize - padding as isize;
                let k_lo = (-start).max(0) as usize;
                let k_hi = ((l as isize - start).min(k as isize)).max(0) as usize;
                let mut acc = T::zero();
                for ci in 0..cin {
                    let xrow = &xv[bi * cin * l + ci * l..bi * cin * l + (ci + 1) * l];
                    let wrow = &wv[co * cin * k + ci * k..co * cin * k + (ci + 1) * k];
                    for kk in k_lo..k_hi {
                        acc += xrow[(start + kk as isize) as usize] * wrow[kk];
                    }
                }
                data[base_o + p] = acc;
            }
        }
    }
    drop(xv);
    drop(wv);
    if let Some(bt) = bias {
        let bv = bt.data();
        for bi in 0..b {
            for co in 0..cout {
                let base_o = bi * cout * lo + co * lo;
                for p in 0..lo {
                    data[base_o + p] += bv[co];
                }
            }
        }
    }

    let px = x.clone();
    let pw = w.clone();
    let has_bias = bias.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    Ok(Tensor::node(
        vec![b, cout, lo],
        data,
        parents,
        Box::new(move |g| {
            let xv = px.data();
            let wv = pw.data();
            let mut dx = vec![T::zero(); b * cin * l];
            let mut dw = vec![T::zero(); cout * cin * k];
            for bi in 0..b {
                for co in 0..cout {
                    let grow = &g[bi * cout * lo + co * lo..bi * cout * lo + (co + 1) * lo];
                    for p in 0..lo {
                        let gv = grow[p];
                        if gv == T::zero() {
                            continue;
                        }
                        let start = (p * stride) as isize - padding as isize;
                        let k_lo = (-start).max(0) as usize;
                        let k_hi = ((l as isize - start).min(k as isize)).max(0) as usize;
                        for ci in 0..cin {
                            let xbase = bi * cin * l + ci * l;
                            let wbase = co * cin * k + ci * k;
                            for kk in k_lo..k_hi {
                                let pos = (start + kk as isize) as usize;
                                dx[xbase + pos] += gv * wv[wbase + kk];
                                dw[wbase + kk] += gv * xv[xbase + pos];
                            }
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![T::zero(); cout];
                for bi in 0..b {
                    for co in 0..cout {
                        for p in 0..lo {
                            db[co] += g[bi * cout * lo + co * lo + p];
                        }
                    }
                }
                grads.push(db);
            }
            grads
        }),
    ))
}

/// Depthwise cross-correlation: each channel of `x:[B,C,L]` is filtered by
/// its own kernel from `w:[C,k]`. Output `[B,C,L']`.
pub fn conv1d_depthwise<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let &[b, c, l] = x.shape() else {
        return Err(Error::Shape(format!(
            "conv1d_depthwise: input must be [B,C,L], got {:?}",
            x.shape()
        )));
    };
    let &[wc, k] = w.shape() else {
        return Err(Error::Shape(format!(
            "conv1d_depthwise: weight must be [C,k], got {:?}",
            w.shape()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "conv1d_depthwise: input channels {c} but weight expects {wc}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv1d_depthwise: stride must be >= 1".into()));
    }
    if l + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv1d_depthwise: kernel {k} longer than padded input {}",
            l + 2 * padding
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [c] {
            return Err(Error::Shape(format!(
                "conv1d_depthwise: bias shape {:?}, expected [{c}]",
                bt.shape()
            )));
        }
    }
    let lo = conv_out_len(l, k, stride, padding);

    let xv = x.data();
    let wv = w.data();
    let bv: Option<Vec<T>> = bias.map(|t| t.to_vec());
    let mut data = vec![T::zero(); b * c * lo];
    for bi in 0..b {
        for ci in 0..c {
            let xrow = &xv[bi * c * l + ci * l..bi * c * l + (ci + 1) * l];
            let wrow = &wv[ci * k..(ci + 1) * k];
            let base_o = bi * c * lo + ci * lo;
            let b0 = bv.as_ref().map(|v| v[ci]).unwrap_or_else(T::zero);
            for p in 0..lo {
                let start = (p * stride) as isize - padding as isize;
                let k_lo = (-start).max(0) as usize;
                let k_hi = ((l as isize - start).min(k as isize)).max(0) as usize;
                let mut acc = b0;
                for kk in k_lo..k_hi {
                    acc += xrow[(start + kk as isize) as usize] * wrow[kk];
                }
                data[base_o + p] = acc;
            }
        }
    }
    drop(xv);
    drop(wv);

    let px = x.clone();
    let pw = w.clone();
    let has_bias = bias.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    Ok(Tensor::node(
        vec![b, c, lo],
        data,
        parents,
        Box::new(move |g| {
            let xv = px.data();
            let wv = pw.data();
            let mut dx = vec![T::zero(); b * c * l];
            let mut dw = vec![T::zero(); c * k];
            for bi in 0..b {
                for ci in 0..c {
                    let xbase = bi * c * l + ci * l;
                    let wbase = ci * k;
                    let grow = &g[bi * c * lo + ci * lo..bi * c * lo + (ci + 1) * lo];
                    for p in 0..lo {
                        let gv = grow[p];
                        if gv == T::zero() {
                            continue;
                        }
                        let start = (p * stride) as isize - padding as isize;
                        let k_lo = (-start).max(0) as usize;
                        let k_hi = ((l as isize - start).min(k as isize)).max(0) as usize;
                        for kk in k_lo..k_hi {
                            let pos = (start + kk as isize) as usize;
                            dx[xbase + pos] += gv * wv[wbase + kk];
                            dw[wbase + kk] += gv * xv[xbase + pos];
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..lo {
                            db[ci] += g[bi * c * lo + ci * lo + p];
                        }
                    }
                }
                grads.push(db);
            }
            grads
        }),
    ))
}
