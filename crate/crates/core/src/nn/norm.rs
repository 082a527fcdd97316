//! Batch normalization over `[B,C,L]` feature maps.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nn::tensor::{Parameter, Real, Tensor};
use crate::nn::Phase;

/// Per-channel batch normalization with running statistics.
///
/// Train mode normalizes with biased batch statistics over `(B,L)` and
/// updates the running buffers with momentum; eval mode uses the running
/// buffers. Calling eval before any train step normalizes with the initial
/// stats (mean 0, var 1) and logs a warning.
pub struct BatchNorm1d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    seen_batch: Cell<bool>,
}

impl<T: Real> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::full(vec![channels], T::one()).requires_grad(),
            beta: Tensor::zeros(vec![channels]).requires_grad(),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            seen_batch: Cell::new(false),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let &[b, c, l] = x.shape() else {
            return Err(Error::Shape(format!(
                "batchnorm1d: expected [B,C,L], got {:?}",
                x.shape()
            )));
        };
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm1d: {c} channels, layer built for {}",
                self.channels
            )));
        }
        match phase {
            Phase::Train => self.forward_train(x, b, c, l),
            Phase::Eval => self.forward_eval(x, b, c, l),
        }
    }

    fn forward_train(&self, x: &Tensor<T>, b: usize, c: usize, l: usize) -> Result<Tensor<T>> {
        let n = b * l;
        if n < 2 {
            return Err(Error::Validation(format!(
                "batchnorm1d train mode requires B*L >= 2, got {n}"
            )));
        }
        let xv = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                for li in 0..l {
                    s += xv[bi * c * l + ci * l + li];
                }
            }
            mean[ci] = s * T::cast(1.0 / n as f64);
        }
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                for li in 0..l {
                    let d = xv[bi * c * l + ci * l + li] - mean[ci];
                    s += d * d;
                }
            }
            var[ci] = s * T::cast(1.0 / n as f64);
        }
        let invstd: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::cast(self.eps)).sqrt())
            .collect();

        let gv = self.gamma.data();
        let bv = self.beta.data();
        let mut xhat = vec![T::zero(); b * c * l];
        let mut data = vec![T::zero(); b * c * l];
        for bi in 0..b {
            for ci in 0..c {
                let base = bi * c * l + ci * l;
                for li in 0..l {
                    let xh = (xv[base + li] - mean[ci]) * invstd[ci];
                    xhat[base + li] = xh;
                    data[base + li] = gv[ci] * xh + bv[ci];
                }
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);

        // running-stat update is a training-time side effect
        let m = T::cast(self.momentum);
        let om = T::one() - m;
        self.running_mean.with_data_mut(|r| {
            for ci in 0..c {
                r[ci] = om * r[ci] + m * mean[ci];
            }
        });
        self.running_var.with_data_mut(|r| {
            for ci in 0..c {
                r[ci] = om * r[ci] + m * var[ci];
            }
        });
        self.seen_batch.set(true);

        let xhat_saved = xhat;
        let invstd_saved = invstd;
        let pg = self.gamma.clone();
        Ok(Tensor::node(
            vec![b, c, l],
            data,
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |g| {
                let gv = pg.data();
                let nf = T::cast(n as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = bi * c * l + ci * l;
                        for li in 0..l {
                            let gi = g[base + li];
                            sum_g[ci] += gi;
                            sum_gx[ci] += gi * xhat_saved[base + li];
                        }
                    }
                }
                for ci in 0..c {
                    dgamma[ci] = sum_gx[ci];
                    dbeta[ci] = sum_g[ci];
                }
                let mut dx = vec![T::zero(); b * c * l];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = bi * c * l + ci * l;
                        let k = gv[ci] * invstd_saved[ci] / nf;
                        for li in 0..l {
                            dx[base + li] = k
                                * (nf * g[base + li]
                                    - sum_g[ci]
                                    - xhat_saved[base + li] * sum_gx[ci]);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    fn forward_eval(&self, x: &Tensor<T>, b: usize, c: usize, l: usize) -> Result<Tensor<T>> {
        if !self.seen_batch.get() {
            log::warn!("batchnorm1d eval before any train step: using initial running stats");
        }
        let rm = self.running_mean.to_vec();
        let invstd: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::cast(self.eps)).sqrt())
            .collect();
        let xv = x.data();
        let gv = self.gamma.data();
        let bv = self.beta.data();
        let mut xhat = vec![T::zero(); b * c * l];
        let mut data = vec![T::zero(); b * c * l];
        for bi in 0..b {
            for ci in 0..c {
                let base = bi * c * l + ci * l;
                for li in 0..l {
                    let xh = (xv[base + li] - rm[ci]) * invstd[ci];
                    xhat[base + li] = xh;
                    data[base + li] = gv[ci] * xh + bv[ci];
                }
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        let pg = self.gamma.clone();
        Ok(Tensor::node(
            vec![b, c, l],
            data,
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |g| {
                let gv = pg.data();
                let mut dx = vec![T::zero(); b * c * l];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = bi * c * l + ci * l;
                        let k = gv[ci] * invstd[ci];
                        for li in 0..l {
                            let gi = g[base + li];
                            dx[base + li] = gi * k;
                            dgamma[ci] += gi * xhat[base + li];
                            dbeta[ci] += gi;
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        out.push(Parameter::new(format!("{prefix}.gamma"), self.gamma.clone()));
        out.push(Parameter::new(format!("{prefix}.beta"), self.beta.clone()));
    }

    /// Parameters plus running buffers, for checkpoints.
    pub fn append_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((
            format!("{prefix}.running_mean"),
            self.running_mean.clone(),
        ));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}
