//! Finite-difference validation of reverse-mode gradients.

use crate::nn::tensor::{Parameter, Tensor};

/// Relative error between an autodiff gradient and a central-difference
/// estimate: `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
fn rel_err(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / (1e-8f64).max(g_ad.abs() + g_fd.abs())
}

/// Max relative error over every coordinate of every parameter.
///
/// `loss_fn` must rebuild the graph from the current parameter values and
/// return a scalar. Runs in f64; step `h` is typically `1e-5`.
pub fn max_rel_err_for(
    params: &[Parameter<f64>],
    h: f64,
    mut loss_fn: impl FnMut() -> Tensor<f64>,
) -> f64 {
    max_rel_err_subsampled(params, h, usize::MAX, &mut loss_fn)
}

/// Like [`max_rel_err_for`], but checks at most `max_coords` evenly spaced
/// coordinates per parameter. Used for whole-network checks where probing
/// every coordinate would be slow.
pub fn max_rel_err_subsampled(
    params: &[Parameter<f64>],
    h: f64,
    max_coords: usize,
    loss_fn: &mut dyn FnMut() -> Tensor<f64>,
) -> f64 {
    for p in params {
        p.tensor.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();
    let ad_grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    for (p, g_ad) in params.iter().zip(&ad_grads) {
        let n = p.tensor.numel();
        let stride = (n / max_coords.max(1)).max(1);
        let mut i = 0;
        while i < n {
            let orig = p.tensor.data()[i];
            p.tensor.with_data_mut(|d| d[i] = orig + h);
            let lp = loss_fn().item();
            p.tensor.with_data_mut(|d| d[i] = orig - h);
            let lm = loss_fn().item();
            p.tensor.with_data_mut(|d| d[i] = orig);
            let g_fd = (lp - lm) / (2.0 * h);
            let e = rel_err(g_ad[i], g_fd);
            if e > worst {
                worst = e;
            }
            i += stride;
        }
    }
    worst
}
