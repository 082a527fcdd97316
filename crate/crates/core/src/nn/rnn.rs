//! Gated recurrent units, single-direction and bidirectional.
//!
//! Gate convention (reset applied inside the recurrent candidate term):
//!
//! ```text
//! z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
//! h~_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
//! h_t = (1 - z_t) * h_{t-1} + z_t * h~_t
//! ```
//!
//! The backward pass comes from the autodiff graph; no hand-rolled BPTT.

use crate::error::{Error, Result};
use crate::nn::layers::xavier_uniform;
use crate::nn::ops::{self, Activation};
use crate::nn::tensor::{Parameter, Real, Tensor};
use crate::rng::RngStream;

pub struct GruCell<T: Real> {
    pub w_z: Tensor<T>,
    pub u_z: Tensor<T>,
    pub b_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_h: Tensor<T>,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl<T: Real> GruCell<T> {
    pub fn new(rng: &RngStream, input_size: usize, hidden_size: usize) -> Self {
        let w = |label: &str| {
            xavier_uniform(
                &rng.split(label),
                vec![hidden_size, input_size],
                input_size,
                hidden_size,
            )
            .requires_grad()
        };
        let u = |label: &str| {
            xavier_uniform(
                &rng.split(label),
                vec![hidden_size, hidden_size],
                hidden_size,
                hidden_size,
            )
            .requires_grad()
        };
        GruCell {
            w_z: w("w_z"),
            u_z: u("u_z"),
            b_z: Tensor::zeros(vec![hidden_size]).requires_grad(),
            w_r: w("w_r"),
            u_r: u("u_r"),
            b_r: Tensor::zeros(vec![hidden_size]).requires_grad(),
            w_h: w("w_h"),
            u_h: u("u_h"),
            b_h: Tensor::zeros(vec![hidden_size]).requires_grad(),
            input_size,
            hidden_size,
        }
    }

    /// One recurrence step: `x_t:[B,n]`, `h:[B,H]` -> `[B,H]`.
    pub fn step(&self, x_t: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        let z = ops::activation(
            Activation::Sigmoid,
            &ops::add(
                &ops::linear(x_t, &self.w_z, Some(&self.b_z))?,
                &ops::linear(h, &self.u_z, None)?,
            )?,
        );
        let r = ops::activation(
            Activation::Sigmoid,
            &ops::add(
                &ops::linear(x_t, &self.w_r, Some(&self.b_r))?,
                &ops::linear(h, &self.u_r, None)?,
            )?,
        );
        let rh = ops::mul(&r, h)?;
        let cand = ops::activation(
            Activation::Tanh,
            &ops::add(
                &ops::linear(x_t, &self.w_h, Some(&self.b_h))?,
                &ops::linear(&rh, &self.u_h, None)?,
            )?,
        );
        // h' = (1-z)*h + z*cand
        ops::add(
            &ops::mul(&ops::affine(&z, -1.0, 1.0), h)?,
            &ops::mul(&z, &cand)?,
        )
    }

    /// Run over `x:[B,L,n]`; returns hidden states per step, in input order.
    pub fn run(&self, x: &Tensor<T>, reverse: bool) -> Result<Vec<Tensor<T>>> {
        let &[b, l, n] = x.shape() else {
            return Err(Error::Shape(format!(
                "gru: expected [B,L,n], got {:?}",
                x.shape()
            )));
        };
        if n != self.input_size {
            return Err(Error::Shape(format!(
                "gru: input width {n}, cell expects {}",
                self.input_size
            )));
        }
        if l == 0 {
            return Err(Error::Shape("gru: empty sequence".into()));
        }
        let mut h = Tensor::zeros(vec![b, self.hidden_size]);
        let mut states: Vec<Option<Tensor<T>>> = vec![None; l];
        let order: Vec<usize> = if reverse {
            (0..l).rev().collect()
        } else {
            (0..l).collect()
        };
        for t in order {
            let x_t = ops::slice_time(x, t)?;
            h = self.step(&x_t, &h)?;
            states[t] = Some(h.clone());
        }
        Ok(states.into_iter().map(|s| s.expect("all steps ran")).collect())
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        for (name, t) in [
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_h", &self.w_h),
            ("u_h", &self.u_h),
            ("b_h", &self.b_h),
        ] {
            out.push(Parameter::new(format!("{prefix}.{name}"), t.clone()));
        }
    }
}

/// Bidirectional GRU with independent forward/backward parameters.
pub struct BiGru<T: Real> {
    pub fwd: GruCell<T>,
    pub bwd: GruCell<T>,
}

impl<T: Real> BiGru<T> {
    pub fn new(rng: &RngStream, input_size: usize, hidden_size: usize) -> Self {
        BiGru {
            fwd: GruCell::new(&rng.split("fwd"), input_size, hidden_size),
            bwd: GruCell::new(&rng.split("bwd"), input_size, hidden_size),
        }
    }

    /// `x:[B,L,n]` -> `(outputs:[B,L,2H], final:[B,2H])`.
    ///
    /// `final` concatenates the forward state after the last step and the
    /// backward state after its last step (i.e. at input position 0).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let fwd_states = self.fwd.run(x, false)?;
        let bwd_states = self.bwd.run(x, true)?;
        let l = fwd_states.len();
        let mut joined = Vec::with_capacity(l);
        for t in 0..l {
            joined.push(ops::concat(&[fwd_states[t].clone(), bwd_states[t].clone()], 1)?);
        }
        let outputs = ops::stack_time(&joined)?;
        let final_state = ops::concat(
            &[fwd_states[l - 1].clone(), bwd_states[0].clone()],
            1,
        )?;
        Ok((outputs, final_state))
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.fwd.append_params(&format!("{prefix}.fwd"), out);
        self.bwd.append_params(&format!("{prefix}.bwd"), out);
    }
}
