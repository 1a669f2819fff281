//! Parameterized layers built on the tape.

use rand::Rng;
use ttg_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

const NORM_EPS: f64 = 1e-5;

fn register<R: Rng>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let t = if std == 0.0 {
        Tensor::zeros(shape.to_vec())
    } else {
        Tensor::randn(shape.to_vec(), std, rng)
    };
    Ok(store.insert(name, t)?)
}

fn register_const(store: &mut ParamStore, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
    Ok(store.insert(name, Tensor::full(shape.to_vec(), value))?)
}

/// `x W + b` over rows of `x[m, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = register(store, format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)?;
        let b = if bias {
            Some(register(store, format!("{name}.b"), &[d_out], 0.0, rng)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = tape.param(b);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Row-wise layer norm with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: register_const(store, format!("{name}.gamma"), &[d], 1.0)?,
            beta: register_const(store, format!("{name}.beta"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, NORM_EPS)?;
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul_row(n, g)?;
        Ok(tape.add_row(y, b)?)
    }
}

/// Group norm over `x[c, h, w]` with per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            groups,
            gamma: register_const(store, format!("{name}.gamma"), &[channels], 1.0)?,
            beta: register_const(store, format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.group_norm(x, self.groups, NORM_EPS)?;
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul_col(n, g)?;
        Ok(tape.add_col(y, b)?)
    }
}

/// 3x3 convolution with bias, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
        Self::with_std(store, name, c_in, c_out, stride, std, rng)
    }

    /// All-zero weights and bias.
    pub fn zeros<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(store, name, c_in, c_out, 1, 0.0, rng)
    }

    fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: register(store, format!("{name}.w"), &[c_out, c_in, 3, 3], std, rng)?,
            b: register(store, format!("{name}.b"), &[c_out], 0.0, rng)?,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.conv2d(x, w, self.stride)?;
        let b = tape.param(self.b);
        Ok(tape.add_col(y, b)?)
    }
}

/// 1x1 convolution, used to match channel counts on residual paths.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    w: ParamId,
    b: ParamId,
}

impl Conv1x1 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: register(store, format!("{name}.w"), &[c_out, c_in], 1.0 / (c_in as f64).sqrt(), rng)?,
            b: register(store, format!("{name}.b"), &[c_out], 0.0, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(x, &[c, h * w])?;
        let wv = tape.param(self.w);
        let y = tape.matmul(wv, flat)?;
        let c_out = tape.shape(y)[0];
        let y = tape.reshape(y, &[c_out, h, w])?;
        let b = tape.param(self.b);
        Ok(tape.add_col(y, b)?)
    }
}

/// Free parameter tensor registered under `name`.
pub fn raw_param<R: Rng>(store: &mut ParamStore, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
    register(store, name.to_string(), shape, std, rng)
}
