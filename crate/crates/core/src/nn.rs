//! Linear and convolution layers over [`ParamStore`] parameters.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};

/// How a layer binds its parameters on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    /// Current values as constants; no gradient reaches the parameters.
    Detached,
}

pub(crate) fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Trainable => tape.param(store, id),
        Bind::Detached => tape.param_const(store, id),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// `w ~ N(0, 1/d_in)`, `b = 0`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = store.add_normal(&format!("{name}.w"), group, &[d_in, d_out], scale, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), group, &[d_out])?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        let w = bind(tape, store, self.w, mode);
        let b = bind(tape, store, self.b, mode);
        let h = tape.matmul(x, w)?;
        tape.add_row_vec(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// "Same"-padded 1-D convolution along time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / ((kernel * c_in) as f64).sqrt();
        let w = store.add_normal(
            &format!("{name}.w"),
            group,
            &[kernel * c_in, c_out],
            scale,
            rng,
        )?;
        let b = store.add_zeros(&format!("{name}.b"), group, &[c_out])?;
        Ok(Conv1d {
            w,
            b,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        let w = bind(tape, store, self.w, mode);
        let b = bind(tape, store, self.b, mode);
        let h = tape.conv1d(x, w, self.kernel, self.dilation)?;
        tape.add_row_vec(h, b)
    }

    /// Frames on each side that influence one output frame.
    pub fn reach(&self) -> usize {
        (self.kernel - 1) / 2 * self.dilation
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// `x + W2 relu(conv(x))`: the time-preserving block used by both encoders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub conv: Conv1d,
    pub out: Linear,
}

impl ResBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv1d::new(store, &format!("{name}.conv"), group, dim, dim, kernel, 1, rng)?;
        let out = Linear::new(store, &format!("{name}.ff"), group, dim, dim, rng)?;
        Ok(ResBlock { conv, out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Bind) -> Result<Var> {
        let h = self.conv.forward(tape, store, x, mode)?;
        let h = tape.relu(h);
        let h = self.out.forward(tape, store, h, mode)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params().to_vec();
        p.extend(self.out.params());
        p
    }
}
