//! Common surface of the denoising networks (DiT and the gap bridge) used by
//! the diffusion and consistency frameworks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub trait Network<T: Scalar> {
    /// Batched conditioning accepted by the network.
    type Cond: Clone;

    fn store(&self) -> &ParamStore<T>;

    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// Raw output `F(x_in, c_noise, cond)` with the same shape as `x_in`.
    /// `x_in` is `[batch, ...]`, `c_noise` has one entry per batch element and
    /// `params` are this network's parameters loaded on `tape` in store order.
    fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x_in: Var,
        c_noise: &[T],
        cond: &Self::Cond,
    ) -> Result<Var>;

    /// Conditioning for a doubled batch: `cond` followed by its all-null
    /// counterpart. Used to evaluate guided outputs in one pass.
    fn with_null_half(&self, cond: &Self::Cond) -> Result<Self::Cond>;

    /// Inference pass without gradient bookkeeping.
    fn forward(&self, x_in: &Tensor<T>, c_noise: &[T], cond: &Self::Cond) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.store().load(&mut tape, false);
        let x = tape.constant(x_in);
        let out = self.forward_tape(&mut tape, &params, x, c_noise, cond)?;
        Ok(tape.tensor(out))
    }
}
