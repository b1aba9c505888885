//! Pieces shared by both trainers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Adam, Bound, ParamSet, Tape, Var};

/// Sampling RNG for optimizer step `step`: ChaCha8 keyed by the run seed, one
/// stream per step, so a resumed run draws the same batches as an
/// uninterrupted one.
pub fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Runs one forward/backward/update cycle and returns the loss value.
pub(crate) fn optimizer_step<F>(params: &mut ParamSet, adam: &mut Adam, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let (value, bound, grads) = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound)?;
        let value = tape.scalar_value(loss)?;
        let grads = tape.backward(loss)?;
        (value, bound, grads)
    };
    if !value.is_finite() {
        return Err(crate::Error::Numeric(format!("training loss became {value}")));
    }
    params.zero_grad();
    params.accumulate_grads(&bound, &grads)?;
    adam.step(params)?;
    Ok(value)
}
