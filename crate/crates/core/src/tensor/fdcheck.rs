//! Central finite-difference validation of tape gradients.

use super::dense::DenseMatrix;
use super::optim::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::TensorError;

/// Relative-error floor: keeps the ratio meaningful when both the
/// analytic and numeric derivative are near zero.
const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of `pid` against central differences of the
/// scalar loss that `build` constructs from the store. Returns the maximum
/// relative error over all entries,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must be a pure function of the store: called repeatedly with
/// perturbed values, it has to rebuild the same tape (seed any randomness
/// identically on every call).
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    pid: ParamId,
    eps: f64,
    build: F,
) -> Result<f64, TensorError>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId), TensorError>,
{
    let analytic = {
        let (mut tape, loss) = build(store)?;
        tape.backward(loss)?;
        let mut grads = ParamStore::new();
        // fresh mirror store so caller accumulators stay untouched
        for i in 0..store.len() {
            let p = store.get(ParamId(i));
            grads.add_param(DenseMatrix::zeros(p.value.rows(), p.value.cols()));
        }
        tape.scatter_param_grads(&mut grads);
        grads.get(pid).grad.clone()
    };

    let n = store.get(pid).value.values().len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = store.get(pid).value.values()[i];
        store.get_mut(pid).value.values_mut()[i] = orig + eps;
        let f_plus = eval_loss(store, &build)?;
        store.get_mut(pid).value.values_mut()[i] = orig - eps;
        let f_minus = eval_loss(store, &build)?;
        store.get_mut(pid).value.values_mut()[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic.values()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64, TensorError>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId), TensorError>,
{
    let (tape, loss) = build(store)?;
    let v = tape.value(loss);
    if v.shape() != (1, 1) {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            reason: "loss must be 1x1".into(),
        });
    }
    Ok(v.get(0, 0))
}
