use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `sum((pred - target)^2) / batch`: the per-sample squared L2 norm of the
/// residual averaged over the leading axis.
pub fn mean_squared_norm<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != target.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", shape, target.shape())));
    }
    let batch = shape[0] as f64;
    Ok(pred.sub(target)?.square().sum().scale(1.0 / batch))
}

/// Which `(i, j)` pairs the dispersion expectation averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DispersionPairs {
    /// All `B^2` ordered pairs, `i == j` included.
    #[default]
    Inclusive,
    /// The `B (B - 1)` ordered pairs with `i != j`.
    Exclusive,
}

/// `log mean_{i,j} exp(-||f_i - f_j||^2 / tau)` over rows of `features: [B, D]`.
///
/// Distances come from [`Var::pairwise_sq_dist`], so they are exactly
/// non-negative with a zero diagonal.
pub fn dispersion_loss<'t>(
    tape: &'t Tape,
    features: Var<'t>,
    tau: f64,
    pairs: DispersionPairs,
) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature {tau} must be positive")));
    }
    let (b, _) = features.value().dims2()?;
    if pairs == DispersionPairs::Exclusive && b < 2 {
        return Err(Error::contract(
            "exclusive dispersion needs at least two samples",
        ));
    }
    let kernel = features.pairwise_sq_dist()?.scale(-1.0 / tau).exp();
    let (total, count) = match pairs {
        DispersionPairs::Inclusive => (kernel.sum(), (b * b) as f64),
        DispersionPairs::Exclusive => {
            let mut off = Tensor::ones(&[b, b]);
            for i in 0..b {
                off.data_mut()[i * b + i] = 0.0;
            }
            (kernel.mul(tape.constant(off))?.sum(), (b * (b - 1)) as f64)
        }
    };
    total.scale(1.0 / count).ln()
}
