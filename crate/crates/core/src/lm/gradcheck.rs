//! Finite-difference check of the hand-written backward passes.

use crate::encode::EncodedRequest;
use crate::error::{Error, Result};
use crate::lm::neural::NeuralModel;

/// Relative error of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub analytic_norm: f64,
    pub relative_error: f64,
    /// Both gradients are below [`VANISHING`]; the group is reported with
    /// zero error. The attention key bias is one: softmax is invariant to a
    /// shift shared by every key.
    pub vanishing: bool,
}

/// Absolute gradient norm treated as exactly zero.
pub const VANISHING: f64 = 1e-8;

fn total_loss(model: &NeuralModel<f64>, batch: &[EncodedRequest<f64>], eps: f64) -> Result<f64> {
    let mut loss = 0.0;
    for enc in batch {
        let x = model.inputs(enc)?;
        let logits = model.logits(&x)?;
        loss += super::layers::smoothed_cross_entropy(&logits, &enc.targets, eps).0;
    }
    Ok(loss)
}

/// Compares analytic gradients of the summed label-smoothed loss with
/// central differences, one norm-wise relative error per parameter group:
/// `|g - g_fd| / (|g| + |g_fd|)`.
pub fn gradient_check(
    model: &mut NeuralModel<f64>,
    batch: &[EncodedRequest<f64>],
    label_smoothing: f64,
    h: f64,
) -> Result<Vec<GroupError>> {
    if batch.iter().all(EncodedRequest::is_empty) {
        return Err(Error::EmptyDataset("gradient check needs at least one event".into()));
    }
    model.zero_grad();
    for enc in batch {
        model.accumulate_gradients(enc, label_smoothing, 1.0, None)?;
    }
    let analytic: Vec<(String, ndarray::Array2<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();

    let mut out = Vec::with_capacity(analytic.len());
    for (gi, (name, grad)) in analytic.into_iter().enumerate() {
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut fd_sq = 0.0;
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = model.params_mut()[gi].1.value[(r, c)];
            model.params_mut()[gi].1.value[(r, c)] = orig + h;
            let up = total_loss(model, batch, label_smoothing)?;
            model.params_mut()[gi].1.value[(r, c)] = orig - h;
            let down = total_loss(model, batch, label_smoothing)?;
            model.params_mut()[gi].1.value[(r, c)] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad[(r, c)];
            diff_sq += (a - fd) * (a - fd);
            a_sq += a * a;
            fd_sq += fd * fd;
        }
        let (a, fd) = (a_sq.sqrt(), fd_sq.sqrt());
        let vanishing = a < VANISHING && fd < VANISHING;
        out.push(GroupError {
            name,
            analytic_norm: a,
            relative_error: if vanishing { 0.0 } else { diff_sq.sqrt() / (a + fd) },
            vanishing,
        });
    }
    Ok(out)
}
