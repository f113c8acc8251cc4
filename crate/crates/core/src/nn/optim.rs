use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Plain SGD: `w <- w - lr * grad` for every tensor, then clears the grads.
///
/// All tensors are checked for a gradient before any is updated.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    let lr = T::cast_from(lr);
    for (_, t) in params {
        let g = t.grad().expect("checked above").to_vec();
        for (w, g) in t.data_mut().iter_mut().zip(g) {
            *w = *w - lr * g;
        }
        t.clear_grad();
    }
    Ok(())
}
