use std::fmt;
use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

/// An operation whose backward rule is supplied by hand instead of derived.
///
/// `backward` must return exactly `input_count()` tensors, each shaped like
/// the corresponding input.
pub trait CustomGradOp: Send + Sync {
    fn name(&self) -> &str;

    fn input_count(&self) -> usize;

    /// Number of gradients `backward` produces. Must equal `input_count`.
    fn gradient_count(&self) -> usize {
        self.input_count()
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor)
        -> Result<Vec<Tensor>>;
}

/// A registered custom op, usable through [`Tape::custom`] or
/// [`Tape::forward_op`] with [`super::Op::Custom`].
#[derive(Clone)]
pub struct CustomOpHandle(Arc<dyn CustomGradOp>);

impl CustomOpHandle {
    pub fn name(&self) -> &str {
        self.0.name()
    }

    pub fn op(&self) -> &dyn CustomGradOp {
        self.0.as_ref()
    }
}

impl fmt::Debug for CustomOpHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomOpHandle({})", self.0.name())
    }
}

/// Validates an op's declared arity and wraps it in a handle.
pub fn register_custom(op: Arc<dyn CustomGradOp>) -> Result<CustomOpHandle> {
    if op.input_count() == 0 {
        return Err(UpqError::contract(format!(
            "custom op {} declares no inputs",
            op.name()
        )));
    }
    if op.gradient_count() != op.input_count() {
        return Err(UpqError::contract(format!(
            "custom op {}: {} inputs but {} gradients",
            op.name(),
            op.input_count(),
            op.gradient_count()
        )));
    }
    Ok(CustomOpHandle(op))
}

type ForwardClosure = Box<dyn Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync>;
type BackwardClosure =
    Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

/// Closure-backed [`CustomGradOp`].
pub struct FnCustomOp {
    name: String,
    arity: usize,
    forward: ForwardClosure,
    backward: BackwardClosure,
}

impl FnCustomOp {
    pub fn new(
        name: impl Into<String>,
        arity: usize,
        forward: impl Fn(&[&Tensor]) -> Result<Tensor> + Send + Sync + 'static,
        backward: impl Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + Send + Sync + 'static,
    ) -> Self {
        FnCustomOp {
            name: name.into(),
            arity,
            forward: Box::new(forward),
            backward: Box::new(backward),
        }
    }
}

impl CustomGradOp for FnCustomOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_count(&self) -> usize {
        self.arity
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<Tensor>> {
        (self.backward)(inputs, output, upstream)
    }
}

impl Tape {
    /// Applies a registered custom op.
    pub fn custom(&mut self, handle: &CustomOpHandle, inputs: &[Var]) -> Result<Var> {
        let op = handle.0.clone();
        if inputs.len() != op.input_count() {
            return Err(UpqError::contract(format!(
                "custom op {} expects {} inputs, got {}",
                op.name(),
                op.input_count(),
                inputs.len()
            )));
        }
        let out = {
            let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&values)?
        };
        self.push("custom", out, inputs.to_vec(), move |ctx| {
            let grads = op.backward(&ctx.inputs, ctx.output, ctx.upstream)?;
            if grads.len() != ctx.inputs.len() {
                return Err(UpqError::contract(format!(
                    "custom op {}: backward returned {} gradients for {} inputs",
                    op.name(),
                    grads.len(),
                    ctx.inputs.len()
                )));
            }
            for (i, (g, x)) in grads.iter().zip(&ctx.inputs).enumerate() {
                if g.shape() != x.shape() {
                    return Err(UpqError::contract(format!(
                        "custom op {}: gradient {i} has shape {:?}, input has {:?}",
                        op.name(),
                        g.shape(),
                        x.shape()
                    )));
                }
            }
            Ok(grads.into_iter().map(Some).collect())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Op;

    fn identity() -> CustomOpHandle {
        register_custom(Arc::new(FnCustomOp::new(
            "identity",
            1,
            |x| Ok(x[0].clone()),
            |_, _, up| Ok(vec![up.clone()]),
        )))
        .unwrap()
    }

    #[test]
    fn identity_passes_upstream_unchanged() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap(), true)
            .unwrap();
        let y = tape.custom(&identity(), &[x]).unwrap();
        let w = tape
            .constant(Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap())
            .unwrap();
        let p = tape.forward_op(Op::Mul, &[y, w]).unwrap();
        let s = tape.forward_op(Op::Sum, &[p]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn round_through_has_unit_gradient() {
        let round = register_custom(Arc::new(FnCustomOp::new(
            "round",
            1,
            |x| Ok(x[0].map(f32::round)),
            |_, _, up| Ok(vec![up.clone()]),
        )))
        .unwrap();
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![4], vec![0.2, 0.5, -1.7, 3.49]).unwrap(), true)
            .unwrap();
        let y = tape.forward_op(Op::Custom(round), &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, -2.0, 3.0]);
        let s = tape.forward_op(Op::Sum, &[y]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    struct Lopsided;

    impl CustomGradOp for Lopsided {
        fn name(&self) -> &str {
            "lopsided"
        }
        fn input_count(&self) -> usize {
            2
        }
        fn gradient_count(&self) -> usize {
            1
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(inputs[0].clone())
        }
        fn backward(&self, _: &[&Tensor], _: &Tensor, up: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![up.clone()])
        }
    }

    #[test]
    fn arity_mismatch_is_rejected_at_registration() {
        assert!(matches!(
            register_custom(Arc::new(Lopsided)),
            Err(UpqError::Contract(_))
        ));
    }

    #[test]
    fn wrong_input_count_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0), true).unwrap();
        let b = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        assert!(tape.custom(&identity(), &[a, b]).is_err());
    }

    #[test]
    fn wrong_gradient_shape_fails_backward() {
        let bad = register_custom(Arc::new(FnCustomOp::new(
            "bad",
            1,
            |x| Ok(x[0].clone()),
            |_, _, _| Ok(vec![Tensor::zeros(&[7])]),
        )))
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true).unwrap();
        let y = tape.custom(&bad, &[x]).unwrap();
        let s = tape.forward_op(Op::Sum, &[y]).unwrap();
        assert!(matches!(tape.backward(s), Err(UpqError::Contract(_))));
    }
}
