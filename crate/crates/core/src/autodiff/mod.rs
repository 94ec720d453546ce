//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt every iteration: parameters are bound as leaves,
//! operations append nodes in execution order, and [`Tape::backward`] walks
//! the nodes once in reverse. Broadcasting is limited to scalar right
//! operands and right operands matching a suffix of the left shape.

mod tape;
mod tensor;

pub use tape::{BackwardCtx, BackwardFn, ElementwiseOp, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match buffer length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: missing operand")]
    MissingOperand { op: &'static str },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.sigmoid(x);
        assert_eq!(tape.item(y), 0.5);
    }

    #[test]
    fn add_vectors() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
        let c = tape.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_derivative_matches_central_difference() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        let g = tape.grad(x).unwrap()[0];
        assert_eq!(g, 0.25);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert!((g - central_diff(sig, 0.0, 1e-5)).abs() < 1e-8);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2], vec![0.0; 2]).unwrap();
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(tape.add(a, c).is_ok());
        assert!(tape.elementwise(ElementwiseOp::Mul, a, None).is_err());
    }

    #[test]
    fn stop_gradient_blocks_and_preserves_values() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[1], vec![1.5]).unwrap());
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), &[1.5]);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[3], vec![-1.0, 0.2, 2.0]).unwrap());
        let s = tape.sigmoid(x);
        let sg = tape.stop_gradient(s);
        let s2 = tape.sigmoid(x);
        let y = tape.add(sg, s2).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        for (g, &xv) in tape.grad(x).unwrap().iter().zip(&[-1.0f64, 0.2, 2.0]) {
            let s = 1.0 / (1.0 + (-xv).exp());
            assert!((g - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_basic_cases() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn leading_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(&Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let c = tape.mul(a, b).unwrap();
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 20.0, 10.0, 20.0]);
    }

    #[test]
    fn layout_ops_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
        let s = tape.slice_cols(a, 1, 2).unwrap();
        assert_eq!(tape.value(s), &[1.0, 2.0, 4.0, 5.0]);
        let g = tape.gather_rows(a, &[1, 1, 0]).unwrap();
        assert_eq!(tape.shape(g), &[3, 3]);
        let c = tape.concat_cols(&[s, s]).unwrap();
        let l1 = tape.sum(c);
        let l2 = tape.sum(g);
        let l = tape.add(l1, l2).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 3.0, 3.0, 2.0, 4.0, 4.0]);
    }
}
