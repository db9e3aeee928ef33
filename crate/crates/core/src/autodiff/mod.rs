//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] records operations on dense [`Tensor`]s and replays them in
//! reverse to obtain parameter gradients of a scalar loss. Input derivatives of
//! the coordinate network (Jacobians and Hessians) are not produced by a second
//! engine: they are propagated forward as ordinary recorded ops, so losses
//! built from them remain trainable with one reverse sweep.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, ParamId, HESSIAN_PAIRS};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite output at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a one-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
}

/// Determinant of a 3×3 matrix given as nine same-shaped entry nodes,
/// composed from recorded multiplications and additions (cofactor expansion
/// along the first row).
pub fn det3<T: Real>(g: &mut Graph<T>, m: &[[NodeId; 3]; 3]) -> Result<NodeId, AutodiffError> {
    let minor = |g: &mut Graph<T>, r0: usize, r1: usize, c0: usize, c1: usize| -> Result<NodeId, AutodiffError> {
        let p = g.mul(m[r0][c0], m[r1][c1])?;
        let q = g.mul(m[r0][c1], m[r1][c0])?;
        g.sub(p, q)
    };
    let m0 = minor(g, 1, 2, 1, 2)?;
    let m1 = minor(g, 1, 2, 0, 2)?;
    let m2 = minor(g, 1, 2, 0, 1)?;
    let t0 = g.mul(m[0][0], m0)?;
    let t1 = g.mul(m[0][1], m1)?;
    let t2 = g.mul(m[0][2], m2)?;
    let s = g.sub(t0, t1)?;
    g.add(s, t2)
}

/// Cofactor matrix `C[i][j] = (-1)^(i+j) · minor(i, j)` of a 3×3 matrix of
/// entry nodes.
pub fn cofactor3<T: Real>(g: &mut Graph<T>, m: &[[NodeId; 3]; 3]) -> Result<[[NodeId; 3]; 3], AutodiffError> {
    let mut out = [[m[0][0]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Cyclic index order folds the sign into the product ordering.
            let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
            let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
            let p = g.mul(m[r0][c0], m[r1][c1])?;
            let q = g.mul(m[r0][c1], m[r1][c0])?;
            out[i][j] = g.sub(p, q)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(g: &mut Graph<f64>, vals: [[f64; 3]; 3]) -> [[NodeId; 3]; 3] {
        vals.map(|row| row.map(|v| g.constant_scalar(v)))
    }

    #[test]
    fn det_of_identity_is_one() {
        let mut g = Graph::<f64>::new();
        let m = entries(&mut g, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let d = det3(&mut g, &m).unwrap();
        assert_eq!(g.scalar(d), 1.0);
    }

    #[test]
    fn det_and_cofactor_of_general_matrix() {
        let a = [[2.0, -1.0, 0.5], [0.3, 1.5, -2.0], [1.0, 0.2, 3.0]];
        let mut g = Graph::<f64>::new();
        let m = entries(&mut g, a);
        let dn = det3(&mut g, &m).unwrap();
        let d = g.scalar(dn);
        let expected = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        assert!((d - expected).abs() < 1e-12);
        let c = cofactor3(&mut g, &m).unwrap();
        // A · Cᵀ = det · I
        for i in 0..3 {
            for k in 0..3 {
                let s: f64 = (0..3).map(|j| a[i][j] * g.scalar(c[k][j])).sum();
                let want = if i == k { expected } else { 0.0 };
                assert!((s - want).abs() < 1e-12, "{i}{k}: {s} vs {want}");
            }
        }
    }
}
