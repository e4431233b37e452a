//! Simple-cell directional scan: each cell is a ReLU of its row/column
//! predecessors, the region input, and an optional cross-scale context term.

use crate::convnet::FeatureGrid;
use crate::error::{Error, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, relu, relu_grad, Real, Tensor};

use super::Direction;

/// Per-direction simple-cell weights, shared across all cells of one scale.
#[derive(Clone, Debug)]
pub struct SrnDirWeights<T: Real> {
    pub w_row: Tensor<T>,
    pub w_col: Tensor<T>,
    pub w_x: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> SrnDirWeights<T> {
    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        SrnDirWeights {
            w_row: Tensor::zeros(&[hidden, hidden]),
            w_col: Tensor::zeros(&[hidden, hidden]),
            w_x: Tensor::zeros(&[hidden, input_dim]),
            bias: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SrnDirWeights {
            w_row: self.w_row.zeros_like(),
            w_col: self.w_col.zeros_like(),
            w_x: self.w_x.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_row.rows()
    }

    fn check(&self, x: &FeatureGrid<T>, context: Option<&FeatureGrid<T>>) -> Result<()> {
        let h = self.hidden();
        if self.w_row.shape() != [h, h]
            || self.w_col.shape() != [h, h]
            || self.w_x.shape() != [h, x.depth()]
            || self.bias.shape() != [h]
        {
            return Err(Error::Shape {
                context: "scan_srn weights",
                left: self.w_x.shape().to_vec(),
                right: vec![h, x.depth()],
            });
        }
        if let Some(s) = context {
            if s.rows() != x.rows() || s.cols() != x.cols() || s.depth() != h {
                return Err(Error::Shape {
                    context: "scan_srn context",
                    left: vec![s.rows(), s.cols(), s.depth()],
                    right: vec![x.rows(), x.cols(), h],
                });
            }
        }
        Ok(())
    }
}

/// Run one directional scan over the grid. Out-of-grid predecessors
/// contribute zero vectors, so 1x1 grids reduce to ReLU(W_x x + s + b).
pub fn scan_srn<T: Real>(
    x: &FeatureGrid<T>,
    dir: Direction,
    w: &SrnDirWeights<T>,
    context: Option<&FeatureGrid<T>>,
) -> Result<FeatureGrid<T>> {
    w.check(x, context)?;
    let (rows, cols) = (x.rows(), x.cols());
    let hidden = w.hidden();
    let input_dim = x.depth();
    let mut h = FeatureGrid::zeros(rows, cols, hidden);
    let mut pre = vec![T::ZERO; hidden];

    for (r, c) in dir.visit_order(rows, cols) {
        pre.copy_from_slice(w.bias.data());
        if let Some((pr, pc)) = dir.row_pred(r, c, rows, cols) {
            matvec_acc(w.w_row.data(), hidden, hidden, h.cell(pr, pc), &mut pre);
        }
        if let Some((pr, pc)) = dir.col_pred(r, c, rows, cols) {
            matvec_acc(w.w_col.data(), hidden, hidden, h.cell(pr, pc), &mut pre);
        }
        matvec_acc(w.w_x.data(), hidden, input_dim, x.cell(r, c), &mut pre);
        if let Some(s) = context {
            for (p, &sv) in pre.iter_mut().zip(s.cell(r, c)) {
                *p += sv;
            }
        }
        for (dst, &v) in h.cell_mut(r, c).iter_mut().zip(&pre) {
            *dst = relu(v);
        }
    }
    Ok(h)
}

/// Reverse-order backward pass of [`scan_srn`].
///
/// `upstream` is dL/dh for every cell; shared-weight gradients accumulate
/// into `grads` across all cells, input gradients into `dx`, and context
/// gradients into `ds` when a context grid was used in the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn scan_srn_backward<T: Real>(
    x: &FeatureGrid<T>,
    dir: Direction,
    w: &SrnDirWeights<T>,
    h: &FeatureGrid<T>,
    upstream: &FeatureGrid<T>,
    grads: &mut SrnDirWeights<T>,
    dx: &mut FeatureGrid<T>,
    mut ds: Option<&mut FeatureGrid<T>>,
) -> Result<()> {
    if !h.same_shape(upstream) {
        return Err(Error::contract(
            "scan_srn_backward: upstream shape differs from recorded hidden grid",
        ));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let hidden = w.hidden();
    let input_dim = x.depth();
    let mut dh = upstream.clone();
    let mut g = vec![T::ZERO; hidden];

    let order = dir.visit_order(rows, cols);
    for &(r, c) in order.iter().rev() {
        // Gate the accumulated hidden gradient through the ReLU.
        for ((dst, &up), &y) in g.iter_mut().zip(dh.cell(r, c)).zip(h.cell(r, c)) {
            *dst = up * relu_grad(y);
        }
        for (b, &gv) in grads.bias.data_mut().iter_mut().zip(&g) {
            *b += gv;
        }
        outer_acc(&g, x.cell(r, c), grads.w_x.data_mut());
        matvec_t_acc(w.w_x.data(), hidden, input_dim, &g, dx.cell_mut(r, c));
        if let Some(ds) = ds.as_deref_mut() {
            for (d, &gv) in ds.cell_mut(r, c).iter_mut().zip(&g) {
                *d += gv;
            }
        }
        if let Some((pr, pc)) = dir.row_pred(r, c, rows, cols) {
            outer_acc(&g, h.cell(pr, pc), grads.w_row.data_mut());
            matvec_t_acc(w.w_row.data(), hidden, hidden, &g, dh.cell_mut(pr, pc));
        }
        if let Some((pr, pc)) = dir.col_pred(r, c, rows, cols) {
            outer_acc(&g, h.cell(pr, pc), grads.w_col.data_mut());
            matvec_t_acc(w.w_col.data(), hidden, hidden, &g, dh.cell_mut(pr, pc));
        }
    }
    Ok(())
}
