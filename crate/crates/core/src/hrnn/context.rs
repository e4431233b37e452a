//! Cross-scale context: every cell of a fine scale receives a summed linear
//! transform of the coarser-scale cells whose receptive fields cover it.

use crate::convnet::FeatureGrid;
use crate::error::{Error, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, Real, Tensor};

/// Source cell at a coarser scale for target cell index `t` (0-based) when
/// mapping a grid of `fine` cells onto one of `coarse` cells along one axis.
pub fn source_index(t: usize, coarse: usize, fine: usize) -> usize {
    t * coarse / fine
}

/// Build the context grid for one scale from all coarser fused grids.
///
/// `coarser[j]` is the fused hidden grid of scale `j` (the raw pooled vector
/// for an unscanned 1x1 level); `cross[j]` is its transform into the target
/// scale. Scales must be supplied coarse to fine.
pub fn scale_context<T: Real>(
    coarser: &[&FeatureGrid<T>],
    cross: &[&Tensor<T>],
    rows: usize,
    cols: usize,
    hidden: usize,
) -> Result<FeatureGrid<T>> {
    if coarser.len() != cross.len() {
        return Err(Error::contract(format!(
            "scale_context: {} coarser grids but {} cross matrices",
            coarser.len(),
            cross.len()
        )));
    }
    for (j, (grid, w)) in coarser.iter().zip(cross).enumerate() {
        if w.shape() != [hidden, grid.depth()] {
            return Err(Error::Shape {
                context: "scale_context cross matrix",
                left: w.shape().to_vec(),
                right: vec![hidden, grid.depth()],
            });
        }
        if grid.rows() > rows || grid.cols() > cols {
            return Err(Error::contract(format!(
                "scale_context: source scale {j} ({}x{}) is finer than target ({rows}x{cols})",
                grid.rows(),
                grid.cols()
            )));
        }
    }
    let mut s = FeatureGrid::zeros(rows, cols, hidden);
    for r in 0..rows {
        for c in 0..cols {
            let cell = s.cell_mut(r, c);
            for (grid, w) in coarser.iter().zip(cross) {
                let sr = source_index(r, grid.rows(), rows);
                let sc = source_index(c, grid.cols(), cols);
                matvec_acc(w.data(), hidden, grid.depth(), grid.cell(sr, sc), cell);
            }
        }
    }
    Ok(s)
}

/// Backward pass of [`scale_context`]: split the context gradient into
/// cross-matrix gradients and gradients on the coarser fused grids.
pub fn scale_context_backward<T: Real>(
    coarser: &[&FeatureGrid<T>],
    cross: &[&Tensor<T>],
    ds: &FeatureGrid<T>,
    cross_grads: &mut [&mut Tensor<T>],
    coarser_grads: &mut [&mut FeatureGrid<T>],
) -> Result<()> {
    if coarser.len() != cross.len()
        || cross_grads.len() != cross.len()
        || coarser_grads.len() != cross.len()
    {
        return Err(Error::contract(
            "scale_context_backward: mismatched source/gradient counts",
        ));
    }
    let (rows, cols, hidden) = (ds.rows(), ds.cols(), ds.depth());
    for r in 0..rows {
        for c in 0..cols {
            let g = ds.cell(r, c);
            for j in 0..coarser.len() {
                let grid = coarser[j];
                let sr = source_index(r, grid.rows(), rows);
                let sc = source_index(c, grid.cols(), cols);
                outer_acc(g, grid.cell(sr, sc), cross_grads[j].data_mut());
                matvec_t_acc(
                    cross[j].data(),
                    hidden,
                    grid.depth(),
                    g,
                    coarser_grads[j].cell_mut(sr, sc),
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn floor_mapping_examples() {
        // 6x6 target from a 3x3 source: target cell (3, 4) maps to (1, 2).
        assert_eq!(source_index(3, 3, 6), 1);
        assert_eq!(source_index(4, 3, 6), 2);
        // 2x2 target from 1x1: always (0, 0).
        for t in 0..2 {
            assert_eq!(source_index(t, 1, 2), 0);
        }
        // 3x3 target from 2x2 (non-divisible).
        let srcs: Vec<usize> = (0..3).map(|t| source_index(t, 2, 3)).collect();
        assert_eq!(srcs, vec![0, 0, 1]);
    }

    #[test]
    fn zero_cross_matrices_give_zero_context() {
        let coarse = FeatureGrid::<f64>::from_data(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::zeros(&[3, 3]);
        let s = scale_context(&[&coarse], &[&w], 2, 2, 3).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_source_broadcasts_to_every_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let coarse = FeatureGrid::<f64>::from_data(
            1,
            1,
            3,
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for v in w.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let s = scale_context(&[&coarse], &[&w], 2, 2, 3).unwrap();
        let expect = w
            .matvec(&Tensor::from_vec(coarse.cell(0, 0).to_vec()))
            .unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(s.cell(r, c), expect.data());
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::tensor::gradcheck_fn;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 3;
        let coarse1 = FeatureGrid::<f64>::from_data(
            1,
            1,
            h,
            (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let coarse2 = FeatureGrid::<f64>::from_data(
            2,
            2,
            h,
            (0..4 * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut w1 = Tensor::zeros(&[h, h]);
        let mut w2 = Tensor::zeros(&[h, h]);
        for t in [&mut w1, &mut w2] {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let upstream: Vec<f64> = (0..9 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |c1: &FeatureGrid<f64>, c2: &FeatureGrid<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>| {
            let s = scale_context(&[c1, c2], &[w1, w2], 3, 3, h).unwrap();
            s.data().iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };

        let ds = FeatureGrid::from_data(3, 3, h, upstream.clone()).unwrap();
        let mut dw1 = w1.zeros_like();
        let mut dw2 = w2.zeros_like();
        let mut dc1 = coarse1.zeros_like();
        let mut dc2 = coarse2.zeros_like();
        scale_context_backward(
            &[&coarse1, &coarse2],
            &[&w1, &w2],
            &ds,
            &mut [&mut dw1, &mut dw2],
            &mut [&mut dc1, &mut dc2],
        )
        .unwrap();

        gradcheck_fn(
            "context/dW1",
            |v| {
                let wp = Tensor::new(vec![h, h], v.to_vec()).unwrap();
                loss(&coarse1, &coarse2, &wp, &w2)
            },
            w1.data(),
            dw1.data(),
            1e-6,
            1e-8,
        )
        .unwrap();
        gradcheck_fn(
            "context/dW2",
            |v| {
                let wp = Tensor::new(vec![h, h], v.to_vec()).unwrap();
                loss(&coarse1, &coarse2, &w1, &wp)
            },
            w2.data(),
            dw2.data(),
            1e-6,
            1e-8,
        )
        .unwrap();
        gradcheck_fn(
            "context/dh1",
            |v| {
                let cp = FeatureGrid::from_data(1, 1, h, v.to_vec()).unwrap();
                loss(&cp, &coarse2, &w1, &w2)
            },
            coarse1.data(),
            dc1.data(),
            1e-6,
            1e-8,
        )
        .unwrap();
        gradcheck_fn(
            "context/dh2",
            |v| {
                let cp = FeatureGrid::from_data(2, 2, h, v.to_vec()).unwrap();
                loss(&coarse1, &cp, &w1, &w2)
            },
            coarse2.data(),
            dc2.data(),
            1e-6,
            1e-8,
        )
        .unwrap();
    }
}
