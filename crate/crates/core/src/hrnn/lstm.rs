//! LSTM-cell directional scan. Gates follow the same predecessor wiring as
//! the simple cell; the memory update multiplies the forget gate with the
//! *sum* of the two predecessor memories:
//!
//!   c(r,c) = f ⊙ (c_row_pred + c_col_pred) + i ⊙ g
//!   h(r,c) = o ⊙ tanh(c)

use crate::convnet::FeatureGrid;
use crate::error::{Error, Result};
use crate::tensor::{
    matvec_acc, matvec_t_acc, outer_acc, sigmoid, sigmoid_grad, tanh_grad, Real, Tensor,
};

use super::Direction;

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CELL: usize = 3;
pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Weights of one LSTM gate (row-pred, col-pred, input, bias).
#[derive(Clone, Debug)]
pub struct LstmGateWeights<T: Real> {
    pub w_row: Tensor<T>,
    pub w_col: Tensor<T>,
    pub w_x: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LstmGateWeights<T> {
    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        LstmGateWeights {
            w_row: Tensor::zeros(&[hidden, hidden]),
            w_col: Tensor::zeros(&[hidden, hidden]),
            w_x: Tensor::zeros(&[hidden, input_dim]),
            bias: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmGateWeights {
            w_row: self.w_row.zeros_like(),
            w_col: self.w_col.zeros_like(),
            w_x: self.w_x.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Per-direction LSTM weights: four gates (i, f, o, g).
#[derive(Clone, Debug)]
pub struct LstmDirWeights<T: Real> {
    pub gates: [LstmGateWeights<T>; 4],
}

impl<T: Real> LstmDirWeights<T> {
    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        LstmDirWeights {
            gates: std::array::from_fn(|_| LstmGateWeights::zeros(hidden, input_dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmDirWeights {
            gates: std::array::from_fn(|i| self.gates[i].zeros_like()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gates[0].w_row.rows()
    }

    fn check(&self, x: &FeatureGrid<T>, context: Option<&FeatureGrid<T>>) -> Result<()> {
        let h = self.hidden();
        for gate in &self.gates {
            if gate.w_row.shape() != [h, h]
                || gate.w_col.shape() != [h, h]
                || gate.w_x.shape() != [h, x.depth()]
                || gate.bias.shape() != [h]
            {
                return Err(Error::Shape {
                    context: "scan_lstm weights",
                    left: gate.w_x.shape().to_vec(),
                    right: vec![h, x.depth()],
                });
            }
        }
        if let Some(s) = context {
            if s.rows() != x.rows() || s.cols() != x.cols() || s.depth() != h {
                return Err(Error::Shape {
                    context: "scan_lstm context",
                    left: vec![s.rows(), s.cols(), s.depth()],
                    right: vec![x.rows(), x.cols(), h],
                });
            }
        }
        Ok(())
    }
}

/// Everything the forward scan records for its backward pass.
#[derive(Clone, Debug)]
pub struct LstmScanCache<T: Real> {
    /// Gate activation grids, indexed i, f, o, g.
    pub gates: [FeatureGrid<T>; 4],
    pub memory: FeatureGrid<T>,
    pub tanh_memory: FeatureGrid<T>,
    pub hidden: FeatureGrid<T>,
}

/// Run one directional LSTM scan. Out-of-grid predecessor hidden and memory
/// vectors are zero; the context grid (when given) is added to every gate
/// preactivation, including the modulation gate.
pub fn scan_lstm<T: Real>(
    x: &FeatureGrid<T>,
    dir: Direction,
    w: &LstmDirWeights<T>,
    context: Option<&FeatureGrid<T>>,
) -> Result<LstmScanCache<T>> {
    w.check(x, context)?;
    let (rows, cols) = (x.rows(), x.cols());
    let hidden = w.hidden();
    let input_dim = x.depth();

    let mut gates: [FeatureGrid<T>; 4] =
        std::array::from_fn(|_| FeatureGrid::zeros(rows, cols, hidden));
    let mut memory = FeatureGrid::zeros(rows, cols, hidden);
    let mut tanh_memory = FeatureGrid::zeros(rows, cols, hidden);
    let mut h = FeatureGrid::zeros(rows, cols, hidden);

    let mut pre = vec![T::ZERO; hidden];
    let mut pred_mem = vec![T::ZERO; hidden];

    for (r, c) in dir.visit_order(rows, cols) {
        let row_pred = dir.row_pred(r, c, rows, cols);
        let col_pred = dir.col_pred(r, c, rows, cols);

        for (p, v) in pred_mem.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            if let Some((pr, pc)) = row_pred {
                acc += memory.cell(pr, pc)[p];
            }
            if let Some((pr, pc)) = col_pred {
                acc += memory.cell(pr, pc)[p];
            }
            *v = acc;
        }

        for gi in 0..4 {
            let gw = &w.gates[gi];
            pre.copy_from_slice(gw.bias.data());
            if let Some((pr, pc)) = row_pred {
                matvec_acc(gw.w_row.data(), hidden, hidden, h.cell(pr, pc), &mut pre);
            }
            if let Some((pr, pc)) = col_pred {
                matvec_acc(gw.w_col.data(), hidden, hidden, h.cell(pr, pc), &mut pre);
            }
            matvec_acc(gw.w_x.data(), hidden, input_dim, x.cell(r, c), &mut pre);
            if let Some(s) = context {
                for (p, &sv) in pre.iter_mut().zip(s.cell(r, c)) {
                    *p += sv;
                }
            }
            let out = gates[gi].cell_mut(r, c);
            if gi == GATE_CELL {
                for (dst, &v) in out.iter_mut().zip(&pre) {
                    *dst = v.tanh();
                }
            } else {
                for (dst, &v) in out.iter_mut().zip(&pre) {
                    *dst = sigmoid(v);
                }
            }
        }

        for p in 0..hidden {
            let i = gates[GATE_INPUT].cell(r, c)[p];
            let f = gates[GATE_FORGET].cell(r, c)[p];
            let o = gates[GATE_OUTPUT].cell(r, c)[p];
            let g = gates[GATE_CELL].cell(r, c)[p];
            let cv = f * pred_mem[p] + i * g;
            let tc = cv.tanh();
            memory.cell_mut(r, c)[p] = cv;
            tanh_memory.cell_mut(r, c)[p] = tc;
            h.cell_mut(r, c)[p] = o * tc;
        }
    }

    Ok(LstmScanCache {
        gates,
        memory,
        tanh_memory,
        hidden: h,
    })
}

/// Reverse-order backward pass of [`scan_lstm`].
#[allow(clippy::too_many_arguments)]
pub fn scan_lstm_backward<T: Real>(
    x: &FeatureGrid<T>,
    dir: Direction,
    w: &LstmDirWeights<T>,
    cache: &LstmScanCache<T>,
    upstream: &FeatureGrid<T>,
    grads: &mut LstmDirWeights<T>,
    dx: &mut FeatureGrid<T>,
    mut ds: Option<&mut FeatureGrid<T>>,
) -> Result<()> {
    if !cache.hidden.same_shape(upstream) {
        return Err(Error::contract(
            "scan_lstm_backward: upstream shape differs from recorded hidden grid",
        ));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let hidden = w.hidden();
    let input_dim = x.depth();

    let mut dh = upstream.clone();
    let mut dc: FeatureGrid<T> = FeatureGrid::zeros(rows, cols, hidden);
    // Gate preactivation gradients of the current cell, indexed i, f, o, g.
    let mut da: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::ZERO; hidden]);
    let mut pred_mem = vec![T::ZERO; hidden];

    let order = dir.visit_order(rows, cols);
    for &(r, c) in order.iter().rev() {
        let row_pred = dir.row_pred(r, c, rows, cols);
        let col_pred = dir.col_pred(r, c, rows, cols);

        for (p, v) in pred_mem.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            if let Some((pr, pc)) = row_pred {
                acc += cache.memory.cell(pr, pc)[p];
            }
            if let Some((pr, pc)) = col_pred {
                acc += cache.memory.cell(pr, pc)[p];
            }
            *v = acc;
        }

        for p in 0..hidden {
            let i = cache.gates[GATE_INPUT].cell(r, c)[p];
            let f = cache.gates[GATE_FORGET].cell(r, c)[p];
            let o = cache.gates[GATE_OUTPUT].cell(r, c)[p];
            let g = cache.gates[GATE_CELL].cell(r, c)[p];
            let tc = cache.tanh_memory.cell(r, c)[p];

            let dh_p = dh.cell(r, c)[p];
            let d_out = dh_p * tc;
            let d_mem = dc.cell(r, c)[p] + dh_p * o * tanh_grad(tc);

            let d_in = d_mem * g;
            let d_forget = d_mem * pred_mem[p];
            let d_cell = d_mem * i;

            da[GATE_INPUT][p] = d_in * sigmoid_grad(i);
            da[GATE_FORGET][p] = d_forget * sigmoid_grad(f);
            da[GATE_OUTPUT][p] = d_out * sigmoid_grad(o);
            da[GATE_CELL][p] = d_cell * tanh_grad(g);

            // Both predecessor memories receive f-gated memory gradient.
            let d_pred = d_mem * f;
            if let Some((pr, pc)) = row_pred {
                dc.cell_mut(pr, pc)[p] += d_pred;
            }
            if let Some((pr, pc)) = col_pred {
                dc.cell_mut(pr, pc)[p] += d_pred;
            }
        }

        for gi in 0..4 {
            let gw = &w.gates[gi];
            let gg = &mut grads.gates[gi];
            let a = &da[gi];
            for (b, &v) in gg.bias.data_mut().iter_mut().zip(a) {
                *b += v;
            }
            outer_acc(a, x.cell(r, c), gg.w_x.data_mut());
            matvec_t_acc(gw.w_x.data(), hidden, input_dim, a, dx.cell_mut(r, c));
            if let Some(ds) = ds.as_deref_mut() {
                for (d, &v) in ds.cell_mut(r, c).iter_mut().zip(a) {
                    *d += v;
                }
            }
            if let Some((pr, pc)) = row_pred {
                outer_acc(a, cache.hidden.cell(pr, pc), gg.w_row.data_mut());
                matvec_t_acc(gw.w_row.data(), hidden, hidden, a, dh.cell_mut(pr, pc));
            }
            if let Some((pr, pc)) = col_pred {
                outer_acc(a, cache.hidden.cell(pr, pc), gg.w_col.data_mut());
                matvec_t_acc(gw.w_col.data(), hidden, hidden, a, dh.cell_mut(pr, pc));
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

    fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, depth: usize) -> FeatureGrid<f64> {
        let data = (0..rows * cols * depth).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureGrid::from_data(rows, cols, depth, data).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, hidden: usize, input_dim: usize) -> LstmDirWeights<f64> {
        let mut w = LstmDirWeights::zeros(hidden, input_dim);
        for gate in &mut w.gates {
            for t in [&mut gate.w_row, &mut gate.w_col, &mut gate.w_x, &mut gate.bias] {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.6..0.6);
                }
            }
        }
        w
    }

    #[test]
    fn all_zero_weights_give_half_gates_and_zero_state() {
        let x = FeatureGrid::<f64>::from_data(2, 3, 2, vec![0.5; 12]).unwrap();
        let w = LstmDirWeights::zeros(2, 2);
        let cache = scan_lstm(&x, Direction::SouthEast, &w, None).unwrap();
        for gi in [GATE_INPUT, GATE_FORGET, GATE_OUTPUT] {
            assert!(cache.gates[gi].data().iter().all(|&v| v == 0.5));
        }
        assert!(cache.gates[GATE_CELL].data().iter().all(|&v| v == 0.0));
        assert!(cache.memory.data().iter().all(|&v| v == 0.0));
        assert!(cache.hidden.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_memory_is_input_times_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_grid(&mut rng, 1, 1, 3);
        let w = random_weights(&mut rng, 3, 3);
        let cache = scan_lstm(&x, Direction::NorthEast, &w, None).unwrap();
        for p in 0..3 {
            let expect = cache.gates[GATE_INPUT].cell(0, 0)[p] * cache.gates[GATE_CELL].cell(0, 0)[p];
            assert!((cache.memory.cell(0, 0)[p] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_ranges_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_grid(&mut rng, 3, 3, 4);
        let w = random_weights(&mut rng, 4, 4);
        for dir in Direction::ALL {
            let cache = scan_lstm(&x, dir, &w, None).unwrap();
            for gi in [GATE_INPUT, GATE_FORGET, GATE_OUTPUT] {
                assert!(cache.gates[gi].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            assert!(cache.gates[GATE_CELL].data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    // Scalar unroll of the 2x2 south-east scan, cell by cell in visit order,
    // written directly from the gate/memory/output recurrences.
    fn unrolled_2x2_southeast(
        x: &FeatureGrid<f64>,
        w: &LstmDirWeights<f64>,
        hidden: usize,
    ) -> Vec<Vec<f64>> {
        let gate = |gi: usize, xcell: &[f64], hr: &[f64], hc: &[f64]| -> Vec<f64> {
            let gw = &w.gates[gi];
            (0..hidden)
                .map(|p| {
                    let mut a = gw.bias.data()[p];
                    for q in 0..hidden {
                        a += gw.w_row.data()[p * hidden + q] * hr[q];
                        a += gw.w_col.data()[p * hidden + q] * hc[q];
                    }
                    for (q, &xv) in xcell.iter().enumerate() {
                        a += gw.w_x.data()[p * xcell.len() + q] * xv;
                    }
                    if gi == GATE_CELL {
                        a.tanh()
                    } else {
                        1.0 / (1.0 + (-a).exp())
                    }
                })
                .collect()
        };
        let zero = vec![0.0; hidden];
        let step = |xcell: &[f64], hr: &[f64], hc: &[f64], cr: &[f64], cc: &[f64]| {
            let i = gate(GATE_INPUT, xcell, hr, hc);
            let f = gate(GATE_FORGET, xcell, hr, hc);
            let o = gate(GATE_OUTPUT, xcell, hr, hc);
            let g = gate(GATE_CELL, xcell, hr, hc);
            let c: Vec<f64> = (0..hidden).map(|p| f[p] * (cr[p] + cc[p]) + i[p] * g[p]).collect();
            let h: Vec<f64> = (0..hidden).map(|p| o[p] * c[p].tanh()).collect();
            (h, c)
        };
        // Visit order: (0,0), (0,1), (1,0), (1,1).
        let (h00, c00) = step(x.cell(0, 0), &zero, &zero, &zero, &zero);
        let (h01, c01) = step(x.cell(0, 1), &zero, &h00, &zero, &c00);
        let (h10, c10) = step(x.cell(1, 0), &h00, &zero, &c00, &zero);
        let (h11, _c11) = step(x.cell(1, 1), &h01, &h10, &c01, &c10);
        vec![h00, h01, h10, h11]
    }

    #[test]
    fn matches_hand_unrolled_2x2_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = random_grid(&mut rng, 2, 2, 3);
            let w = random_weights(&mut rng, 3, 3);
            let cache = scan_lstm(&x, Direction::SouthEast, &w, None).unwrap();
            let expect = unrolled_2x2_southeast(&x, &w, 3);
            let got = [
                cache.hidden.cell(0, 0),
                cache.hidden.cell(0, 1),
                cache.hidden.cell(1, 0),
                cache.hidden.cell(1, 1),
            ];
            for (cell, (g, e)) in got.iter().zip(&expect).enumerate() {
                for p in 0..3 {
                    assert!(
                        (g[p] - e[p]).abs() <= 1e-6,
                        "cell {cell} lane {p}: {} vs {}",
                        g[p],
                        e[p]
                    );
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::tensor::gradcheck_fn;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_grid(&mut rng, 2, 3, 3);
        let s = random_grid(&mut rng, 2, 3, 3);
        let upstream = random_grid(&mut rng, 2, 3, 3);
        let w = random_weights(&mut rng, 3, 3);

        for dir in Direction::ALL {
            let cache = scan_lstm(&x, dir, &w, Some(&s)).unwrap();
            let mut grads = w.zeros_like();
            let mut dx = x.zeros_like();
            let mut ds = s.zeros_like();
            scan_lstm_backward(&x, dir, &w, &cache, &upstream, &mut grads, &mut dx, Some(&mut ds))
                .unwrap();

            let loss = |w: &LstmDirWeights<f64>, x: &FeatureGrid<f64>, s: &FeatureGrid<f64>| {
                let cache = scan_lstm(x, dir, w, Some(s)).unwrap();
                cache
                    .hidden
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };

            for gi in 0..4 {
                gradcheck_fn(
                    &format!("lstm/{}.w_row", GATE_NAMES[gi]),
                    |v| {
                        let mut wp = w.clone();
                        wp.gates[gi].w_row.data_mut().copy_from_slice(v);
                        loss(&wp, &x, &s)
                    },
                    w.gates[gi].w_row.data(),
                    grads.gates[gi].w_row.data(),
                    1e-6,
                    1e-6,
                )
                .unwrap();
                gradcheck_fn(
                    &format!("lstm/{}.bias", GATE_NAMES[gi]),
                    |v| {
                        let mut wp = w.clone();
                        wp.gates[gi].bias.data_mut().copy_from_slice(v);
                        loss(&wp, &x, &s)
                    },
                    w.gates[gi].bias.data(),
                    grads.gates[gi].bias.data(),
                    1e-6,
                    1e-6,
                )
                .unwrap();
            }
            gradcheck_fn(
                "lstm/dx",
                |v| {
                    let xp = FeatureGrid::from_data(2, 3, 3, v.to_vec()).unwrap();
                    loss(&w, &xp, &s)
                },
                x.data(),
                dx.data(),
                1e-6,
                1e-6,
            )
            .unwrap();
            gradcheck_fn(
                "lstm/ds",
                |v| {
                    let sp = FeatureGrid::from_data(2, 3, 3, v.to_vec()).unwrap();
                    loss(&w, &x, &sp)
                },
                s.data(),
                ds.data(),
                1e-6,
                1e-6,
            )
            .unwrap();
        }
    }
}
