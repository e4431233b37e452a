//! Four-directional 2D recurrent scans over multi-scale region grids with
//! coarse-to-fine scale context and four-direction fusion.
//!
//! Scales are processed coarse to fine. A 1x1 level runs no scan: its pooled
//! vector stands in directly as the fused hidden state other scales draw
//! context from. Every scanned level runs four independent directional scans
//! whose hidden grids are summed cell-wise into the fused output.

mod context;
mod lstm;
mod srn;

pub use context::{scale_context, scale_context_backward, source_index};
pub use lstm::{
    scan_lstm, scan_lstm_backward, LstmDirWeights, LstmGateWeights, LstmScanCache, GATE_CELL,
    GATE_FORGET, GATE_INPUT, GATE_NAMES, GATE_OUTPUT,
};
pub use srn::{scan_srn, scan_srn_backward, SrnDirWeights};

use crate::convnet::{FeatureGrid, ScalePyramid};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One of the four acyclic scan orders over a grid. Named by the corner the
/// scan moves toward; predecessors of a cell are its already-visited row and
/// column neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Top-left to bottom-right: predecessors above and to the left.
    SouthEast,
    /// Bottom-right to top-left: predecessors below and to the right.
    NorthWest,
    /// Bottom-left to top-right: predecessors below and to the left.
    NorthEast,
    /// Top-right to bottom-left: predecessors above and to the right.
    SouthWest,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::SouthEast,
        Direction::NorthWest,
        Direction::NorthEast,
        Direction::SouthWest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::SouthEast => "se",
            Direction::NorthWest => "nw",
            Direction::NorthEast => "ne",
            Direction::SouthWest => "sw",
        }
    }

    /// The already-visited row neighbor of (r, c), if inside the grid.
    pub fn row_pred(self, r: usize, c: usize, rows: usize, _cols: usize) -> Option<(usize, usize)> {
        match self {
            Direction::SouthEast | Direction::SouthWest => (r > 0).then(|| (r - 1, c)),
            Direction::NorthWest | Direction::NorthEast => (r + 1 < rows).then_some((r + 1, c)),
        }
    }

    /// The already-visited column neighbor of (r, c), if inside the grid.
    pub fn col_pred(self, r: usize, c: usize, _rows: usize, cols: usize) -> Option<(usize, usize)> {
        match self {
            Direction::SouthEast | Direction::NorthEast => (c > 0).then(|| (r, c - 1)),
            Direction::NorthWest | Direction::SouthWest => (c + 1 < cols).then_some((r, c + 1)),
        }
    }

    /// A topological visit order: every cell exactly once, predecessors first.
    pub fn visit_order(self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        let mut order = Vec::with_capacity(rows * cols);
        let rs: Vec<usize> = match self {
            Direction::SouthEast | Direction::SouthWest => (0..rows).collect(),
            Direction::NorthWest | Direction::NorthEast => (0..rows).rev().collect(),
        };
        let cs: Vec<usize> = match self {
            Direction::SouthEast | Direction::NorthEast => (0..cols).collect(),
            Direction::NorthWest | Direction::SouthWest => (0..cols).rev().collect(),
        };
        for &r in &rs {
            for &c in &cs {
                order.push((r, c));
            }
        }
        order
    }
}

/// Which recurrent cell a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Srn,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Srn => "srn",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srn" => Ok(CellKind::Srn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::config(format!("unknown cell kind '{other}' (expected srn or lstm)"))),
        }
    }
}

/// Per-scale scan weights: four directions of either cell kind.
#[derive(Clone, Debug)]
pub enum ScaleWeights<T: Real> {
    Srn(Vec<SrnDirWeights<T>>),
    Lstm(Vec<LstmDirWeights<T>>),
}

impl<T: Real> ScaleWeights<T> {
    pub fn zeros(cell: CellKind, hidden: usize, input_dim: usize) -> Self {
        match cell {
            CellKind::Srn => {
                ScaleWeights::Srn((0..4).map(|_| SrnDirWeights::zeros(hidden, input_dim)).collect())
            }
            CellKind::Lstm => {
                ScaleWeights::Lstm((0..4).map(|_| LstmDirWeights::zeros(hidden, input_dim)).collect())
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ScaleWeights::Srn(dirs) => ScaleWeights::Srn(dirs.iter().map(|d| d.zeros_like()).collect()),
            ScaleWeights::Lstm(dirs) => {
                ScaleWeights::Lstm(dirs.iter().map(|d| d.zeros_like()).collect())
            }
        }
    }

    pub fn cell_kind(&self) -> CellKind {
        match self {
            ScaleWeights::Srn(_) => CellKind::Srn,
            ScaleWeights::Lstm(_) => CellKind::Lstm,
        }
    }
}

/// All recurrent parameters: per-scale directional weights (only for levels
/// with more than one cell) plus one cross-scale matrix per ordered pair of
/// levels. Weights are never shared across scales.
#[derive(Clone, Debug)]
pub struct HrnnWeights<T: Real> {
    pub hidden: usize,
    /// Square grid size per level, coarse to fine.
    pub scales: Vec<usize>,
    pub cell: CellKind,
    /// `None` for unscanned (single-cell) levels.
    pub levels: Vec<Option<ScaleWeights<T>>>,
    /// Cross-scale matrices in triangular order: (j, l) for l in 1..L, j < l.
    pub cross: Vec<Tensor<T>>,
}

impl<T: Real> HrnnWeights<T> {
    pub fn zeros(scales: &[usize], hidden: usize, input_dim: usize, cell: CellKind) -> Self {
        let levels = scales
            .iter()
            .map(|&s| (s > 1).then(|| ScaleWeights::zeros(cell, hidden, input_dim)))
            .collect();
        let n = scales.len();
        let cross = (0..n * (n.saturating_sub(1)) / 2)
            .map(|_| Tensor::zeros(&[hidden, hidden]))
            .collect();
        HrnnWeights {
            hidden,
            scales: scales.to_vec(),
            cell,
            levels,
            cross,
        }
    }

    pub fn zeros_like(&self) -> Self {
        HrnnWeights {
            hidden: self.hidden,
            scales: self.scales.clone(),
            cell: self.cell,
            levels: self.levels.iter().map(|l| l.as_ref().map(|w| w.zeros_like())).collect(),
            cross: self.cross.iter().map(|c| c.zeros_like()).collect(),
        }
    }

    /// Index of the cross matrix from level `j` into level `l` (`j < l`).
    pub fn cross_index(j: usize, l: usize) -> usize {
        debug_assert!(j < l);
        l * (l - 1) / 2 + j
    }

    pub fn cross_matrix(&self, j: usize, l: usize) -> &Tensor<T> {
        &self.cross[Self::cross_index(j, l)]
    }

    /// Visit every parameter tensor with a stable name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (li, level) in self.levels.iter().enumerate() {
            let Some(level) = level else { continue };
            match level {
                ScaleWeights::Srn(dirs) => {
                    for (dir, w) in Direction::ALL.iter().zip(dirs) {
                        let p = format!("level{}.{}", li + 1, dir.name());
                        f(format!("{p}.w_row"), &w.w_row);
                        f(format!("{p}.w_col"), &w.w_col);
                        f(format!("{p}.w_x"), &w.w_x);
                        f(format!("{p}.bias"), &w.bias);
                    }
                }
                ScaleWeights::Lstm(dirs) => {
                    for (dir, w) in Direction::ALL.iter().zip(dirs) {
                        for (gi, gate) in w.gates.iter().enumerate() {
                            let p = format!("level{}.{}.{}", li + 1, dir.name(), GATE_NAMES[gi]);
                            f(format!("{p}.w_row"), &gate.w_row);
                            f(format!("{p}.w_col"), &gate.w_col);
                            f(format!("{p}.w_x"), &gate.w_x);
                            f(format!("{p}.bias"), &gate.bias);
                        }
                    }
                }
            }
        }
        for l in 1..self.scales.len() {
            for j in 0..l {
                f(
                    format!("cross.{}_{}", j + 1, l + 1),
                    self.cross_matrix(j, l),
                );
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (li, level) in self.levels.iter_mut().enumerate() {
            let Some(level) = level else { continue };
            match level {
                ScaleWeights::Srn(dirs) => {
                    for (dir, w) in Direction::ALL.iter().zip(dirs) {
                        let p = format!("level{}.{}", li + 1, dir.name());
                        f(format!("{p}.w_row"), &mut w.w_row);
                        f(format!("{p}.w_col"), &mut w.w_col);
                        f(format!("{p}.w_x"), &mut w.w_x);
                        f(format!("{p}.bias"), &mut w.bias);
                    }
                }
                ScaleWeights::Lstm(dirs) => {
                    for (dir, w) in Direction::ALL.iter().zip(dirs) {
                        for (gi, gate) in w.gates.iter_mut().enumerate() {
                            let p = format!("level{}.{}.{}", li + 1, dir.name(), GATE_NAMES[gi]);
                            f(format!("{p}.w_row"), &mut gate.w_row);
                            f(format!("{p}.w_col"), &mut gate.w_col);
                            f(format!("{p}.w_x"), &mut gate.w_x);
                            f(format!("{p}.bias"), &mut gate.bias);
                        }
                    }
                }
            }
        }
        let n = self.scales.len();
        let mut idx = 0;
        for l in 1..n {
            for j in 0..l {
                f(format!("cross.{}_{}", j + 1, l + 1), &mut self.cross[idx]);
                idx += 1;
            }
        }
    }
}

/// Matrix / bias accounting for a recurrent-layer configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Number of transformation matrices (per-direction ones plus cross-scale).
    pub matrices: usize,
    /// Total scalar parameters in those matrices (biases excluded).
    pub matrix_params: usize,
    /// Number of bias vectors.
    pub biases: usize,
    /// Total scalar parameters in the bias vectors.
    pub bias_params: usize,
}

/// Count recurrent-layer parameters for square scales with H = D.
///
/// Each scanned scale (grid size > 1) contributes 4 directions x 3 matrices
/// for the simple cell, or 4 directions x 4 gates x 3 matrices for the LSTM,
/// plus one bias per direction (per gate for the LSTM). Every ordered pair of
/// levels contributes one cross-scale matrix.
pub fn count_parameters(scales: &[usize], hidden: usize, cell: CellKind) -> ParamCounts {
    let scanned = scales.iter().filter(|&&s| s > 1).count();
    let (mats_per_scale, biases_per_scale) = match cell {
        CellKind::Srn => (12, 4),
        CellKind::Lstm => (48, 16),
    };
    let n = scales.len();
    let cross = n * n.saturating_sub(1) / 2;
    let matrices = scanned * mats_per_scale + cross;
    let biases = scanned * biases_per_scale;
    ParamCounts {
        matrices,
        matrix_params: matrices * hidden * hidden,
        biases,
        bias_params: biases * hidden,
    }
}

/// Forward state of one scanned level.
#[derive(Clone, Debug)]
pub enum ScanCache<T: Real> {
    Srn { hidden: FeatureGrid<T> },
    Lstm(Box<LstmScanCache<T>>),
}

impl<T: Real> ScanCache<T> {
    pub fn hidden(&self) -> &FeatureGrid<T> {
        match self {
            ScanCache::Srn { hidden } => hidden,
            ScanCache::Lstm(c) => &c.hidden,
        }
    }
}

/// Forward state of the whole recurrent stage.
#[derive(Clone, Debug)]
pub struct HrnnCache<T: Real> {
    /// Per level: four directional scan caches (`None` for unscanned levels).
    pub scans: Vec<Option<Vec<ScanCache<T>>>>,
    /// Per level: the context grid fed into its scans (`None` for level 0 or
    /// unscanned levels).
    pub contexts: Vec<Option<FeatureGrid<T>>>,
    /// Fused hidden grid per level, before dropout. Context reads these.
    pub fused: Vec<FeatureGrid<T>>,
    /// Dropout masks applied to the outputs, when training.
    pub masks: Option<Vec<Vec<T>>>,
}

fn check_pyramid_matches<T: Real>(pyramid: &ScalePyramid<T>, weights: &HrnnWeights<T>) -> Result<()> {
    if pyramid.levels.len() != weights.levels.len() {
        return Err(Error::contract(format!(
            "hrnn_forward: pyramid has {} levels but weights have {}",
            pyramid.levels.len(),
            weights.levels.len()
        )));
    }
    for (li, (grid, w)) in pyramid.levels.iter().zip(&weights.levels).enumerate() {
        let scanned = grid.cells() > 1;
        if scanned != w.is_some() {
            return Err(Error::contract(format!(
                "hrnn_forward: level {} ({}x{}) does not match weight layout",
                li + 1,
                grid.rows(),
                grid.cols()
            )));
        }
    }
    Ok(())
}

/// Run the full recurrent stage over a pyramid: coarse-to-fine context, four
/// directional scans per scanned level, cell-wise fusion, and optional
/// inverted-dropout masks on the outputs.
///
/// Returns the (masked) per-level outputs and the cache for the backward
/// pass. The context always reads pre-dropout fused grids.
pub fn hrnn_forward<T: Real>(
    pyramid: &ScalePyramid<T>,
    weights: &HrnnWeights<T>,
    masks: Option<&[Vec<T>]>,
) -> Result<(Vec<FeatureGrid<T>>, HrnnCache<T>)> {
    check_pyramid_matches(pyramid, weights)?;
    let levels = pyramid.levels.len();
    if let Some(masks) = masks {
        if masks.len() != levels {
            return Err(Error::contract(format!(
                "hrnn_forward: {} dropout masks for {} levels",
                masks.len(),
                levels
            )));
        }
    }

    let mut fused: Vec<FeatureGrid<T>> = Vec::with_capacity(levels);
    let mut scans: Vec<Option<Vec<ScanCache<T>>>> = Vec::with_capacity(levels);
    let mut contexts: Vec<Option<FeatureGrid<T>>> = Vec::with_capacity(levels);

    for (li, grid) in pyramid.levels.iter().enumerate() {
        match &weights.levels[li] {
            None => {
                fused.push(grid.clone());
                scans.push(None);
                contexts.push(None);
            }
            Some(level_w) => {
                let ctx = if li > 0 {
                    let sources: Vec<&FeatureGrid<T>> = fused[..li].iter().collect();
                    let cross: Vec<&Tensor<T>> =
                        (0..li).map(|j| weights.cross_matrix(j, li)).collect();
                    Some(scale_context(
                        &sources,
                        &cross,
                        grid.rows(),
                        grid.cols(),
                        weights.hidden,
                    )?)
                } else {
                    None
                };

                let mut dir_caches = Vec::with_capacity(4);
                match level_w {
                    ScaleWeights::Srn(dirs) => {
                        for (dir, w) in Direction::ALL.iter().zip(dirs) {
                            let h = scan_srn(grid, *dir, w, ctx.as_ref())?;
                            dir_caches.push(ScanCache::Srn { hidden: h });
                        }
                    }
                    ScaleWeights::Lstm(dirs) => {
                        for (dir, w) in Direction::ALL.iter().zip(dirs) {
                            let c = scan_lstm(grid, *dir, w, ctx.as_ref())?;
                            dir_caches.push(ScanCache::Lstm(Box::new(c)));
                        }
                    }
                }

                // Fuse in fixed direction order.
                let mut sum = dir_caches[0].hidden().clone();
                for cache in &dir_caches[1..] {
                    for (dst, &src) in sum.data_mut().iter_mut().zip(cache.hidden().data()) {
                        *dst += src;
                    }
                }
                fused.push(sum);
                scans.push(Some(dir_caches));
                contexts.push(ctx);
            }
        }
    }

    let outputs = match masks {
        None => fused.clone(),
        Some(masks) => fused
            .iter()
            .zip(masks)
            .map(|(grid, mask)| {
                let mut out = grid.clone();
                if mask.len() != out.data().len() {
                    return Err(Error::contract(format!(
                        "hrnn_forward: dropout mask length {} does not match grid size {}",
                        mask.len(),
                        out.data().len()
                    )));
                }
                for (v, &m) in out.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let cache = HrnnCache {
        scans,
        contexts,
        fused,
        masks: masks.map(|m| m.to_vec()),
    };
    Ok((outputs, cache))
}

/// Backward pass of [`hrnn_forward`].
///
/// Levels run in reverse: a level's fused gradient collects the (dropout-
/// adjusted) upstream gradient plus context contributions from every finer
/// level processed before it. Returns per-level input-pyramid gradients and
/// the parameter gradients.
pub fn hrnn_backward<T: Real>(
    pyramid: &ScalePyramid<T>,
    weights: &HrnnWeights<T>,
    cache: &HrnnCache<T>,
    upstream: &[FeatureGrid<T>],
) -> Result<(Vec<FeatureGrid<T>>, HrnnWeights<T>)> {
    check_pyramid_matches(pyramid, weights)?;
    let levels = pyramid.levels.len();
    if upstream.len() != levels || cache.fused.len() != levels {
        return Err(Error::contract(
            "hrnn_backward: upstream/cache level count does not match pyramid",
        ));
    }

    let mut grads = weights.zeros_like();
    // d(loss)/d(fused hidden), accumulated: dropout-adjusted upstream now,
    // context contributions added as finer levels run their backward pass.
    let mut d_fused: Vec<FeatureGrid<T>> = Vec::with_capacity(levels);
    for (li, up) in upstream.iter().enumerate() {
        if !up.same_shape(&cache.fused[li]) {
            return Err(Error::contract(format!(
                "hrnn_backward: upstream shape for level {} does not match recorded state",
                li + 1
            )));
        }
        let mut d = up.clone();
        if let Some(masks) = &cache.masks {
            for (v, &m) in d.data_mut().iter_mut().zip(&masks[li]) {
                *v *= m;
            }
        }
        d_fused.push(d);
    }

    let mut d_pyramid: Vec<FeatureGrid<T>> =
        pyramid.levels.iter().map(|g| g.zeros_like()).collect();

    for li in (0..levels).rev() {
        match &weights.levels[li] {
            None => {
                // Unscanned level: the pooled vector is the fused state.
                for (dst, &src) in d_pyramid[li]
                    .data_mut()
                    .iter_mut()
                    .zip(d_fused[li].data())
                {
                    *dst += src;
                }
            }
            Some(level_w) => {
                let scan_caches = cache.scans[li].as_ref().ok_or_else(|| {
                    Error::contract(format!(
                        "hrnn_backward: missing recorded scan state for level {}",
                        li + 1
                    ))
                })?;
                let grid = &pyramid.levels[li];
                let ctx = cache.contexts[li].as_ref();
                let mut ds = ctx.map(|c| c.zeros_like());

                match (level_w, grads.levels[li].as_mut().expect("zeros_like layout")) {
                    (ScaleWeights::Srn(dirs), ScaleWeights::Srn(dir_grads)) => {
                        for di in 0..4 {
                            let ScanCache::Srn { hidden } = &scan_caches[di] else {
                                return Err(Error::contract(
                                    "hrnn_backward: cache cell kind does not match weights",
                                ));
                            };
                            scan_srn_backward(
                                grid,
                                Direction::ALL[di],
                                &dirs[di],
                                hidden,
                                &d_fused[li],
                                &mut dir_grads[di],
                                &mut d_pyramid[li],
                                ds.as_mut(),
                            )?;
                        }
                    }
                    (ScaleWeights::Lstm(dirs), ScaleWeights::Lstm(dir_grads)) => {
                        for di in 0..4 {
                            let ScanCache::Lstm(scan) = &scan_caches[di] else {
                                return Err(Error::contract(
                                    "hrnn_backward: cache cell kind does not match weights",
                                ));
                            };
                            scan_lstm_backward(
                                grid,
                                Direction::ALL[di],
                                &dirs[di],
                                scan,
                                &d_fused[li],
                                &mut dir_grads[di],
                                &mut d_pyramid[li],
                                ds.as_mut(),
                            )?;
                        }
                    }
                    _ => unreachable!("zeros_like preserves cell kind"),
                }

                if let Some(ds) = ds {
                    // Split the context gradient over the coarser levels.
                    let sources: Vec<&FeatureGrid<T>> = cache.fused[..li].iter().collect();
                    let cross: Vec<&Tensor<T>> =
                        (0..li).map(|j| weights.cross_matrix(j, li)).collect();
                    let (coarser_d, _) = d_fused.split_at_mut(li);
                    let mut coarser_grads: Vec<&mut FeatureGrid<T>> =
                        coarser_d.iter_mut().collect();
                    // Cross gradients for this level occupy a contiguous
                    // triangular block.
                    let base = HrnnWeights::<T>::cross_index(0, li);
                    let mut cross_grads: Vec<&mut Tensor<T>> =
                        grads.cross[base..base + li].iter_mut().collect();
                    scale_context_backward(
                        &sources,
                        &cross,
                        &ds,
                        &mut cross_grads,
                        &mut coarser_grads,
                    )?;
                }
            }
        }
    }

    Ok((d_pyramid, grads))
}
