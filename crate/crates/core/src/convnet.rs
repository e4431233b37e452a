//! Minimal convolutional frontend and the multi-scale region-feature pyramid
//! it feeds into the recurrent layers.

use crate::error::{Error, Result};
use crate::tensor::{relu_grad, Real, Tensor};

/// One convolutional layer: cross-correlation + bias, optional ReLU, optional
/// max pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub pool: Option<PoolSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    /// Spatial output size after convolution and pooling.
    pub fn out_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let conv_dim = |d: usize| -> Result<usize> {
            let padded = d + 2 * self.padding;
            if self.kernel > padded {
                return Err(Error::Shape {
                    context: "conv2d kernel larger than padded input",
                    left: vec![self.kernel, self.kernel],
                    right: vec![padded, padded],
                });
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        let (mut h, mut w) = (conv_dim(in_h)?, conv_dim(in_w)?);
        if let Some(p) = self.pool {
            if p.window > h || p.window > w {
                return Err(Error::Shape {
                    context: "pool window larger than conv output",
                    left: vec![p.window, p.window],
                    right: vec![h, w],
                });
            }
            h = (h - p.window) / p.stride + 1;
            w = (w - p.window) / p.stride + 1;
        }
        Ok((h, w))
    }
}

/// Trainable parameters of one conv layer. Weight layout: [outC, inC, k, k].
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Real> {
    pub spec: ConvLayerSpec,
    pub in_channels: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(spec: ConvLayerSpec, in_channels: usize) -> Self {
        let weight = Tensor::zeros(&[spec.out_channels, in_channels, spec.kernel, spec.kernel]);
        let bias = Tensor::zeros(&[spec.out_channels]);
        ConvLayer {
            spec,
            in_channels,
            weight,
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvLayer {
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Forward state a conv layer records for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T: Real> {
    pub input: Tensor<T>,
    /// Post-activation, pre-pool map (the ReLU mask is read from it).
    pub conv_out: Tensor<T>,
    /// Flat index into `conv_out`'s spatial plane chosen by each pooled cell.
    pub pool_argmax: Option<Vec<usize>>,
    pub out_shape: [usize; 3],
}

/// Cross-correlation + bias + optional ReLU + optional max pool over one
/// C x H x W sample.
pub fn conv2d_forward<T: Real>(
    layer: &ConvLayer<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let shape = input.shape();
    if shape.len() != 3 || shape[0] != layer.in_channels {
        return Err(Error::Shape {
            context: "conv2d input",
            left: shape.to_vec(),
            right: vec![layer.in_channels],
        });
    }
    let (in_c, in_h, in_w) = (shape[0], shape[1], shape[2]);
    let spec = &layer.spec;
    let padded_h = in_h + 2 * spec.padding;
    let padded_w = in_w + 2 * spec.padding;
    if spec.kernel > padded_h || spec.kernel > padded_w {
        return Err(Error::Shape {
            context: "conv2d kernel larger than padded input",
            left: vec![spec.kernel, spec.kernel],
            right: vec![padded_h, padded_w],
        });
    }
    let out_c = spec.out_channels;
    let conv_h = (padded_h - spec.kernel) / spec.stride + 1;
    let conv_w = (padded_w - spec.kernel) / spec.stride + 1;

    let mut conv_out = Tensor::zeros(&[out_c, conv_h, conv_w]);
    let w = layer.weight.data();
    let x = input.data();
    let k = spec.kernel;
    let pad = spec.padding as isize;
    {
        let out = conv_out.data_mut();
        for oc in 0..out_c {
            let b = layer.bias.data()[oc];
            for oy in 0..conv_h {
                for ox in 0..conv_w {
                    let mut acc = b;
                    let base_y = (oy * spec.stride) as isize - pad;
                    let base_x = (ox * spec.stride) as isize - pad;
                    for ic in 0..in_c {
                        let wofs = ((oc * in_c + ic) * k) * k;
                        let xofs = ic * in_h * in_w;
                        for ky in 0..k {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                acc += w[wofs + ky * k + kx]
                                    * x[xofs + iy as usize * in_w + ix as usize];
                            }
                        }
                    }
                    if spec.relu {
                        acc = acc.max(T::ZERO);
                    }
                    out[(oc * conv_h + oy) * conv_w + ox] = acc;
                }
            }
        }
    }

    let (output, pool_argmax, out_shape) = match spec.pool {
        None => {
            let shape = [out_c, conv_h, conv_w];
            (conv_out.clone(), None, shape)
        }
        Some(p) => {
            let ph = (conv_h - p.window) / p.stride + 1;
            let pw = (conv_w - p.window) / p.stride + 1;
            let mut pooled = Tensor::zeros(&[out_c, ph, pw]);
            let mut argmax = vec![0usize; out_c * ph * pw];
            let src = conv_out.data();
            let dst = pooled.data_mut();
            for oc in 0..out_c {
                let plane = oc * conv_h * conv_w;
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best_idx = plane + (py * p.stride) * conv_w + px * p.stride;
                        let mut best = src[best_idx];
                        for wy in 0..p.window {
                            for wx in 0..p.window {
                                let idx = plane
                                    + (py * p.stride + wy) * conv_w
                                    + (px * p.stride + wx);
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (oc * ph + py) * pw + px;
                        dst[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
            (pooled, Some(argmax), [out_c, ph, pw])
        }
    };

    let cache = ConvCache {
        input: input.clone(),
        conv_out,
        pool_argmax,
        out_shape,
    };
    Ok((output, cache))
}

/// Backward pass of [`conv2d_forward`]. Returns the input gradient and
/// accumulates parameter gradients into `grads`.
pub fn conv2d_backward<T: Real>(
    layer: &ConvLayer<T>,
    cache: &ConvCache<T>,
    upstream: &Tensor<T>,
    grads: &mut ConvLayer<T>,
) -> Result<Tensor<T>> {
    if upstream.shape() != cache.out_shape {
        return Err(Error::Shape {
            context: "conv2d_backward upstream",
            left: upstream.shape().to_vec(),
            right: cache.out_shape.to_vec(),
        });
    }
    let spec = &layer.spec;
    let conv_shape = cache.conv_out.shape();
    let (out_c, conv_h, conv_w) = (conv_shape[0], conv_shape[1], conv_shape[2]);

    // Undo pooling: route each pooled-cell gradient to its argmax source.
    let mut d_conv = vec![T::ZERO; out_c * conv_h * conv_w];
    match &cache.pool_argmax {
        Some(argmax) => {
            for (o, &src_idx) in argmax.iter().enumerate() {
                d_conv[src_idx] += upstream.data()[o];
            }
        }
        None => d_conv.copy_from_slice(upstream.data()),
    }

    // Undo ReLU.
    if spec.relu {
        for (d, &y) in d_conv.iter_mut().zip(cache.conv_out.data()) {
            *d *= relu_grad(y);
        }
    }

    let in_shape = cache.input.shape();
    let (in_c, in_h, in_w) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut d_input = Tensor::zeros(in_shape);
    let k = spec.kernel;
    let pad = spec.padding as isize;
    let w = layer.weight.data();
    let x = cache.input.data();
    let dw = grads.weight.data_mut();
    let dx = d_input.data_mut();
    for oc in 0..out_c {
        let mut db = T::ZERO;
        for oy in 0..conv_h {
            for ox in 0..conv_w {
                let g = d_conv[(oc * conv_h + oy) * conv_w + ox];
                if g == T::ZERO {
                    continue;
                }
                db += g;
                let base_y = (oy * spec.stride) as isize - pad;
                let base_x = (ox * spec.stride) as isize - pad;
                for ic in 0..in_c {
                    let wofs = ((oc * in_c + ic) * k) * k;
                    let xofs = ic * in_h * in_w;
                    for ky in 0..k {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let xi = xofs + iy as usize * in_w + ix as usize;
                            dw[wofs + ky * k + kx] += g * x[xi];
                            dx[xi] += g * w[wofs + ky * k + kx];
                        }
                    }
                }
            }
        }
        grads.bias.data_mut()[oc] += db;
    }
    Ok(d_input)
}

// ---------------------------------------------------------------------------
// Region grids and the scale pyramid.
// ---------------------------------------------------------------------------

/// An R x C grid of D-dimensional region vectors (one pyramid scale).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T: Real> {
    rows: usize,
    cols: usize,
    depth: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        FeatureGrid {
            rows,
            cols,
            depth,
            data: vec![T::ZERO; rows * cols * depth],
        }
    }

    pub fn from_data(rows: usize, cols: usize, depth: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols * depth {
            return Err(Error::Shape {
                context: "FeatureGrid::from_data",
                left: vec![rows, cols, depth],
                right: vec![data.len()],
            });
        }
        Ok(FeatureGrid {
            rows,
            cols,
            depth,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        let o = (r * self.cols + c) * self.depth;
        &self.data[o..o + self.depth]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [T] {
        let o = (r * self.cols + c) * self.depth;
        &mut self.data[o..o + self.depth]
    }

    pub fn zeros_like(&self) -> Self {
        FeatureGrid::zeros(self.rows, self.cols, self.depth)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.depth == other.depth
    }
}

/// Ordered list of grids, coarsest (1x1) first.
#[derive(Clone, Debug)]
pub struct ScalePyramid<T: Real> {
    pub levels: Vec<FeatureGrid<T>>,
}

/// Adaptive max pooling of a D x H x W map to an R x C grid.
///
/// Cell (r, c) covers rows [floor(r*H/R), ceil((r+1)*H/R)) and the analogous
/// column span; the windows jointly cover the map and may overlap when the
/// sizes do not divide evenly. Returns the grid and the per-(cell, channel)
/// argmax (flat spatial index), which the backward pass routes gradients to.
pub fn adaptive_maxpool<T: Real>(
    map: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<(FeatureGrid<T>, Vec<usize>)> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            context: "adaptive_maxpool input",
            left: shape.to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if rows > h || cols > w || rows == 0 || cols == 0 {
        return Err(Error::Shape {
            context: "adaptive_maxpool target larger than input",
            left: vec![rows, cols],
            right: vec![h, w],
        });
    }
    let mut grid = FeatureGrid::zeros(rows, cols, d);
    let mut argmax = vec![0usize; rows * cols * d];
    let src = map.data();
    for r in 0..rows {
        let y0 = r * h / rows;
        let y1 = ((r + 1) * h).div_ceil(rows);
        for c in 0..cols {
            let x0 = c * w / cols;
            let x1 = ((c + 1) * w).div_ceil(cols);
            let cell_ofs = (r * cols + c) * d;
            for ch in 0..d {
                let plane = ch * h * w;
                let mut best_idx = y0 * w + x0;
                let mut best = src[plane + best_idx];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = y * w + x;
                        if src[plane + idx] > best {
                            best = src[plane + idx];
                            best_idx = idx;
                        }
                    }
                }
                grid.data_mut()[cell_ofs + ch] = best;
                argmax[cell_ofs + ch] = best_idx;
            }
        }
    }
    Ok((grid, argmax))
}

/// Scatter pyramid-level gradients back onto the map they were pooled from.
pub fn adaptive_maxpool_backward<T: Real>(
    upstream: &FeatureGrid<T>,
    argmax: &[usize],
    d_map: &mut Tensor<T>,
) -> Result<()> {
    let shape = d_map.shape();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if upstream.depth() != d || upstream.data().len() != argmax.len() {
        return Err(Error::Shape {
            context: "adaptive_maxpool_backward",
            left: vec![upstream.rows(), upstream.cols(), upstream.depth()],
            right: shape.to_vec(),
        });
    }
    let dst = d_map.data_mut();
    let cells = upstream.cells();
    for cell in 0..cells {
        for ch in 0..d {
            let o = cell * d + ch;
            dst[ch * h * w + argmax[o]] += upstream.data()[o];
        }
    }
    Ok(())
}

/// Pool one map into every target scale, coarse to fine. The first target
/// must be 1x1 and region counts must strictly increase.
pub fn build_pyramid<T: Real>(
    map: &Tensor<T>,
    targets: &[(usize, usize)],
) -> Result<(ScalePyramid<T>, Vec<Vec<usize>>)> {
    if targets.is_empty() {
        return Err(Error::contract("build_pyramid: no targets"));
    }
    if targets[0] != (1, 1) {
        return Err(Error::contract(format!(
            "build_pyramid: first target must be 1x1, got {}x{}",
            targets[0].0, targets[0].1
        )));
    }
    for win in targets.windows(2) {
        if win[1].0 * win[1].1 <= win[0].0 * win[0].1 {
            return Err(Error::contract(format!(
                "build_pyramid: targets must be sorted coarse to fine, got {}x{} before {}x{}",
                win[0].0, win[0].1, win[1].0, win[1].1
            )));
        }
    }
    let mut levels = Vec::with_capacity(targets.len());
    let mut argmaxes = Vec::with_capacity(targets.len());
    for &(r, c) in targets {
        let (grid, argmax) = adaptive_maxpool(map, r, c)?;
        levels.push(grid);
        argmaxes.push(argmax);
    }
    Ok((ScalePyramid { levels }, argmaxes))
}
