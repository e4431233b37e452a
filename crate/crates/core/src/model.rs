//! Full network: convolutional frontend, scale pyramid, recurrent stage, and
//! classification head, with explicit backward passes throughout.

use crate::convnet::{
    adaptive_maxpool_backward, build_pyramid, conv2d_backward, conv2d_forward, ConvCache,
    ConvLayer, ConvLayerSpec, ScalePyramid,
};
use crate::error::{Error, Result};
use crate::head::{
    concat_scales, cross_entropy, head_backward, head_forward, split_scales, HeadCache,
    HeadWeights,
};
use crate::hrnn::{hrnn_backward, hrnn_forward, CellKind, HrnnCache, HrnnWeights};
use crate::tensor::{GradCheckReport, Real, Tensor};
use rand::Rng;

/// Everything needed to build a model. `hidden` doubles as the region feature
/// depth: the final conv layer must emit exactly `hidden` channels so all
/// recurrent matrices are square.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input image shape (channels, height, width).
    pub input: (usize, usize, usize),
    pub conv: Vec<ConvLayerSpec>,
    /// Square pyramid grid sizes, coarse to fine; first must be 1.
    pub scales: Vec<usize>,
    pub hidden: usize,
    pub cell: CellKind,
    /// Hidden fully-connected widths (at least one).
    pub fc: Vec<usize>,
    pub classes: usize,
    /// Inverted-dropout rate on recurrent outputs and hidden FC layers.
    pub dropout: f64,
    /// Keep all W_hh row/column matrices at zero (pooling-only ablation).
    pub freeze_spatial: bool,
    /// Keep all cross-scale matrices at zero.
    pub freeze_cross: bool,
}

impl ModelConfig {
    /// Spatial size of the final convolutional map.
    pub fn map_size(&self) -> Result<(usize, usize)> {
        let (_, mut h, mut w) = self.input;
        for spec in &self.conv {
            let (nh, nw) = spec.out_size(h, w)?;
            h = nh;
            w = nw;
        }
        Ok((h, w))
    }

    pub fn pyramid_targets(&self) -> Vec<(usize, usize)> {
        self.scales.iter().map(|&s| (s, s)).collect()
    }

    /// Width of the concatenated head input.
    pub fn concat_width(&self) -> usize {
        self.scales.iter().map(|&s| s * s * self.hidden).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.is_empty() {
            return Err(Error::config("at least one conv layer is required"));
        }
        let out_channels = self.conv.last().unwrap().out_channels;
        if out_channels != self.hidden {
            return Err(Error::config(format!(
                "hidden size must equal final conv channels (hidden {} vs channels {})",
                self.hidden, out_channels
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::config("at least one pyramid scale is required"));
        }
        if self.scales[0] != 1 {
            return Err(Error::config(format!(
                "coarsest scale must be 1, got {}",
                self.scales[0]
            )));
        }
        for win in self.scales.windows(2) {
            if win[1] <= win[0] {
                return Err(Error::config(format!(
                    "scales must strictly increase, got {} after {}",
                    win[1], win[0]
                )));
            }
        }
        let (map_h, map_w) = self.map_size()?;
        let finest = *self.scales.last().unwrap();
        if finest > map_h.min(map_w) {
            return Err(Error::config(format!(
                "finest scale {finest} exceeds conv map size {map_h}x{map_w}"
            )));
        }
        if self.fc.is_empty() {
            return Err(Error::config("at least one hidden FC layer is required"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Extra shrink on the uniform init bound for W_hh row/column matrices.
const RECURRENT_INIT_DAMPING: f64 = 0.3;

/// Initial forget-gate bias. The memory update multiplies the forget gate
/// with the *sum* of two predecessor memories, so the stability point sits
/// near sigmoid(b) = 0.5; a positive bias compounds to gain > 1 across the
/// scan and saturates tanh(c).
const FORGET_BIAS_INIT: f64 = 0.0;

/// Inverted-dropout masks for one sample: one per pyramid level, one per
/// hidden FC layer. Entries are 0 or 1/(1 - rate), so evaluation needs no
/// rescaling.
#[derive(Clone, Debug)]
pub struct DropoutMasks<T: Real> {
    pub hrnn: Vec<Vec<T>>,
    pub fc: Vec<Vec<T>>,
}

pub fn sample_dropout_masks<T: Real, R: Rng>(config: &ModelConfig, rng: &mut R) -> DropoutMasks<T> {
    let keep = 1.0 - config.dropout;
    let scale = T::from_f64(1.0 / keep);
    let mut draw = |n: usize| -> Vec<T> {
        (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::ZERO })
            .collect()
    };
    DropoutMasks {
        hrnn: config.scales.iter().map(|&s| draw(s * s * config.hidden)).collect(),
        fc: config.fc.iter().map(|&w| draw(w)).collect(),
    }
}

/// Full parameter set. The same structure doubles as the gradient container:
/// `zeros_like` produces an aligned, zeroed copy.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer<T>>,
    pub hrnn: HrnnWeights<T>,
    pub head: HeadWeights<T>,
}

/// Forward state of one sample, retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    pub conv: Vec<ConvCache<T>>,
    pub map: Tensor<T>,
    pub pyramid: ScalePyramid<T>,
    pub pool_argmax: Vec<Vec<usize>>,
    pub hrnn_outputs: Vec<crate::convnet::FeatureGrid<T>>,
    pub hrnn: HrnnCache<T>,
    pub head: HeadCache<T>,
}

impl<T: Real> Model<T> {
    /// Zero-parameter model with the configured layout.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::with_capacity(config.conv.len());
        let mut in_channels = config.input.0;
        for spec in &config.conv {
            conv.push(ConvLayer::zeros(spec.clone(), in_channels));
            in_channels = spec.out_channels;
        }
        let hrnn = HrnnWeights::zeros(&config.scales, config.hidden, config.hidden, config.cell);
        let head = HeadWeights::zeros(config.concat_width(), &config.fc, config.classes);
        Ok(Model {
            config,
            conv,
            hrnn,
            head,
        })
    }

    /// Seeded initialization: matrices from a zero-mean uniform with scale
    /// sqrt(6 / (fan_in + fan_out)), biases zero except LSTM forget-gate
    /// biases at +1. The spatial and cross-scale matrices stay zero when the
    /// corresponding freeze flag is set.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Model::zeros(config)?;
        let freeze_spatial = model.config.freeze_spatial;
        let freeze_cross = model.config.freeze_cross;
        model.visit_mut(&mut |name, t| {
            let shape = t.shape().to_vec();
            if shape.len() == 1 {
                // Bias vector.
                if name.contains(".f.bias") {
                    t.fill(T::from_f64(FORGET_BIAS_INIT));
                }
                return;
            }
            if freeze_spatial && (name.ends_with(".w_row") || name.ends_with(".w_col")) {
                return;
            }
            if freeze_cross && name.starts_with("hrnn.cross.") {
                return;
            }
            let (fan_in, fan_out) = match shape.len() {
                2 => (shape[1], shape[0]),
                4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
                _ => (t.len(), t.len()),
            };
            let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            // Recurrent and cross-scale matrices start well inside the stable
            // regime: each cell sums two predecessor terms plus one context
            // term per coarser level, and the scan unrolls across the whole
            // grid, so a plain uniform fan-scaled init sits at the edge of
            // exploding activations (fused magnitudes compound scale by
            // scale).
            if name.ends_with(".w_row")
                || name.ends_with(".w_col")
                || name.starts_with("hrnn.cross.")
            {
                bound *= RECURRENT_INIT_DAMPING;
            }
            for v in t.data_mut() {
                *v = T::from_f64(rng.gen_range(-bound..bound));
            }
        });
        Ok(model)
    }

    /// The degenerate simple-cell configuration: W_hh = 0, W_x = identity,
    /// biases 0, cross matrices 0. Scanned outputs collapse to 4 * ReLU(x).
    pub fn degenerate_srn(mut config: ModelConfig) -> Result<Self> {
        config.cell = CellKind::Srn;
        let mut model = Model::zeros(config)?;
        let hidden = model.config.hidden;
        model.hrnn.visit_mut(&mut |name, t| {
            if name.ends_with(".w_x") {
                *t = Tensor::eye(hidden);
            }
        });
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config.clone(),
            conv: self.conv.iter().map(|l| l.zeros_like()).collect(),
            hrnn: self.hrnn.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn to_f64(&self) -> Model<f64> {
        let mut out = Model::<f64>::zeros(self.config.clone()).expect("config already validated");
        let mut sources: Vec<Tensor<f64>> = Vec::new();
        self.visit(&mut |_, t| sources.push(t.to_f64()));
        let mut i = 0;
        out.visit_mut(&mut |_, t| {
            *t = sources[i].clone();
            i += 1;
        });
        out
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, layer) in self.conv.iter().enumerate() {
            f(format!("conv{}.weight", i + 1), &layer.weight);
            f(format!("conv{}.bias", i + 1), &layer.bias);
        }
        self.hrnn.visit(&mut |name, t| f(format!("hrnn.{name}"), t));
        self.head.visit(&mut |name, t| f(format!("head.{name}"), t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, layer) in self.conv.iter_mut().enumerate() {
            f(format!("conv{}.weight", i + 1), &mut layer.weight);
            f(format!("conv{}.bias", i + 1), &mut layer.bias);
        }
        self.hrnn.visit_mut(&mut |name, t| f(format!("hrnn.{name}"), t));
        self.head.visit_mut(&mut |name, t| f(format!("head.{name}"), t));
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// self += other, tensor by tensor (gradient accumulation).
    pub fn add_assign(&mut self, other: &Model<T>) {
        let mut sources: Vec<&Tensor<T>> = Vec::new();
        other.visit(&mut |_, t| sources.push(t));
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            crate::tensor::add_assign(t.data_mut(), sources[i].data());
            i += 1;
        });
    }

    pub fn scale(&mut self, k: T) {
        self.visit_mut(&mut |_, t| crate::tensor::scale_assign(t.data_mut(), k));
    }

    pub fn set_param(&mut self, name: &str, index: usize, value: T) {
        self.visit_mut(&mut |n, t| {
            if n == name {
                t.data_mut()[index] = value;
            }
        });
    }

    pub fn get_param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Forward pass over one image. Dropout masks are supplied at train time;
    /// evaluation passes `None`.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        masks: Option<&DropoutMasks<T>>,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        let mut conv_caches = Vec::with_capacity(self.conv.len());
        let mut cur = image.clone();
        for layer in &self.conv {
            let (out, cache) = conv2d_forward(layer, &cur)?;
            conv_caches.push(cache);
            cur = out;
        }
        let map = cur;
        let (pyramid, pool_argmax) = build_pyramid(&map, &self.config.pyramid_targets())?;
        let (outputs, hrnn_cache) =
            hrnn_forward(&pyramid, &self.hrnn, masks.map(|m| m.hrnn.as_slice()))?;
        let concat = concat_scales(&outputs)?;
        let (probs, head_cache) =
            head_forward(&concat, &self.head, masks.map(|m| m.fc.as_slice()))?;
        Ok((
            probs,
            ForwardCache {
                conv: conv_caches,
                map,
                pyramid,
                pool_argmax,
                hrnn_outputs: outputs,
                hrnn: hrnn_cache,
                head: head_cache,
            },
        ))
    }

    /// Forward pass plus cross-entropy loss for one labeled image.
    pub fn loss(
        &self,
        image: &Tensor<T>,
        label: u32,
        masks: Option<&DropoutMasks<T>>,
    ) -> Result<(T, ForwardCache<T>)> {
        let (probs, cache) = self.forward(image, masks)?;
        let loss = cross_entropy(&probs, label)?;
        Ok((loss, cache))
    }

    /// Backward pass for one sample; `upstream` scales the loss gradient
    /// (1/batch for a batch mean). Returns the full parameter gradient.
    pub fn backward(&self, cache: &ForwardCache<T>, label: u32, upstream: T) -> Result<Model<T>> {
        let mut grads = self.zeros_like();
        let d_concat = head_backward(&self.head, &cache.head, label, upstream, &mut grads.head)?;
        let d_outputs = split_scales(&d_concat, &cache.hrnn_outputs)?;
        let (d_pyramid, hrnn_grads) =
            hrnn_backward(&cache.pyramid, &self.hrnn, &cache.hrnn, &d_outputs)?;
        grads.hrnn = hrnn_grads;

        let mut d_map = cache.map.zeros_like();
        for (level, argmax) in d_pyramid.iter().zip(&cache.pool_argmax) {
            adaptive_maxpool_backward(level, argmax, &mut d_map)?;
        }

        let mut d_cur = d_map;
        for i in (0..self.conv.len()).rev() {
            d_cur = conv2d_backward(&self.conv[i], &cache.conv[i], &d_cur, &mut grads.conv[i])?;
        }
        Ok(grads)
    }
}

/// Analytic gradient of the summed loss over `samples` (dropout off).
pub fn model_analytic_grads(
    model: &Model<f64>,
    samples: &[(Tensor<f64>, u32)],
) -> Result<Model<f64>> {
    let mut analytic = model.zeros_like();
    for (img, label) in samples {
        let (_, cache) = model.loss(img, *label, None)?;
        let g = model.backward(&cache, *label, 1.0)?;
        analytic.add_assign(&g);
    }
    Ok(analytic)
}

/// Compare a supplied analytic gradient against central finite differences
/// of the summed loss, coordinate by coordinate, one report per parameter
/// group. Pass/fail is the caller's call via [`GradCheckReport::passes`].
pub fn gradcheck_against(
    model: &Model<f64>,
    samples: &[(Tensor<f64>, u32)],
    analytic: &Model<f64>,
    eps: f64,
) -> Result<Vec<GradCheckReport>> {
    let total_loss = |m: &Model<f64>| -> Result<f64> {
        samples
            .iter()
            .map(|(img, label)| m.loss(img, *label, None).map(|(l, _)| l))
            .sum()
    };

    let mut probe = model.clone();
    let mut reports = Vec::new();
    for name in model.param_names() {
        let base = model.get_param(&name).expect("name from param_names");
        let grad = analytic
            .get_param(&name)
            .ok_or_else(|| Error::contract(format!("gradcheck: no analytic gradient for {name}")))?;
        let mut report = GradCheckReport {
            name: name.clone(),
            worst_rel: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            coords: base.len(),
        };
        for i in 0..base.len() {
            let theta = base.data()[i];
            probe.set_param(&name, i, theta + eps);
            let up = total_loss(&probe)?;
            probe.set_param(&name, i, theta - eps);
            let down = total_loss(&probe)?;
            probe.set_param(&name, i, theta);
            let numeric = (up - down) / (2.0 * eps);
            let rel = crate::tensor::grad_rel_error(grad.data()[i], numeric);
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_index = i;
                report.analytic_at_worst = grad.data()[i];
                report.numeric_at_worst = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Check every parameter group of a model against central finite differences
/// of the summed loss over `samples`, in the current precision (run it on a
/// [`Model<f64>`] for oracle accuracy). `Err` names the first group whose
/// worst coordinate exceeds the tolerance.
pub fn gradcheck_model(
    model: &Model<f64>,
    samples: &[(Tensor<f64>, u32)],
    eps: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>> {
    let analytic = model_analytic_grads(model, samples)?;
    let reports = gradcheck_against(model, samples, &analytic, eps)?;
    for report in &reports {
        if !report.passes(tol) {
            return Err(Error::contract(format!(
                "gradcheck failed for group {}: coordinate {} rel error {:.3e} > {tol:.1e} (analytic {:.6e}, numeric {:.6e})",
                report.name, report.worst_index, report.worst_rel, report.analytic_at_worst, report.numeric_at_worst
            )));
        }
    }
    Ok(reports)
}

/// A small frontend suitable for quick experiments: two conv layers pooling
/// an input down to a `hidden`-channel 6x6 map (for 24x24 inputs).
pub fn desk_conv_stack(hidden: usize) -> Vec<ConvLayerSpec> {
    use crate::convnet::PoolSpec;
    vec![
        ConvLayerSpec {
            out_channels: 12,
            kernel: 5,
            stride: 1,
            padding: 2,
            relu: true,
            pool: Some(PoolSpec { window: 2, stride: 2 }),
        },
        ConvLayerSpec {
            out_channels: hidden,
            kernel: 3,
            stride: 1,
            padding: 1,
            relu: true,
            pool: Some(PoolSpec { window: 2, stride: 2 }),
        },
    ]
}
