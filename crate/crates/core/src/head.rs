//! Classification head: concatenate all scale outputs, run them through one
//! or two ReLU fully-connected layers with inverted dropout, and close with
//! softmax cross-entropy.

use crate::convnet::FeatureGrid;
use crate::error::{Error, Result};
use crate::tensor::{matvec_acc, matvec_t_acc, outer_acc, relu_grad, softmax, Real, Tensor};

/// Probability floor applied before taking the log.
const PROB_FLOOR: f64 = 1e-12;

/// One fully-connected layer, weight layout [out, in].
#[derive(Clone, Debug)]
pub struct FcLayer<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> FcLayer<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        FcLayer {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FcLayer {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Hidden FC layers (ReLU + dropout each) followed by the output map.
#[derive(Clone, Debug)]
pub struct HeadWeights<T: Real> {
    pub hidden: Vec<FcLayer<T>>,
    pub out: FcLayer<T>,
}

impl<T: Real> HeadWeights<T> {
    pub fn zeros(input_dim: usize, hidden_dims: &[usize], classes: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut prev = input_dim;
        for &dim in hidden_dims {
            layers.push(FcLayer::zeros(dim, prev));
            prev = dim;
        }
        HeadWeights {
            hidden: layers,
            out: FcLayer::zeros(classes, prev),
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadWeights {
            hidden: self.hidden.iter().map(|l| l.zeros_like()).collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn classes(&self) -> usize {
        self.out.out_dim()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, layer) in self.hidden.iter().enumerate() {
            f(format!("fc{}.weight", i + 1), &layer.weight);
            f(format!("fc{}.bias", i + 1), &layer.bias);
        }
        f("out.weight".to_string(), &self.out.weight);
        f("out.bias".to_string(), &self.out.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            f(format!("fc{}.weight", i + 1), &mut layer.weight);
            f(format!("fc{}.bias", i + 1), &mut layer.bias);
        }
        f("out.weight".to_string(), &mut self.out.weight);
        f("out.bias".to_string(), &mut self.out.bias);
    }
}

/// Concatenate per-scale outputs into one vector: scales coarse to fine,
/// cells in row-major order, each cell contributing its full depth.
pub fn concat_scales<T: Real>(outputs: &[FeatureGrid<T>]) -> Result<Vec<T>> {
    if outputs.is_empty() {
        return Err(Error::contract("concat_scales: no scales supplied"));
    }
    let total: usize = outputs.iter().map(|g| g.data().len()).sum();
    let mut out = Vec::with_capacity(total);
    for grid in outputs {
        out.extend_from_slice(grid.data());
    }
    Ok(out)
}

/// Split a concatenated gradient back into per-scale grids.
pub fn split_scales<T: Real>(grad: &[T], like: &[FeatureGrid<T>]) -> Result<Vec<FeatureGrid<T>>> {
    let total: usize = like.iter().map(|g| g.data().len()).sum();
    if grad.len() != total {
        return Err(Error::Shape {
            context: "split_scales",
            left: vec![grad.len()],
            right: vec![total],
        });
    }
    let mut out = Vec::with_capacity(like.len());
    let mut ofs = 0;
    for grid in like {
        let n = grid.data().len();
        let mut g = grid.zeros_like();
        g.data_mut().copy_from_slice(&grad[ofs..ofs + n]);
        ofs += n;
        out.push(g);
    }
    Ok(out)
}

/// Forward state of the head.
#[derive(Clone, Debug)]
pub struct HeadCache<T: Real> {
    pub input: Vec<T>,
    /// Per hidden layer: post-ReLU activations (pre-dropout).
    pub activations: Vec<Vec<T>>,
    /// Per hidden layer: post-dropout activations actually fed forward.
    pub dropped: Vec<Vec<T>>,
    pub probs: Vec<T>,
    pub masks: Option<Vec<Vec<T>>>,
}

/// Run the head: hidden FC layers (ReLU, optional inverted-dropout masks, one
/// per hidden layer) and the softmax output. Returns class probabilities.
pub fn head_forward<T: Real>(
    input: &[T],
    w: &HeadWeights<T>,
    masks: Option<&[Vec<T>]>,
) -> Result<(Vec<T>, HeadCache<T>)> {
    if let Some(masks) = masks {
        if masks.len() != w.hidden.len() {
            return Err(Error::contract(format!(
                "head_forward: {} dropout masks for {} hidden layers",
                masks.len(),
                w.hidden.len()
            )));
        }
    }
    let mut activations = Vec::with_capacity(w.hidden.len());
    let mut dropped = Vec::with_capacity(w.hidden.len());
    let mut cur = input.to_vec();
    for (li, layer) in w.hidden.iter().enumerate() {
        if layer.in_dim() != cur.len() {
            return Err(Error::Shape {
                context: "head_forward hidden layer",
                left: layer.weight.shape().to_vec(),
                right: vec![cur.len()],
            });
        }
        let mut act = layer.bias.data().to_vec();
        matvec_acc(layer.weight.data(), layer.out_dim(), layer.in_dim(), &cur, &mut act);
        for v in &mut act {
            *v = v.max(T::ZERO);
        }
        activations.push(act.clone());
        if let Some(masks) = masks {
            if masks[li].len() != act.len() {
                return Err(Error::contract(
                    "head_forward: dropout mask length does not match layer width",
                ));
            }
            for (v, &m) in act.iter_mut().zip(&masks[li]) {
                *v *= m;
            }
        }
        dropped.push(act.clone());
        cur = act;
    }
    if w.out.in_dim() != cur.len() {
        return Err(Error::Shape {
            context: "head_forward output layer",
            left: w.out.weight.shape().to_vec(),
            right: vec![cur.len()],
        });
    }
    let mut logits = w.out.bias.data().to_vec();
    matvec_acc(w.out.weight.data(), w.out.out_dim(), w.out.in_dim(), &cur, &mut logits);
    let probs = softmax(&logits);
    let cache = HeadCache {
        input: input.to_vec(),
        activations,
        dropped,
        probs: probs.clone(),
        masks: masks.map(|m| m.to_vec()),
    };
    Ok((probs, cache))
}

/// −log y[label] with a probability floor, labels 1-based.
pub fn cross_entropy<T: Real>(probs: &[T], label: u32) -> Result<T> {
    let classes = probs.len();
    if label == 0 || label as usize > classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let p = probs[label as usize - 1].to_f64().max(PROB_FLOOR);
    Ok(T::from_f64(-p.ln()))
}

/// Backward pass of head + softmax cross-entropy, fused: the logit gradient
/// is (probs − onehot(label)) * upstream. Parameter gradients accumulate into
/// `grads`; returns the gradient on the concatenated input.
pub fn head_backward<T: Real>(
    w: &HeadWeights<T>,
    cache: &HeadCache<T>,
    label: u32,
    upstream: T,
    grads: &mut HeadWeights<T>,
) -> Result<Vec<T>> {
    let classes = w.classes();
    if label == 0 || label as usize > classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if cache.probs.len() != classes {
        return Err(Error::contract(
            "head_backward: recorded probabilities do not match output layer",
        ));
    }

    let mut d_logits = cache.probs.clone();
    d_logits[label as usize - 1] -= T::ONE;
    for v in &mut d_logits {
        *v *= upstream;
    }

    let last_input: &[T] = match cache.dropped.last() {
        Some(v) => v,
        None => &cache.input,
    };
    outer_acc(&d_logits, last_input, grads.out.weight.data_mut());
    for (b, &g) in grads.out.bias.data_mut().iter_mut().zip(&d_logits) {
        *b += g;
    }
    let mut d_cur = vec![T::ZERO; w.out.in_dim()];
    matvec_t_acc(w.out.weight.data(), classes, w.out.in_dim(), &d_logits, &mut d_cur);

    for li in (0..w.hidden.len()).rev() {
        let layer = &w.hidden[li];
        // Dropout backward, then ReLU backward (mask from pre-dropout output).
        if let Some(masks) = &cache.masks {
            for (d, &m) in d_cur.iter_mut().zip(&masks[li]) {
                *d *= m;
            }
        }
        for (d, &y) in d_cur.iter_mut().zip(&cache.activations[li]) {
            *d *= relu_grad(y);
        }
        let layer_input: &[T] = if li == 0 { &cache.input } else { &cache.dropped[li - 1] };
        outer_acc(&d_cur, layer_input, grads.hidden[li].weight.data_mut());
        for (b, &g) in grads.hidden[li].bias.data_mut().iter_mut().zip(&d_cur) {
            *b += g;
        }
        let mut d_prev = vec![T::ZERO; layer.in_dim()];
        matvec_t_acc(layer.weight.data(), layer.out_dim(), layer.in_dim(), &d_cur, &mut d_prev);
        d_cur = d_prev;
    }
    Ok(d_cur)
}
