//! SGD-with-momentum training: deterministic batch loop, plateau learning-rate
//! schedule, Top-1/Top-5 evaluation, and line-record metrics.
//!
//! All randomness (shuffles, dropout masks, flip coins) is derived per
//! (seed, epoch, step, sample) so a run can be interrupted and resumed at any
//! step with bit-identical results, and so thread count does not change what
//! any individual sample computes.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{sample_dropout_masks, DropoutMasks, Model};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Initial learning rate.
    pub lr: f32,
    pub momentum: f32,
    /// Evaluations without improvement before the rate drops tenfold.
    pub patience: usize,
    pub weight_decay: f32,
    /// Random horizontal flips at train time. Off by default: the synthetic
    /// task's labels are chirality-sensitive.
    pub hflip: bool,
    /// Learning-rate multiplier for all recurrent-layer groups.
    pub hrnn_lr_mult: f32,
    pub threads: usize,
    /// Stop once this many optimizer steps have run in total.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 20,
            seed: 0,
            lr: 0.01,
            momentum: 0.9,
            patience: 3,
            weight_decay: 0.0,
            hflip: false,
            hrnn_lr_mult: 1.0,
            threads: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        Ok(())
    }
}

/// Plateau tracker for the tenfold learning-rate drops.
#[derive(Clone, Debug)]
pub struct PlateauState {
    pub best: f64,
    pub since_best: usize,
}

/// Momentum-SGD state: one velocity buffer per parameter tensor, in the
/// model's visit order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub velocity: Vec<Tensor<f32>>,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub patience: usize,
    pub plateau: PlateauState,
}

impl Optimizer {
    pub fn new(model: &Model<f32>, cfg: &TrainConfig) -> Self {
        let mut velocity = Vec::new();
        model.visit(&mut |_, t| velocity.push(t.zeros_like()));
        Optimizer {
            velocity,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            patience: cfg.patience,
            plateau: PlateauState {
                best: f64::NEG_INFINITY,
                since_best: 0,
            },
        }
    }
}

/// Per-group learning-rate multiplier: frozen spatial/cross groups get zero,
/// recurrent groups get the configured multiplier, everything else 1.
pub fn group_multiplier(
    cfg: &TrainConfig,
    model_cfg: &crate::model::ModelConfig,
) -> impl Fn(&str) -> f32 {
    let freeze_spatial = model_cfg.freeze_spatial;
    let freeze_cross = model_cfg.freeze_cross;
    let hrnn_mult = cfg.hrnn_lr_mult;
    move |name: &str| {
        if freeze_spatial
            && name.starts_with("hrnn.")
            && (name.ends_with(".w_row") || name.ends_with(".w_col"))
        {
            return 0.0;
        }
        if freeze_cross && name.starts_with("hrnn.cross.") {
            return 0.0;
        }
        if name.starts_with("hrnn.") {
            return hrnn_mult;
        }
        1.0
    }
}

/// One momentum step: v <- mu v - eta_g grad; theta <- theta + v, where
/// eta_g applies the per-group multiplier (and optional weight decay enters
/// through the gradient).
pub fn sgd_step(
    model: &mut Model<f32>,
    grads: &Model<f32>,
    opt: &mut Optimizer,
    mult: &dyn Fn(&str) -> f32,
) -> Result<()> {
    let mut grad_refs: Vec<&Tensor<f32>> = Vec::new();
    grads.visit(&mut |_, t| grad_refs.push(t));
    if grad_refs.len() != opt.velocity.len() {
        return Err(Error::contract(
            "sgd_step: gradient layout does not match optimizer state",
        ));
    }
    let mut gi = 0;
    let mut status = Ok(());
    model.visit_mut(&mut |name, t| {
        let g = grad_refs[gi];
        let v = &mut opt.velocity[gi];
        gi += 1;
        if g.shape() != t.shape() || v.shape() != t.shape() {
            status = Err(Error::Shape {
                context: "sgd_step",
                left: t.shape().to_vec(),
                right: g.shape().to_vec(),
            });
            return;
        }
        let eta = opt.lr * mult(&name);
        let mu = opt.momentum;
        let wd = opt.weight_decay;
        let tv = t.data_mut();
        for k in 0..tv.len() {
            let grad = g.data()[k] + wd * tv[k];
            let vel = mu * v.data()[k] - eta * grad;
            v.data_mut()[k] = vel;
            tv[k] += vel;
        }
    });
    status
}

/// Tenfold drop when validation accuracy has not improved for `patience`
/// evaluations.
pub fn lr_schedule(opt: &mut Optimizer, val_accuracy: f64) {
    if val_accuracy > opt.plateau.best {
        opt.plateau.best = val_accuracy;
        opt.plateau.since_best = 0;
    } else {
        opt.plateau.since_best += 1;
        if opt.plateau.since_best >= opt.patience {
            opt.lr /= 10.0;
            opt.plateau.since_best = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

/// One metrics line: epoch, split, loss, top1, top5, lr.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub lr: f32,
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "-".to_string(),
        };
        write!(
            f,
            "epoch={} split={} loss={:.6} top1={} top5={} lr={}",
            self.epoch,
            self.split,
            self.loss,
            opt(self.top1),
            opt(self.top5),
            self.lr
        )
    }
}

/// Metrics sink: standard output and/or a plain-text log file.
pub struct MetricsLog {
    pub echo: bool,
    pub file: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsLog {
    pub fn silent() -> Self {
        MetricsLog { echo: false, file: None }
    }

    pub fn stdout() -> Self {
        MetricsLog { echo: true, file: None }
    }

    pub fn with_file(echo: bool, path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot create log {}: {e}", path.display())))?;
        Ok(MetricsLog {
            echo,
            file: Some(std::io::BufWriter::new(file)),
        })
    }

    pub fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        if self.echo {
            println!("{rec}");
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{rec}")?;
            f.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// Next epoch to run.
    pub epoch: usize,
    /// Next step within that epoch.
    pub step: usize,
    pub global_step: usize,
}

/// Everything that must survive a save/resume cycle.
#[derive(Clone, Debug)]
pub struct TrainSession {
    pub model: Model<f32>,
    pub opt: Optimizer,
    pub progress: Progress,
    pub seed: u64,
    pub pixel_mean: f32,
}

impl TrainSession {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let opt = Optimizer::new(&model, cfg);
        TrainSession {
            model,
            opt,
            progress: Progress::default(),
            seed: cfg.seed,
            pixel_mean: 0.0,
        }
    }
}

// Stream derivation tags. Each consumer of randomness gets its own stream so
// resume points never shift another consumer's draws.
const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_SAMPLE: u64 = 0x5341_4d50;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[TAG_SHUFFLE, epoch as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn hflip_image(img: &Tensor<f32>) -> Tensor<f32> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            out.data_mut()[row..row + w].reverse();
        }
    }
    out
}

/// Forward/backward over one sample with its derived dropout masks and flip
/// coin; gradients and loss are scaled by 1/batch.
fn sample_grad(
    model: &Model<f32>,
    data: &Dataset,
    sample: usize,
    seed: u64,
    epoch: usize,
    step: usize,
    pos_in_batch: usize,
    cfg: &TrainConfig,
    inv_batch: f32,
) -> Result<(f32, Model<f32>)> {
    let mut rng = derive_rng(
        seed,
        &[TAG_SAMPLE, epoch as u64, step as u64, pos_in_batch as u64],
    );
    let flip = cfg.hflip && rng.gen_bool(0.5);
    let masks: Option<DropoutMasks<f32>> = if model.config.dropout > 0.0 {
        Some(sample_dropout_masks(&model.config, &mut rng))
    } else {
        None
    };
    let image = if flip {
        hflip_image(&data.images[sample])
    } else {
        data.images[sample].clone()
    };
    let label = data.labels[sample];
    let (loss, cache) = model.loss(&image, label, masks.as_ref())?;
    let grads = model.backward(&cache, label, inv_batch)?;
    Ok((loss * inv_batch, grads))
}

/// Mean loss and summed (already 1/batch-scaled) gradients over one batch.
/// With `threads > 1` samples are split across workers with privatized
/// gradient buffers, reduced in a fixed worker order.
fn batch_grad(
    model: &Model<f32>,
    data: &Dataset,
    batch: &[usize],
    seed: u64,
    epoch: usize,
    step: usize,
    cfg: &TrainConfig,
) -> Result<(f32, Model<f32>)> {
    let inv_batch = 1.0 / batch.len() as f32;
    if cfg.threads <= 1 || batch.len() == 1 {
        let mut total = model.zeros_like();
        let mut loss = 0.0f32;
        for (k, &sample) in batch.iter().enumerate() {
            let (l, g) = sample_grad(model, data, sample, seed, epoch, step, k, cfg, inv_batch)?;
            loss += l;
            total.add_assign(&g);
        }
        return Ok((loss, total));
    }

    let workers = cfg.threads.min(batch.len());
    let chunk = batch.len().div_ceil(workers);
    let results: Vec<Result<(f32, Model<f32>)>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(batch.len());
            let slice = &batch[lo..hi];
            handles.push(scope.spawn(move || {
                let mut total = model.zeros_like();
                let mut loss = 0.0f32;
                for (off, &sample) in slice.iter().enumerate() {
                    let (l, g) = sample_grad(
                        model, data, sample, seed, epoch, step, lo + off, cfg, inv_batch,
                    )?;
                    loss += l;
                    total.add_assign(&g);
                }
                Ok((loss, total))
            }));
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut loss = 0.0f32;
    let mut total = model.zeros_like();
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Top-1 / Top-5 accuracy and mean loss, dropout off. Ties break toward the
/// lowest class index; Top-5 is reported only when there are at least five
/// classes.
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: Option<f64>,
    pub mean_loss: f64,
}

pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::data("evaluate: empty dataset"));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut loss_sum = 0.0f64;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let (probs, _) = model.forward(img, None)?;
        loss_sum += crate::head::cross_entropy(&probs, label)?.to_f64();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        let target = (label - 1) as usize;
        if order[0] == target {
            hits1 += 1;
        }
        if order.iter().take(5).any(|&i| i == target) {
            hits5 += 1;
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        top1: hits1 as f64 / n,
        top5: (data.classes >= 5).then(|| hits5 as f64 / n),
        mean_loss: loss_sum / n,
    })
}

/// Run (or resume) training until the configured epochs or step limit.
/// Deterministic for a fixed seed and thread count; single-threaded runs are
/// bit-identical across repeats.
pub fn train_loop(
    sess: &mut TrainSession,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("train_loop: empty training set"));
    }
    let mut history = Vec::new();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);

    'epochs: while sess.progress.epoch < cfg.epochs {
        let epoch = sess.progress.epoch;
        let order = shuffled_indices(train.len(), sess.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut steps_run = 0usize;

        while sess.progress.step < steps_per_epoch {
            if let Some(limit) = cfg.max_steps {
                if sess.progress.global_step >= limit {
                    break 'epochs;
                }
            }
            let step = sess.progress.step;
            let lo = step * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(train.len());
            let batch = &order[lo..hi];

            let (loss, grads) = batch_grad(&sess.model, train, batch, sess.seed, epoch, step, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch} step {step} (batch {lo}..{hi})"),
                });
            }
            let mut finite = Ok(());
            grads.visit(&mut |name, t| {
                if finite.is_ok() {
                    if let Err(e) = t.assert_finite(&format!(
                        "gradient {name} at epoch {epoch} step {step}"
                    )) {
                        finite = Err(e);
                    }
                }
            });
            finite?;

            let mult = group_multiplier(cfg, &sess.model.config);
            sgd_step(&mut sess.model, &grads, &mut sess.opt, &mult)?;

            loss_sum += loss as f64;
            steps_run += 1;
            sess.progress.step += 1;
            sess.progress.global_step += 1;
        }

        if sess.progress.step < steps_per_epoch {
            // Step limit hit mid-epoch; leave progress pointing at the next step.
            break;
        }

        let train_rec = MetricsRecord {
            epoch,
            split: Split::Train,
            loss: if steps_run > 0 { loss_sum / steps_run as f64 } else { 0.0 },
            top1: None,
            top5: None,
            lr: sess.opt.lr,
        };
        log.record(&train_rec)?;
        history.push(train_rec);

        if !val.is_empty() {
            let eval = evaluate(&sess.model, val)?;
            let val_rec = MetricsRecord {
                epoch,
                split: Split::Val,
                loss: eval.mean_loss,
                top1: Some(eval.top1),
                top5: eval.top5,
                lr: sess.opt.lr,
            };
            log.record(&val_rec)?;
            history.push(val_rec);
            lr_schedule(&mut sess.opt, eval.top1);
        }

        sess.progress.epoch += 1;
        sess.progress.step = 0;
    }

    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{ConvLayerSpec, PoolSpec};
    use crate::data::gen_context_task;
    use crate::hrnn::CellKind;
    use crate::model::ModelConfig;
    use rand_chacha::ChaCha8Rng;

    fn small_config(cell: CellKind) -> ModelConfig {
        ModelConfig {
            input: (1, 24, 24),
            conv: vec![
                ConvLayerSpec {
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                    relu: true,
                    pool: Some(PoolSpec { window: 2, stride: 2 }),
                },
                ConvLayerSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    relu: true,
                    pool: Some(PoolSpec { window: 2, stride: 2 }),
                },
            ],
            scales: vec![1, 3],
            hidden: 8,
            cell,
            fc: vec![16],
            classes: 2,
            dropout: 0.0,
            freeze_spatial: false,
            freeze_cross: false,
        }
    }

    fn small_model(cell: CellKind, seed: u64) -> Model<f32> {
        Model::init(small_config(cell), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn sgd_zero_grad_keeps_params() {
        let mut model = small_model(CellKind::Srn, 1);
        let cfg = TrainConfig::default();
        let mut opt = Optimizer::new(&model, &cfg);
        let grads = model.zeros_like();
        let before = model.get_param("head.out.weight").unwrap();
        sgd_step(&mut model, &grads, &mut opt, &|_| 1.0).unwrap();
        let after = model.get_param("head.out.weight").unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut model = small_model(CellKind::Srn, 2);
        let cfg = TrainConfig { momentum: 0.0, lr: 0.5, ..Default::default() };
        let mut opt = Optimizer::new(&model, &cfg);
        let mut grads = model.zeros_like();
        grads.set_param("head.out.bias", 0, 2.0);
        let before = model.get_param("head.out.bias").unwrap().data()[0];
        sgd_step(&mut model, &grads, &mut opt, &|_| 1.0).unwrap();
        let after = model.get_param("head.out.bias").unwrap().data()[0];
        assert_eq!(after, before - 0.5 * 2.0);
    }

    #[test]
    fn sgd_momentum_recurrence_matches_hand_iteration() {
        // Constant gradient g, mu = 0.9, eta = 0.1: steps move theta by
        // -0.1 g then -0.19 g.
        let mut model = small_model(CellKind::Srn, 3);
        let cfg = TrainConfig { momentum: 0.9, lr: 0.1, ..Default::default() };
        let mut opt = Optimizer::new(&model, &cfg);
        let mut grads = model.zeros_like();
        let g = 1.5f32;
        grads.set_param("head.out.bias", 1, g);
        let t0 = model.get_param("head.out.bias").unwrap().data()[1];
        sgd_step(&mut model, &grads, &mut opt, &|_| 1.0).unwrap();
        let t1 = model.get_param("head.out.bias").unwrap().data()[1];
        assert!((t1 - (t0 - 0.1 * g)).abs() < 1e-7);
        sgd_step(&mut model, &grads, &mut opt, &|_| 1.0).unwrap();
        let t2 = model.get_param("head.out.bias").unwrap().data()[1];
        assert!((t2 - (t1 - 0.19 * g)).abs() < 1e-6);
    }

    #[test]
    fn plateau_schedule_divides_by_ten() {
        let model = small_model(CellKind::Srn, 4);
        let cfg = TrainConfig { patience: 3, ..Default::default() };
        let mut opt = Optimizer::new(&model, &cfg);

        // Monotone accuracy: unchanged.
        for acc in [0.1, 0.2, 0.3, 0.4] {
            lr_schedule(&mut opt, acc);
        }
        assert_eq!(opt.lr, 0.01);

        // Flat for `patience` evals: one drop.
        for _ in 0..3 {
            lr_schedule(&mut opt, 0.4);
        }
        assert!((opt.lr - 0.001).abs() < 1e-9);

        // Second plateau: another drop.
        for _ in 0..3 {
            lr_schedule(&mut opt, 0.4);
        }
        assert!((opt.lr - 0.0001).abs() < 1e-10);
    }

    #[test]
    fn evaluate_handles_uniform_and_perfect_predictors() {
        // Uniform output: tie-break sends every prediction to class 1; with
        // balanced 10-class labels Top-1 is exactly 0.1 and Top-5 exactly 0.5.
        let mut config = small_config(CellKind::Srn);
        config.classes = 10;
        let mut model = Model::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        model.head.out.weight.fill(0.0);
        model.head.out.bias.fill(0.0);

        let mut data = gen_context_task(40, 9);
        data.classes = 10;
        for (i, l) in data.labels.iter_mut().enumerate() {
            *l = (i % 10) as u32 + 1;
        }
        let eval = evaluate(&model, &data).unwrap();
        assert_eq!(eval.top1, 0.1);
        assert_eq!(eval.top5, Some(0.5));

        // Top-5 >= Top-1 always (set containment), checked on a random model.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        model.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = rand::Rng::gen_range(&mut rng, -0.5..0.5);
            }
        });
        let eval = evaluate(&model, &data).unwrap();
        assert!(eval.top5.unwrap() >= eval.top1);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let model = small_model(CellKind::Srn, 7);
        let empty = Dataset { images: vec![], labels: vec![], classes: 2 };
        assert!(matches!(evaluate(&model, &empty), Err(Error::Data { .. })));
    }

    #[test]
    fn zero_lr_run_keeps_parameters_bit_identical() {
        let model = small_model(CellKind::Srn, 8);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            lr: 1e-30, // effectively zero but passes validation
            ..Default::default()
        };
        let train = gen_context_task(16, 11);
        let val = gen_context_task(8, 12);
        let mut before = Vec::new();
        model.visit(&mut |_, t| before.push(t.clone()));

        // Truly zero updates: multiplier 0 for every group.
        let mut sess = TrainSession::new(model, &cfg);
        let zero_cfg = TrainConfig { hrnn_lr_mult: 0.0, ..cfg.clone() };
        // Freeze everything by routing through multipliers: freeze flags only
        // cover recurrent groups, so instead run sgd_step manually with a
        // zero multiplier over one epoch of batches.
        let order: Vec<usize> = (0..train.len()).collect();
        for step in 0..4 {
            let batch = &order[step * 4..(step + 1) * 4];
            let (_, grads) =
                batch_grad(&sess.model, &train, batch, sess.seed, 0, step, &zero_cfg).unwrap();
            sgd_step(&mut sess.model, &grads, &mut sess.opt, &|_| 0.0).unwrap();
        }
        let _ = val;
        let mut after = Vec::new();
        sess.model.visit(&mut |_, t| after.push(t.clone()));
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 2,
            seed: 33,
            ..Default::default()
        };
        let train = gen_context_task(32, 21);
        let val = gen_context_task(16, 22);

        let run = || {
            let model = small_model(CellKind::Srn, 9);
            let mut sess = TrainSession::new(model, &cfg);
            let hist = train_loop(&mut sess, &train, &val, &cfg, &mut MetricsLog::silent()).unwrap();
            let mut params = Vec::new();
            sess.model.visit(&mut |_, t| params.extend_from_slice(t.data()));
            (hist, params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn threaded_training_is_deterministic_per_thread_count() {
        let train = gen_context_task(24, 31);
        let val = gen_context_task(8, 32);
        let run = |threads: usize| {
            let cfg = TrainConfig {
                batch_size: 12,
                epochs: 1,
                seed: 5,
                threads,
                ..Default::default()
            };
            let model = small_model(CellKind::Srn, 10);
            let mut sess = TrainSession::new(model, &cfg);
            train_loop(&mut sess, &train, &val, &cfg, &mut MetricsLog::silent()).unwrap();
            let mut params = Vec::new();
            sess.model.visit(&mut |_, t| params.extend_from_slice(t.data()));
            params
        };
        let a = run(3);
        let b = run(3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Different thread counts stay numerically close (reduction order
        // changes, values may differ in the last bits).
        let c = run(1);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() <= 1e-3 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn every_unfrozen_group_receives_gradient() {
        for cell in [CellKind::Srn, CellKind::Lstm] {
            let model = small_model(cell, 11);
            let train = gen_context_task(8, 41);
            let cfg = TrainConfig { batch_size: 8, ..Default::default() };
            let batch: Vec<usize> = (0..8).collect();
            let (_, grads) = batch_grad(&model, &train, &batch, 0, 0, 0, &cfg).unwrap();
            grads.visit(&mut |name, t| {
                let norm: f64 = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
                assert!(norm > 0.0, "{}: group {name} has zero gradient", cell.name());
            });
        }
    }

    #[test]
    fn frozen_groups_stay_zero_under_training() {
        let mut config = small_config(CellKind::Srn);
        config.freeze_spatial = true;
        config.freeze_cross = true;
        let model = Model::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let cfg = TrainConfig { batch_size: 8, epochs: 1, ..Default::default() };
        let train = gen_context_task(16, 51);
        let val = gen_context_task(8, 52);
        let mut sess = TrainSession::new(model, &cfg);
        train_loop(&mut sess, &train, &val, &cfg, &mut MetricsLog::silent()).unwrap();
        sess.model.visit(&mut |name, t| {
            if name.ends_with(".w_row") || name.ends_with(".w_col") || name.starts_with("hrnn.cross.")
            {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} moved");
            }
        });
    }

    #[test]
    fn single_sample_loss_decreases_after_warmup() {
        // One sample, 50 steps: the loop must memorize it; loss at the end is
        // strictly below the loss a few steps in.
        let mut config = small_config(CellKind::Srn);
        config.dropout = 0.0;
        let model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let data = gen_context_task(1, 99);
        let cfg = TrainConfig {
            batch_size: 1,
            epochs: usize::MAX,
            seed: 1,
            lr: 0.02,
            patience: usize::MAX - 1,
            max_steps: Some(5),
            ..Default::default()
        };
        let mut sess = TrainSession::new(model, &cfg);
        let empty = Dataset { images: vec![], labels: vec![], classes: 2 };
        train_loop(&mut sess, &data, &empty, &cfg, &mut MetricsLog::silent()).unwrap();
        let (loss_at_5, _) = sess.model.loss(&data.images[0], data.labels[0], None).unwrap();

        let cfg50 = TrainConfig { max_steps: Some(50), ..cfg };
        train_loop(&mut sess, &data, &empty, &cfg50, &mut MetricsLog::silent()).unwrap();
        let (loss_at_50, _) = sess.model.loss(&data.images[0], data.labels[0], None).unwrap();
        assert!(
            loss_at_50 < loss_at_5,
            "loss did not decrease: step5 {loss_at_5}, step50 {loss_at_50}"
        );
    }

    #[test]
    fn max_steps_resume_matches_uninterrupted_run() {
        let train = gen_context_task(32, 61);
        let val = gen_context_task(8, 62);
        let base = TrainConfig {
            batch_size: 8,
            epochs: 3,
            seed: 77,
            ..Default::default()
        };

        // Uninterrupted: 10 steps.
        let mut solid = TrainSession::new(small_model(CellKind::Srn, 13), &base);
        let cfg10 = TrainConfig { max_steps: Some(10), ..base.clone() };
        train_loop(&mut solid, &train, &val, &cfg10, &mut MetricsLog::silent()).unwrap();

        // Interrupted at 5 steps, then resumed to 10.
        let mut halted = TrainSession::new(small_model(CellKind::Srn, 13), &base);
        let cfg5 = TrainConfig { max_steps: Some(5), ..base.clone() };
        train_loop(&mut halted, &train, &val, &cfg5, &mut MetricsLog::silent()).unwrap();
        assert_eq!(halted.progress.global_step, 5);
        train_loop(&mut halted, &train, &val, &cfg10, &mut MetricsLog::silent()).unwrap();
        assert_eq!(halted.progress.global_step, 10);

        let mut a = Vec::new();
        solid.model.visit(&mut |_, t| a.extend_from_slice(t.data()));
        let mut b = Vec::new();
        halted.model.visit(&mut |_, t| b.extend_from_slice(t.data()));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
