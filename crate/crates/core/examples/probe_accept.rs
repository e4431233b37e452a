use hrnn_core::convnet::ConvLayerSpec;
use hrnn_core::data::{gen_context_task, normalize_pair};
use hrnn_core::hrnn::CellKind;
use hrnn_core::model::{Model, ModelConfig};
use hrnn_core::train::{train_loop, MetricsLog, Split, TrainConfig, TrainSession};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let init_seed: u64 = args[1].parse().unwrap();
    let b_i: f32 = args[2].parse().unwrap();
    let b_o: f32 = args[3].parse().unwrap();

    let config = ModelConfig {
        input: (1, 24, 24),
        conv: vec![ConvLayerSpec { out_channels: 32, kernel: 4, stride: 4, padding: 0, relu: true, pool: None }],
        scales: vec![1, 2, 3, 6],
        hidden: 32,
        cell: CellKind::Lstm,
        fc: vec![96, 96],
        classes: 2,
        dropout: 0.5,
        freeze_spatial: false,
        freeze_cross: false,
    };
    let cfg = TrainConfig {
        batch_size: 32, epochs: 20, seed: 7, lr: 0.01, momentum: 0.9,
        patience: 25, weight_decay: 0.0, hflip: false, hrnn_lr_mult: 1.0,
        threads: 1, max_steps: None,
    };
    let mut train = gen_context_task(10_000, 0xA11CE);
    let mut val = gen_context_task(2_000, 0xB0B5);
    normalize_pair(&mut train, &mut val);

    let mut model = Model::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(init_seed)).unwrap();
    model.visit_mut(&mut |name, t| {
        if name.contains(".i.bias") { t.fill(b_i); }
        if name.contains(".o.bias") { t.fill(b_o); }
    });
    let mut sess = TrainSession::new(model, &cfg);
    let hist = train_loop(&mut sess, &train, &val, &cfg, &mut MetricsLog::silent()).unwrap();
    let accs: Vec<f64> = hist.iter().filter(|r| r.split == Split::Val).map(|r| r.top1.unwrap()).collect();
    println!("init_seed={init_seed} b_i={b_i} b_o={b_o} val={accs:?}");
}
