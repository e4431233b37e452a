use hrnn_core::config::default_model_config;
use hrnn_core::data::gen_context_task;
use hrnn_core::hrnn::CellKind;
use hrnn_core::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f32]) -> f64 {
    (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64).sqrt()
}

fn main() {
    let mut data = gen_context_task(64, 7);
    let mean = data.pixel_mean();
    data.subtract_mean(mean);
    for cell in [CellKind::Srn, CellKind::Lstm] {
        let mut cfg = default_model_config();
        cfg.cell = cell;
        cfg.dropout = 0.0;
        let model = Model::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let img = &data.images[0];
        let (_, cache) = model.forward(img, None).unwrap();
        println!("=== {} ===", cell.name());
        println!("map rms {:.4}", norm(cache.map.data()));
        for (li, g) in cache.pyramid.levels.iter().enumerate() {
            println!("pyr[{li}] rms {:.4}", norm(g.data()));
        }
        for (li, g) in cache.hrnn_outputs.iter().enumerate() {
            println!("fused[{li}] rms {:.4}", norm(g.data()));
        }
        println!("probs {:?}", cache.head.probs);
        // gradient norms per top-level group
        let mut grads = model.zeros_like();
        for i in 0..16 {
            let (_, c) = model.loss(&data.images[i], data.labels[i], None).unwrap();
            let g = model.backward(&c, data.labels[i], 1.0 / 16.0).unwrap();
            grads.add_assign(&g);
        }
        let mut agg: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
        grads.visit(&mut |name, t| {
            let key = if name.starts_with("hrnn.level") {
                let parts: Vec<&str> = name.split('.').collect();
                format!("{}.{}", parts[0], parts[1])
            } else if name.starts_with("hrnn.cross") {
                "hrnn.cross".to_string()
            } else {
                name.split('.').next().unwrap().to_string()
            };
            let e = agg.entry(key).or_insert((0.0, 0));
            e.0 += t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            e.1 += t.len();
        });
        for (k, (ss, n)) in agg {
            println!("grad {k}: rms {:.6}", (ss / n as f64).sqrt());
        }
    }
}
