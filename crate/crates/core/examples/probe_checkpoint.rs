use hrnn_core::data::{gen_context_task, load_checkpoint};
use hrnn_core::hrnn::{ScanCache, GATE_NAMES};
use std::path::Path;

fn main() {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let sess = load_checkpoint(Path::new(&path)).unwrap();
    let mut data = gen_context_task(256, 123);
    let mean = data.pixel_mean();
    data.subtract_mean(mean);

    // Gate statistics over a few samples at the finest scanned level.
    let mut stats: Vec<(f64, f64, usize, usize)> = vec![(0.0, 0.0, 0, 0); 4];
    for i in 0..32 {
        let (_, cache) = sess.model.forward(&data.images[i], None).unwrap();
        let level = cache.hrnn.scans.last().unwrap().as_ref().unwrap();
        for dir_cache in level {
            if let ScanCache::Lstm(c) = dir_cache {
                for (gi, grid) in c.gates.iter().enumerate() {
                    for &v in grid.data() {
                        let v = v as f64;
                        stats[gi].0 += v;
                        stats[gi].1 += v * v;
                        if !(0.02..=0.98).contains(&v.abs()) {
                            stats[gi].2 += 1;
                        }
                        stats[gi].3 += 1;
                    }
                }
            }
        }
        if i == 0 {
            let probs = &cache.head.probs;
            println!("sample0 probs {probs:?}");
            if let ScanCache::Lstm(c) = &level[0] {
                let rms = |d: &[f32]| {
                    (d.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / d.len() as f64).sqrt()
                };
                println!("c rms {:.3} tanh_c rms {:.3} h rms {:.3}",
                    rms(c.memory.data()), rms(c.tanh_memory.data()), rms(c.hidden.data()));
            }
        }
    }
    for gi in 0..4 {
        let (s, ss, sat, n) = stats[gi];
        let mean = s / n as f64;
        let var = ss / n as f64 - mean * mean;
        println!(
            "gate {}: mean {:.3} std {:.3} saturated {:.1}%",
            GATE_NAMES[gi],
            mean,
            var.max(0.0).sqrt(),
            100.0 * sat as f64 / n as f64
        );
    }

    // Gradient norms per group on a small batch.
    let mut grads = sess.model.zeros_like();
    for i in 0..32 {
        let (_, c) = sess.model.loss(&data.images[i], data.labels[i], None).unwrap();
        let g = sess.model.backward(&c, data.labels[i], 1.0 / 32.0).unwrap();
        grads.add_assign(&g);
    }
    let mut agg: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    grads.visit(&mut |name, t| {
        let key = if name.starts_with("hrnn.level") {
            let parts: Vec<&str> = name.split('.').collect();
            format!("{}.{}", parts[0], parts[1])
        } else if name.starts_with("hrnn.cross") {
            "hrnn.cross".into()
        } else {
            name.split('.').next().unwrap().to_string()
        };
        let e = agg.entry(key).or_insert((0.0, 0));
        e.0 += t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        e.1 += t.len();
    });
    for (k, (ss, n)) in agg {
        println!("grad {k}: rms {:.3e}", (ss / n as f64).sqrt());
    }
}
