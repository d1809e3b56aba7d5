//! Trains on the synthetic template benchmark and reports the held-out
//! match rate.

use sgfm::evalx::MatchThresholds;
use sgfm::flow::{train, ModelConfig, TrainConfig};
use sgfm::sgdata::bundled;
use sgfm::synthbench::{default_templates, evaluate_csp, make_dataset, to_examples};
use std::time::Instant;

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let groups = bundled().expect("bundled data");
    let n = env("N_PER", 50usize);
    let ds = make_dataset(&default_templates(), &groups, 3, n, 1).expect("dataset");
    let cfg = TrainConfig {
        epochs: env("EPOCHS", 20),
        batch_size: env("BATCH", 16),
        learning_rate: env("LR", 3e-3),
        model: ModelConfig {
            d: env("D", 32),
            d_t: 16,
            d_s: env("DS", 12),
            layers: env("LAYERS", 2),
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let ex = to_examples(&ds.train, &groups).unwrap();
    println!("train {} test {}", ex.len(), ds.test.len());
    let t0 = Instant::now();
    let out = train(&ex, &groups, &cfg).unwrap();
    for m in out.metrics.iter().step_by((cfg.epochs / 10).max(1)) {
        println!("epoch {} total {:.4} k {:.4} f {:.5}", m.epoch, m.total, m.loss_k, m.loss_f);
    }
    println!("train time {:.1}s", t0.elapsed().as_secs_f64());
    let ev = evaluate_csp(&ds.test, &groups, &out.params, &cfg.sample_config(), 5, &MatchThresholds::default()).unwrap();
    println!("MR {:.2} rmse {:?} eval {:.1}s", ev.summary.match_rate, ev.summary.mean_rmse, t0.elapsed().as_secs_f64());
    for (e, r) in ds.test.iter().zip(&ev.reports) {
        if let Some(r) = r {
            if !r.matched {
                println!("{} {} site {:.3} len {:.3} ang {:.2}", e.id, e.template, r.max_site_dist, r.max_length_dev, r.max_angle_dev);
            }
        } else {
            println!("{} {} drift", e.id, e.template);
        }
    }
}
