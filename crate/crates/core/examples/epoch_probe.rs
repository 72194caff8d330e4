//! Throwaway diagnostic: long baseline training run, printing per-epoch mean
//! loss and held-out token error rate to locate where decoding leaves the
//! all-blank regime.

use std::time::Instant;

use asrlab_core::backbone::{BackboneConfig, BackboneModel};
use asrlab_core::corpus::{generate_corpus, CorpusConfig};
use asrlab_core::pipelines::{finetune_baseline, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(17);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(24);
    let step_size: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let corpus_cfg = CorpusConfig { rng_seed: seed ^ 0x5eed, ..CorpusConfig::default() };
    let t0 = Instant::now();
    let corpus = generate_corpus(&corpus_cfg).expect("corpus");
    println!(
        "corpus ready in {:.1}s ({} train / {} test)",
        t0.elapsed().as_secs_f64(),
        corpus.train.len(),
        corpus.test.len()
    );

    let model_cfg = BackboneConfig::default();
    let mut model = BackboneModel::new(model_cfg, seed).expect("model");
    let cfg = TrainConfig {
        epochs_per_phase: vec![epochs],
        step_size,
        ..TrainConfig::baseline(seed)
    };
    let t1 = Instant::now();
    let log = finetune_baseline(&mut model, &corpus, &cfg).expect("train");
    println!("trained {} epochs in {:.1}s", epochs, t1.elapsed().as_secs_f64());
    for e in &log.phases[0].epochs {
        println!(
            "epoch {:>2}  loss {:>8.4}  heldout_ter {}",
            e.epoch,
            e.mean_loss,
            e.heldout_ter.map_or("-".to_string(), |t| format!("{:.2}", t * 100.0))
        );
    }
}
