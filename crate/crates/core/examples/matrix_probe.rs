//! Throwaway: one full default-scale experiment matrix, timed, with the
//! per-system scores printed so ordering relationships can be eyeballed.

use std::collections::BTreeMap;
use std::time::Instant;

use asrlab_core::backbone::BackboneConfig;
use asrlab_core::corpus::{generate_corpus, CorpusConfig};
use asrlab_core::pipelines::{default_system_specs, run_experiment_matrix, MatrixConfig};

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(17);
    let t0 = Instant::now();
    let corpus = generate_corpus(&CorpusConfig {
        rng_seed: seed ^ 0x5eed,
        ..CorpusConfig::default()
    })
    .expect("corpus");
    println!(
        "corpus ready in {:.1}s ({} train / {} test)",
        t0.elapsed().as_secs_f64(),
        corpus.train.len(),
        corpus.test.len()
    );

    let labels: BTreeMap<_, _> = corpus
        .test_speakers()
        .map(|p| (p.speaker_id.clone(), p.severity))
        .collect();

    let model_config = BackboneConfig::default();
    let cfg = MatrixConfig::with_seed(seed);
    let specs = default_system_specs(&model_config);
    let t1 = Instant::now();
    let results =
        run_experiment_matrix(&corpus, &model_config, &specs, &labels, &cfg).expect("matrix");
    println!("matrix in {:.1}s", t1.elapsed().as_secs_f64());
    println!("{}", results.to_csv());
}
