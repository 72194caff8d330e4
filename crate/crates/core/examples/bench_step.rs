//! Throwaway timing probe: default-scale corpus generation, one training
//! step, and one decode. Not part of the deliverable surface.

use std::time::Instant;

use asrlab_core::backbone::{BackboneConfig, BackboneModel};
use asrlab_core::corpus::{generate_corpus, CorpusConfig};
use asrlab_core::pipelines::{decode_utterances, finetune_baseline, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let corpus = generate_corpus(&CorpusConfig::default()).expect("corpus");
    println!(
        "corpus: {} train / {} test utts in {:.1?}",
        corpus.train.len(),
        corpus.test.len(),
        t0.elapsed()
    );
    let lens: Vec<usize> = corpus.train.iter().map(|u| u.waveform.len()).collect();
    println!(
        "waveform samples: min {} median {} max {}",
        lens.iter().min().unwrap(),
        {
            let mut s = lens.clone();
            s.sort_unstable();
            s[s.len() / 2]
        },
        lens.iter().max().unwrap()
    );

    let mut model = BackboneModel::new(BackboneConfig::default(), 7).expect("model");

    // One training epoch over a 64-utterance slice.
    let mut sub = corpus.clone();
    sub.train.truncate(64);
    let cfg = TrainConfig {
        epochs_per_phase: vec![1],
        heldout_cap: 0,
        ..TrainConfig::baseline(5)
    };
    let t1 = Instant::now();
    finetune_baseline(&mut model, &sub, &cfg).expect("train");
    let step = t1.elapsed();
    println!(
        "train fwd+bwd+update: {:.1?} for 64 utts = {:.1} ms/utt",
        step,
        step.as_secs_f64() * 1000.0 / 64.0
    );

    // Decode a 64-utterance slice.
    let t2 = Instant::now();
    let d = decode_utterances(&model, None, None, corpus.test.iter().take(64)).expect("decode");
    let dec = t2.elapsed();
    println!(
        "decode: {:.1?} for {} utts = {:.1} ms/utt",
        dec,
        d.len(),
        dec.as_secs_f64() * 1000.0 / d.len() as f64
    );
}
