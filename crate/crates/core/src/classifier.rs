//! Acoustic severity classifier: estimates each test speaker's deficiency
//! severity from audio alone, supplying the deficiency labels that
//! structured adaptation consumes when no oracle labels are given.
//!
//! Features are log filterbank statistics (25 ms / 10 ms framing, 20
//! triangular bands on a mel-spaced grid): per-band mean and standard
//! deviation plus two frame-energy statistics, 42 dimensions in all. A
//! multinomial logistic regression over standardized features predicts
//! per-utterance labels; a speaker's label is the majority vote over their
//! utterances, with ties resolved toward the less severe class.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::{Severity, Utterance};
use crate::error::{Error, Result};

const WINDOW_MS: f64 = 25.0;
const HOP_MS: f64 = 10.0;
const N_BANDS: usize = 20;
/// Per-band mean and stddev plus frame-energy mean and stddev.
pub const EMBEDDING_DIM: usize = 2 * N_BANDS + 2;

const LOG_FLOOR: f64 = 1e-10;

/// Fixed-length acoustic feature vector for one speaker (or, when built
/// from a single utterance, for that utterance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    pub features: Vec<f64>,
}

/// Average the per-utterance filterbank statistics of `utterances` into one
/// 42-dimensional embedding.
pub fn extract_embedding(
    speaker_id: impl Into<String>,
    utterances: &[&Utterance],
) -> Result<SpeakerEmbedding> {
    if utterances.is_empty() {
        return Err(Error::Usage(
            "embedding extraction needs at least one utterance".into(),
        ));
    }
    let mut features = vec![0.0; EMBEDDING_DIM];
    for utt in utterances {
        let f = utterance_features(&utt.waveform, utt.sample_rate)?;
        for (acc, x) in features.iter_mut().zip(&f) {
            *acc += x;
        }
    }
    let n = utterances.len() as f64;
    for x in &mut features {
        *x /= n;
    }
    Ok(SpeakerEmbedding { speaker_id: speaker_id.into(), features })
}

/// 42-dim statistics of one waveform: per-band log-energy mean and stddev
/// over frames, then frame log-energy mean and stddev.
fn utterance_features(waveform: &[f64], sample_rate: u32) -> Result<Vec<f64>> {
    let window = (sample_rate as f64 * WINDOW_MS / 1000.0).round() as usize;
    let hop = (sample_rate as f64 * HOP_MS / 1000.0).round() as usize;
    if waveform.len() < window {
        return Err(Error::Input(format!(
            "utterance of {} samples is shorter than one {window}-sample analysis window",
            waveform.len()
        )));
    }

    let fft_len = window.next_power_of_two();
    let n_bins = fft_len / 2 + 1;
    let filters = triangular_filters(sample_rate, fft_len, n_bins);
    let hann: Vec<f64> = (0..window)
        .map(|i| {
            let phase = std::f64::consts::TAU * i as f64 / window as f64;
            0.5 * (1.0 - phase.cos())
        })
        .collect();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);

    let n_frames = (waveform.len() - window) / hop + 1;
    let mut band_log = vec![vec![0.0; n_frames]; N_BANDS];
    let mut energy_log = vec![0.0; n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for frame in 0..n_frames {
        let start = frame * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let sample = if i < window { waveform[start + i] * hann[i] } else { 0.0 };
            *slot = Complex::new(sample, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for (b, filter) in filters.iter().enumerate() {
            let e: f64 = filter.iter().map(|&(bin, w)| w * power[bin]).sum();
            band_log[b][frame] = (e + LOG_FLOOR).ln();
        }
        energy_log[frame] = (power.iter().sum::<f64>() + LOG_FLOOR).ln();
    }

    let mut features = Vec::with_capacity(EMBEDDING_DIM);
    let mut stds = Vec::with_capacity(N_BANDS);
    for series in &band_log {
        let (mean, std) = mean_std(series);
        features.push(mean);
        stds.push(std);
    }
    features.extend(stds);
    let (mean, std) = mean_std(&energy_log);
    features.push(mean);
    features.push(std);
    Ok(features)
}

/// Population mean and standard deviation (÷n, so a one-frame utterance
/// still yields a defined value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sparse triangular filters on a mel-spaced grid from 0 Hz to Nyquist:
/// each filter is a list of (bin, weight) pairs.
fn triangular_filters(
    sample_rate: u32,
    fft_len: usize,
    n_bins: usize,
) -> Vec<Vec<(usize, f64)>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let nyquist = sample_rate as f64 / 2.0;
    let top = mel(nyquist);
    let edges: Vec<f64> = (0..N_BANDS + 2)
        .map(|i| inv_mel(top * i as f64 / (N_BANDS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_len as f64;

    let mut filters = Vec::with_capacity(N_BANDS);
    for b in 0..N_BANDS {
        let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let mut taps = Vec::new();
        for bin in 0..n_bins {
            let f = bin as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                taps.push((bin, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// Multinomial logistic regression over standardized embedding features.
/// The class axis is ordered most-degraded-first ([`Severity::ALL`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityClassifier {
    /// One weight row per severity class, `[n_classes][EMBEDDING_DIM]`.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
}

const TRAIN_EPOCHS: usize = 400;
const TRAIN_LR: f64 = 0.5;
/// L2 weight penalty; discourages memorizing individual training speakers,
/// which matters most when few speakers represent each class.
const TRAIN_L2: f64 = 2e-3;

/// Fit the classifier by full-batch gradient descent for a fixed number of
/// epochs from the zero initialization (the objective is convex, so the
/// procedure is deterministic with no seed at all).
pub fn train_classifier(
    embeddings: &[SpeakerEmbedding],
    labels: &[Severity],
) -> Result<SeverityClassifier> {
    if embeddings.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<Severity> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Training(format!(
            "training set contains {} severity class(es); need at least 2",
            distinct.len()
        )));
    }
    for e in embeddings {
        if e.features.len() != EMBEDDING_DIM {
            return Err(Error::Dimension(format!(
                "embedding for '{}' has {} features, expected {EMBEDDING_DIM}",
                e.speaker_id,
                e.features.len()
            )));
        }
        if e.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding for '{}' contains a non-finite feature",
                e.speaker_id
            )));
        }
    }

    // Standardize features; constant dimensions keep std 1 to stay finite.
    let n = embeddings.len() as f64;
    let mut feature_mean = vec![0.0; EMBEDDING_DIM];
    let mut feature_std = vec![0.0; EMBEDDING_DIM];
    for d in 0..EMBEDDING_DIM {
        let mean = embeddings.iter().map(|e| e.features[d]).sum::<f64>() / n;
        let var =
            embeddings.iter().map(|e| (e.features[d] - mean).powi(2)).sum::<f64>() / n;
        feature_mean[d] = mean;
        feature_std[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            e.features
                .iter()
                .enumerate()
                .map(|(d, &v)| (v - feature_mean[d]) / feature_std[d])
                .collect()
        })
        .collect();
    let y: Vec<usize> = labels.iter().map(|&l| class_index(l)).collect();

    let n_classes = Severity::ALL.len();
    let mut weights = vec![vec![0.0; EMBEDDING_DIM]; n_classes];
    let mut bias = vec![0.0; n_classes];
    for _ in 0..TRAIN_EPOCHS {
        let mut grad_w = vec![vec![0.0; EMBEDDING_DIM]; n_classes];
        let mut grad_b = vec![0.0; n_classes];
        for (xi, &yi) in x.iter().zip(&y) {
            let probs = softmax(&logits(&weights, &bias, xi));
            for c in 0..n_classes {
                let delta = probs[c] - f64::from(u8::from(c == yi));
                grad_b[c] += delta;
                for d in 0..EMBEDDING_DIM {
                    grad_w[c][d] += delta * xi[d];
                }
            }
        }
        for c in 0..n_classes {
            bias[c] -= TRAIN_LR * grad_b[c] / n;
            for d in 0..EMBEDDING_DIM {
                weights[c][d] -=
                    TRAIN_LR * (grad_w[c][d] / n + TRAIN_L2 * weights[c][d]);
            }
        }
    }

    Ok(SeverityClassifier { weights, bias, feature_mean, feature_std })
}

fn class_index(severity: Severity) -> usize {
    Severity::ALL.iter().position(|&s| s == severity).expect("ALL is exhaustive")
}

fn logits(weights: &[Vec<f64>], bias: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(bias)
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl SeverityClassifier {
    /// Argmax class for one embedding; exact logit ties resolve to the less
    /// severe class.
    pub fn predict(&self, embedding: &SpeakerEmbedding) -> Result<Severity> {
        if embedding.features.len() != EMBEDDING_DIM {
            return Err(Error::Dimension(format!(
                "embedding has {} features, expected {EMBEDDING_DIM}",
                embedding.features.len()
            )));
        }
        let x: Vec<f64> = embedding
            .features
            .iter()
            .enumerate()
            .map(|(d, &v)| (v - self.feature_mean[d]) / self.feature_std[d])
            .collect();
        let scores = logits(&self.weights, &self.bias, &x);
        let mut best = Severity::ALL[0];
        let mut best_score = scores[0];
        for (&severity, &score) in Severity::ALL.iter().zip(&scores).skip(1) {
            if score > best_score || (score == best_score && severity < best) {
                best = severity;
                best_score = score;
            }
        }
        Ok(best)
    }

    /// Speaker-level label: majority vote over per-utterance predictions,
    /// ties toward the less severe class. Consumes audio only — transcripts
    /// and true labels never enter.
    pub fn predict_speaker(&self, utterances: &[&Utterance]) -> Result<Severity> {
        if utterances.is_empty() {
            return Err(Error::Usage(
                "speaker prediction needs at least one utterance".into(),
            ));
        }
        let mut votes = Vec::with_capacity(utterances.len());
        for utt in utterances {
            let embedding = extract_embedding(&utt.speaker_id, &[utt])?;
            votes.push(self.predict(&embedding)?);
        }
        Ok(majority_vote(&votes))
    }
}

/// Most frequent label; ties resolve to the less severe one (`Ord` on
/// `Severity` is declared mildest-first, so `min` is the milder label).
fn majority_vote(votes: &[Severity]) -> Severity {
    let mut counts = [0usize; 4];
    for &v in votes {
        counts[class_index(v)] += 1;
    }
    let top = *counts.iter().max().expect("four classes");
    Severity::ALL
        .iter()
        .copied()
        .filter(|&s| counts[class_index(s)] == top)
        .min()
        .expect("at least one class has the top count")
}
