//! Waveform rendering: band-subset tokens, speaker coloring, severity
//! degradation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusConfig, SpeakerProfile};
use crate::rng::gauss;
use crate::error::{Error, Result};

/// Fixed band template centers, Hz. Every token identity is a 3-subset.
const BAND_CENTERS: [f64; 8] = [
    500.0, 900.0, 1300.0, 1700.0, 2100.0, 2500.0, 2900.0, 3300.0,
];

/// C(8,3) distinct band subsets bound the vocabulary.
pub(crate) const MAX_VOCAB: usize = 56;

/// Silence inserted before, between and after tokens, seconds.
const GAP_S: f64 = 0.025;

/// The three band indices identifying a token, the `(id-1)`-th 3-subset of
/// the template in lexicographic order.
pub(crate) fn token_bands(id: usize) -> [usize; 3] {
    debug_assert!((1..=MAX_VOCAB).contains(&id));
    let mut remaining = id - 1;
    for a in 0..6 {
        for b in a + 1..7 {
            for c in b + 1..8 {
                if remaining == 0 {
                    return [a, b, c];
                }
                remaining -= 1;
            }
        }
    }
    unreachable!("id checked against MAX_VOCAB")
}

pub(crate) fn noise_std_for(signal_power: f64, snr_db: f64) -> f64 {
    (signal_power * 10f64.powf(-snr_db / 10.0)).sqrt()
}

/// Render the token sequence for one utterance. Degradations apply in
/// order: per-token time-warp, band-template jitter (at synthesis), then
/// spectral blur and additive noise on the assembled waveform.
pub(crate) fn render_utterance(
    config: &CorpusConfig,
    profile: &SpeakerProfile,
    token_ids: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if token_ids.is_empty() {
        return Err(Error::Input("cannot render an empty transcript".into()));
    }
    let fs = config.sample_rate as f64;
    let severity = profile.severity;
    let warp = config.time_warp.get(severity);
    let jitter_std = config.template_jitter_hz.get(severity);
    let formant_shift: f64 = profile.formant_offsets.iter().sum();

    // Severity-scaled band jitter, drawn once per utterance.
    let band_jitter: Vec<f64> = (0..BAND_CENTERS.len())
        .map(|_| jitter_std * gauss(rng))
        .collect();

    let gap = vec![0.0; (GAP_S * fs).round() as usize];
    let mut signal: Vec<f64> = gap.clone();
    for &id in token_ids {
        let stretch = 1.0 + warp * rng.gen_range(-1.0..1.0);
        let n = ((config.token_duration_s * profile.speaking_rate * stretch) * fs).round() as usize;
        let n = n.max(16);
        let bands = token_bands(id);
        let phases: [f64; 3] = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let buzz_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..n {
            let t = i as f64 / fs;
            // Hann envelope avoids clicks at token boundaries.
            let env = 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos());
            let mut sample = 0.0;
            for (slot, &band) in bands.iter().enumerate() {
                let freq = (BAND_CENTERS[band] + formant_shift + band_jitter[band]).max(60.0);
                sample += (std::f64::consts::TAU * freq * t + phases[slot]).sin() / 3.0;
            }
            sample += 0.25 * (std::f64::consts::TAU * profile.base_freq * t + buzz_phase).sin();
            sample += 0.12
                * (std::f64::consts::TAU * 2.0 * profile.base_freq * t + 1.7 * buzz_phase).sin();
            signal.push(env * sample);
        }
        signal.extend_from_slice(&gap);
    }

    // Spectral blur: causal moving average, width from the schedule.
    let width = config.blur_width.get(severity).round().max(1.0) as usize;
    if width > 1 {
        let mut blurred = Vec::with_capacity(signal.len());
        let mut acc = 0.0;
        for i in 0..signal.len() {
            acc += signal[i];
            if i >= width {
                acc -= signal[i - width];
            }
            blurred.push(acc / width.min(i + 1) as f64);
        }
        signal = blurred;
    }

    // Additive white noise at the severity's SNR, relative to the blurred
    // signal power.
    let power = signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64;
    let noise_std = noise_std_for(power, config.noise_snr_db.get(severity));
    for x in signal.iter_mut() {
        *x += noise_std * gauss(rng);
    }

    // Fixed-peak normalization keeps the amplitude invariant and severity
    // information purely spectral/temporal.
    let peak = signal.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let scale = 0.95 / peak;
        for x in signal.iter_mut() {
            *x *= scale;
        }
    }
    Ok(signal)
}
