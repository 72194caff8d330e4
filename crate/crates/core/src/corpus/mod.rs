//! Deterministic synthetic multi-speaker corpus.
//!
//! Every "word" is a short multi-harmonic chirp whose identity is a fixed
//! 3-subset of 8 spectral bands; speakers shift the bands and the rate, and
//! a per-speaker severity level degrades the rendering (time-warp, spectral
//! blur, additive noise, template jitter). Generation is bit-reproducible
//! from the master seed, with one derived RNG stream per speaker.

mod manifest;
mod synth;

pub use manifest::{read_manifest, write_manifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::TokenSequence;
use crate::rng::derive_seed;
use crate::error::{Error, Result};

/// Speech-deficiency severity. Declaration order is mildest-first so that
/// `Ord` tie-breaking (`min`) selects the less severe label.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Severity {
    H,
    M,
    L,
    VL,
}

impl Severity {
    /// Report order used in result tables: most degraded first.
    pub const ALL: [Severity; 4] = [Severity::VL, Severity::L, Severity::M, Severity::H];

    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::H => "H",
            Severity::M => "M",
            Severity::L => "L",
            Severity::VL => "VL",
        }
    }

    pub fn parse(s: &str) -> Result<Severity> {
        match s {
            "H" => Ok(Severity::H),
            "M" => Ok(Severity::M),
            "L" => Ok(Severity::L),
            "VL" => Ok(Severity::VL),
            other => Err(Error::Parameter(format!(
                "unknown severity label {other:?} (expected H, M, L or VL)"
            ))),
        }
    }
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which side of the corpus a speaker belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerSplit {
    Train,
    Test,
    /// Block-overlap mode: the speaker contributes utterances to both sides.
    BothBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Same speakers in train and test, disjoint unseen-word lists.
    BlockOverlap,
    /// Test speakers never appear in training.
    SpeakerDisjoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Fundamental frequency of the voicing buzz, Hz.
    pub base_freq: f64,
    /// Per-speaker shifts applied to the band template, Hz.
    pub formant_offsets: Vec<f64>,
    /// Duration multiplier relative to the nominal token length.
    pub speaking_rate: f64,
    pub severity: Severity,
    pub split: SpeakerSplit,
}

/// One rendered utterance with its reference transcript.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub severity: Severity,
    pub transcript: TokenSequence,
    pub words: Vec<String>,
    pub waveform: Vec<f64>,
    pub sample_rate: u32,
    /// False when the words were held out of every training transcript.
    pub seen: bool,
}

/// Per-severity degradation schedule, most degraded first.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeveritySchedule {
    pub vl: f64,
    pub l: f64,
    pub m: f64,
    pub h: f64,
}

impl SeveritySchedule {
    pub fn get(&self, severity: Severity) -> f64 {
        match severity {
            Severity::VL => self.vl,
            Severity::L => self.l,
            Severity::M => self.m,
            Severity::H => self.h,
        }
    }

    fn strictly_decreasing(&self) -> bool {
        self.vl > self.l && self.l > self.m && self.m > self.h
    }

    fn strictly_increasing(&self) -> bool {
        self.vl < self.l && self.l < self.m && self.m < self.h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_train_speakers: usize,
    pub n_test_speakers: usize,
    /// Train-speaker counts per severity, in [VL, L, M, H] order; must sum
    /// to `n_train_speakers`.
    pub severity_distribution: [usize; 4],
    /// Number of word types (the CTC vocabulary adds a blank on top).
    pub vocab_size: usize,
    pub train_utts_per_speaker: usize,
    pub test_utts_per_speaker: usize,
    pub split_mode: SplitMode,
    /// Fraction of the vocabulary reserved for test-only words.
    pub unseen_word_fraction: f64,
    pub sample_rate: u32,
    /// Nominal rendered length of one token, seconds.
    pub token_duration_s: f64,
    pub transcript_len_min: usize,
    pub transcript_len_max: usize,
    /// Additive-noise SNR in dB (lower = noisier).
    pub noise_snr_db: SeveritySchedule,
    /// Half-range of the per-token duration jitter (fraction).
    pub time_warp: SeveritySchedule,
    /// Moving-average width in samples (1 = no blur).
    pub blur_width: SeveritySchedule,
    /// Standard deviation of per-utterance band-center jitter, Hz.
    pub template_jitter_hz: SeveritySchedule,
    pub rng_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train_speakers: 20,
            n_test_speakers: 8,
            severity_distribution: [5, 5, 5, 5],
            vocab_size: 40,
            train_utts_per_speaker: 60,
            test_utts_per_speaker: 30,
            split_mode: SplitMode::BlockOverlap,
            unseen_word_fraction: 0.4,
            sample_rate: 16_000,
            token_duration_s: 0.12,
            transcript_len_min: 1,
            transcript_len_max: 6,
            noise_snr_db: SeveritySchedule {
                vl: 6.0,
                l: 12.0,
                m: 18.0,
                h: 30.0,
            },
            time_warp: SeveritySchedule {
                vl: 0.35,
                l: 0.25,
                m: 0.15,
                h: 0.05,
            },
            blur_width: SeveritySchedule {
                vl: 9.0,
                l: 5.0,
                m: 3.0,
                h: 1.0,
            },
            template_jitter_hz: SeveritySchedule {
                vl: 60.0,
                l: 35.0,
                m: 18.0,
                h: 6.0,
            },
            rng_seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 || self.vocab_size > synth::MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} outside supported range 8..={}",
                self.vocab_size,
                synth::MAX_VOCAB
            )));
        }
        if self.severity_distribution.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "every severity needs at least one training speaker".into(),
            ));
        }
        let total: usize = self.severity_distribution.iter().sum();
        if total != self.n_train_speakers {
            return Err(Error::Config(format!(
                "severity_distribution sums to {total}, n_train_speakers is {}",
                self.n_train_speakers
            )));
        }
        if !(0.0..1.0).contains(&self.unseen_word_fraction) {
            return Err(Error::Config(format!(
                "unseen_word_fraction {} must lie in [0, 1)",
                self.unseen_word_fraction
            )));
        }
        if self.transcript_len_min == 0 || self.transcript_len_min > self.transcript_len_max {
            return Err(Error::Config(format!(
                "transcript length range {}..={} is invalid",
                self.transcript_len_min, self.transcript_len_max
            )));
        }
        if self.split_mode == SplitMode::SpeakerDisjoint && self.n_test_speakers == 0 {
            return Err(Error::Config(
                "speaker_disjoint mode needs at least one test speaker".into(),
            ));
        }
        // Degradation must grow with severity: noisier, blurrier, more
        // warped and more jittered toward VL.
        if !self.noise_snr_db.strictly_increasing() {
            return Err(Error::Config(
                "noise_snr_db must strictly increase from VL to H".into(),
            ));
        }
        for (name, schedule) in [
            ("time_warp", &self.time_warp),
            ("blur_width", &self.blur_width),
            ("template_jitter_hz", &self.template_jitter_hz),
        ] {
            if !schedule.strictly_decreasing() {
                return Err(Error::Config(format!(
                    "{name} must strictly decrease from VL to H"
                )));
            }
        }
        Ok(())
    }

    /// CTC vocabulary width: all word types plus the blank at index 0.
    pub fn ctc_vocab_size(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Canonical surface form of a token id (ids are 1-based; 0 is the blank).
pub fn id_to_word(id: usize) -> String {
    debug_assert!(id >= 1);
    format!("w{:02}", id - 1)
}

/// Inverse of [`id_to_word`]; `vocab_size` bounds the accepted range.
pub fn word_to_id(word: &str, vocab_size: usize) -> Result<usize> {
    let index: usize = word
        .strip_prefix('w')
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Parameter(format!("malformed word token {word:?}")))?;
    if index >= vocab_size {
        return Err(Error::Parameter(format!(
            "word {word:?} outside vocabulary of {vocab_size}"
        )));
    }
    Ok(index + 1)
}

/// A fully rendered corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerProfile>,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn train_speakers(&self) -> impl Iterator<Item = &SpeakerProfile> {
        self.speakers
            .iter()
            .filter(|s| matches!(s.split, SpeakerSplit::Train | SpeakerSplit::BothBlocks))
    }

    pub fn test_speakers(&self) -> impl Iterator<Item = &SpeakerProfile> {
        self.speakers
            .iter()
            .filter(|s| matches!(s.split, SpeakerSplit::Test | SpeakerSplit::BothBlocks))
    }

    pub fn speaker(&self, speaker_id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.speaker_id == speaker_id)
    }
}

/// Generate the full corpus for `config`: speaker profiles, transcripts and
/// rendered waveforms for both manifests, bit-deterministic from the seed.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;

    // Word pools: the tail `unseen` slice of the vocabulary never occurs in
    // training transcripts.
    let n_unseen = (config.vocab_size as f64 * config.unseen_word_fraction).round() as usize;
    let n_seen = config.vocab_size - n_unseen;
    if n_seen == 0 {
        return Err(Error::Config(
            "unseen_word_fraction leaves no trainable words".into(),
        ));
    }
    let seen_pool: Vec<usize> = (1..=n_seen).collect();
    let unseen_pool: Vec<usize> = (n_seen + 1..=config.vocab_size).collect();

    let mut speakers = Vec::new();
    let mut severity_iter = Severity::ALL
        .iter()
        .zip(config.severity_distribution)
        .flat_map(|(&sev, count)| std::iter::repeat(sev).take(count));
    for i in 0..config.n_train_speakers {
        let speaker_id = format!("T{i:02}");
        let severity = severity_iter.next().expect("distribution sums to count");
        let split = match config.split_mode {
            SplitMode::BlockOverlap => SpeakerSplit::BothBlocks,
            SplitMode::SpeakerDisjoint => SpeakerSplit::Train,
        };
        speakers.push(sample_profile(config, speaker_id, severity, split));
    }
    if config.split_mode == SplitMode::SpeakerDisjoint {
        for i in 0..config.n_test_speakers {
            let speaker_id = format!("S{i:02}");
            // Cycle severities so every level appears among test speakers.
            let severity = Severity::ALL[i % Severity::ALL.len()];
            speakers.push(sample_profile(config, speaker_id, severity, SpeakerSplit::Test));
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for profile in &speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.rng_seed,
            &format!("utts:{}", profile.speaker_id),
        ));
        if matches!(profile.split, SpeakerSplit::Train | SpeakerSplit::BothBlocks) {
            for u in 0..config.train_utts_per_speaker {
                train.push(render_one(
                    config, profile, u, "train", &seen_pool, None, &mut rng,
                )?);
            }
        }
        if matches!(profile.split, SpeakerSplit::Test | SpeakerSplit::BothBlocks) {
            for u in 0..config.test_utts_per_speaker {
                test.push(render_one(
                    config,
                    profile,
                    u,
                    "test",
                    &seen_pool,
                    Some(&unseen_pool),
                    &mut rng,
                )?);
            }
        }
    }

    Ok(Corpus {
        config: config.clone(),
        speakers,
        train,
        test,
    })
}

fn sample_profile(
    config: &CorpusConfig,
    speaker_id: String,
    severity: Severity,
    split: SpeakerSplit,
) -> SpeakerProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.rng_seed,
        &format!("profile:{speaker_id}"),
    ));
    SpeakerProfile {
        base_freq: rng.gen_range(100.0..300.0),
        formant_offsets: vec![rng.gen_range(-80.0..80.0)],
        speaking_rate: rng.gen_range(0.85..1.2),
        speaker_id,
        severity,
        split,
    }
}

#[allow(clippy::too_many_arguments)]
fn render_one(
    config: &CorpusConfig,
    profile: &SpeakerProfile,
    index: usize,
    split: &str,
    seen_pool: &[usize],
    unseen_pool: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    // Test utterances flip a coin between all-seen and all-unseen word
    // pools; training utterances always draw from the seen pool.
    let (pool, seen) = match unseen_pool {
        Some(unseen) if !unseen.is_empty() && rng.gen::<f64>() < config.unseen_word_fraction => {
            (unseen, false)
        }
        _ => (seen_pool, true),
    };
    let len = rng.gen_range(config.transcript_len_min..=config.transcript_len_max);
    let ids: Vec<usize> = (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    let words: Vec<String> = ids.iter().map(|&id| id_to_word(id)).collect();
    let transcript = TokenSequence::new(ids.clone())?;
    let waveform = synth::render_utterance(config, profile, &ids, rng)?;
    Ok(Utterance {
        utt_id: format!("{}_{split}{index:03}", profile.speaker_id),
        speaker_id: profile.speaker_id.clone(),
        severity: profile.severity,
        transcript,
        words,
        waveform,
        sample_rate: config.sample_rate,
        seen,
    })
}
