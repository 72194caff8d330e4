//! Manifest I/O: line-delimited JSON records referencing mono PCM WAV files.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{synth, word_to_id, Severity, Utterance};
use crate::ctc::TokenSequence;
use crate::error::{Error, Result};

/// One manifest line. Field order is the serialization order.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    utt_id: String,
    speaker_id: String,
    severity: Severity,
    split: String,
    /// Space-joined surface forms of the transcript.
    words: String,
    seen: bool,
    audio_path: String,
    sample_rate: u32,
}

/// Write `utterances` under `dir`: WAVs into `dir/audio/`, one JSONL
/// manifest named `<split>.jsonl`. Returns the manifest path.
pub fn write_manifest(utterances: &[Utterance], dir: &Path, split: &str) -> Result<PathBuf> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let manifest_path = dir.join(format!("{split}.jsonl"));
    let mut out = Vec::new();
    for utt in utterances {
        let rel_audio = format!("audio/{}.wav", utt.utt_id);
        write_wav(&dir.join(&rel_audio), &utt.waveform, utt.sample_rate)?;
        let record = ManifestRecord {
            utt_id: utt.utt_id.clone(),
            speaker_id: utt.speaker_id.clone(),
            severity: utt.severity,
            split: split.to_string(),
            words: utt.words.join(" "),
            seen: utt.seen,
            audio_path: rel_audio,
            sample_rate: utt.sample_rate,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
        out.push(line);
    }
    let body = out.join("\n") + "\n";
    fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Read a manifest and its referenced audio back into utterances.
pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut utterances = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut ids = Vec::new();
        for word in record.words.split_whitespace() {
            let id = word_to_id(word, synth::MAX_VOCAB).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            ids.push(id);
        }
        let transcript = TokenSequence::new(ids).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let audio_path = base.join(&record.audio_path);
        if !audio_path.exists() {
            return Err(Error::Resolution(format!(
                "{}:{line_no}: audio file {} not found",
                path.display(),
                audio_path.display()
            )));
        }
        let waveform = read_wav(&audio_path, record.sample_rate)?;
        utterances.push(Utterance {
            utt_id: record.utt_id,
            speaker_id: record.speaker_id,
            severity: record.severity,
            transcript,
            words: record.words.split_whitespace().map(String::from).collect(),
            waveform,
            sample_rate: record.sample_rate,
            seen: record.seen,
        });
    }
    Ok(utterances)
}

fn write_wav(path: &Path, waveform: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::corrupt(path, e.to_string()))?;
    for &x in waveform {
        let sample = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(sample)
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(())
}

fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f64>> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::corrupt(
            path,
            format!(
                "expected 16-bit mono PCM, got {} channels at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::corrupt(
            path,
            format!(
                "sample rate {} does not match manifest rate {expected_rate}",
                spec.sample_rate
            ),
        ));
    }
    let mut waveform = Vec::new();
    for sample in reader.samples::<i16>() {
        let s = sample.map_err(|e| Error::corrupt(path, e.to_string()))?;
        waveform.push(f64::from(s) / 32767.0);
    }
    Ok(waveform)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_corpus, CorpusConfig};
    use super::*;

    fn tiny_corpus() -> Vec<Utterance> {
        let config = CorpusConfig {
            n_train_speakers: 4,
            n_test_speakers: 0,
            severity_distribution: [1, 1, 1, 1],
            vocab_size: 10,
            train_utts_per_speaker: 2,
            test_utts_per_speaker: 1,
            ..CorpusConfig::default()
        };
        generate_corpus(&config).unwrap().train
    }

    #[test]
    fn round_trip_preserves_metadata_and_audio() {
        let utts = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(&utts, dir.path(), "train").unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), utts.len());
        for (a, b) in utts.iter().zip(&back) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.severity, b.severity);
            assert_eq!(a.words, b.words);
            assert_eq!(a.transcript, b.transcript);
            assert_eq!(a.seen, b.seen);
            assert_eq!(a.waveform.len(), b.waveform.len());
            for (x, y) in a.waveform.iter().zip(&b.waveform) {
                assert!((x - y).abs() <= 1.0 / 32767.0, "quantization bound exceeded");
            }
        }
        // A second write from the read-back corpus is byte-stable.
        let dir2 = tempfile::tempdir().unwrap();
        let path2 = write_manifest(&back, dir2.path(), "train").unwrap();
        let back2 = read_manifest(&path2).unwrap();
        for (b, c) in back.iter().zip(&back2) {
            assert_eq!(b.waveform, c.waveform);
        }
    }

    #[test]
    fn missing_audio_is_resolution_error() {
        let utts = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(&utts[..1], dir.path(), "train").unwrap();
        fs::remove_file(dir.path().join("audio").join(format!("{}.wav", utts[0].utt_id)))
            .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Resolution(_))));
    }

    #[test]
    fn bad_severity_is_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        fs::write(
            &path,
            r#"{"utt_id":"u0","speaker_id":"T00","severity":"XL","split":"train","words":"w00","seen":true,"audio_path":"audio/u0.wav","sample_rate":16000}"#,
        )
        .unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_word_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        fs::write(
            &path,
            r#"{"utt_id":"u0","speaker_id":"T00","severity":"H","split":"train","words":"banana","seen":true,"audio_path":"audio/u0.wav","sample_rate":16000}"#,
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { .. })));
    }
}
