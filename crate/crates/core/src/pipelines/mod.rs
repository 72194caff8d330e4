//! Training and adaptation procedures over the acoustic backbone and its
//! adapter bank.
//!
//! Three procedures share one deterministic trainer core:
//!
//! * [`finetune_baseline`] — CTC training of the bare backbone on the
//!   training manifest's reference transcripts.
//! * [`adaptive_finetune`] — staged training that populates an adapter bank
//!   jointly with the backbone: condition-level entries first on pooled
//!   per-severity data, then speaker-level entries with the condition
//!   entries held fixed.
//! * [`test_time_adapt`] — the same staging at test time with the backbone
//!   frozen and only adapter parameters trainable, supervised either by the
//!   reference transcripts (upper bound) or by the un-adapted model's own
//!   greedy decodes.
//!
//! Determinism is by construction: utterances are processed one tape at a
//! time, gradients accumulate in name order, batch order comes from a
//! seeded shuffle, and no step is parallel. Identical (corpus, config,
//! seed) triples give bit-identical parameters and decodes.

mod matrix;

pub use matrix::{
    default_system_specs, run_experiment_matrix, MatrixConfig, MatrixResults, SystemRow,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, AdapterSpec, AdapterStack, ConditionKey, LabelGranularity};
use crate::backbone::{encode, encode_staged, BackboneModel, StagedParams};
use crate::corpus::{Corpus, Severity, Utterance};
use crate::ctc::{ctc_loss, greedy_decode, min_frames, TokenSequence};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::eval::{aggregate, score, Grouping, UttScore};
use crate::rng::derive_seed;

// ── configuration ────────────────────────────────────────────────────────

/// Update rule used by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Moment-estimating update with bias correction (β₁ 0.9, β₂ 0.999).
    Adam,
}

/// Hyperparameters for one training procedure.
///
/// `epochs_per_phase[i]` applies to phase `i`; the last entry covers any
/// later phase. An entry of 0 runs the phase without any updates, which is
/// the sanctioned way to check that untouched adapters decode exactly like
/// the bare model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_phase: Vec<usize>,
    pub batch_size: usize,
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    /// Ceiling on the global gradient norm of each batch.
    pub grad_clip_norm: f64,
    pub rng_seed: u64,
    /// Substring patterns naming parameters to exclude from updates, on top
    /// of whatever the procedure itself freezes; `"*"` freezes everything.
    pub freeze: Vec<String>,
    /// Number of held-out utterances decoded after each epoch for the token
    /// error trace (0 disables the trace).
    pub heldout_cap: usize,
}

impl TrainConfig {
    /// Defaults for baseline fine-tuning of the bare backbone.
    pub fn baseline(rng_seed: u64) -> Self {
        Self {
            epochs_per_phase: vec![4],
            batch_size: 8,
            step_size: 1e-3,
            optimizer: OptimizerKind::Adam,
            grad_clip_norm: 5.0,
            rng_seed,
            freeze: Vec::new(),
            heldout_cap: 24,
        }
    }

    /// Defaults for adaptive fine-tuning (adapters jointly with backbone).
    pub fn aft(rng_seed: u64) -> Self {
        Self {
            epochs_per_phase: vec![2, 2],
            ..Self::baseline(rng_seed)
        }
    }

    /// Defaults for test-time adaptation (backbone frozen, smaller steps).
    pub fn tta(rng_seed: u64) -> Self {
        Self {
            epochs_per_phase: vec![2, 2],
            batch_size: 4,
            step_size: 3e-4,
            ..Self::baseline(rng_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_phase.is_empty() {
            return Err(Error::Config(
                "epochs_per_phase must name at least one phase".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "step_size must be a positive finite number, got {}",
                self.step_size
            )));
        }
        if !(self.grad_clip_norm > 0.0) || !self.grad_clip_norm.is_finite() {
            return Err(Error::Config(format!(
                "grad_clip_norm must be a positive finite number, got {}",
                self.grad_clip_norm
            )));
        }
        Ok(())
    }

    fn epochs_for(&self, phase_idx: usize) -> usize {
        *self
            .epochs_per_phase
            .get(phase_idx)
            .or_else(|| self.epochs_per_phase.last())
            .expect("validated: at least one entry")
    }
}

/// Where adaptation targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// Reference transcripts; the upper bound no deployed system has.
    GroundTruth,
    /// Greedy decodes of the un-adapted model, generated once up front.
    PseudoLabel,
}

impl SupervisionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SupervisionMode::GroundTruth => "gt",
            SupervisionMode::PseudoLabel => "pseudo",
        }
    }
}

// ── logs and outputs ─────────────────────────────────────────────────────

/// One epoch of one phase: mean per-utterance loss and, when a held-out
/// budget is configured, the token error of a greedy decode pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_ter: Option<f64>,
}

/// Record of one training phase, with end-of-phase content digests so freeze
/// contracts are checkable from the log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: String,
    pub epochs: Vec<EpochStats>,
    /// Digest over every backbone parameter at phase end.
    pub backbone_digest: String,
    /// Digest of each bank entry at phase end, keyed by the entry's key.
    pub entry_digests: BTreeMap<String, String>,
}

/// Logs of every phase a procedure ran, in order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub phases: Vec<PhaseLog>,
}

impl TrainLog {
    pub fn phase(&self, name: &str) -> Option<&PhaseLog> {
        self.phases.iter().find(|p| p.phase == name)
    }
}

/// One decoded test utterance, carrying everything the scorer needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decode {
    pub utt_id: String,
    pub speaker_id: String,
    /// True severity from the manifest (scoring always groups by truth,
    /// even when adaptation ran on predicted labels).
    pub severity: Severity,
    pub seen: bool,
    pub reference: TokenSequence,
    pub hypothesis: TokenSequence,
}

/// Everything test-time adaptation produces.
#[derive(Debug, Clone)]
pub struct TtaOutcome {
    /// Final decodes of the whole test manifest with fully resolved stacks.
    pub decodes: Vec<Decode>,
    /// The adapted bank (fresh speaker entries, warm-started condition
    /// entries when a fine-tuned bank was supplied).
    pub bank: AdapterBank,
    /// The adaptation target of every test utterance, keyed by utterance id
    /// — references in ground-truth mode, un-adapted greedy decodes
    /// otherwise. Targets of skipped utterances are included.
    pub supervision_targets: BTreeMap<String, TokenSequence>,
    /// Utterances whose target was empty or could not fit the frame count,
    /// excluded from adaptation but still decoded.
    pub skipped_for_adaptation: usize,
    pub log: TrainLog,
}

// ── parameter plumbing ───────────────────────────────────────────────────

/// Does `name` match any freeze pattern? Empty patterns are ignored so a
/// stray `""` cannot silently freeze the whole model.
fn is_frozen(name: &str, patterns: &[String]) -> bool {
    patterns
        .iter()
        .any(|p| p == "*" || (!p.is_empty() && name.contains(p.as_str())))
}

/// Backbone parameter names that remain trainable under `freeze`.
fn backbone_trainables(model: &BackboneModel, freeze: &[String]) -> BTreeSet<String> {
    model
        .params()
        .names()
        .iter()
        .filter(|n| !is_frozen(n, freeze))
        .cloned()
        .collect()
}

/// Full names of the given bank entries' fields, minus frozen ones.
fn adapter_trainables(
    bank: &AdapterBank,
    keys: &[ConditionKey],
    freeze: &[String],
) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for key in keys {
        let entry = bank.entry(key).ok_or_else(|| {
            Error::Usage(format!("no adapter entry for key '{key}' to train"))
        })?;
        for (field, _) in entry.params.fields() {
            let name = format!("adapter.{key}.{field}");
            if !is_frozen(&name, freeze) {
                names.insert(name);
            }
        }
    }
    Ok(names)
}

fn param_data<'a>(
    model: &'a BackboneModel,
    bank: Option<&'a AdapterBank>,
    name: &str,
) -> Option<&'a [f64]> {
    if name.starts_with("adapter.") {
        bank?.param(name).map(|a| a.data())
    } else {
        model.params().get(name).map(|a| a.data())
    }
}

fn param_data_mut<'a>(
    model: &'a mut BackboneModel,
    bank: Option<&'a mut AdapterBank>,
    name: &str,
) -> Option<&'a mut [f64]> {
    if name.starts_with("adapter.") {
        bank?.param_mut(name).map(|a| a.data_mut())
    } else {
        model.params_mut().get_mut(name).map(|a| a.data_mut())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one phase, keyed by parameter name so it survives
/// parameters appearing in some batches and not others.
struct Optimizer {
    kind: OptimizerKind,
    step_size: f64,
    steps: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, step_size: f64) -> Self {
        Self { kind, step_size, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one batch of accumulated gradients.
    fn step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        model: &mut BackboneModel,
        mut bank: Option<&mut AdapterBank>,
    ) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            let data = param_data_mut(model, bank.as_deref_mut(), name).ok_or_else(|| {
                Error::Usage(format!("gradient for unknown parameter '{name}'"))
            })?;
            if data.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for '{name}' has {} entries, parameter has {}",
                    g.len(),
                    data.len()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(g) {
                        *x -= self.step_size * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                    for ((x, gi), (mi, vi)) in
                        data.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *x -= self.step_size * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

// ── trainer core ─────────────────────────────────────────────────────────

/// One training example: an utterance, the target its loss is computed
/// against, and the bank keys whose adapters are in its forward pass.
struct PhaseItem<'a> {
    utt: &'a Utterance,
    target: TokenSequence,
    keys: Vec<ConditionKey>,
}

/// Held-out decode set for the per-epoch token error trace.
struct Heldout<'a> {
    utts: Vec<&'a Utterance>,
    labels: Option<&'a BTreeMap<String, Severity>>,
}

fn capture(
    model: &BackboneModel,
    bank: Option<&AdapterBank>,
    names: &BTreeSet<String>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    names
        .iter()
        .map(|name| {
            param_data(model, bank, name)
                .map(|d| (name.clone(), d.to_vec()))
                .ok_or_else(|| Error::Usage(format!("unknown trainable parameter '{name}'")))
        })
        .collect()
}

fn restore(
    model: &mut BackboneModel,
    mut bank: Option<&mut AdapterBank>,
    snapshot: &BTreeMap<String, Vec<f64>>,
) {
    for (name, values) in snapshot {
        if let Some(data) = param_data_mut(model, bank.as_deref_mut(), name) {
            data.copy_from_slice(values);
        }
    }
}

/// Run one phase: seeded-shuffle epochs of batched CTC steps updating
/// exactly the parameters in `trainable`. On a non-finite loss the
/// parameters are restored to the last completed epoch and a training error
/// is returned.
fn run_phase(
    label: &str,
    phase_idx: usize,
    model: &mut BackboneModel,
    mut bank: Option<&mut AdapterBank>,
    items: &[PhaseItem<'_>],
    trainable: &BTreeSet<String>,
    heldout: &Heldout<'_>,
    cfg: &TrainConfig,
) -> Result<PhaseLog> {
    let epochs = if items.is_empty() || trainable.is_empty() {
        // Nothing to learn or nothing to learn from: record an empty phase
        // rather than dividing by zero utterances.
        0
    } else {
        cfg.epochs_for(phase_idx)
    };

    let mut log = PhaseLog {
        phase: label.to_string(),
        epochs: Vec::new(),
        backbone_digest: String::new(),
        entry_digests: BTreeMap::new(),
    };

    let mut snapshot = if epochs > 0 {
        capture(model, bank.as_deref(), trainable)?
    } else {
        BTreeMap::new()
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.step_size);

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.rng_seed,
            &format!("{label}:epoch{epoch}:order"),
        ));
        order.shuffle(&mut order_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.rng_seed,
            &format!("{label}:epoch{epoch}:dropout"),
        ));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &idx in batch {
                let item = &items[idx];
                let mut tape = Tape::new();
                let mut staged = StagedParams::new();
                for (name, array) in model.params().iter() {
                    let id = if trainable.contains(name) {
                        tape.leaf(array.clone())
                    } else {
                        tape.constant(array.clone())
                    };
                    staged.push(name, id)?;
                }
                let stack = match bank.as_deref() {
                    Some(b) => b.resolve_keys(&item.keys)?,
                    None => AdapterStack::empty(),
                };
                for entry in stack.entries() {
                    for (field, array) in entry.params.fields() {
                        let name = format!("adapter.{}.{field}", entry.key);
                        let id = if trainable.contains(&name) {
                            tape.leaf(array.clone())
                        } else {
                            tape.constant(array.clone())
                        };
                        staged.push(&name, id)?;
                    }
                }

                let log_probs = encode_staged(
                    &mut tape,
                    model.config(),
                    &staged,
                    &stack,
                    &item.utt.waveform,
                    true,
                    &mut dropout_rng,
                )?;
                let loss = ctc_loss(&mut tape, log_probs, &item.target)?;
                let loss_val = tape.value(loss).data()[0];
                if !loss_val.is_finite() {
                    restore(model, bank.as_deref_mut(), &snapshot);
                    return Err(Error::Training(format!(
                        "loss became non-finite on '{}' in phase '{label}' epoch {epoch}; \
                         parameters restored to the last completed epoch",
                        item.utt.utt_id
                    )));
                }
                loss_sum += loss_val;
                tape.backward(loss)?;
                for (name, id) in staged.iter() {
                    if !trainable.contains(name) {
                        continue;
                    }
                    if let Some(g) = tape.grad(id) {
                        let acc = grads
                            .entry(name.to_string())
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for (a, gi) in acc.iter_mut().zip(g) {
                            *a += gi;
                        }
                    }
                }
            }

            // Mean over the batch, then a global-norm clip across every
            // accumulated gradient.
            let scale = 1.0 / batch.len() as f64;
            let mut sq_sum = 0.0;
            for g in grads.values_mut() {
                for gi in g.iter_mut() {
                    *gi *= scale;
                    sq_sum += *gi * *gi;
                }
            }
            if !sq_sum.is_finite() {
                restore(model, bank.as_deref_mut(), &snapshot);
                return Err(Error::Training(format!(
                    "gradient became non-finite in phase '{label}' epoch {epoch}; \
                     parameters restored to the last completed epoch"
                )));
            }
            let norm = sq_sum.sqrt();
            if norm > cfg.grad_clip_norm {
                let clip = cfg.grad_clip_norm / norm;
                for g in grads.values_mut() {
                    for gi in g.iter_mut() {
                        *gi *= clip;
                    }
                }
            }
            optimizer.step(&grads, model, bank.as_deref_mut())?;
        }

        let heldout_ter = if heldout.utts.is_empty() {
            None
        } else {
            let decodes = decode_each(
                model,
                bank.as_deref(),
                heldout.labels,
                heldout.utts.iter().copied(),
            )?;
            Some(token_error_rate(&decodes)?)
        };
        log.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / items.len() as f64,
            heldout_ter,
        });
        snapshot = capture(model, bank.as_deref(), trainable)?;
    }

    log.backbone_digest = model.digest();
    if let Some(b) = bank.as_deref() {
        for key in b.keys() {
            let digest = b.entry_digest(key).expect("key comes from the bank");
            log.entry_digests.insert(key.to_string(), digest);
        }
    }
    Ok(log)
}

// ── decoding and scoring ─────────────────────────────────────────────────

/// Resolve the keys the bank would use for (speaker, label), keeping only
/// entries that exist. Mid-procedure decodes see partially built banks.
fn available_stack(
    bank: &AdapterBank,
    speaker: &str,
    label: Severity,
) -> Result<AdapterStack> {
    let keys: Vec<ConditionKey> = bank
        .required_keys(speaker, label)
        .into_iter()
        .filter(|k| bank.entry(k).is_some())
        .collect();
    bank.resolve_keys(&keys)
}

fn decode_each<'a>(
    model: &BackboneModel,
    bank: Option<&AdapterBank>,
    labels: Option<&BTreeMap<String, Severity>>,
    utts: impl IntoIterator<Item = &'a Utterance>,
) -> Result<Vec<Decode>> {
    let mut decodes = Vec::new();
    // Decoding never consults the RNG (training = false), but the signature
    // wants one.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for utt in utts {
        let stack = match bank {
            None => AdapterStack::empty(),
            Some(b) => {
                let label = labels
                    .and_then(|m| m.get(&utt.speaker_id).copied())
                    .unwrap_or(utt.severity);
                available_stack(b, &utt.speaker_id, label)?
            }
        };
        let mut tape = Tape::new();
        let out = encode(&mut tape, model, &stack, &utt.waveform, false, &mut rng)?;
        let hypothesis = greedy_decode(tape.value(out.log_probs))?;
        decodes.push(Decode {
            utt_id: utt.utt_id.clone(),
            speaker_id: utt.speaker_id.clone(),
            severity: utt.severity,
            seen: utt.seen,
            reference: utt.transcript.clone(),
            hypothesis,
        });
    }
    Ok(decodes)
}

/// Greedy-decode `utts` with the bank's applicable entries (those that
/// exist). `labels` overrides the per-speaker severity used for resolution;
/// without it the manifest's true severities are used. `bank = None`
/// decodes the bare model.
pub fn decode_utterances<'a>(
    model: &BackboneModel,
    bank: Option<&AdapterBank>,
    labels: Option<&BTreeMap<String, Severity>>,
    utts: impl IntoIterator<Item = &'a Utterance>,
) -> Result<Vec<Decode>> {
    decode_each(model, bank, labels, utts)
}

/// Score every decode against its reference.
pub fn score_decodes(decodes: &[Decode]) -> Result<Vec<UttScore>> {
    decodes
        .iter()
        .map(|d| {
            score(
                d.utt_id.clone(),
                d.speaker_id.clone(),
                d.severity,
                d.seen,
                &d.reference,
                &d.hypothesis,
            )
        })
        .collect()
}

/// Pooled token error rate (percent) over all decodes.
pub fn token_error_rate(decodes: &[Decode]) -> Result<f64> {
    let scores = score_decodes(decodes)?;
    let table = aggregate(&scores, Grouping::Overall)?;
    table
        .group("overall")
        .map(|g| g.wer_percent)
        .ok_or_else(|| Error::Usage("no utterances to score".into()))
}

// ── the three procedures ─────────────────────────────────────────────────

fn heldout_slice(corpus: &Corpus, cap: usize) -> Vec<&Utterance> {
    corpus.test.iter().take(cap).collect()
}

/// Every training speaker must exist in the manifest's speaker table;
/// adaptation pools by those labels.
fn check_speakers_known(corpus: &Corpus, utts: &[Utterance]) -> Result<()> {
    for utt in utts {
        if corpus.speaker(&utt.speaker_id).is_none() {
            return Err(Error::Input(format!(
                "utterance '{}' names speaker '{}' with no profile (and so no \
                 severity label)",
                utt.utt_id, utt.speaker_id
            )));
        }
    }
    Ok(())
}

/// Fine-tune the bare backbone on the training manifest's reference
/// transcripts. No adapters are involved; every backbone parameter not
/// matched by `cfg.freeze` is updated.
pub fn finetune_baseline(
    model: &mut BackboneModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let items: Vec<PhaseItem<'_>> = corpus
        .train
        .iter()
        .map(|utt| PhaseItem { utt, target: utt.transcript.clone(), keys: Vec::new() })
        .collect();
    let trainable = backbone_trainables(model, &cfg.freeze);
    let heldout = Heldout {
        utts: heldout_slice(corpus, cfg.heldout_cap),
        labels: None,
    };
    let log = run_phase("baseline", 0, model, None, &items, &trainable, &heldout, cfg)?;
    Ok(TrainLog { phases: vec![log] })
}

/// The bank keys each stage of a granularity creates and trains, plus the
/// keys resolved for an utterance of (speaker, severity) during that stage.
struct StagePlan {
    label: &'static str,
    /// Keys whose entries this stage updates.
    train_keys: Vec<ConditionKey>,
    /// Keys in the forward pass for an utterance (severity-first order).
    item_keys: Box<dyn Fn(&str, Severity) -> Vec<ConditionKey>>,
}

/// Stages for one granularity over the given speakers/severities, shared by
/// adaptive fine-tuning and test-time adaptation. Speakers and severities
/// must already be deduplicated and sorted.
fn stage_plans(
    granularity: LabelGranularity,
    speakers: &[String],
    severities: &[Severity],
    label_prefix: &str,
) -> Vec<StagePlan> {
    let speaker_keys: Vec<ConditionKey> = speakers
        .iter()
        .map(|s| ConditionKey::Speaker(s.clone()))
        .collect();
    let severity_keys: Vec<ConditionKey> = severities
        .iter()
        .map(|&s| ConditionKey::Deficiency(s))
        .collect();
    // Labels must be 'static for the log; pick from a fixed table.
    let name = |suffix: &str| -> &'static str {
        match (label_prefix, suffix) {
            ("aft", "global") => "aft_global",
            ("aft", "deficiency") => "aft_deficiency",
            ("aft", "speaker") => "aft_speaker",
            ("tta", "global") => "tta_global",
            ("tta", "deficiency") => "tta_deficiency",
            ("tta", "speaker") => "tta_speaker",
            _ => unreachable!("fixed prefix/suffix table"),
        }
    };
    match granularity {
        LabelGranularity::Global => vec![StagePlan {
            label: name("global"),
            train_keys: vec![ConditionKey::Global],
            item_keys: Box::new(|_, _| vec![ConditionKey::Global]),
        }],
        LabelGranularity::Deficiency => vec![StagePlan {
            label: name("deficiency"),
            train_keys: severity_keys,
            item_keys: Box::new(|_, sev| vec![ConditionKey::Deficiency(sev)]),
        }],
        LabelGranularity::Speaker => vec![StagePlan {
            label: name("speaker"),
            train_keys: speaker_keys,
            item_keys: Box::new(|spk, _| vec![ConditionKey::Speaker(spk.to_string())]),
        }],
        LabelGranularity::SpeakerPlusDeficiency => vec![
            StagePlan {
                label: name("deficiency"),
                train_keys: severity_keys,
                item_keys: Box::new(|_, sev| vec![ConditionKey::Deficiency(sev)]),
            },
            StagePlan {
                label: name("speaker"),
                train_keys: speaker_keys,
                item_keys: Box::new(|spk, sev| {
                    vec![
                        ConditionKey::Deficiency(sev),
                        ConditionKey::Speaker(spk.to_string()),
                    ]
                }),
            },
        ],
    }
}

/// Adaptive fine-tuning: create a bank for `spec` and train it in stages on
/// the training manifest, jointly with the backbone.
///
/// For speaker-plus-condition granularity, stage 1 estimates the
/// per-severity entries on pooled per-severity data; stage 2 freezes them
/// and estimates per-speaker entries (the backbone stays trainable in both
/// stages). Single-attribute granularities run only their one stage.
pub fn adaptive_finetune(
    model: &mut BackboneModel,
    spec: &AdapterSpec,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(AdapterBank, TrainLog)> {
    cfg.validate()?;
    check_speakers_known(corpus, &corpus.train)?;

    let speakers: Vec<String> = {
        let set: BTreeSet<&str> = corpus.train.iter().map(|u| u.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    };
    let severities: Vec<Severity> = {
        let set: BTreeSet<Severity> = corpus.train.iter().map(|u| u.severity).collect();
        set.into_iter().collect()
    };

    let mut bank = AdapterBank::new(spec.clone(), derive_seed(cfg.rng_seed, "aft:bank"))?;
    let width = model.config().d_model;
    let plans = stage_plans(spec.label_granularity, &speakers, &severities, "aft");
    for plan in &plans {
        for key in &plan.train_keys {
            bank.create_entry(key.clone(), width)?;
        }
    }

    let heldout_utts = heldout_slice(corpus, cfg.heldout_cap);
    let mut log = TrainLog::default();
    for (phase_idx, plan) in plans.into_iter().enumerate() {
        let items: Vec<PhaseItem<'_>> = corpus
            .train
            .iter()
            .map(|utt| PhaseItem {
                utt,
                target: utt.transcript.clone(),
                keys: (plan.item_keys)(&utt.speaker_id, utt.severity),
            })
            .collect();
        let mut trainable = backbone_trainables(model, &cfg.freeze);
        trainable.extend(adapter_trainables(&bank, &plan.train_keys, &cfg.freeze)?);
        let heldout = Heldout { utts: heldout_utts.clone(), labels: None };
        log.phases.push(run_phase(
            plan.label,
            phase_idx,
            model,
            Some(&mut bank),
            &items,
            &trainable,
            &heldout,
            cfg,
        )?);
    }
    Ok((bank, log))
}

/// Test-time adaptation: freeze the backbone and estimate adapters for the
/// test manifest's speakers, then decode everything with the resolved
/// stacks.
///
/// `speaker_severity` maps every test speaker to the severity label used
/// for pooling and resolution — the classifier's prediction in deployment,
/// the manifest's truth when an oracle run is wanted. Condition-level
/// entries warm-start from `aft_bank` when one is supplied; speaker-level
/// entries are always created fresh, so unseen speakers need nothing from
/// training.
///
/// Pseudo-label supervision greedy-decodes every test utterance with the
/// un-adapted model exactly once, before any adaptation; both stages reuse
/// those targets. Utterances whose target is empty or cannot fit their
/// frame count are skipped for adaptation (but still decoded and counted).
pub fn test_time_adapt(
    model: &BackboneModel,
    aft_bank: Option<&AdapterBank>,
    spec: &AdapterSpec,
    corpus: &Corpus,
    supervision: SupervisionMode,
    speaker_severity: &BTreeMap<String, Severity>,
    cfg: &TrainConfig,
) -> Result<TtaOutcome> {
    cfg.validate()?;
    if let Some(b) = aft_bank {
        if b.spec() != spec {
            return Err(Error::Usage(
                "fine-tuned bank was built for a different adapter spec".into(),
            ));
        }
    }
    let missing: Vec<&str> = {
        let set: BTreeSet<&str> = corpus.test.iter().map(|u| u.speaker_id.as_str()).collect();
        set.into_iter()
            .filter(|s| !speaker_severity.contains_key(*s))
            .collect()
    };
    if !missing.is_empty() {
        return Err(Error::Usage(format!(
            "no severity label for test speaker(s) {}",
            missing.join(", ")
        )));
    }

    let speakers: Vec<String> = {
        let set: BTreeSet<&str> = corpus.test.iter().map(|u| u.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    };
    let severities: Vec<Severity> = {
        let set: BTreeSet<Severity> = speakers
            .iter()
            .map(|s| speaker_severity[s])
            .collect();
        set.into_iter().collect()
    };

    // Supervision targets, generated exactly once before any adaptation.
    let supervision_targets: BTreeMap<String, TokenSequence> = match supervision {
        SupervisionMode::GroundTruth => corpus
            .test
            .iter()
            .map(|u| (u.utt_id.clone(), u.transcript.clone()))
            .collect(),
        SupervisionMode::PseudoLabel => decode_each(model, None, None, corpus.test.iter())?
            .into_iter()
            .map(|d| (d.utt_id, d.hypothesis))
            .collect(),
    };

    // Build the bank: fresh identity entries everywhere, then overwrite
    // condition-level entries with the fine-tuned ones when available.
    let mut bank = AdapterBank::new(spec.clone(), derive_seed(cfg.rng_seed, "tta:bank"))?;
    let width = model.config().d_model;
    let plans = stage_plans(spec.label_granularity, &speakers, &severities, "tta");
    for plan in &plans {
        for key in &plan.train_keys {
            bank.create_entry(key.clone(), width)?;
        }
    }
    if let Some(warm) = aft_bank {
        for (key, entry) in warm.iter_entries() {
            if matches!(key, ConditionKey::Speaker(_)) {
                continue;
            }
            if bank.entry(key).is_none() {
                continue;
            }
            for (field, array) in entry.params.fields() {
                let name = format!("adapter.{key}.{field}");
                let dst = bank.param_mut(&name).ok_or_else(|| {
                    Error::Usage(format!("warm-start target '{name}' missing"))
                })?;
                *dst = array.clone();
            }
        }
    }

    // Frozen backbone: the trainable set only ever names adapter fields, and
    // the phases run on a scratch copy whose digest must not change.
    let mut scratch = model.clone();

    let mut skipped = 0usize;
    let mut usable: Vec<(&Utterance, TokenSequence)> = Vec::new();
    for utt in &corpus.test {
        let target = supervision_targets
            .get(&utt.utt_id)
            .expect("every test utterance got a target")
            .clone();
        let frames = model.config().frames_for(utt.waveform.len())?;
        if !target.is_empty() && frames >= min_frames(&target) {
            usable.push((utt, target));
        } else {
            skipped += 1;
        }
    }

    let mut log = TrainLog::default();
    for (phase_idx, plan) in plans.into_iter().enumerate() {
        let items: Vec<PhaseItem<'_>> = usable
            .iter()
            .map(|(utt, target)| PhaseItem {
                utt,
                target: target.clone(),
                keys: (plan.item_keys)(&utt.speaker_id, speaker_severity[&utt.speaker_id]),
            })
            .collect();
        let trainable = adapter_trainables(&bank, &plan.train_keys, &cfg.freeze)?;
        let heldout = Heldout {
            utts: corpus.test.iter().take(cfg.heldout_cap).collect(),
            labels: Some(speaker_severity),
        };
        log.phases.push(run_phase(
            plan.label,
            phase_idx,
            &mut scratch,
            Some(&mut bank),
            &items,
            &trainable,
            &heldout,
            cfg,
        )?);
    }
    debug_assert_eq!(
        scratch.digest(),
        model.digest(),
        "frozen backbone must not change during test-time adaptation"
    );

    let decodes = decode_each(model, Some(&bank), Some(speaker_severity), corpus.test.iter())?;
    Ok(TtaOutcome {
        decodes,
        bank,
        supervision_targets,
        skipped_for_adaptation: skipped,
        log,
    })
}
