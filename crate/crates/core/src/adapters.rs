//! Label-conditioned adapter architectures and their storage banks.
//!
//! Three parameter-efficient adapter families can hook into the acoustic
//! model at named insertion points:
//!
//! * **LHUC** — per-unit multiplicative gains `2·σ(r) ⊙ h`, identity at
//!   `r = 0`;
//! * **HUB** — per-unit additive biases `r + h`, identity at `r = 0`;
//! * **RAB** — a residual bottleneck block
//!   `h + LN(Dropout(P_up · ζ(P_down · h)))` with GELU nonlinearity ζ,
//!   identity when `P_up` and the layer-norm shift start at zero.
//!
//! A *structured* variant cascades two RABs: first one conditioned on the
//! speaker's deficiency (severity) label, then one conditioned on the
//! speaker identity. The deficiency stage always applies first, so the
//! speaker adapter refines an already deficiency-normalized representation.
//!
//! Parameters are stored in an [`AdapterBank`] keyed by [`ConditionKey`]
//! (global, per-severity, or per-speaker). [`AdapterBank::resolve`] turns a
//! bank plus a concrete (speaker, severity) pair into an ordered
//! [`AdapterStack`] that `backbone::encode` applies at the right points.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{digest_params, InsertionPoint};
use crate::corpus::Severity;
use crate::diffcore::{DiffArray, Tape, ValueId};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

// ── specification ────────────────────────────────────────────────────────

/// Which adapter family a spec instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterArchitecture {
    Lhuc,
    Hub,
    Rab,
    /// Deficiency-RAB followed by speaker-RAB (the two-stage cascade).
    StructuredRab,
}

impl AdapterArchitecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterArchitecture::Lhuc => "lhuc",
            AdapterArchitecture::Hub => "hub",
            AdapterArchitecture::Rab => "rab",
            AdapterArchitecture::StructuredRab => "structured_rab",
        }
    }
}

/// How adapter parameters are shared across the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelGranularity {
    /// One parameter set for everyone.
    Global,
    /// One parameter set per severity level.
    Deficiency,
    /// One parameter set per speaker.
    Speaker,
    /// Severity-level and speaker-level sets, applied in cascade.
    SpeakerPlusDeficiency,
}

/// Insertion point(s) of a spec: one for plain adapters, a
/// (deficiency, speaker) pair for the structured cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdapterPositions {
    Single(InsertionPoint),
    Cascade {
        deficiency: InsertionPoint,
        speaker: InsertionPoint,
    },
}

/// Full description of an adapter setup: family, insertion point(s), label
/// sharing, bottleneck width and dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub architecture: AdapterArchitecture,
    pub positions: AdapterPositions,
    pub label_granularity: LabelGranularity,
    /// Bottleneck width; required for (and only for) the RAB families.
    pub bottleneck_k: Option<usize>,
    pub dropout_p: f64,
}

impl AdapterSpec {
    pub fn lhuc(point: InsertionPoint, granularity: LabelGranularity) -> Self {
        Self {
            architecture: AdapterArchitecture::Lhuc,
            positions: AdapterPositions::Single(point),
            label_granularity: granularity,
            bottleneck_k: None,
            dropout_p: 0.0,
        }
    }

    pub fn hub(point: InsertionPoint, granularity: LabelGranularity) -> Self {
        Self {
            architecture: AdapterArchitecture::Hub,
            positions: AdapterPositions::Single(point),
            label_granularity: granularity,
            bottleneck_k: None,
            dropout_p: 0.0,
        }
    }

    pub fn rab(
        point: InsertionPoint,
        granularity: LabelGranularity,
        bottleneck_k: usize,
        dropout_p: f64,
    ) -> Self {
        Self {
            architecture: AdapterArchitecture::Rab,
            positions: AdapterPositions::Single(point),
            label_granularity: granularity,
            bottleneck_k: Some(bottleneck_k),
            dropout_p,
        }
    }

    pub fn structured(
        deficiency_point: InsertionPoint,
        speaker_point: InsertionPoint,
        bottleneck_k: usize,
        dropout_p: f64,
    ) -> Self {
        Self {
            architecture: AdapterArchitecture::StructuredRab,
            positions: AdapterPositions::Cascade {
                deficiency: deficiency_point,
                speaker: speaker_point,
            },
            label_granularity: LabelGranularity::SpeakerPlusDeficiency,
            bottleneck_k: Some(bottleneck_k),
            dropout_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let structured = self.architecture == AdapterArchitecture::StructuredRab;
        let cascade_labels =
            self.label_granularity == LabelGranularity::SpeakerPlusDeficiency;
        if structured != cascade_labels {
            return Err(Error::Config(
                "the structured cascade and the speaker-plus-deficiency label \
                 granularity imply each other"
                    .into(),
            ));
        }
        let paired = matches!(self.positions, AdapterPositions::Cascade { .. });
        if structured != paired {
            return Err(Error::Config(
                "structured specs need a (deficiency, speaker) position pair; \
                 plain specs need a single position"
                    .into(),
            ));
        }
        let needs_k = matches!(
            self.architecture,
            AdapterArchitecture::Rab | AdapterArchitecture::StructuredRab
        );
        match (needs_k, self.bottleneck_k) {
            (true, None) => {
                return Err(Error::Config(
                    "bottleneck_k is required for the RAB families".into(),
                ))
            }
            (true, Some(0)) => {
                return Err(Error::Config("bottleneck_k must be >= 1".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Config(
                    "bottleneck_k only applies to the RAB families".into(),
                ))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "adapter dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// All insertion points the spec touches, deficiency point first.
    pub fn points(&self) -> Vec<InsertionPoint> {
        match self.positions {
            AdapterPositions::Single(p) => vec![p],
            AdapterPositions::Cascade { deficiency, speaker } => {
                vec![deficiency, speaker]
            }
        }
    }
}

// ── condition keys ───────────────────────────────────────────────────────

/// What condition a bank entry is specialized to. The string forms are
/// stable external identifiers: `global`, `defi:VL`, `spk:S05`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConditionKey {
    Global,
    Deficiency(Severity),
    Speaker(String),
}

impl ConditionKey {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(ConditionKey::Global);
        }
        if let Some(rest) = s.strip_prefix("defi:") {
            return Ok(ConditionKey::Deficiency(Severity::parse(rest)?));
        }
        if let Some(rest) = s.strip_prefix("spk:") {
            if rest.is_empty() {
                return Err(Error::Parameter("empty speaker id in condition key".into()));
            }
            return Ok(ConditionKey::Speaker(rest.to_string()));
        }
        Err(Error::Parameter(format!(
            "unrecognized condition key {s:?} (expected 'global', 'defi:<severity>' \
             or 'spk:<id>')"
        )))
    }
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionKey::Global => write!(f, "global"),
            ConditionKey::Deficiency(sev) => write!(f, "defi:{sev}"),
            ConditionKey::Speaker(id) => write!(f, "spk:{id}"),
        }
    }
}

impl Serialize for ConditionKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConditionKey {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ConditionKey::parse(&s).map_err(serde::de::Error::custom)
    }
}

// ── parameters ───────────────────────────────────────────────────────────

/// Multiplicative-gain parameters: one pre-sigmoid gain per hidden unit.
#[derive(Debug, Clone)]
pub struct LhucParams {
    pub r: DiffArray,
}

impl LhucParams {
    pub fn identity(width: usize) -> Self {
        Self { r: DiffArray::zeros(vec![width]) }
    }
}

/// Additive-bias parameters: one offset per hidden unit.
#[derive(Debug, Clone)]
pub struct HubParams {
    pub r: DiffArray,
}

impl HubParams {
    pub fn identity(width: usize) -> Self {
        Self { r: DiffArray::zeros(vec![width]) }
    }
}

/// Residual bottleneck parameters.
///
/// `p_down` is `[k, m]`, `p_up` is `[m, k]`; both are applied as `x · Wᵀ`.
/// At initialization `p_up` and `ln_beta` are zero and `ln_gamma` one, so
/// the block is an exact identity. `p_down` must start non-zero — with both
/// projections at zero the gradient path through the bottleneck never opens
/// — so it is drawn Xavier-uniform from a seed derived from the entry key.
#[derive(Debug, Clone)]
pub struct RabParams {
    pub p_down: DiffArray,
    pub p_up: DiffArray,
    pub ln_gamma: DiffArray,
    pub ln_beta: DiffArray,
}

impl RabParams {
    pub fn identity(width: usize, bottleneck_k: usize, seed: u64) -> Result<Self> {
        if width == 0 || bottleneck_k == 0 {
            return Err(Error::Parameter(
                "adapter width and bottleneck must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (width + bottleneck_k) as f64).sqrt();
        let down: Vec<f64> = (0..bottleneck_k * width)
            .map(|_| rng.gen_range(-a..a))
            .collect();
        Ok(Self {
            p_down: DiffArray::new(vec![bottleneck_k, width], down)?,
            p_up: DiffArray::zeros(vec![width, bottleneck_k]),
            ln_gamma: DiffArray::vector(vec![1.0; width]),
            ln_beta: DiffArray::zeros(vec![width]),
        })
    }
}

/// Parameter set of one bank entry.
#[derive(Debug, Clone)]
pub enum AdapterParams {
    Lhuc(LhucParams),
    Hub(HubParams),
    Rab(RabParams),
}

impl AdapterParams {
    /// Hidden width `m` the parameters expect.
    pub fn width(&self) -> usize {
        match self {
            AdapterParams::Lhuc(p) => p.r.numel(),
            AdapterParams::Hub(p) => p.r.numel(),
            AdapterParams::Rab(p) => p.p_down.shape()[1],
        }
    }

    /// Total trainable scalar count (LHUC/HUB: `m`; RAB: `2km + 2m`).
    pub fn n_params(&self) -> usize {
        self.fields().iter().map(|(_, a)| a.numel()).sum()
    }

    pub fn architecture_tag(&self) -> &'static str {
        match self {
            AdapterParams::Lhuc(_) => "lhuc",
            AdapterParams::Hub(_) => "hub",
            AdapterParams::Rab(_) => "rab",
        }
    }

    /// Named views of every parameter array, in a stable order.
    pub fn fields(&self) -> Vec<(&'static str, &DiffArray)> {
        match self {
            AdapterParams::Lhuc(p) => vec![("r", &p.r)],
            AdapterParams::Hub(p) => vec![("r", &p.r)],
            AdapterParams::Rab(p) => vec![
                ("p_down", &p.p_down),
                ("p_up", &p.p_up),
                ("ln_gamma", &p.ln_gamma),
                ("ln_beta", &p.ln_beta),
            ],
        }
    }

    pub fn field(&self, name: &str) -> Option<&DiffArray> {
        self.fields().into_iter().find(|(n, _)| *n == name).map(|(_, a)| a)
    }

    pub fn field_mut(&mut self, name: &str) -> Option<&mut DiffArray> {
        match (self, name) {
            (AdapterParams::Lhuc(p), "r") => Some(&mut p.r),
            (AdapterParams::Hub(p), "r") => Some(&mut p.r),
            (AdapterParams::Rab(p), "p_down") => Some(&mut p.p_down),
            (AdapterParams::Rab(p), "p_up") => Some(&mut p.p_up),
            (AdapterParams::Rab(p), "ln_gamma") => Some(&mut p.ln_gamma),
            (AdapterParams::Rab(p), "ln_beta") => Some(&mut p.ln_beta),
            _ => None,
        }
    }
}

// ── bank ─────────────────────────────────────────────────────────────────

/// One stored adapter: its insertion point and parameters.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub point: InsertionPoint,
    pub params: AdapterParams,
}

/// Label-indexed storage for every adapter entry of one spec.
#[derive(Debug, Clone)]
pub struct AdapterBank {
    spec: AdapterSpec,
    seed: u64,
    entries: BTreeMap<ConditionKey, BankEntry>,
}

impl AdapterBank {
    pub fn new(spec: AdapterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, seed, entries: BTreeMap::new() })
    }

    pub(crate) fn from_parts(
        spec: AdapterSpec,
        seed: u64,
        entries: BTreeMap<ConditionKey, BankEntry>,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, seed, entries })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub(crate) fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ConditionKey> {
        self.entries.keys()
    }

    pub fn entry(&self, key: &ConditionKey) -> Option<&BankEntry> {
        self.entries.get(key)
    }

    pub fn entry_mut(&mut self, key: &ConditionKey) -> Option<&mut BankEntry> {
        self.entries.get_mut(key)
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (&ConditionKey, &BankEntry)> {
        self.entries.iter()
    }

    pub fn remove_entry(&mut self, key: &ConditionKey) -> Option<BankEntry> {
        self.entries.remove(key)
    }

    /// Total trainable scalar count across all entries.
    pub fn n_params(&self) -> usize {
        self.entries.values().map(|e| e.params.n_params()).sum()
    }

    /// Create an identity-initialized entry for `key` at hidden width
    /// `width`. The insertion point and architecture follow from the spec
    /// and the key's role (deficiency keys go to the cascade's deficiency
    /// point, speaker keys to its speaker point).
    pub fn create_entry(&mut self, key: ConditionKey, width: usize) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Err(Error::Usage(format!(
                "adapter entry '{key}' already exists"
            )));
        }
        self.check_key_granularity(&key)?;
        let point = self.point_for(&key);
        let params = match self.spec.architecture {
            AdapterArchitecture::Lhuc => {
                AdapterParams::Lhuc(LhucParams::identity(width))
            }
            AdapterArchitecture::Hub => AdapterParams::Hub(HubParams::identity(width)),
            AdapterArchitecture::Rab | AdapterArchitecture::StructuredRab => {
                let k = self.spec.bottleneck_k.expect("validated: RAB carries k");
                let entry_seed = derive_seed(self.seed, &format!("adapter:{key}"));
                AdapterParams::Rab(RabParams::identity(width, k, entry_seed)?)
            }
        };
        self.entries.insert(key, BankEntry { point, params });
        Ok(())
    }

    fn check_key_granularity(&self, key: &ConditionKey) -> Result<()> {
        let ok = match self.spec.label_granularity {
            LabelGranularity::Global => matches!(key, ConditionKey::Global),
            LabelGranularity::Deficiency => matches!(key, ConditionKey::Deficiency(_)),
            LabelGranularity::Speaker => matches!(key, ConditionKey::Speaker(_)),
            LabelGranularity::SpeakerPlusDeficiency => !matches!(key, ConditionKey::Global),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "key '{key}' does not fit label granularity {:?}",
                self.spec.label_granularity
            )))
        }
    }

    fn point_for(&self, key: &ConditionKey) -> InsertionPoint {
        match self.spec.positions {
            AdapterPositions::Single(p) => p,
            AdapterPositions::Cascade { deficiency, speaker } => match key {
                ConditionKey::Deficiency(_) => deficiency,
                _ => speaker,
            },
        }
    }

    /// The keys this bank needs to serve one (speaker, severity) pair, in
    /// application order (deficiency strictly before speaker).
    pub fn required_keys(&self, speaker: &str, deficiency: Severity) -> Vec<ConditionKey> {
        match self.spec.label_granularity {
            LabelGranularity::Global => vec![ConditionKey::Global],
            LabelGranularity::Deficiency => vec![ConditionKey::Deficiency(deficiency)],
            LabelGranularity::Speaker => vec![ConditionKey::Speaker(speaker.to_string())],
            LabelGranularity::SpeakerPlusDeficiency => vec![
                ConditionKey::Deficiency(deficiency),
                ConditionKey::Speaker(speaker.to_string()),
            ],
        }
    }

    /// Build the ordered adapter stack for one (speaker, severity) pair.
    ///
    /// Fails with a resolution error naming the first absent key; callers
    /// handling unseen speakers must [`AdapterBank::create_entry`] first.
    pub fn resolve(&self, speaker: &str, deficiency: Severity) -> Result<AdapterStack> {
        let mut entries = Vec::new();
        for key in self.required_keys(speaker, deficiency) {
            let entry = self.entries.get(&key).ok_or_else(|| {
                Error::Resolution(format!(
                    "no adapter entry for key '{key}'; create it before resolving"
                ))
            })?;
            entries.push(StackEntry {
                key: key.clone(),
                point: entry.point,
                params: entry.params.clone(),
                dropout_p: self.spec.dropout_p,
            });
        }
        Ok(AdapterStack { entries })
    }

    /// Build a stack from an explicit key list, in the order given. Used by
    /// staged training, where early stages apply only the entries that
    /// exist so far.
    pub fn resolve_keys(&self, keys: &[ConditionKey]) -> Result<AdapterStack> {
        let mut entries = Vec::new();
        for key in keys {
            let entry = self.entries.get(key).ok_or_else(|| {
                Error::Resolution(format!(
                    "no adapter entry for key '{key}'; create it before resolving"
                ))
            })?;
            entries.push(StackEntry {
                key: key.clone(),
                point: entry.point,
                params: entry.params.clone(),
                dropout_p: self.spec.dropout_p,
            });
        }
        Ok(AdapterStack { entries })
    }

    /// Names of every adapter parameter: `adapter.<key>.<field>`, entries in
    /// key order, fields in their stable per-architecture order.
    pub fn named_parameters(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (key, entry) in &self.entries {
            for (field, _) in entry.params.fields() {
                names.push(format!("adapter.{key}.{field}"));
            }
        }
        names
    }

    /// Look up a parameter array by its `adapter.<key>.<field>` name.
    pub fn param(&self, name: &str) -> Option<&DiffArray> {
        let (key, field) = Self::split_name(name)?;
        self.entries.get(&key).and_then(|e| e.params.field(field))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut DiffArray> {
        let (key, field) = Self::split_name(name)?;
        self.entries
            .get_mut(&key)
            .and_then(|e| e.params.field_mut(field))
    }

    fn split_name(name: &str) -> Option<(ConditionKey, &str)> {
        let rest = name.strip_prefix("adapter.")?;
        let (key_str, field) = rest.rsplit_once('.')?;
        ConditionKey::parse(key_str).ok().map(|key| (key, field))
    }

    /// Content digest over every entry, in key order.
    pub fn digest(&self) -> String {
        digest_params(
            self.entries
                .iter()
                .flat_map(|(_, entry)| entry.params.fields())
                .map(|(name, array)| (name, array)),
        )
    }

    /// Content digest of a single entry, for stage-isolation checks.
    pub fn entry_digest(&self, key: &ConditionKey) -> Option<String> {
        self.entries
            .get(key)
            .map(|entry| digest_params(entry.params.fields().into_iter()))
    }
}

// ── resolved stack ───────────────────────────────────────────────────────

/// One resolved adapter, ready to apply during `encode`.
#[derive(Debug, Clone)]
pub struct StackEntry {
    pub key: ConditionKey,
    pub point: InsertionPoint,
    pub params: AdapterParams,
    pub dropout_p: f64,
}

/// Ordered list of resolved adapters. Entries sharing an insertion point
/// apply in stack order (deficiency before speaker for the cascade).
#[derive(Debug, Clone, Default)]
pub struct AdapterStack {
    entries: Vec<StackEntry>,
}

impl AdapterStack {
    /// The no-adapter stack.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[StackEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ── tape-level application ───────────────────────────────────────────────

/// Multiplicative gains: `2·σ(r) ⊙ h`, the gain vector broadcast over rows.
pub fn apply_lhuc(tape: &mut Tape, h: ValueId, r: ValueId) -> Result<ValueId> {
    let sig = tape.sigmoid(r)?;
    let gains = tape.scale(sig, 2.0)?;
    tape.mul_row(h, gains)
}

/// Additive biases: `r + h`, broadcast over rows.
pub fn apply_hub(tape: &mut Tape, h: ValueId, r: ValueId) -> Result<ValueId> {
    tape.add_row(h, r)
}

/// Tape handles for one staged RAB parameter set.
#[derive(Debug, Clone, Copy)]
pub struct RabIds {
    pub p_down: ValueId,
    pub p_up: ValueId,
    pub ln_gamma: ValueId,
    pub ln_beta: ValueId,
}

/// Residual bottleneck: `h + LN(Dropout(ζ(h·P_downᵀ)·P_upᵀ))` per frame.
pub fn apply_rab<R: Rng>(
    tape: &mut Tape,
    h: ValueId,
    ids: &RabIds,
    dropout_p: f64,
    ln_eps: f64,
    training: bool,
    rng: &mut R,
) -> Result<ValueId> {
    let down = tape.matmul_nt(h, ids.p_down)?;
    let act = tape.gelu(down)?;
    let up = tape.matmul_nt(act, ids.p_up)?;
    let dropped = tape.dropout(up, dropout_p, rng, training)?;
    let normed = tape.layernorm(dropped, ids.ln_gamma, ids.ln_beta, ln_eps)?;
    tape.add(h, normed)
}

/// Two-stage cascade: deficiency-conditioned RAB strictly first, then the
/// speaker-conditioned RAB on its output.
#[allow(clippy::too_many_arguments)]
pub fn apply_structured<R: Rng>(
    tape: &mut Tape,
    h: ValueId,
    deficiency: &RabIds,
    speaker: &RabIds,
    dropout_p: f64,
    ln_eps: f64,
    training: bool,
    rng: &mut R,
) -> Result<ValueId> {
    let after_deficiency =
        apply_rab(tape, h, deficiency, dropout_p, ln_eps, training, rng)?;
    apply_rab(tape, after_deficiency, speaker, dropout_p, ln_eps, training, rng)
}
