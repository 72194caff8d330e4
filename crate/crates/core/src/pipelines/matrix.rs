//! The experiment matrix: train one baseline, then run every adapter
//! variant through adaptation and scoring, one row per system.
//!
//! The row set pairs each adapter granularity with the architecture that
//! suits its sharing level — a global gain adapter, per-speaker and
//! per-severity bottleneck adapters, and the two-level cascade — and runs
//! each through test-time adaptation both from the bare baseline and (where
//! applicable) from its adaptively fine-tuned counterpart, plus two
//! reference-supervised upper bounds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    adaptive_finetune, decode_utterances, finetune_baseline, score_decodes, test_time_adapt,
    Decode, SupervisionMode, TrainConfig, TrainLog,
};
use crate::adapters::{AdapterSpec, LabelGranularity};
use crate::backbone::{BackboneConfig, BackboneModel, InsertionPoint};
use crate::corpus::{Corpus, Severity};
use crate::error::{Error, Result};
use crate::eval::{aggregate, Grouping, WerTable};
use crate::rng::derive_seed;

/// Seeds and per-stage hyperparameters for one matrix run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    /// Seed of the randomly initialized backbone the baseline starts from.
    pub model_seed: u64,
    pub baseline: TrainConfig,
    pub aft: TrainConfig,
    pub tta: TrainConfig,
}

impl MatrixConfig {
    /// Derive every stage seed from one master seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            model_seed: derive_seed(seed, "matrix:model"),
            baseline: TrainConfig::baseline(derive_seed(seed, "matrix:baseline")),
            aft: TrainConfig::aft(derive_seed(seed, "matrix:aft")),
            tta: TrainConfig::tta(derive_seed(seed, "matrix:tta")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.baseline.validate()?;
        self.aft.validate()?;
        self.tta.validate()
    }
}

/// One scored system of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system_id: String,
    /// Adapter family, `-` for the bare baseline.
    pub adapt_arch: String,
    /// Sharing granularity of the adapters, `-` for the baseline.
    pub adapt_label: String,
    /// Whether adaptation started from the adaptively fine-tuned model.
    pub aft: bool,
    /// `gt`, `pseudo`, or `-` when nothing was adapted.
    pub supervision: String,
    pub wer_overall: f64,
    /// Per-severity errors; absent when the test set lacks the group.
    pub wer_vl: Option<f64>,
    pub wer_l: Option<f64>,
    pub wer_m: Option<f64>,
    pub wer_h: Option<f64>,
    pub wer_seen: Option<f64>,
    pub wer_unseen: Option<f64>,
    pub n_adapter_params: usize,
}

/// Every system's row, decodes, and training logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResults {
    pub rows: Vec<SystemRow>,
    /// Final test decodes per system, for significance testing between
    /// systems.
    pub decodes: BTreeMap<String, Vec<Decode>>,
    /// Training logs per system (the baseline's under `"baseline"`).
    pub logs: BTreeMap<String, TrainLog>,
}

impl MatrixResults {
    pub fn row(&self, system_id: &str) -> Option<&SystemRow> {
        self.rows.iter().find(|r| r.system_id == system_id)
    }

    /// Render the table as CSV with one line per system.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "system_id,adapt_arch,adapt_label,aft,supervision,wer_overall,\
             wer_VL,wer_L,wer_M,wer_H,wer_seen,wer_unseen,n_adapter_params\n",
        );
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.2},{},{},{},{},{},{},{}\n",
                r.system_id,
                r.adapt_arch,
                r.adapt_label,
                r.aft,
                r.supervision,
                r.wer_overall,
                cell(r.wer_vl),
                cell(r.wer_l),
                cell(r.wer_m),
                cell(r.wer_h),
                cell(r.wer_seen),
                cell(r.wer_unseen),
                r.n_adapter_params,
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The default spec set: every granularity paired with a suitable family.
///
/// Early layers carry the acoustic degradation, later layers the speaker's
/// rendering of it, so the severity-shared adapters sit right after the
/// feature encoder and the per-speaker adapters after the last block. The
/// bottleneck scales with the model so small test configurations stay
/// valid.
pub fn default_system_specs(config: &BackboneConfig) -> Vec<AdapterSpec> {
    let encoder = InsertionPoint::AfterCnnEncoder;
    let last_block = InsertionPoint::InTransformerBlock {
        block_index: config.n_blocks.saturating_sub(1),
    };
    let k = (config.d_model / 3).max(2);
    vec![
        AdapterSpec::lhuc(encoder, LabelGranularity::Global),
        AdapterSpec::rab(last_block, LabelGranularity::Speaker, k, 0.1),
        AdapterSpec::hub(encoder, LabelGranularity::Deficiency),
        AdapterSpec::structured(encoder, last_block, k, 0.1),
    ]
}

fn granularity_name(g: LabelGranularity) -> &'static str {
    match g {
        LabelGranularity::Global => "global",
        LabelGranularity::Deficiency => "deficiency",
        LabelGranularity::Speaker => "speaker",
        LabelGranularity::SpeakerPlusDeficiency => "speaker+deficiency",
    }
}

fn spec_for(
    specs: &[AdapterSpec],
    granularity: LabelGranularity,
) -> Result<&AdapterSpec> {
    let mut found = None;
    for spec in specs.iter().filter(|s| s.label_granularity == granularity) {
        if found.is_some() {
            return Err(Error::Config(format!(
                "experiment matrix got two specs with {} granularity",
                granularity_name(granularity)
            )));
        }
        found = Some(spec);
    }
    found.ok_or_else(|| {
        Error::Config(format!(
            "experiment matrix needs a spec with {} granularity",
            granularity_name(granularity)
        ))
    })
}

fn wer_of(table: &WerTable, label: &str) -> Option<f64> {
    table.group(label).map(|g| g.wer_percent)
}

fn build_row(
    system_id: &str,
    spec: Option<&AdapterSpec>,
    aft: bool,
    supervision: &str,
    decodes: &[Decode],
    n_adapter_params: usize,
) -> Result<SystemRow> {
    let scores = score_decodes(decodes)?;
    let overall = aggregate(&scores, Grouping::Overall)?;
    let by_severity = aggregate(&scores, Grouping::Severity)?;
    let by_seen = aggregate(&scores, Grouping::SeenUnseen)?;
    Ok(SystemRow {
        system_id: system_id.to_string(),
        adapt_arch: spec
            .map(|s| s.architecture.as_str().to_string())
            .unwrap_or_else(|| "-".into()),
        adapt_label: spec
            .map(|s| granularity_name(s.label_granularity).to_string())
            .unwrap_or_else(|| "-".into()),
        aft,
        supervision: supervision.to_string(),
        wer_overall: wer_of(&overall, "overall")
            .ok_or_else(|| Error::Usage("no test utterances to score".into()))?,
        wer_vl: wer_of(&by_severity, "VL"),
        wer_l: wer_of(&by_severity, "L"),
        wer_m: wer_of(&by_severity, "M"),
        wer_h: wer_of(&by_severity, "H"),
        wer_seen: wer_of(&by_seen, "seen"),
        wer_unseen: wer_of(&by_seen, "unseen"),
        n_adapter_params,
    })
}

/// Run the full system matrix on one corpus:
///
/// 1. `baseline` — the fine-tuned backbone decoded as-is.
/// 2. One test-time-adapted system per granularity, from the baseline.
/// 3. For the per-speaker, per-severity, and cascade specs, the same
///    adaptation from the adaptively fine-tuned model.
/// 4. Two reference-supervised upper bounds: the global adapter from the
///    baseline and the cascade from its fine-tuned model.
///
/// `specs` must contain exactly one spec per granularity (the bare-baseline
/// row is always present). `labels` maps every test speaker to the severity
/// used for adaptation — the classifier's predictions in deployment, the
/// manifest's truth for oracle runs; scoring always groups by the
/// manifest's truth.
pub fn run_experiment_matrix(
    corpus: &Corpus,
    model_config: &BackboneConfig,
    specs: &[AdapterSpec],
    labels: &BTreeMap<String, Severity>,
    cfg: &MatrixConfig,
) -> Result<MatrixResults> {
    cfg.validate()?;
    let global = spec_for(specs, LabelGranularity::Global)?;
    let speaker = spec_for(specs, LabelGranularity::Speaker)?;
    let deficiency = spec_for(specs, LabelGranularity::Deficiency)?;
    let structured = spec_for(specs, LabelGranularity::SpeakerPlusDeficiency)?;

    let mut rows = Vec::new();
    let mut decodes = BTreeMap::new();
    let mut logs = BTreeMap::new();

    // The shared baseline everything else starts from.
    let mut base_model = BackboneModel::new(model_config.clone(), cfg.model_seed)?;
    let base_log = finetune_baseline(&mut base_model, corpus, &cfg.baseline)?;
    logs.insert("baseline".to_string(), base_log);
    let base_decodes = decode_utterances(&base_model, None, None, corpus.test.iter())?;
    rows.push(build_row("baseline", None, false, "-", &base_decodes, 0)?);
    decodes.insert("baseline".to_string(), base_decodes);

    // Adaptive fine-tuning products, one per granularity that gets rows.
    let mut aft_products: BTreeMap<&str, (BackboneModel, crate::adapters::AdapterBank)> =
        BTreeMap::new();
    for (name, spec) in [
        ("speaker", speaker),
        ("deficiency", deficiency),
        ("structured", structured),
    ] {
        let mut model = base_model.clone();
        let (bank, log) = adaptive_finetune(&mut model, spec, corpus, &cfg.aft)?;
        logs.insert(format!("{name}_aft"), log);
        aft_products.insert(name, (model, bank));
    }

    // Every test-time-adapted system, in presentation order.
    struct Run<'a> {
        system_id: &'a str,
        spec: &'a AdapterSpec,
        from_aft: Option<&'a str>,
        supervision: SupervisionMode,
    }
    let runs = [
        Run {
            system_id: "global_tta",
            spec: global,
            from_aft: None,
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "global_tta_gt",
            spec: global,
            from_aft: None,
            supervision: SupervisionMode::GroundTruth,
        },
        Run {
            system_id: "speaker_tta",
            spec: speaker,
            from_aft: None,
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "speaker_aft_tta",
            spec: speaker,
            from_aft: Some("speaker"),
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "deficiency_tta",
            spec: deficiency,
            from_aft: None,
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "deficiency_aft_tta",
            spec: deficiency,
            from_aft: Some("deficiency"),
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "structured_tta",
            spec: structured,
            from_aft: None,
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "structured_aft_tta",
            spec: structured,
            from_aft: Some("structured"),
            supervision: SupervisionMode::PseudoLabel,
        },
        Run {
            system_id: "structured_aft_tta_gt",
            spec: structured,
            from_aft: Some("structured"),
            supervision: SupervisionMode::GroundTruth,
        },
    ];

    for run in runs {
        let (model, bank) = match run.from_aft {
            Some(name) => {
                let (m, b) = aft_products.get(name).expect("filled above");
                (m, Some(b))
            }
            None => (&base_model, None),
        };
        let outcome = test_time_adapt(
            model,
            bank,
            run.spec,
            corpus,
            run.supervision,
            labels,
            &cfg.tta,
        )?;
        rows.push(build_row(
            run.system_id,
            Some(run.spec),
            run.from_aft.is_some(),
            run.supervision.as_str(),
            &outcome.decodes,
            outcome.bank.n_params(),
        )?);
        logs.insert(run.system_id.to_string(), outcome.log);
        decodes.insert(run.system_id.to_string(), outcome.decodes);
    }

    Ok(MatrixResults { rows, decodes, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ConvLayer;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_corpus() -> Corpus {
        let config = CorpusConfig {
            n_train_speakers: 4,
            n_test_speakers: 4,
            severity_distribution: [1, 1, 1, 1],
            vocab_size: 8,
            train_utts_per_speaker: 3,
            test_utts_per_speaker: 2,
            token_duration_s: 0.03,
            transcript_len_min: 1,
            transcript_len_max: 2,
            rng_seed: 11,
            ..CorpusConfig::default()
        };
        generate_corpus(&config).expect("tiny corpus generates")
    }

    fn tiny_backbone_config() -> BackboneConfig {
        BackboneConfig {
            conv_layers: vec![ConvLayer { channels: 4, kernel: 16, stride: 8 }],
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 9,
            dropout_p: 0.1,
            ln_eps: 1e-5,
        }
    }

    fn quick_matrix_cfg(seed: u64) -> MatrixConfig {
        let mut cfg = MatrixConfig::with_seed(seed);
        cfg.baseline.epochs_per_phase = vec![1];
        cfg.baseline.heldout_cap = 0;
        cfg.aft.epochs_per_phase = vec![1, 1];
        cfg.aft.heldout_cap = 0;
        cfg.tta.epochs_per_phase = vec![1, 1];
        cfg.tta.heldout_cap = 0;
        cfg
    }

    fn true_labels(corpus: &Corpus) -> BTreeMap<String, Severity> {
        corpus
            .test_speakers()
            .map(|p| (p.speaker_id.clone(), p.severity))
            .collect()
    }

    #[test]
    fn matrix_emits_every_system_and_is_deterministic() {
        let corpus = tiny_corpus();
        let model_config = tiny_backbone_config();
        let specs = default_system_specs(&model_config);
        let labels = true_labels(&corpus);
        let cfg = quick_matrix_cfg(17);

        let results = run_experiment_matrix(&corpus, &model_config, &specs, &labels, &cfg)
            .expect("matrix runs");

        let ids: Vec<&str> = results.rows.iter().map(|r| r.system_id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "baseline",
                "global_tta",
                "global_tta_gt",
                "speaker_tta",
                "speaker_aft_tta",
                "deficiency_tta",
                "deficiency_aft_tta",
                "structured_tta",
                "structured_aft_tta",
                "structured_aft_tta_gt",
            ],
            "one baseline, per-granularity rows with and without fine-tuning, two upper bounds"
        );

        let base = results.row("baseline").expect("present");
        assert!(!base.aft);
        assert_eq!((base.adapt_arch.as_str(), base.supervision.as_str()), ("-", "-"));
        assert_eq!(base.n_adapter_params, 0);

        let aft_ids: Vec<&str> = results
            .rows
            .iter()
            .filter(|r| r.aft)
            .map(|r| r.system_id.as_str())
            .collect();
        assert_eq!(
            aft_ids,
            ["speaker_aft_tta", "deficiency_aft_tta", "structured_aft_tta", "structured_aft_tta_gt"]
        );
        let gt_ids: Vec<&str> = results
            .rows
            .iter()
            .filter(|r| r.supervision == "gt")
            .map(|r| r.system_id.as_str())
            .collect();
        assert_eq!(gt_ids, ["global_tta_gt", "structured_aft_tta_gt"]);
        for row in &results.rows[1..] {
            assert!(row.n_adapter_params > 0, "{} carries adapters", row.system_id);
        }

        // The baseline row is exactly what fine-tuning and decoding by hand
        // produces.
        let mut by_hand = BackboneModel::new(model_config.clone(), cfg.model_seed).expect("model");
        super::finetune_baseline(&mut by_hand, &corpus, &cfg.baseline).expect("baseline");
        let hand_decodes =
            decode_utterances(&by_hand, None, None, corpus.test.iter()).expect("decodes");
        assert_eq!(results.decodes["baseline"], hand_decodes);

        // CSV: exact header, one line per row, 13 cells each.
        let csv = results.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some(
                "system_id,adapt_arch,adapt_label,aft,supervision,wer_overall,\
                 wer_VL,wer_L,wer_M,wer_H,wer_seen,wer_unseen,n_adapter_params"
            )
        );
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), results.rows.len());
        assert!(body.iter().all(|l| l.split(',').count() == 13));

        // Bit-identical on a rerun.
        let again = run_experiment_matrix(&corpus, &model_config, &specs, &labels, &cfg)
            .expect("matrix reruns");
        assert_eq!(results, again);
    }

    #[test]
    fn matrix_requires_one_spec_per_granularity() {
        let corpus = tiny_corpus();
        let model_config = tiny_backbone_config();
        let labels = true_labels(&corpus);
        let cfg = quick_matrix_cfg(17);

        let mut missing = default_system_specs(&model_config);
        missing.retain(|s| s.label_granularity != LabelGranularity::Deficiency);
        let err = run_experiment_matrix(&corpus, &model_config, &missing, &labels, &cfg)
            .expect_err("missing granularity must fail");
        assert!(matches!(err, Error::Config(m) if m.contains("deficiency")));

        let mut doubled = default_system_specs(&model_config);
        let dup = doubled[0].clone();
        doubled.push(dup);
        let err = run_experiment_matrix(&corpus, &model_config, &doubled, &labels, &cfg)
            .expect_err("duplicate granularity must fail");
        assert!(matches!(err, Error::Config(m) if m.contains("two specs")));
    }
}
