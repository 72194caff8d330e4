//! Word-error-rate scoring with subgroup aggregation and a matched-pairs
//! significance test.
//!
//! An utterance is scored by minimal-edit alignment of reference and
//! hypothesis token sequences; scores aggregate into WER tables grouped
//! overall, by severity, by seen/unseen vocabulary, or by speaker. Two
//! systems scored on the same utterances are compared with the matched-pairs
//! test: per-utterance error-count differences, a z statistic under the
//! normal approximation, and a two-sided p-value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Severity;
use crate::ctc::TokenSequence;
use crate::diffcore::erfc;
use crate::error::{Error, Result};

/// Edit-alignment outcome for one utterance, plus the labels used by the
/// subgroup reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UttScore {
    pub utt_id: String,
    pub speaker_id: String,
    pub n_ref_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub severity: Severity,
    /// True when every reference word was in the training vocabulary.
    pub seen_flag: bool,
}

impl UttScore {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// WER as a percentage rounded to two decimals.
    pub fn wer_percent(&self) -> f64 {
        round2(100.0 * self.errors() as f64 / self.n_ref_words as f64)
    }
}

/// Score one utterance: minimal-edit alignment with unit costs, preferring
/// substitutions over insertion+deletion pairs when decompositions tie.
pub fn score(
    utt_id: impl Into<String>,
    speaker_id: impl Into<String>,
    severity: Severity,
    seen_flag: bool,
    reference: &TokenSequence,
    hypothesis: &TokenSequence,
) -> Result<UttScore> {
    if reference.is_empty() {
        return Err(Error::Usage(
            "cannot score against an empty reference".into(),
        ));
    }
    let (substitutions, deletions, insertions) = align(reference.ids(), hypothesis.ids());
    Ok(UttScore {
        utt_id: utt_id.into(),
        speaker_id: speaker_id.into(),
        n_ref_words: reference.len(),
        substitutions,
        deletions,
        insertions,
        severity,
        seen_flag,
    })
}

#[derive(Clone, Copy, Default)]
struct Cell {
    cost: usize,
    subs: usize,
    dels: usize,
    ins: usize,
}

/// Levenshtein DP carrying the error decomposition through each cell. At
/// equal cost the diagonal move wins, so a lone substitution is reported
/// rather than an insertion+deletion pair explaining the same mismatch.
fn align(reference: &[usize], hypothesis: &[usize]) -> (usize, usize, usize) {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![Cell::default(); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        dp[idx(i, 0)] = Cell { cost: i, dels: i, ..Cell::default() };
    }
    for j in 1..=m {
        dp[idx(0, j)] = Cell { cost: j, ins: j, ..Cell::default() };
    }
    for i in 1..=n {
        for j in 1..=m {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = dp[idx(i - 1, j - 1)];
            let mut best = Cell {
                cost: diag.cost + mismatch,
                subs: diag.subs + mismatch,
                ..diag
            };
            let up = dp[idx(i - 1, j)];
            if up.cost + 1 < best.cost {
                best = Cell { cost: up.cost + 1, dels: up.dels + 1, ..up };
            }
            let left = dp[idx(i, j - 1)];
            if left.cost + 1 < best.cost {
                best = Cell { cost: left.cost + 1, ins: left.ins + 1, ..left };
            }
            dp[idx(i, j)] = best;
        }
    }
    let last = dp[idx(n, m)];
    (last.subs, last.dels, last.ins)
}

/// How to partition utterance scores into WER rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Overall,
    Severity,
    SeenUnseen,
    Speaker,
}

/// One WER row: the group label plus pooled counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWer {
    pub label: String,
    pub n_utts: usize,
    pub n_ref_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Pooled WER `(S+D+I)/N_ref` as a percentage, two decimals.
    pub wer_percent: f64,
}

/// A WER table for one grouping. Groups with no utterances are absent
/// rather than reported as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerTable {
    pub grouping: Grouping,
    pub groups: Vec<GroupWer>,
}

impl WerTable {
    pub fn group(&self, label: &str) -> Option<&GroupWer> {
        self.groups.iter().find(|g| g.label == label)
    }
}

/// Pool scores into a WER table under `grouping`. Row order is fixed per
/// grouping (most degraded severity first, unseen before seen, speakers
/// sorted), so the result is independent of input order.
pub fn aggregate(scores: &[UttScore], grouping: Grouping) -> Result<WerTable> {
    if scores.is_empty() {
        return Err(Error::Usage("no utterance scores to aggregate".into()));
    }
    let labels: Vec<String> = match grouping {
        Grouping::Overall => vec!["overall".to_string()],
        Grouping::Severity => Severity::ALL.iter().map(|s| s.as_str().to_string()).collect(),
        Grouping::SeenUnseen => vec!["unseen".to_string(), "seen".to_string()],
        Grouping::Speaker => {
            let set: BTreeMap<&str, ()> =
                scores.iter().map(|s| (s.speaker_id.as_str(), ())).collect();
            set.into_keys().map(String::from).collect()
        }
    };
    let label_of = |score: &UttScore| -> String {
        match grouping {
            Grouping::Overall => "overall".to_string(),
            Grouping::Severity => score.severity.as_str().to_string(),
            Grouping::SeenUnseen => {
                if score.seen_flag { "seen" } else { "unseen" }.to_string()
            }
            Grouping::Speaker => score.speaker_id.clone(),
        }
    };

    let mut groups = Vec::new();
    for label in labels {
        let members: Vec<&UttScore> =
            scores.iter().filter(|s| label_of(s) == label).collect();
        if members.is_empty() {
            continue;
        }
        let n_ref_words: usize = members.iter().map(|s| s.n_ref_words).sum();
        let substitutions: usize = members.iter().map(|s| s.substitutions).sum();
        let deletions: usize = members.iter().map(|s| s.deletions).sum();
        let insertions: usize = members.iter().map(|s| s.insertions).sum();
        let errors = substitutions + deletions + insertions;
        groups.push(GroupWer {
            label,
            n_utts: members.len(),
            n_ref_words,
            substitutions,
            deletions,
            insertions,
            wer_percent: round2(100.0 * errors as f64 / n_ref_words as f64),
        });
    }
    Ok(WerTable { grouping, groups })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Matched-pairs significance comparison of two systems, serialized as the
/// significance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub system_a: String,
    pub system_b: String,
    /// Number of paired segments (utterances).
    pub n: usize,
    pub z: f64,
    pub p: f64,
    pub alpha: f64,
    pub significant: bool,
    /// True when the difference variance was zero; `z` is reported as 0 and
    /// `p` as 1 in that case.
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Matched-pairs test over per-utterance error-count differences.
///
/// Segments are utterances, paired by `utt_id`; for each pair the statistic
/// uses `d_i = errors_A,i − errors_B,i`, `z = mean(d)·√n / stddev(d)` with
/// the sample (n−1) standard deviation, and a two-sided normal p-value.
/// Below 30 segments the normal approximation is shaky, so the report
/// carries a warning.
pub fn mapsswe(
    system_a: &str,
    scores_a: &[UttScore],
    system_b: &str,
    scores_b: &[UttScore],
    alpha: f64,
) -> Result<SignificanceReport> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Parameter(format!(
            "alpha {alpha} must lie strictly between 0 and 1"
        )));
    }
    let mut by_id: BTreeMap<&str, i64> = BTreeMap::new();
    for s in scores_b {
        if by_id.insert(&s.utt_id, s.errors() as i64).is_some() {
            return Err(Error::Usage(format!(
                "system '{system_b}' scores utterance '{}' twice",
                s.utt_id
            )));
        }
    }
    if scores_a.len() != by_id.len() {
        return Err(Error::Usage(format!(
            "systems score different utterance sets ({} vs {})",
            scores_a.len(),
            by_id.len()
        )));
    }
    let mut diffs = Vec::with_capacity(scores_a.len());
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for s in scores_a {
        if seen.insert(&s.utt_id, ()).is_some() {
            return Err(Error::Usage(format!(
                "system '{system_a}' scores utterance '{}' twice",
                s.utt_id
            )));
        }
        let b_errors = by_id.get(s.utt_id.as_str()).ok_or_else(|| {
            Error::Usage(format!(
                "utterance '{}' is scored by system '{system_a}' but not '{system_b}'",
                s.utt_id
            ))
        })?;
        diffs.push(s.errors() as i64 - b_errors);
    }
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "matched-pairs test needs at least 2 paired segments, got {n}"
        )));
    }

    let warning = (n < 30).then(|| {
        format!("only {n} paired segments; the normal approximation needs ≥ 30")
    });

    // Integer differences make the zero-variance check exact.
    let degenerate = diffs.iter().all(|&d| d == diffs[0]);
    if degenerate {
        return Ok(SignificanceReport {
            system_a: system_a.to_string(),
            system_b: system_b.to_string(),
            n,
            z: 0.0,
            p: 1.0,
            alpha,
            significant: false,
            degenerate: true,
            warning,
        });
    }

    let nf = n as f64;
    let mean = diffs.iter().map(|&d| d as f64).sum::<f64>() / nf;
    let var = diffs
        .iter()
        .map(|&d| {
            let r = d as f64 - mean;
            r * r
        })
        .sum::<f64>()
        / (nf - 1.0);
    let z = mean * nf.sqrt() / var.sqrt();
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(SignificanceReport {
        system_a: system_a.to_string(),
        system_b: system_b.to_string(),
        n,
        z,
        p,
        alpha,
        significant: p < alpha,
        degenerate: false,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).expect("valid tokens")
    }

    fn plain(utt_id: &str, errors: usize) -> UttScore {
        UttScore {
            utt_id: utt_id.to_string(),
            speaker_id: "S00".to_string(),
            n_ref_words: 4,
            substitutions: errors,
            deletions: 0,
            insertions: 0,
            severity: Severity::M,
            seen_flag: true,
        }
    }

    // ── score ────────────────────────────────────────────────────────────

    #[test]
    fn one_substitution_of_three() {
        let s = score("u0", "S00", Severity::M, true, &seq(&[1, 2, 3]), &seq(&[1, 9, 3]))
            .expect("score");
        assert_eq!(
            (s.substitutions, s.deletions, s.insertions),
            (1, 0, 0)
        );
        assert_eq!(s.n_ref_words, 3);
        assert!((s.wer_percent() - 33.33).abs() < 1e-12);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let s = score(
            "u0",
            "S00",
            Severity::M,
            true,
            &seq(&[1, 2, 3]),
            &TokenSequence::empty(),
        )
        .expect("score");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (0, 3, 0));
        assert_eq!(s.wer_percent(), 100.0);
    }

    #[test]
    fn empty_reference_is_a_usage_error() {
        let err = score("u0", "S00", Severity::M, true, &TokenSequence::empty(), &seq(&[1]))
            .expect_err("empty ref");
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn leading_insertion_costs_one() {
        let s = score("u0", "S00", Severity::M, true, &seq(&[1, 2]), &seq(&[2, 1, 2]))
            .expect("score");
        assert_eq!(s.errors(), 1);
        assert_eq!((s.substitutions, s.deletions, s.insertions), (0, 0, 1));
    }

    #[test]
    fn tie_break_prefers_substitutions_over_del_ins_pairs() {
        // [1,2] → [2,1] can be explained as two substitutions or as one
        // deletion plus one insertion; both cost 2, substitutions win.
        let s = score("u0", "S00", Severity::M, true, &seq(&[1, 2]), &seq(&[2, 1]))
            .expect("score");
        assert_eq!((s.substitutions, s.deletions, s.insertions), (2, 0, 0));
    }

    /// Plain min-cost edit distance with none of the decomposition
    /// bookkeeping — an independent oracle for the total.
    fn oracle_distance(a: &[usize], b: &[usize]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut row = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
                row[j] = sub.min(prev[j] + 1).min(row[j - 1] + 1);
            }
            prev = row;
        }
        prev[b.len()]
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for tok in 1..=3 {
                    let mut t = s.clone();
                    t.push(tok);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn distance_matches_brute_force_oracle_on_small_pairs() {
        // Every pair with |ref| ∈ 1..=4, |hyp| ∈ 0..=4 over a 3-symbol
        // alphabet, and a sparser sample of the longer 5..=6 sequences.
        let short = all_sequences(4);
        for r in short.iter().filter(|r| !r.is_empty()) {
            for h in &short {
                let s = score("u", "S", Severity::M, true, &seq(r), &seq(h)).expect("score");
                assert_eq!(
                    s.errors(),
                    oracle_distance(r, h),
                    "ref {r:?} hyp {h:?}"
                );
            }
        }
        let long: Vec<Vec<usize>> = all_sequences(6)
            .into_iter()
            .filter(|s| s.len() >= 5)
            .step_by(17)
            .collect();
        for r in &long {
            for h in long.iter().step_by(3) {
                let s = score("u", "S", Severity::M, true, &seq(r), &seq(h)).expect("score");
                assert_eq!(s.errors(), oracle_distance(r, h), "ref {r:?} hyp {h:?}");
            }
        }
    }

    // ── aggregate ────────────────────────────────────────────────────────

    fn labeled(
        utt_id: &str,
        speaker: &str,
        severity: Severity,
        seen: bool,
        errors: (usize, usize, usize),
        n_ref: usize,
    ) -> UttScore {
        UttScore {
            utt_id: utt_id.to_string(),
            speaker_id: speaker.to_string(),
            n_ref_words: n_ref,
            substitutions: errors.0,
            deletions: errors.1,
            insertions: errors.2,
            severity,
            seen_flag: seen,
        }
    }

    fn mixed_scores() -> Vec<UttScore> {
        vec![
            labeled("a_0", "S00", Severity::VL, true, (2, 1, 0), 5),
            labeled("a_1", "S00", Severity::VL, false, (1, 0, 1), 4),
            labeled("b_0", "S01", Severity::H, true, (0, 0, 0), 6),
            labeled("b_1", "S01", Severity::H, true, (1, 0, 0), 3),
            labeled("c_0", "S02", Severity::M, false, (0, 1, 0), 2),
        ]
    }

    #[test]
    fn single_utterance_overall_wer() {
        let scores = [labeled("u", "S00", Severity::L, true, (1, 0, 0), 3)];
        let table = aggregate(&scores, Grouping::Overall).expect("aggregate");
        assert_eq!(table.groups.len(), 1);
        let overall = table.group("overall").expect("row");
        assert_eq!(overall.wer_percent, 33.33);
        assert_eq!(overall.n_utts, 1);
    }

    #[test]
    fn groups_partition_the_overall_numerator() {
        let scores = mixed_scores();
        let overall = aggregate(&scores, Grouping::Overall).expect("table");
        let total = |t: &WerTable| -> usize {
            t.groups.iter().map(|g| g.substitutions + g.deletions + g.insertions).sum()
        };
        for grouping in [Grouping::Severity, Grouping::SeenUnseen, Grouping::Speaker] {
            let table = aggregate(&scores, grouping).expect("table");
            assert_eq!(total(&table), total(&overall), "{grouping:?}");
        }
    }

    #[test]
    fn aggregation_is_order_invariant_and_rows_are_fixed_order() {
        let scores = mixed_scores();
        let mut reversed = scores.clone();
        reversed.reverse();
        for grouping in
            [Grouping::Overall, Grouping::Severity, Grouping::SeenUnseen, Grouping::Speaker]
        {
            let a = aggregate(&scores, grouping).expect("table");
            let b = aggregate(&reversed, grouping).expect("table");
            assert_eq!(a, b, "{grouping:?}");
        }
        let severity = aggregate(&scores, Grouping::Severity).expect("table");
        let labels: Vec<&str> = severity.groups.iter().map(|g| g.label.as_str()).collect();
        assert_eq!(labels, ["VL", "M", "H"], "degraded-first, L absent");
        let speakers = aggregate(&scores, Grouping::Speaker).expect("table");
        let labels: Vec<&str> = speakers.groups.iter().map(|g| g.label.as_str()).collect();
        assert_eq!(labels, ["S00", "S01", "S02"]);
    }

    #[test]
    fn empty_groups_are_absent_not_zero() {
        let scores = [labeled("u", "S00", Severity::H, true, (0, 1, 0), 4)];
        let table = aggregate(&scores, Grouping::SeenUnseen).expect("table");
        assert!(table.group("unseen").is_none());
        assert_eq!(table.group("seen").expect("row").wer_percent, 25.0);
        let table = aggregate(&scores, Grouping::Severity).expect("table");
        assert_eq!(table.groups.len(), 1);
        assert_eq!(table.groups[0].label, "H");
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(matches!(
            aggregate(&[], Grouping::Overall),
            Err(Error::Usage(_))
        ));
    }

    // ── matched-pairs test ───────────────────────────────────────────────

    #[test]
    fn identical_systems_are_never_significant() {
        let scores: Vec<UttScore> =
            (0..40).map(|i| plain(&format!("u{i}"), i % 3)).collect();
        let rep = mapsswe("A", &scores, "A'", &scores, 0.05).expect("test");
        assert_eq!(rep.z, 0.0);
        assert_eq!(rep.p, 1.0);
        assert!(!rep.significant);
        assert!(rep.degenerate);
        assert!(rep.warning.is_none(), "n = 40 needs no warning");
    }

    #[test]
    fn hundred_one_segment_example_matches_hand_computed_z() {
        // d = [+1]×100 ++ [−1]: Σd = 99, Σd² = 101, mean = 99/101,
        // sample variance = (101 − 99²/101)/100 = 4/101, stddev = 2/√101,
        // z = (99/101)·√101·(√101/2) = 99/2 = 49.5 exactly.
        let a: Vec<UttScore> = (0..101).map(|i| plain(&format!("u{i}"), 1)).collect();
        let mut b: Vec<UttScore> = (0..101).map(|i| plain(&format!("u{i}"), 0)).collect();
        b[100].substitutions = 2; // d_100 = 1 − 2 = −1
        let rep = mapsswe("A", &a, "B", &b, 0.05).expect("test");
        assert_eq!(rep.n, 101);
        assert!((rep.z - 49.5).abs() < 1e-9, "z = {}", rep.z);

        // Independent spreadsheet-style evaluation of the same formula.
        let d: Vec<f64> = (0..100).map(|_| 1.0).chain([-1.0]).collect();
        let mean = d.iter().sum::<f64>() / 101.0;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0;
        let z = mean * 101f64.sqrt() / var.sqrt();
        assert!((rep.z - z).abs() < 1e-9);

        assert!(rep.p < 1e-12);
        assert!(rep.significant);
        assert!(!rep.degenerate);
        assert!(rep.warning.is_none());
    }

    #[test]
    fn swapping_systems_negates_z_and_preserves_p() {
        let a: Vec<UttScore> =
            (0..50).map(|i| plain(&format!("u{i}"), (i % 4) as usize)).collect();
        let b: Vec<UttScore> =
            (0..50).map(|i| plain(&format!("u{i}"), ((i + 1) % 3) as usize)).collect();
        let ab = mapsswe("A", &a, "B", &b, 0.05).expect("test");
        let ba = mapsswe("B", &b, "A", &a, 0.05).expect("test");
        assert!((ab.z + ba.z).abs() < 1e-12);
        assert_eq!(ab.p, ba.p);
        assert_eq!(ab.significant, ba.significant);
    }

    #[test]
    fn constant_nonzero_difference_is_degenerate() {
        let a: Vec<UttScore> = (0..35).map(|i| plain(&format!("u{i}"), 2)).collect();
        let b: Vec<UttScore> = (0..35).map(|i| plain(&format!("u{i}"), 1)).collect();
        let rep = mapsswe("A", &a, "B", &b, 0.05).expect("test");
        assert!(rep.degenerate);
        assert_eq!(rep.p, 1.0);
        assert!(!rep.significant);
    }

    #[test]
    fn small_samples_carry_a_warning() {
        let a = vec![plain("u0", 0), plain("u1", 2), plain("u2", 1)];
        let b = vec![plain("u0", 1), plain("u1", 0), plain("u2", 1)];
        let rep = mapsswe("A", &a, "B", &b, 0.05).expect("test");
        assert!(rep.warning.as_deref().expect("warning").contains("3"));
    }

    #[test]
    fn pairing_and_parameter_errors() {
        let a = vec![plain("u0", 1), plain("u1", 0)];
        let mismatched = vec![plain("u0", 1), plain("u9", 0)];
        assert!(matches!(
            mapsswe("A", &a, "B", &mismatched, 0.05),
            Err(Error::Usage(_))
        ));
        let short = vec![plain("u0", 1)];
        assert!(matches!(
            mapsswe("A", &short, "B", &short.clone(), 0.05),
            Err(Error::Usage(_))
        ));
        let dup = vec![plain("u0", 1), plain("u0", 2)];
        assert!(matches!(
            mapsswe("A", &dup, "B", &dup.clone(), 0.05),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            mapsswe("A", &a, "B", &a.clone(), 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn significance_report_serializes_the_contract_fields() {
        let a: Vec<UttScore> =
            (0..40).map(|i| plain(&format!("u{i}"), (i % 2) as usize)).collect();
        let b: Vec<UttScore> = (0..40).map(|i| plain(&format!("u{i}"), 1)).collect();
        let rep = mapsswe("baseline", &a, "adapted", &b, 0.05).expect("test");
        let json = serde_json::to_string(&rep).expect("json");
        for field in
            ["system_a", "system_b", "\"n\"", "\"z\"", "\"p\"", "alpha", "significant"]
        {
            assert!(json.contains(field), "missing {field} in {json}");
        }
    }
}
