//! CTC loss, greedy decoding, and a brute-force alignment oracle.
//!
//! The loss runs the forward–backward recursions over the blank-augmented
//! target entirely in log space and registers the result on the tape as a
//! custom operation whose backward rule is the classical alpha–beta gradient.
//! The oracle enumerates every frame-level path and is the ground truth the
//! dynamic program is tested against.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{CustomOp, DiffArray, Tape, ValueId, LOG_ZERO};
use crate::error::{Error, Result};

/// Index reserved for the CTC blank in every vocabulary.
pub const BLANK: usize = 0;

/// A label sequence over token ids `1..vocab_size`; the blank never appears.
/// Serializes as a plain id list; deserialization re-checks the no-blank rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TryFrom<Vec<usize>> for TokenSequence {
    type Error = Error;

    fn try_from(ids: Vec<usize>) -> Result<Self> {
        TokenSequence::new(ids)
    }
}

impl From<TokenSequence> for Vec<usize> {
    fn from(seq: TokenSequence) -> Self {
        seq.ids
    }
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&BLANK) {
            return Err(Error::Parameter(
                "token sequence must not contain the blank id 0".into(),
            ));
        }
        Ok(TokenSequence { ids })
    }

    pub fn empty() -> Self {
        TokenSequence::default()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Number of adjacent equal pairs — each needs a separating blank frame.
fn adjacent_repeats(ids: &[usize]) -> usize {
    ids.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Fewest frames that can carry `target`: one per label plus one separating
/// blank per adjacent repeat. `ctc_loss` rejects anything shorter, so callers
/// can screen targets against a known frame count without building a tape.
pub fn min_frames(target: &TokenSequence) -> usize {
    target.len() + adjacent_repeats(target.ids())
}

/// log(exp(a) + exp(b)) with the LOG_ZERO sentinel treated as exact zero.
fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn logaddexp3(a: f64, b: f64, c: f64) -> f64 {
    logaddexp(logaddexp(a, b), c)
}

struct CtcGradient {
    /// d(loss)/d(log_probs), laid out like the input, scaled by upstream grad
    /// in `backward`.
    grad: Vec<f64>,
}

impl CustomOp for CtcGradient {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(
        &self,
        grad_out: &[f64],
        _inputs: &[&DiffArray],
        _output: &DiffArray,
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad_out[0];
        vec![Some(self.grad.iter().map(|d| d * g).collect())]
    }
}

/// Negative log probability of all alignments of `target` under per-frame
/// log-probabilities `log_probs: [T, V]`, differentiable through the tape.
///
/// Fails with an infeasibility error (distinct from numeric failure) when
/// the target cannot fit in T frames.
pub fn ctc_loss(tape: &mut Tape, log_probs: ValueId, target: &TokenSequence) -> Result<ValueId> {
    let lp = tape.value(log_probs);
    let shape = lp.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "ctc_loss: log_probs must be [T, V], got {shape:?}"
        )));
    }
    let (t_len, vocab) = (shape[0], shape[1]);
    if vocab < 2 {
        return Err(Error::Dimension(format!(
            "ctc_loss: vocabulary of {vocab} leaves no room for labels"
        )));
    }
    if let Some(&bad) = target.ids().iter().find(|&&id| id >= vocab) {
        return Err(Error::Parameter(format!(
            "ctc_loss: target id {bad} outside vocabulary of {vocab}"
        )));
    }
    let needed = min_frames(target);
    if t_len < needed {
        return Err(Error::Infeasible(format!(
            "target needs at least {needed} frames, got {t_len}"
        )));
    }

    // Blank-augmented label sequence: blank, l1, blank, l2, ..., blank.
    let aug: Vec<usize> = std::iter::once(BLANK)
        .chain(target.ids().iter().flat_map(|&id| [id, BLANK]))
        .collect();
    let s_len = aug.len();
    let y = lp.data();
    let at = |t: usize, k: usize| y[t * vocab + k];

    // Forward variables: alpha[t][s] includes the emission at frame t.
    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = at(0, BLANK);
    if s_len > 1 {
        alpha[1] = at(0, aug[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 {
                alpha[(t - 1) * s_len + s - 1]
            } else {
                LOG_ZERO
            };
            let skip = if s >= 2 && aug[s] != BLANK && aug[s] != aug[s - 2] {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                LOG_ZERO
            };
            let inbound = logaddexp3(stay, step, skip);
            alpha[t * s_len + s] = if inbound <= LOG_ZERO {
                LOG_ZERO
            } else {
                inbound + at(t, aug[s])
            };
        }
    }
    let log_p = if s_len > 1 {
        logaddexp(
            alpha[(t_len - 1) * s_len + s_len - 1],
            alpha[(t_len - 1) * s_len + s_len - 2],
        )
    } else {
        alpha[(t_len - 1) * s_len]
    };
    if log_p <= LOG_ZERO {
        return Err(Error::Numeric(
            "ctc_loss: total alignment probability underflowed to zero".into(),
        ));
    }

    // Backward variables, with the same include-the-emission convention, so
    // alpha + beta double-counts the frame-t emission.
    let mut beta = vec![LOG_ZERO; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = at(t_len - 1, aug[s_len - 1]);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = at(t_len - 1, aug[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s];
            let step = if s + 1 < s_len {
                beta[(t + 1) * s_len + s + 1]
            } else {
                LOG_ZERO
            };
            let skip = if s + 2 < s_len && aug[s] != BLANK && aug[s + 2] != aug[s] {
                beta[(t + 1) * s_len + s + 2]
            } else {
                LOG_ZERO
            };
            let outbound = logaddexp3(stay, step, skip);
            beta[t * s_len + s] = if outbound <= LOG_ZERO {
                LOG_ZERO
            } else {
                outbound + at(t, aug[s])
            };
        }
    }

    // d(loss)/d(log_probs[t][k]) = -sum_{s: aug[s]=k} exp(alpha + beta
    // - emission - logP); the emission subtraction undoes the double count.
    let mut grad = vec![0.0; t_len * vocab];
    let mut acc = vec![LOG_ZERO; vocab];
    for t in 0..t_len {
        acc.fill(LOG_ZERO);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a <= LOG_ZERO || b <= LOG_ZERO {
                continue;
            }
            let k = aug[s];
            acc[k] = logaddexp(acc[k], a + b - at(t, k));
        }
        for k in 0..vocab {
            if acc[k] > LOG_ZERO {
                grad[t * vocab + k] = -(acc[k] - log_p).exp();
            }
        }
    }

    let op = Rc::new(CtcGradient { grad });
    tape.custom(op, &[log_probs], DiffArray::scalar(-log_p))
}

/// Per-frame argmax (ties to the lowest index), collapse repeats, drop
/// blanks.
pub fn greedy_decode(log_probs: &DiffArray) -> Result<TokenSequence> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "greedy_decode: log_probs must be [T, V], got {shape:?}"
        )));
    }
    let vocab = shape[1];
    let mut out = Vec::new();
    let mut prev = BLANK;
    for frame in log_probs.data().chunks(vocab) {
        let mut best = 0;
        for (k, &v) in frame.iter().enumerate() {
            if v > frame[best] {
                best = k;
            }
        }
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    TokenSequence::new(out)
}

/// Exact total probability of `target` by enumerating all V^T frame paths
/// of `probs: [T, V]` (plain probabilities, not logs) and summing those
/// whose blank-collapse equals the target.
pub fn brute_force_ctc(probs: &DiffArray, target: &TokenSequence) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "brute_force_ctc: probs must be [T, V], got {shape:?}"
        )));
    }
    let (t_len, vocab) = (shape[0], shape[1]);
    let paths = (vocab as f64).powi(t_len as i32);
    if paths > 1e6 {
        return Err(Error::Usage(format!(
            "brute_force_ctc: {vocab}^{t_len} paths exceed the 1e6 budget"
        )));
    }
    let p = probs.data();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    let n_paths = (vocab as u64).pow(t_len as u32);
    let mut collapsed = Vec::with_capacity(t_len);
    for mut code in 0..n_paths {
        for slot in path.iter_mut() {
            *slot = (code % vocab as u64) as usize;
            code /= vocab as u64;
        }
        collapsed.clear();
        let mut prev = BLANK;
        for &k in &path {
            if k != BLANK && k != prev {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == target.ids() {
            let prob: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| p[t * vocab + k])
                .product();
            total += prob;
        }
    }
    Ok(total)
}
