//! The forward pass: waveform → CNN frames → transformer blocks → CTC
//! log-probabilities, with resolved adapters applied at their insertion
//! points.

use rand::Rng;

use super::{BackboneConfig, BackboneModel, InsertionPoint, StagedParams};
use crate::adapters::{
    apply_hub, apply_lhuc, apply_rab, AdapterParams, AdapterStack, RabIds, StackEntry,
};
use crate::diffcore::{DiffArray, Tape, ValueId};
use crate::error::{Error, Result};

/// Result of one staged forward pass: the log-probability frames plus the
/// tape handles of every parameter that went into them. After
/// `Tape::backward`, gradients are read back through `staged`.
#[derive(Debug)]
pub struct Encoded {
    pub log_probs: ValueId,
    pub staged: StagedParams,
}

/// Stage the model's registry and the stack's adapter parameters onto the
/// tape as trainable leaves, addressable by name (`conv.0.kernel`,
/// `adapter.spk:S05.p_up`, ...).
pub fn stage(
    tape: &mut Tape,
    model: &BackboneModel,
    stack: &AdapterStack,
) -> Result<StagedParams> {
    let mut staged = StagedParams::new();
    staged.stage_registry(tape, model.params())?;
    for entry in stack.entries() {
        for (field, array) in entry.params.fields() {
            let id = tape.leaf(array.clone());
            staged.push(&format!("adapter.{}.{field}", entry.key), id)?;
        }
    }
    Ok(staged)
}

/// Run the full forward pass, staging parameters first. Decoding callers
/// pass `training = false`, which makes the pass deterministic (the RNG is
/// never consulted).
pub fn encode<R: Rng>(
    tape: &mut Tape,
    model: &BackboneModel,
    stack: &AdapterStack,
    waveform: &[f64],
    training: bool,
    rng: &mut R,
) -> Result<Encoded> {
    let staged = stage(tape, model, stack)?;
    let log_probs = encode_staged(
        tape,
        model.config(),
        &staged,
        stack,
        waveform,
        training,
        rng,
    )?;
    Ok(Encoded { log_probs, staged })
}

/// The forward pass over already-staged parameters. Kept separate from
/// [`encode`] so gradient checks can stage perturbed copies themselves.
pub fn encode_staged<R: Rng>(
    tape: &mut Tape,
    config: &BackboneConfig,
    staged: &StagedParams,
    stack: &AdapterStack,
    waveform: &[f64],
    training: bool,
    rng: &mut R,
) -> Result<ValueId> {
    config.frames_for(waveform.len())?;
    validate_stack(config, stack)?;

    // CNN feature encoder over the `[T, 1]` waveform.
    let mut x = tape.constant(DiffArray::new(vec![waveform.len(), 1], waveform.to_vec())?);
    for (i, layer) in config.conv_layers.iter().enumerate() {
        let kernel = staged.id(&format!("conv.{i}.kernel"))?;
        let bias = staged.id(&format!("conv.{i}.bias"))?;
        x = tape.conv1d(x, kernel, bias, layer.stride)?;
        x = tape.gelu(x)?;
    }

    // Normalize channels and project to the model width.
    x = tape.layernorm(
        x,
        staged.id("feat_ln.gamma")?,
        staged.id("feat_ln.beta")?,
        config.ln_eps,
    )?;
    x = linear(tape, x, staged, "feat_proj.weight", "feat_proj.bias")?;

    for entry in at_point(stack, InsertionPoint::AfterCnnEncoder) {
        x = apply_entry(tape, x, entry, staged, config.ln_eps, training, rng)?;
    }

    // Sinusoidal absolute positions, added after the encoder output (and
    // after any encoder-output adapter).
    let frames = tape.value(x).rows();
    let pe = tape.constant(sinusoidal_positions(frames, config.d_model));
    x = tape.add(x, pe)?;

    for block in 0..config.n_blocks {
        x = transformer_block(tape, config, staged, block, x, training, rng)?;
        let point = InsertionPoint::InTransformerBlock { block_index: block };
        for entry in at_point(stack, point) {
            x = apply_entry(tape, x, entry, staged, config.ln_eps, training, rng)?;
        }
    }

    x = tape.layernorm(
        x,
        staged.id("final_ln.gamma")?,
        staged.id("final_ln.beta")?,
        config.ln_eps,
    )?;
    let logits = linear(tape, x, staged, "ctc_head.weight", "ctc_head.bias")?;
    tape.log_softmax_rows(logits)
}

/// Pre-norm transformer block:
/// `x + Dropout(MHSA(LN(x)))` then `y + Dropout(FFN(LN(y)))`.
fn transformer_block<R: Rng>(
    tape: &mut Tape,
    config: &BackboneConfig,
    staged: &StagedParams,
    block: usize,
    x: ValueId,
    training: bool,
    rng: &mut R,
) -> Result<ValueId> {
    let p = |field: &str| format!("block.{block}.{field}");

    let normed = tape.layernorm(
        x,
        staged.id(&p("ln1.gamma"))?,
        staged.id(&p("ln1.beta"))?,
        config.ln_eps,
    )?;
    let q = linear(tape, normed, staged, &p("attn.wq"), &p("attn.bq"))?;
    let k = linear(tape, normed, staged, &p("attn.wk"), &p("attn.bk"))?;
    let v = linear(tape, normed, staged, &p("attn.wv"), &p("attn.bv"))?;

    let head_dim = config.d_model / config.n_heads;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, inv_sqrt)?;
        let weights = tape.softmax_rows(scaled)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attended = linear(tape, merged, staged, &p("attn.wo"), &p("attn.bo"))?;
    let attended = tape.dropout(attended, config.dropout_p, rng, training)?;
    let x = tape.add(x, attended)?;

    let normed = tape.layernorm(
        x,
        staged.id(&p("ln2.gamma"))?,
        staged.id(&p("ln2.beta"))?,
        config.ln_eps,
    )?;
    let inner = linear(tape, normed, staged, &p("ffn.w1"), &p("ffn.b1"))?;
    let inner = tape.gelu(inner)?;
    let out = linear(tape, inner, staged, &p("ffn.w2"), &p("ffn.b2"))?;
    let out = tape.dropout(out, config.dropout_p, rng, training)?;
    tape.add(x, out)
}

fn linear(
    tape: &mut Tape,
    x: ValueId,
    staged: &StagedParams,
    weight: &str,
    bias: &str,
) -> Result<ValueId> {
    let w = staged.id(weight)?;
    let b = staged.id(bias)?;
    let y = tape.matmul_nt(x, w)?;
    tape.add_row(y, b)
}

fn at_point(
    stack: &AdapterStack,
    point: InsertionPoint,
) -> impl Iterator<Item = &StackEntry> {
    stack.entries().iter().filter(move |e| e.point == point)
}

fn apply_entry<R: Rng>(
    tape: &mut Tape,
    x: ValueId,
    entry: &StackEntry,
    staged: &StagedParams,
    ln_eps: f64,
    training: bool,
    rng: &mut R,
) -> Result<ValueId> {
    let id = |field: &str| staged.id(&format!("adapter.{}.{field}", entry.key));
    match &entry.params {
        AdapterParams::Lhuc(_) => apply_lhuc(tape, x, id("r")?),
        AdapterParams::Hub(_) => apply_hub(tape, x, id("r")?),
        AdapterParams::Rab(_) => {
            let ids = RabIds {
                p_down: id("p_down")?,
                p_up: id("p_up")?,
                ln_gamma: id("ln_gamma")?,
                ln_beta: id("ln_beta")?,
            };
            apply_rab(tape, x, &ids, entry.dropout_p, ln_eps, training, rng)
        }
    }
}

fn validate_stack(config: &BackboneConfig, stack: &AdapterStack) -> Result<()> {
    for entry in stack.entries() {
        let width = entry.params.width();
        if width != config.d_model {
            return Err(Error::Config(format!(
                "adapter '{}' has width {width}, model width is {}",
                entry.key, config.d_model
            )));
        }
        if let InsertionPoint::InTransformerBlock { block_index } = entry.point {
            if block_index >= config.n_blocks {
                return Err(Error::Config(format!(
                    "adapter '{}' attaches to block {block_index}, model has {} blocks",
                    entry.key, config.n_blocks
                )));
            }
        }
    }
    Ok(())
}

/// Classic sinusoidal position table: `sin(pos·ω_j)` on even columns,
/// `cos(pos·ω_j)` on odd, with `ω_j = 10000^(-2j/d)`.
fn sinusoidal_positions(frames: usize, d_model: usize) -> DiffArray {
    let mut data = vec![0.0; frames * d_model];
    for pos in 0..frames {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let omega = 10000f64.powf(-2.0 * pair / d_model as f64);
            let angle = pos as f64 * omega;
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    DiffArray::new(vec![frames, d_model], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterBank, AdapterSpec, ConditionKey, LabelGranularity};
    use crate::corpus::Severity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            conv_layers: vec![super::super::ConvLayer {
                channels: 6,
                kernel: 16,
                stride: 8,
            }],
            d_model: 12,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 7,
            dropout_p: 0.1,
            ln_eps: 1e-5,
        }
    }

    fn test_waveform(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                0.4 * (0.071 * t).sin() + 0.3 * (0.013 * t).sin() + 0.1 * (0.31 * t).cos()
            })
            .collect()
    }

    fn decode_frames(model: &BackboneModel, stack: &AdapterStack, wave: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode(&mut tape, model, stack, wave, false, &mut rng).expect("encode");
        tape.value(out.log_probs).data().to_vec()
    }

    #[test]
    fn output_has_frame_by_vocab_shape_and_normalized_rows() {
        let config = tiny_config();
        let model = BackboneModel::new(config.clone(), 1).expect("model");
        let wave = test_waveform(200);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode(&mut tape, &model, &AdapterStack::empty(), &wave, false, &mut rng)
            .expect("encode");
        let frames = config.frames_for(wave.len()).expect("frames");
        let arr = tape.value(out.log_probs);
        assert_eq!(arr.shape(), [frames, config.vocab_size]);
        for row in arr.data().chunks(config.vocab_size) {
            let sum: f64 = row.iter().map(|lp| lp.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let model = BackboneModel::new(tiny_config(), 2).expect("model");
        let wave = test_waveform(180);
        let a = decode_frames(&model, &AdapterStack::empty(), &wave);
        let b = decode_frames(&model, &AdapterStack::empty(), &wave);
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_waveform_is_an_input_error() {
        let model = BackboneModel::new(tiny_config(), 3).expect("model");
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = encode(
            &mut tape,
            &model,
            &AdapterStack::empty(),
            &test_waveform(10),
            false,
            &mut rng,
        )
        .expect_err("10 samples < kernel 16");
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn fresh_adapters_leave_logits_bit_identical() {
        let config = tiny_config();
        let model = BackboneModel::new(config.clone(), 4).expect("model");
        let wave = test_waveform(220);
        let bare = decode_frames(&model, &AdapterStack::empty(), &wave);

        let enc = InsertionPoint::AfterCnnEncoder;
        let blk1 = InsertionPoint::InTransformerBlock { block_index: 1 };
        let specs = [
            AdapterSpec::lhuc(enc, LabelGranularity::Global),
            AdapterSpec::hub(blk1, LabelGranularity::Global),
            AdapterSpec::rab(enc, LabelGranularity::Global, 4, 0.2),
        ];
        for spec in specs {
            let mut bank = AdapterBank::new(spec, 9).expect("bank");
            bank.create_entry(ConditionKey::Global, config.d_model).expect("entry");
            let stack = bank.resolve("S00", Severity::M).expect("resolve");
            assert_eq!(
                decode_frames(&model, &stack, &wave),
                bare,
                "fresh adapter changed decode output"
            );
        }

        let mut bank =
            AdapterBank::new(AdapterSpec::structured(enc, blk1, 4, 0.2), 9).expect("bank");
        bank.create_entry(ConditionKey::Deficiency(Severity::M), config.d_model)
            .expect("entry");
        bank.create_entry(ConditionKey::Speaker("S00".into()), config.d_model)
            .expect("entry");
        let stack = bank.resolve("S00", Severity::M).expect("resolve");
        assert_eq!(decode_frames(&model, &stack, &wave), bare);
    }

    #[test]
    fn adapter_width_mismatch_is_a_config_error() {
        let config = tiny_config();
        let model = BackboneModel::new(config.clone(), 5).expect("model");
        let spec = AdapterSpec::lhuc(InsertionPoint::AfterCnnEncoder, LabelGranularity::Global);
        let mut bank = AdapterBank::new(spec, 1).expect("bank");
        bank.create_entry(ConditionKey::Global, config.d_model + 1).expect("entry");
        let stack = bank.resolve("S00", Severity::H).expect("resolve");
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = encode(&mut tape, &model, &stack, &test_waveform(200), false, &mut rng)
            .expect_err("width mismatch");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn out_of_range_block_index_is_a_config_error() {
        let config = tiny_config();
        let model = BackboneModel::new(config.clone(), 6).expect("model");
        let spec = AdapterSpec::lhuc(
            InsertionPoint::InTransformerBlock { block_index: 5 },
            LabelGranularity::Global,
        );
        let mut bank = AdapterBank::new(spec, 1).expect("bank");
        bank.create_entry(ConditionKey::Global, config.d_model).expect("entry");
        let stack = bank.resolve("S00", Severity::H).expect("resolve");
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = encode(&mut tape, &model, &stack, &test_waveform(200), false, &mut rng)
            .expect_err("block 5 of 2");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn training_mode_applies_dropout_but_stays_seeded() {
        let model = BackboneModel::new(tiny_config(), 7).expect("model");
        let wave = test_waveform(200);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = encode(&mut tape, &model, &AdapterStack::empty(), &wave, true, &mut rng)
                .expect("encode");
            tape.value(out.log_probs).data().to_vec()
        };
        assert_eq!(run(11), run(11), "same dropout seed must reproduce");
        assert_ne!(run(11), run(12), "different masks should move the output");
    }
}
