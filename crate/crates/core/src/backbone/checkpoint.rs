//! Checkpoint container for a model plus (optionally) its adapter bank.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header describing the config
//! and every array's name and shape, then the concatenated float64
//! little-endian payloads in header order. The header makes the file fully
//! self-describing; the round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BackboneModel, InsertionPoint};
use crate::adapters::{
    AdapterBank, AdapterParams, AdapterSpec, BankEntry, ConditionKey, HubParams,
    LhucParams, RabParams,
};
use crate::diffcore::DiffArray;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ALABCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    params: Vec<ArrayMeta>,
    bank: Option<BankHeader>,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    spec: AdapterSpec,
    seed: u64,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    key: String,
    point: InsertionPoint,
    arch: String,
    fields: Vec<ArrayMeta>,
}

/// Write `model` (and `bank`, if given) to `path`, atomically replacing any
/// existing file only after a complete write.
pub fn save_checkpoint(
    model: &BackboneModel,
    bank: Option<&AdapterBank>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut payload: Vec<&DiffArray> = Vec::new();
    let mut params = Vec::new();
    for (name, array) in model.params().iter() {
        params.push(ArrayMeta { name: name.to_string(), shape: array.shape().to_vec() });
        payload.push(array);
    }

    let bank_header = bank.map(|bank| {
        let mut entries = Vec::new();
        for (key, entry) in bank.iter_entries() {
            let mut fields = Vec::new();
            for (field, array) in entry.params.fields() {
                fields.push(ArrayMeta {
                    name: field.to_string(),
                    shape: array.shape().to_vec(),
                });
                payload.push(array);
            }
            entries.push(EntryHeader {
                key: key.to_string(),
                point: entry.point,
                arch: entry.params.architecture_tag().to_string(),
                fields,
            });
        }
        BankHeader { spec: bank.spec().clone(), seed: bank.seed(), entries }
    });

    let header = Header {
        config: model.config().clone(),
        params,
        bank: bank_header,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::io(path, std::io::Error::other(e)))?;

    let payload_len: usize = payload.iter().map(|a| a.numel() * 8).sum();
    let mut bytes =
        Vec::with_capacity(MAGIC.len() + 12 + header_json.len() + payload_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for array in payload {
        for &x in array.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint back. Any structural defect — bad magic, unknown
/// version, malformed header, short payload — is reported as a corrupt-file
/// error naming the path.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(BackboneModel, Option<AdapterBank>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::corrupt(path, "file shorter than the fixed header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::corrupt(path, "bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::corrupt(
            path,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let header_len =
        u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::corrupt(path, format!("malformed header: {e}")))?;

    let mut cursor = header_end;
    let mut take_array = |meta: &ArrayMeta| -> Result<DiffArray> {
        let numel: usize = meta.shape.iter().product();
        let end = cursor
            .checked_add(numel * 8)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::corrupt(path, format!("truncated payload at array '{}'", meta.name))
            })?;
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        DiffArray::new(meta.shape.clone(), data)
            .map_err(|e| Error::corrupt(path, format!("array '{}': {e}", meta.name)))
    };

    let mut names = Vec::with_capacity(header.params.len());
    let mut arrays = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        names.push(meta.name.clone());
        arrays.push(take_array(meta)?);
    }

    let bank = match header.bank {
        None => None,
        Some(bank_header) => {
            let mut entries = BTreeMap::new();
            for entry in &bank_header.entries {
                let key = ConditionKey::parse(&entry.key)
                    .map_err(|e| Error::corrupt(path, format!("{e}")))?;
                let mut fields = Vec::with_capacity(entry.fields.len());
                for meta in &entry.fields {
                    fields.push((meta.name.clone(), take_array(meta)?));
                }
                let params = assemble_params(&entry.arch, fields)
                    .map_err(|e| Error::corrupt(path, format!("entry '{key}': {e}")))?;
                entries.insert(key, BankEntry { point: entry.point, params });
            }
            Some(
                AdapterBank::from_parts(bank_header.spec, bank_header.seed, entries)
                    .map_err(|e| Error::corrupt(path, format!("{e}")))?,
            )
        }
    };

    if cursor != bytes.len() {
        return Err(Error::corrupt(
            path,
            format!("{} trailing bytes after payload", bytes.len() - cursor),
        ));
    }

    let model = BackboneModel::from_parts(header.config, names, arrays)
        .map_err(|e| Error::corrupt(path, format!("{e}")))?;
    Ok((model, bank))
}

fn assemble_params(arch: &str, fields: Vec<(String, DiffArray)>) -> Result<AdapterParams> {
    let names: Vec<&str> = fields.iter().map(|(n, _)| n.as_str()).collect();
    let mut arrays: Vec<DiffArray> = fields.iter().map(|(_, a)| a.clone()).collect();
    match arch {
        "lhuc" if names == ["r"] => {
            Ok(AdapterParams::Lhuc(LhucParams { r: arrays.remove(0) }))
        }
        "hub" if names == ["r"] => {
            Ok(AdapterParams::Hub(HubParams { r: arrays.remove(0) }))
        }
        "rab" if names == ["p_down", "p_up", "ln_gamma", "ln_beta"] => {
            let ln_beta = arrays.remove(3);
            let ln_gamma = arrays.remove(2);
            let p_up = arrays.remove(1);
            let p_down = arrays.remove(0);
            Ok(AdapterParams::Rab(RabParams { p_down, p_up, ln_gamma, ln_beta }))
        }
        _ => Err(Error::Usage(format!(
            "architecture '{arch}' with fields {names:?} is not a known adapter layout"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Severity;

    fn small_model() -> BackboneModel {
        let config = BackboneConfig {
            conv_layers: vec![super::super::ConvLayer {
                channels: 4,
                kernel: 8,
                stride: 4,
            }],
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 5,
            dropout_p: 0.0,
            ln_eps: 1e-5,
        };
        BackboneModel::new(config, 42).expect("model")
    }

    fn structured_bank(width: usize) -> AdapterBank {
        let spec = AdapterSpec::structured(
            InsertionPoint::AfterCnnEncoder,
            InsertionPoint::InTransformerBlock { block_index: 0 },
            3,
            0.1,
        );
        let mut bank = AdapterBank::new(spec, 77).expect("bank");
        for sev in [Severity::VL, Severity::H] {
            bank.create_entry(ConditionKey::Deficiency(sev), width).expect("entry");
        }
        bank.create_entry(ConditionKey::Speaker("S03".into()), width).expect("entry");
        bank
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        let bank = structured_bank(model.config().d_model);

        save_checkpoint(&model, Some(&bank), &path).expect("save");
        let (loaded_model, loaded_bank) = load_checkpoint(&path).expect("load");
        let loaded_bank = loaded_bank.expect("bank present");

        assert_eq!(loaded_model.digest(), model.digest());
        assert_eq!(loaded_model.config(), model.config());
        assert_eq!(loaded_bank.digest(), bank.digest());
        assert_eq!(loaded_bank.spec(), bank.spec());
        let keys: Vec<String> = loaded_bank.keys().map(|k| k.to_string()).collect();
        assert_eq!(keys, ["defi:H", "defi:VL", "spk:S03"]);
    }

    #[test]
    fn model_only_round_trip() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("bare.ckpt");
        let model = small_model();
        save_checkpoint(&model, None, &path).expect("save");
        let (loaded, bank) = load_checkpoint(&path).expect("load");
        assert_eq!(loaded.digest(), model.digest());
        assert!(bank.is_none());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        save_checkpoint(&model, None, &path).expect("save");

        let mut bytes = fs::read(&path).expect("read");
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).expect("write");

        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn bad_magic_and_version_are_corrupt() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        save_checkpoint(&model, None, &path).expect("save");

        let good = fs::read(&path).expect("read");
        let mut bad = good.clone();
        bad[0] ^= 0xFF;
        fs::write(&path, &bad).expect("write");
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));

        let mut bad = good;
        bad[8] = 99;
        fs::write(&path, &bad).expect("write");
        match load_checkpoint(&path) {
            Err(Error::Corrupt { message, .. }) => {
                assert!(message.contains("version"), "message: {message}")
            }
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }
}
