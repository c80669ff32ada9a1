//! Checkpoint serialization.
//!
//! A checkpoint is a flat, little-endian record file:
//!
//! ```text
//! magic "ANTH" | version: u16 | count: u32
//! then per record:
//!   name_len: u32 | name: UTF-8 bytes
//!   rank: u32 | dims: rank x u32
//!   data: prod(dims) x f32, row-major
//! ```
//!
//! Model checkpoints store every parameter tensor under its plan name plus
//! three metadata records — `meta/config`, `meta/tokenizer`, `meta/vocab` —
//! whose "data" is UTF-8 text with one byte per f32 value. Loading verifies
//! the magic, version, record integrity, and that the stored tensors match
//! the rebuilt plan exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::config::ArchConfig;
use crate::data::{TokenizerKind, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelPlan};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"ANTH";
pub const VERSION: u16 = 1;

const META_CONFIG: &str = "meta/config";
const META_TOKENIZER: &str = "meta/tokenizer";
const META_VOCAB: &str = "meta/vocab";

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Record> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::checkpoint(format!(
                "record data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Record {
            name: name.into(),
            shape,
            data,
        })
    }

    /// Encodes text as a rank-1 record, one byte per value.
    pub fn from_text(name: impl Into<String>, text: &str) -> Record {
        let data: Vec<f32> = text.bytes().map(|b| b as f32).collect();
        Record {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }

    /// Decodes a byte-per-value text record.
    pub fn to_text(&self) -> Result<String> {
        let mut bytes = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::checkpoint(format!(
                    "record {} is not byte-encoded text",
                    self.name
                )));
            }
            bytes.push(v as u8);
        }
        String::from_utf8(bytes)
            .map_err(|_| Error::checkpoint(format!("record {} is not valid UTF-8", self.name)))
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::checkpoint("value exceeds the 32-bit record format"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(eof_as_truncation)?;
    Ok(u32::from_le_bytes(buf))
}

fn eof_as_truncation(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::checkpoint("truncated checkpoint")
    } else {
        Error::Io(e)
    }
}

/// Writes a record file. Record names must be unique.
pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut seen = HashMap::new();
    for r in records {
        if seen.insert(r.name.as_str(), ()).is_some() {
            return Err(Error::checkpoint(format!(
                "duplicate record name {}",
                r.name
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(&mut w, records.len())?;
    for r in records {
        put_u32(&mut w, r.name.len())?;
        w.write_all(r.name.as_bytes())?;
        put_u32(&mut w, r.shape.len())?;
        for &d in &r.shape {
            put_u32(&mut w, d)?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a record file, checking magic, version, uniqueness, and that no
/// trailing bytes follow the last record.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncation)?;
    if magic != MAGIC {
        return Err(Error::checkpoint("bad magic: not a checkpoint file"));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).map_err(eof_as_truncation)?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = get_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    let mut seen = HashMap::new();
    for _ in 0..count {
        let name_len = get_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::checkpoint("implausible record name length"));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(eof_as_truncation)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::checkpoint("record name is not valid UTF-8"))?;
        let rank = get_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::checkpoint(format!(
                "implausible rank {rank} for record {name}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = get_u32(&mut r)? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel > (1 << 31) {
            return Err(Error::checkpoint(format!(
                "implausible element count for record {name}"
            )));
        }
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(eof_as_truncation)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::checkpoint(format!("duplicate record name {name}")));
        }
        records.push(Record { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(records),
        Ok(_) => Err(Error::checkpoint("trailing bytes after the last record")),
        Err(e) => Err(Error::Io(e)),
    }
}

/// Saves a model's parameters and its data-pipeline metadata.
pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != model.plan.config.n_vocab {
        return Err(Error::checkpoint(format!(
            "vocabulary size {} does not match n_vocab {}",
            vocab.len(),
            model.plan.config.n_vocab
        )));
    }
    let mut records = Vec::with_capacity(model.plan.tensors.len() + 3);
    for (spec, param) in model.plan.tensors.iter().zip(&model.params) {
        let data: Vec<f32> = param.data().iter().map(|&x| x.into_f64() as f32).collect();
        records.push(Record::new(spec.name.clone(), spec.shape.clone(), data)?);
    }
    records.push(Record::from_text(
        META_CONFIG,
        &model.plan.config.serialize(),
    ));
    records.push(Record::from_text(META_TOKENIZER, vocab.kind().name()));
    for tok in vocab.tokens() {
        if tok.contains('\n') {
            return Err(Error::checkpoint(
                "vocabulary tokens must not contain newlines",
            ));
        }
    }
    records.push(Record::from_text(META_VOCAB, &vocab.tokens().join("\n")));
    write_records(path, &records)
}

/// Loads a model checkpoint: rebuilds the plan from the stored config and
/// checks that exactly the plan's tensors are present with their shapes.
pub fn load_model(path: &Path) -> Result<(Model<f32>, Vocabulary)> {
    let records = read_records(path)?;
    let mut by_name: HashMap<String, Record> = HashMap::new();
    for r in records {
        by_name.insert(r.name.clone(), r);
    }
    let config_rec = by_name
        .remove(META_CONFIG)
        .ok_or_else(|| Error::checkpoint("missing meta/config record"))?;
    let tok_rec = by_name
        .remove(META_TOKENIZER)
        .ok_or_else(|| Error::checkpoint("missing meta/tokenizer record"))?;
    let vocab_rec = by_name
        .remove(META_VOCAB)
        .ok_or_else(|| Error::checkpoint("missing meta/vocab record"))?;
    let config = ArchConfig::from_str_body(&config_rec.to_text()?)?;
    let kind = TokenizerKind::parse(&tok_rec.to_text()?)?;
    let tokens: Vec<String> = {
        let text = vocab_rec.to_text()?;
        if text.is_empty() {
            Vec::new()
        } else {
            text.split('\n').map(str::to_string).collect()
        }
    };
    let vocab = Vocabulary::from_tokens(tokens, kind)?;
    if vocab.len() != config.n_vocab {
        return Err(Error::checkpoint(format!(
            "vocabulary size {} does not match n_vocab {}",
            vocab.len(),
            config.n_vocab
        )));
    }
    let plan = ModelPlan::new(config)?;
    let mut params = Vec::with_capacity(plan.tensors.len());
    for spec in &plan.tensors {
        let rec = by_name.remove(&spec.name).ok_or_else(|| {
            Error::checkpoint(format!("missing tensor record {}", spec.name))
        })?;
        if rec.shape != spec.shape {
            return Err(Error::checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                spec.name, rec.shape, spec.shape
            )));
        }
        params.push(Array::new(rec.shape, rec.data)?);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::checkpoint(format!("unexpected record {name}")));
    }
    Ok((Model { plan, params }, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GateKind;
    use crate::config::preset;
    use crate::data::{TokenBatch, BOS, EOS};
    use crate::graph::Graph;
    use crate::model::{loss, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(tc: bool) -> (Model<f32>, Vocabulary) {
        let mut cfg = preset("anthe-small").unwrap();
        cfg.gate = GateKind::KgV;
        cfg.n_vocab = 12;
        cfg.p_dropout = 0.0;
        if tc {
            cfg.set("tc_plan", "layer:0.5").unwrap();
        }
        let model = Model::build(cfg, 3).unwrap();
        let tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..8).map(|i| format!("{i}")))
            .collect();
        let vocab = Vocabulary::from_tokens(tokens, TokenizerKind::Char).unwrap();
        (model, vocab)
    }

    fn eval_bits(model: &Model<f32>) -> u32 {
        let src = vec![vec![BOS, 4, 5, EOS], vec![BOS, 6, 7, EOS]];
        let batch = TokenBatch::from_rows(&src, &src).unwrap();
        let mut g = Graph::new();
        let ids = model.register_frozen(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, _) = loss(&mut g, &model.plan, &ids, &batch, Mode::Eval, &mut rng).unwrap();
        g.scalar_value(l).to_bits()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, vocab) = tiny_model(false);
        save_model(&path, &model, &vocab).unwrap();
        let (loaded, loaded_vocab) = load_model(&path).unwrap();
        assert_eq!(loaded_vocab.tokens(), vocab.tokens());
        assert_eq!(loaded.plan.config.serialize(), model.plan.config.serialize());
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(eval_bits(&model), eval_bits(&loaded));
    }

    #[test]
    fn factorized_model_round_trips_with_its_plan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tc.ckpt");
        let (model, vocab) = tiny_model(true);
        save_model(&path, &model, &vocab).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        assert_eq!(loaded.census(), model.census());
        assert_eq!(loaded.plan.tc_actual, model.plan.tc_actual);
        assert_eq!(eval_bits(&model), eval_bits(&loaded));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let (model, vocab) = tiny_model(false);
        save_model(&path, &model, &vocab).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 5, 9, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = read_records(&path).unwrap_err();
            assert!(err.to_string().contains("truncated"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, vocab) = tiny_model(false);
        save_model(&path, &model, &vocab).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let orig = bytes.clone();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_records(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        bytes = orig;
        bytes[4] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_records(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn duplicate_names_are_rejected_both_ways() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let rec = Record::new("w", vec![1], vec![1.0]).unwrap();
        let err = write_records(&path, &[rec.clone(), rec.clone()]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        // Forge a duplicate on disk by writing distinct names, then patching.
        let a = Record::new("aa", vec![1], vec![1.0]).unwrap();
        let b = Record::new("ab", vec![1], vec![2.0]).unwrap();
        write_records(&path, &[a, b]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Both names are 2 bytes; rewrite the second name to match the first.
        let pos = bytes.windows(2).rposition(|w| w == b"ab").unwrap();
        bytes[pos + 1] = b'a';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_records(&path)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn missing_and_mismatched_tensors_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, vocab) = tiny_model(false);
        save_model(&path, &model, &vocab).unwrap();
        let mut records = read_records(&path).unwrap();
        let victim = records
            .iter()
            .position(|r| r.name == "enc.b0.attn.wo.w")
            .unwrap();
        let removed = records.remove(victim);
        write_records(&path, &records).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("enc.b0.attn.wo.w"), "{err}");

        // Wrong shape on a present tensor.
        let mut bad = removed;
        bad.shape = vec![bad.data.len()];
        records.push(bad);
        write_records(&path, &records).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn unknown_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.ckpt");
        let (model, vocab) = tiny_model(false);
        save_model(&path, &model, &vocab).unwrap();
        let mut records = read_records(&path).unwrap();
        records.push(Record::new("mystery", vec![1], vec![0.0]).unwrap());
        write_records(&path, &records).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn text_records_round_trip_utf8() {
        let texts = ["", "plain", "naïve café — ≠", "a\tb c"];
        for t in texts {
            let rec = Record::from_text("meta/x", t);
            assert_eq!(rec.to_text().unwrap(), t);
        }
        let mut bad = Record::from_text("meta/x", "ok");
        bad.data[0] = 65.5;
        assert!(bad.to_text().is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let (model, vocab) = tiny_model(false);
        save_model(&path, &model, &vocab).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_records(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }
}
