//! Checkpoint format (`ADJC`), little-endian:
//!
//! ```text
//! magic "ADJC", u32 version
//! records until end of file:
//!   u16 name length, UTF-8 name, u8 rank, u32 × rank dims, f64 × numel values
//! ```
//!
//! Model parameters use their own names. Optimizer moments are stored as
//! `opt/m/<name>` and `opt/v/<name>`, and the step counter as the one-element
//! tensor `opt/step`.

use std::collections::HashMap;
use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::AdaJudge;
use crate::training::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADJC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(model: &AdaJudge, state: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for p in model.store().iter() {
        write_record(&mut out, &p.name, p.value.dims(), p.value.data());
    }
    for (i, p) in model.store().iter().enumerate() {
        write_record(&mut out, &format!("opt/m/{}", p.name), p.value.dims(), &state.m[i]);
        write_record(&mut out, &format!("opt/v/{}", p.name), p.value.dims(), &state.v[i]);
    }
    write_record(&mut out, "opt/step", &[1], &[state.step as f64]);
    out
}

pub fn save_checkpoint(model: &AdaJudge, state: &OptimizerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint_bytes(model, state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Record {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn parse_records(bytes: &[u8]) -> Result<Vec<(String, Record)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"ADJC\"".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut out = Vec::new();
    while r.remaining() > 0 {
        let start = r.pos as u64;
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format {
                offset: start + 2,
                msg: "record name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Record { dims, data }));
    }
    Ok(out)
}

/// Reads a checkpoint into a copy of `template`. Nothing is modified unless
/// every record matches the template's parameter names and dims.
pub fn load_checkpoint_bytes(bytes: &[u8], template: &AdaJudge) -> Result<(AdaJudge, OptimizerState)> {
    let records = parse_records(bytes)?;
    let mut by_name: HashMap<&str, &Record> = HashMap::new();
    for (name, rec) in &records {
        if by_name.insert(name.as_str(), rec).is_some() {
            return Err(Error::Config(format!("duplicate checkpoint record `{name}`")));
        }
    }
    let lookup = |name: &str, dims: &[usize]| -> Result<&Record> {
        let rec = by_name
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
        if rec.dims != dims {
            return Err(Error::Dimension {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: rec.dims.clone(),
            });
        }
        Ok(rec)
    };

    let store = template.store();
    let mut values = Vec::with_capacity(store.len());
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for p in store.iter() {
        values.push(&lookup(&p.name, p.value.dims())?.data);
        m.push(lookup(&format!("opt/m/{}", p.name), p.value.dims())?.data.clone());
        v.push(lookup(&format!("opt/v/{}", p.name), p.value.dims())?.data.clone());
    }
    let step = lookup("opt/step", &[1])?.data[0];
    if step < 0.0 || step.fract() != 0.0 {
        return Err(Error::Config(format!("invalid step counter {step}")));
    }
    let expected = 3 * store.len() + 1;
    if records.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint has {} records, model expects {expected}",
            records.len()
        )));
    }

    let mut model = template.clone();
    for (p, data) in model.store_mut().iter_mut().zip(values) {
        p.value.data_mut().copy_from_slice(data);
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok((
        model,
        OptimizerState {
            m,
            v,
            step: step as u64,
        },
    ))
}

pub fn load_checkpoint(path: impl AsRef<Path>, template: &AdaJudge) -> Result<(AdaJudge, OptimizerState)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes, template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn model(d: usize, seed: u64) -> AdaJudge {
        let mut m = AdaJudge::new(ModelConfig::tiny(d, 2), Variant::Full, seed).unwrap();
        let mut rng = rand::SeedableRng::seed_from_u64(seed + 1);
        m.store_mut().randomize(&mut rng, 0.5);
        m
    }

    #[test]
    fn bit_exact_round_trip() {
        let m = model(8, 3);
        let mut st = OptimizerState::new(m.store());
        st.step = 17;
        st.m[0][0] = 0.1 + 0.2;
        st.v[2][1] = f64::MIN_POSITIVE;
        let bytes = checkpoint_bytes(&m, &st);
        let (back, st2) = load_checkpoint_bytes(&bytes, &model(8, 99)).unwrap();
        assert!(back.store().values_bitwise_eq(m.store()));
        assert_eq!(back.store().max_abs_diff(m.store()), 0.0);
        assert!(st2.bitwise_eq(&st));
    }

    #[test]
    fn truncation_reports_offset() {
        let m = model(4, 1);
        let bytes = checkpoint_bytes(&m, &OptimizerState::new(m.store()));
        let cut = bytes.len() - 5;
        match load_checkpoint_bytes(&bytes[..cut], &m) {
            Err(Error::Format { offset, msg }) => {
                assert!(offset as usize <= cut, "{offset}");
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let m = model(4, 1);
        let mut bytes = checkpoint_bytes(&m, &OptimizerState::new(m.store()));
        bytes[3] = b'X';
        assert!(matches!(load_checkpoint_bytes(&bytes, &m), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dimension_mismatch_leaves_template_untouched() {
        let small = model(4, 1);
        let bytes = checkpoint_bytes(&small, &OptimizerState::new(small.store()));
        let big = model(8, 2);
        let before = big.clone();
        assert!(matches!(load_checkpoint_bytes(&bytes, &big), Err(Error::Dimension { .. })));
        assert!(big.store().values_bitwise_eq(before.store()));
    }
}
