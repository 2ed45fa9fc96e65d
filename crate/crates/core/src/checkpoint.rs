//! Binary tensor archive for model parameters.
//!
//! Layout, all little-endian: magic `ATNZ`, format version (u32), entry
//! count (u32), then per entry a u16 name length + UTF-8 name, a u8 rank,
//! one u32 extent per axis, and the f32 payload in row-major order.
//! Only trainable parameters are stored; frozen tensors (position table,
//! random feature matrices) are rebuilt from the config and seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ATNZ";
const VERSION: u32 = 1;

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Contract("too many tensors for archive".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| Error::Contract("tensor rank exceeds 255".into()))?;
        w.write_all(&[rank])?;
        for &extent in tensor.shape() {
            let e = u32::try_from(extent)
                .map_err(|_| Error::Contract("tensor extent exceeds u32".into()))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    let entries: Vec<(String, Tensor<f32>)> = model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    save(path, &entries)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Io(format!("archive truncated reading {what}")))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Io(format!(
            "bad archive magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Io(format!(
            "unsupported archive version {version} (expected {VERSION})"
        )));
    }
    read_exact(&mut r, &mut u32buf, "entry count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact(&mut r, &mut u16buf, "name length")?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Io(format!("entry {i} name is not UTF-8")))?;
        let mut rank_buf = [0u8; 1];
        read_exact(&mut r, &mut rank_buf, "rank")?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact(&mut r, &mut u32buf, "extent")?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            read_exact(&mut r, &mut u32buf, "payload")?;
            data.push(f32::from_le_bytes(u32buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Io("archive has trailing bytes".into()));
    }
    Ok(entries)
}

/// Load an archive into an existing model. Entry names, order, and shapes
/// must match the model's parameter store exactly.
pub fn load_into_model(path: &Path, model: &mut Model<f32>) -> Result<()> {
    let entries = load(path)?;
    if entries.len() != model.params.len() {
        return Err(Error::Contract(format!(
            "archive holds {} tensors, model expects {}",
            entries.len(),
            model.params.len()
        )));
    }
    for (i, (name, tensor)) in entries.into_iter().enumerate() {
        let (expect_name, slot) = model.params.at_mut(i);
        if *expect_name != name {
            return Err(Error::Contract(format!(
                "archive entry {i} is '{name}', model expects '{expect_name}'"
            )));
        }
        if slot.shape() != tensor.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch on '{name}': archive {:?}, model {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("atnz-ckpt-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip() {
        let path = tmp("roundtrip.bin");
        let cfg = ModelConfig::tiny(AttentionKind::Additive);
        let model: Model<f32> = Model::init(cfg.clone()).unwrap();
        save_model(&path, &model).unwrap();
        let mut reloaded: Model<f32> = Model::init(cfg).unwrap();
        // scramble, then restore
        for (_, t) in reloaded.params.iter_mut() {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        load_into_model(&path, &mut reloaded).unwrap();
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(reloaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_corrupt_magic() {
        let path = tmp("magic.bin");
        let entries = vec![("x".to_string(), Tensor::full(&[2, 2], 1.0f32))];
        save(&path, &entries).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_truncation() {
        let path = tmp("trunc.bin");
        let entries = vec![("x".to_string(), Tensor::full(&[8], 0.5f32))];
        save(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
