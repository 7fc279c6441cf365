//! Checkpoint format: a text header (config fields plus an ordered tensor
//! manifest with byte offsets) terminated by a `data` line, followed by raw
//! little-endian f64 tensor data. Load(save(m)) is bit-identical.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const MAGIC: &str = "epgs-checkpoint v1";

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let c = model.config();
    writeln!(f, "{MAGIC}")?;
    writeln!(f, "vocab_size {}", c.vocab_size)?;
    writeln!(f, "d_model {}", c.d_model)?;
    writeln!(f, "n_layers {}", c.n_layers)?;
    writeln!(f, "n_heads {}", c.n_heads)?;
    writeln!(f, "d_ff {}", c.d_ff)?;
    writeln!(f, "max_seq_len {}", c.max_seq_len)?;
    writeln!(f, "seed {}", c.seed)?;
    let mut offset = 0usize;
    for (name, shape, data) in model.tensors() {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "tensor {name} {} {offset}", dims.join("x"))?;
        offset += data.len() * 8;
    }
    writeln!(f, "data")?;
    for (_, _, data) in model.tensors() {
        for v in data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Corruption(format!("bad magic line: {:?}", line.trim_end())));
    }

    let mut fields = std::collections::BTreeMap::new();
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Corruption("truncated header: no data marker".into()));
        }
        let l = line.trim_end();
        if l == "data" {
            break;
        }
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Corruption("tensor line missing name".into()))?;
                let dims = parts
                    .next()
                    .ok_or_else(|| Error::Corruption("tensor line missing shape".into()))?;
                let off: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Corruption("tensor line missing offset".into()))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Corruption(format!("bad shape in tensor {name}")))?;
                manifest.push((name.to_string(), shape, off));
            }
            Some(key) => {
                let val = parts
                    .next()
                    .ok_or_else(|| Error::Corruption(format!("header field {key} missing value")))?;
                fields.insert(key.to_string(), val.to_string());
            }
            None => {}
        }
    }

    let get = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Corruption(format!("missing or bad header field {k}")))
    };
    let config = ModelConfig {
        vocab_size: get("vocab_size")? as usize,
        d_model: get("d_model")? as usize,
        n_layers: get("n_layers")? as usize,
        n_heads: get("n_heads")? as usize,
        d_ff: get("d_ff")? as usize,
        max_seq_len: get("max_seq_len")? as usize,
        seed: get("seed")?,
    };

    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let total: usize = manifest.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    if raw.len() != total * 8 {
        return Err(Error::Corruption(format!(
            "data section holds {} bytes, manifest expects {}",
            raw.len(),
            total * 8
        )));
    }

    let mut named = Vec::with_capacity(manifest.len());
    for (name, shape, off) in manifest {
        let numel: usize = shape.iter().product();
        let end = off + numel * 8;
        if end > raw.len() {
            return Err(Error::Corruption(format!("tensor {name} extends past data section")));
        }
        let data: Vec<f64> = raw[off..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        named.push((name, shape, data));
    }
    Model::from_tensors(config, named)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::init(ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let m = model();
        save(&m, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_forward_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model();
        save(&m, &p).unwrap();
        let loaded = load(&p).unwrap();
        let a = m.forward_ids(&[1, 5, 3]).unwrap();
        let b = loaded.forward_ids(&[1, 5, 3]).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
    }

    #[test]
    fn truncated_file_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&model(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load(&p), Err(Error::Corruption(_))));
    }

    #[test]
    fn garbage_file_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, b"not a checkpoint\n").unwrap();
        assert!(matches!(load(&p), Err(Error::Corruption(_))));
    }
}
