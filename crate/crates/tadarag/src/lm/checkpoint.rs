//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "TADA"
//! u32    format version (1)
//! u32x5  embed_dim, num_layers, num_heads, context_len, vocab_size
//! u64    init seed
//! u32    reserved-token count, then per token: u32 id, u32 len, utf-8 bytes
//! u32    parameter count, then per parameter in name order:
//!        u32 name len, name bytes, u32 ndim, u32 dims..., f32 values
//! ```
//!
//! The parameter section may carry groups beyond the language model (the
//! mixing network's "mix." prefix); loaders resolve what they need by name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};

use super::vocab::Vocabulary;
use super::{LmConfig, LmError};

pub const MAGIC: &[u8; 4] = b"TADA";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(
    path: &Path,
    cfg: &LmConfig,
    vocab: &Vocabulary,
    store: &ParamStore,
) -> Result<(), LmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        cfg.embed_dim as u32,
        cfg.num_layers as u32,
        cfg.num_heads as u32,
        cfg.context_len as u32,
        cfg.vocab_size as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&cfg.seed.to_le_bytes())?;

    w.write_all(&(vocab.reserved().len() as u32).to_le_bytes())?;
    for (marker, id) in vocab.reserved() {
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&(marker.len() as u32).to_le_bytes())?;
        w.write_all(marker.as_bytes())?;
    }

    let order = store.sorted_indices();
    w.write_all(&(order.len() as u32).to_le_bytes())?;
    for idx in order {
        let p = store.get(idx);
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(LmConfig, Vocabulary, ParamStore), LmError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LmError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(LmError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let embed_dim = read_u32(&mut r)? as usize;
    let num_layers = read_u32(&mut r)? as usize;
    let num_heads = read_u32(&mut r)? as usize;
    let context_len = read_u32(&mut r)? as usize;
    let vocab_size = read_u32(&mut r)? as usize;
    let mut seed_bytes = [0u8; 8];
    r.read_exact(&mut seed_bytes)?;
    let cfg = LmConfig {
        vocab_size,
        embed_dim,
        num_layers,
        num_heads,
        context_len,
        seed: u64::from_le_bytes(seed_bytes),
    };

    let vocab = Vocabulary::new();
    let n_reserved = read_u32(&mut r)? as usize;
    if n_reserved != vocab.reserved().len() {
        return Err(LmError::Format(format!(
            "checkpoint declares {n_reserved} reserved tokens, expected {}",
            vocab.reserved().len()
        )));
    }
    for (marker, id) in vocab.reserved() {
        let file_id = read_u32(&mut r)?;
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let file_marker = String::from_utf8(buf)
            .map_err(|_| LmError::Format("reserved token is not utf-8".into()))?;
        if file_id != *id || file_marker != *marker {
            return Err(LmError::Format(format!(
                "reserved token mismatch: {file_marker:?}={file_id} vs {marker:?}={id}"
            )));
        }
    }

    let n_params = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| LmError::Format("parameter name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| LmError::Format(format!("parameter {name:?}: {e}")))?;
        store.register(&name, tensor)?;
    }
    Ok((cfg, vocab, store))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, LmError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LanguageModel;

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tada");
        let model = LanguageModel::new(LmConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            context_len: 32,
            seed: 5,
            ..LmConfig::default()
        })
        .unwrap();
        save(&path, model.config(), model.vocab(), model.store()).unwrap();
        let (cfg, vocab, store) = load(&path).unwrap();
        assert_eq!(&cfg, model.config());
        assert_eq!(&vocab, model.vocab());
        assert_eq!(store.len(), model.store().len());
        for p in model.store().iter() {
            let loaded = store.by_name(p.name()).expect("parameter present");
            assert_eq!(loaded.tensor().shape(), p.tensor().shape());
            assert_eq!(loaded.tensor().data(), p.tensor().data());
        }
        // loaded model predicts identically
        let reloaded = LanguageModel::from_store(cfg, vocab, store).unwrap();
        let ids = model.encode("check");
        assert_eq!(
            model.forward_hidden(&ids).unwrap(),
            reloaded.forward_hidden(&ids).unwrap()
        );
    }

    #[test]
    fn save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tada");
        let p2 = dir.path().join("b.tada");
        let model = LanguageModel::new(LmConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 1,
            context_len: 16,
            seed: 9,
            ..LmConfig::default()
        })
        .unwrap();
        save(&p1, model.config(), model.vocab(), model.store()).unwrap();
        save(&p2, model.config(), model.vocab(), model.store()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tada");
        std::fs::write(&path, b"NOPE additional junk").unwrap();
        assert!(matches!(load(&path), Err(LmError::Format(_))));
    }
}
