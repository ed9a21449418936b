//! Binary checkpoints: a JSON manifest followed by raw little-endian tensors.
//!
//! Layout:
//!
//! ```text
//! "CHIMCKPT"  u32 version
//! u64 manifest length, manifest JSON
//! u32 tensor count
//! per tensor: u32 name length, name, u8 constrained, u32 ndim, u64 dims.., f64 values..
//! ```

use crate::config::ModelConfig;
use crate::data::{EntityVocab, WordVocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CHIMCKPT";
const VERSION: u32 = 1;
/// Upper bound on the manifest bytes and on the values of one tensor.
const MAX_SECTION: usize = 1 << 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub words: WordVocab,
    pub users: EntityVocab,
    pub products: EntityVocab,
    /// Value of the lowest label in corpus files.
    pub label_offset: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<(Model, Manifest)> {
        let model = Model::from_params(self.manifest.model.clone(), self.params)?;
        Ok((model, self.manifest))
    }
}

pub fn write_checkpoint<W: Write>(out: &mut W, manifest: &Manifest, params: &ParamStore) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LE>(VERSION)?;
    let json = serde_json::to_vec(manifest).map_err(|e| Error::invalid(e.to_string()))?;
    out.write_u64::<LE>(json.len() as u64)?;
    out.write_all(&json)?;
    out.write_u32::<LE>(params.len() as u32)?;
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.write_u32::<LE>(name.len() as u32)?;
        out.write_all(name)?;
        out.write_u8(u8::from(params.is_constrained(id)))?;
        let t = params.get(id);
        out.write_u32::<LE>(t.shape().len() as u32)?;
        for &d in t.shape() {
            out.write_u64::<LE>(d as u64)?;
        }
        for &v in t.data() {
            out.write_f64::<LE>(v)?;
        }
    }
    Ok(())
}

fn corrupt(what: impl std::fmt::Display) -> Error {
    Error::data(format!("corrupt checkpoint: {what}"))
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint> {
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            corrupt("unexpected end of file")
        } else {
            Error::Io(e)
        }
    };
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = input.read_u32::<LE>().map_err(eof)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = input.read_u64::<LE>().map_err(eof)? as usize;
    if len > MAX_SECTION {
        return Err(corrupt(format!("manifest length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(eof)?;
    let mut manifest: Manifest = serde_json::from_slice(&json).map_err(corrupt)?;
    manifest.words.reindex();
    manifest.users.reindex();
    manifest.products.reindex();
    let count = input.read_u32::<LE>().map_err(eof)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = input.read_u32::<LE>().map_err(eof)? as usize;
        if n > 4096 {
            return Err(corrupt(format!("parameter name length {n}")));
        }
        let mut name = vec![0u8; n];
        input.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name).map_err(corrupt)?;
        let constrained = input.read_u8().map_err(eof)? != 0;
        let ndim = input.read_u32::<LE>().map_err(eof)? as usize;
        let shape = (0..ndim)
            .map(|_| input.read_u64::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(eof)?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_SECTION)
            .ok_or_else(|| corrupt(format!("tensor `{name}` has shape {shape:?}")))?;
        let mut data = vec![0.0; numel];
        input.read_f64_into::<LE>(&mut data).map_err(eof)?;
        params.add(name, Tensor::new(&shape, data)?, constrained);
    }
    Ok(Checkpoint { manifest, params })
}

pub fn save_checkpoint(path: &Path, manifest: &Manifest, params: &ParamStore) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, manifest, params)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AttributeConfig, InjectionSite, RepresentationKind};

    fn sample() -> (Manifest, Model) {
        let attrs = AttributeConfig::new(RepresentationKind::Chim, &[InjectionSite::Encoder], 4).with_chunks(2, 2);
        let config = ModelConfig::uniform(8, 6, 3).with_attributes(attrs, 3, 2);
        let model = Model::new(config.clone(), 5).unwrap();
        let manifest = Manifest {
            model: config,
            words: WordVocab::from_tokens(
                ["<pad>", "<unk>", "a", "b", "c", "d"].map(String::from).to_vec(),
                2,
            ),
            users: EntityVocab::build(["u1", "u2"].into_iter()),
            products: EntityVocab::build(["p1"].into_iter()),
            label_offset: 1,
        };
        (manifest, model)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (manifest, model) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &manifest, model.params()).unwrap();
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.manifest, manifest);
        assert_eq!(ck.manifest.users.id("u2"), 2);
        assert_eq!(ck.params.checksum(), model.params().checksum());
        let (restored, _) = ck.into_model().unwrap();
        let x = restored.logits(&[2, 3, 4], 1, 1, None).unwrap();
        let y = model.logits(&[2, 3, 4], 1, 1, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn damage_is_reported() {
        let (manifest, model) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &manifest, model.params()).unwrap();
        let err = read_checkpoint(&mut &buf[..buf.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("end of file"), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    }
}
