//! Checkpoint file: `XVCK`, `u32` version, `u32` header length, a JSON header
//! (stage, dims, vocabulary, languages, tensor table), then each tensor as an
//! XVFT block in header order. Training config goes to a `<path>.json` sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FieldNet, NetDims, TrainConfig, TENSOR_NAMES};
use crate::conditioning::LanguageTable;
use crate::error::{Error, Result};
use crate::features::{read_u32, read_xvft, write_xvft};
use crate::infill::Stage;
use crate::phonemes::{PhoneticToken, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub net: FieldNet,
    pub vocab: Vocabulary,
    pub languages: LanguageTable,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    dims: NetDims,
    vocabulary: Vec<PhoneticToken>,
    languages: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Checkpoint {
    /// Fresh Stage-1 checkpoint sized to `vocab` and `languages`.
    pub fn init(
        vocab: Vocabulary,
        languages: LanguageTable,
        feat: usize,
        dual_level: bool,
        seed: u64,
    ) -> Self {
        let mut dims = NetDims::toy(feat, vocab.len(), languages.len());
        dims.dual_level = dual_level;
        Self {
            stage: Stage::S1,
            net: FieldNet::init(dims, seed),
            vocab,
            languages,
            train_config: None,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            dims: self.net.dims,
            vocabulary: self.vocab.tokens().to_vec(),
            languages: self.languages.codes().to_vec(),
            tensors: self
                .net
                .tensors()
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let bytes = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(&bytes)?;
        for (_, t) in self.net.tensors() {
            write_xvft(&mut w, &t.to_owned())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; len];
        r.read_exact(&mut raw)?;
        let header: Header = serde_json::from_slice(&raw)?;
        let vocab = Vocabulary::from_tokens(header.vocabulary)?;
        let languages = LanguageTable::new(header.languages)?;
        let mut net = FieldNet::init(header.dims, 0);
        if header.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::Format("tensor table size".into()));
        }
        for ((entry, (name, mut dst)), _) in header.tensors.iter().zip(net.tensors_mut()).zip(0..) {
            if entry.name != name {
                return Err(Error::Format(format!(
                    "expected tensor {name}, found {}",
                    entry.name
                )));
            }
            let m = read_xvft(&mut r)?;
            if m.dim() != dst.dim() || m.dim() != (entry.rows, entry.cols) {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}",
                    m.dim()
                )));
            }
            dst.assign(&m);
        }
        if vocab.len() != header.dims.vocab || languages.table_rows() != header.dims.lid_rows {
            return Err(Error::Format(
                "dims disagree with vocabulary or languages".into(),
            ));
        }
        Ok(Self {
            stage: header.stage,
            net,
            vocab,
            languages,
            train_config: None,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        if let Some(cfg) = &self.train_config {
            fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(cfg)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck = Self::read(fs::read(path)?.as_slice())?;
        let side = Self::sidecar_path(path);
        if side.exists() {
            ck.train_config = Some(serde_json::from_str(&fs::read_to_string(side)?)?);
        }
        Ok(ck)
    }
}
