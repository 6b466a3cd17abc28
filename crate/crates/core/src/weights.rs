//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "SKIMRNN\0"
//! version      u32       FORMAT_VERSION
//! d_in         u32       embedding width
//! d            u32       big-cell width
//! d_small      u32       small-cell width (equals d for plain LSTM models)
//! k            u32       decision choices (2)
//! gate_order   4 bytes   "ifog"
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON (model kind, vocabulary, labels)
//! n_arrays     u32
//! n_arrays × {
//!   name_len   u16
//!   name       name_len bytes UTF-8
//!   ndim       u8
//!   dims       ndim × u64
//!   data       prod(dims) × f64 (IEEE-754 binary64)
//! }
//! ```
//!
//! Arrays are written in the model's parameter order, so identical models
//! produce identical bytes.

use crate::cell::{LstmParams, SkimUnitParams};
use crate::data::{LabelSet, Vocab};
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, QaAttentionModel, TaskModel, QA_DIRECTIONS};
use crate::recurrent::Recurrent;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SKIMRNN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub d_in: u32,
    pub d: u32,
    pub d_small: u32,
    pub k: u32,
    pub gate_order: [u8; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub header: Header,
    pub meta: String,
    pub arrays: Vec<(String, Tensor)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| fmt_err(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

impl WeightFile {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(MAGIC)?;
        for v in [h.version, h.d_in, h.d, h.d_small, h.k] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&h.gate_order)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            let name_len = u16::try_from(name.len()).map_err(|_| fmt_err("array name too long"))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<8>(r)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported format version {version}")));
        }
        let (d_in, d, d_small, k) = (read_u32(r)?, read_u32(r)?, read_u32(r)?, read_u32(r)?);
        let gate_order = read_exact::<4>(r)?;
        if &gate_order != b"ifog" {
            return Err(fmt_err(format!(
                "unsupported gate order {:?}",
                String::from_utf8_lossy(&gate_order)
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)
            .map_err(|e| fmt_err(format!("truncated metadata: {e}")))?;
        let meta = String::from_utf8(meta).map_err(|_| fmt_err("metadata is not UTF-8"))?;
        let n = read_u32(r)?;
        let mut arrays = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|e| fmt_err(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| fmt_err("array name is not UTF-8"))?;
            let ndim = read_exact::<1>(r)?[0] as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| Ok(u64::from_le_bytes(read_exact::<8>(r)?) as usize))
                .collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)
                .map_err(|e| fmt_err(format!("truncated array {name}: {e}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(fmt_err("trailing bytes after last array"));
        }
        Ok(Self {
            header: Header {
                version,
                d_in,
                d,
                d_small,
                k,
                gate_order,
            },
            meta,
            arrays,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// JSON metadata stored alongside the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    /// `"classifier"` or `"qa"`.
    pub kind: String,
    /// `"skim"` or `"lstm"`.
    pub cell: String,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub freeze_embedding: bool,
}

/// A trained model with everything needed to run it on text.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Classifier {
        model: ClassifierModel,
        vocab: Vocab,
        labels: LabelSet,
    },
    Qa {
        model: QaAttentionModel,
        vocab: Vocab,
    },
}

fn take(arrays: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    arrays
        .remove(name)
        .ok_or_else(|| fmt_err(format!("missing array {name}")))
}

fn layer_dims(r: &Recurrent) -> (u32, u32) {
    let dims = r.dims();
    (dims.d as u32, dims.d_small as u32)
}

impl SavedModel {
    pub fn vocab(&self) -> &Vocab {
        match self {
            SavedModel::Classifier { vocab, .. } | SavedModel::Qa { vocab, .. } => vocab,
        }
    }

    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let (meta, named, first, d_in): (ModelMeta, Vec<(String, &Tensor)>, &Recurrent, usize) = match self {
            SavedModel::Classifier { model, vocab, labels } => (
                ModelMeta {
                    kind: "classifier".into(),
                    cell: if model.rnn.is_skim() { "skim" } else { "lstm" }.into(),
                    vocab: vocab.tokens().to_vec(),
                    labels: labels.labels.clone(),
                    freeze_embedding: model.freeze_embedding,
                },
                model.named_params(),
                &model.rnn,
                model.embedding.cols(),
            ),
            SavedModel::Qa { model, vocab } => (
                ModelMeta {
                    kind: "qa".into(),
                    cell: if model.has_skim() { "skim" } else { "lstm" }.into(),
                    vocab: vocab.tokens().to_vec(),
                    labels: Vec::new(),
                    freeze_embedding: model.freeze_embedding,
                },
                model.named_params(),
                &model.layers[0][0],
                model.d_in(),
            ),
        };
        let (d, d_small) = layer_dims(first);
        Ok(WeightFile {
            header: Header {
                version: FORMAT_VERSION,
                d_in: d_in as u32,
                d,
                d_small,
                k: 2,
                gate_order: *b"ifog",
            },
            meta: serde_json::to_string(&meta)?,
            arrays: named.into_iter().map(|(n, t)| (n, t.clone())).collect(),
        })
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&file.meta)?;
        let vocab = Vocab::from_tokens(meta.vocab.clone())?;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, t) in &file.arrays {
            if arrays.insert(n.clone(), t.clone()).is_some() {
                return Err(fmt_err(format!("duplicate array {n}")));
            }
        }
        let embedding = take(&mut arrays, "embedding")?;
        if embedding.rows() != vocab.len() {
            return Err(fmt_err("embedding rows do not match vocabulary"));
        }
        let skim = match meta.cell.as_str() {
            "skim" => true,
            "lstm" => false,
            other => return Err(fmt_err(format!("unknown cell kind {other:?}"))),
        };
        let layer = |arrays: &mut BTreeMap<String, Tensor>, prefix: &str, d_in: usize| -> Result<Recurrent> {
            let lstm = |w: Tensor, b: Tensor| -> Result<LstmParams> {
                let d_out = b.len() / 4;
                let d_read = w.cols().checked_sub(d_in).ok_or_else(|| fmt_err("weight narrower than input"))?;
                let p = LstmParams {
                    w,
                    b,
                    d_in,
                    d_out,
                    d_read,
                };
                p.validate()?;
                Ok(p)
            };
            if skim {
                let unit = SkimUnitParams {
                    big: lstm(take(arrays, &format!("{prefix}big.W"))?, take(arrays, &format!("{prefix}big.b"))?)?,
                    small: lstm(take(arrays, &format!("{prefix}small.W"))?, take(arrays, &format!("{prefix}small.b"))?)?,
                    decision_w: take(arrays, &format!("{prefix}decision.W"))?,
                    decision_b: take(arrays, &format!("{prefix}decision.b"))?,
                };
                unit.validate()?;
                Ok(Recurrent::Skim(unit))
            } else {
                Ok(Recurrent::Lstm(lstm(
                    take(arrays, &format!("{prefix}lstm.W"))?,
                    take(arrays, &format!("{prefix}lstm.b"))?,
                )?))
            }
        };
        let d_in = embedding.cols();
        let out = match meta.kind.as_str() {
            "classifier" => {
                let rnn = layer(&mut arrays, "", d_in)?;
                let d = rnn.d();
                let model = ClassifierModel {
                    embedding,
                    rnn,
                    proj_w: take(&mut arrays, "head.W")?,
                    proj_b: take(&mut arrays, "head.b")?,
                    freeze_embedding: meta.freeze_embedding,
                };
                model.validate()?;
                if model.proj_w.cols() != d || meta.labels.len() != model.n_classes() {
                    return Err(fmt_err("head does not match labels"));
                }
                SavedModel::Classifier {
                    model,
                    vocab,
                    labels: LabelSet { labels: meta.labels },
                }
            }
            "qa" => {
                let att_w = take(&mut arrays, "attention.w")?;
                let l1 = [
                    layer(&mut arrays, &format!("{}.", QA_DIRECTIONS[0]), 3 * d_in)?,
                    layer(&mut arrays, &format!("{}.", QA_DIRECTIONS[1]), 3 * d_in)?,
                ];
                let d = l1[0].d();
                let l2 = [
                    layer(&mut arrays, &format!("{}.", QA_DIRECTIONS[2]), 2 * d)?,
                    layer(&mut arrays, &format!("{}.", QA_DIRECTIONS[3]), 2 * d)?,
                ];
                let model = QaAttentionModel {
                    embedding,
                    att_w,
                    layers: vec![l1, l2],
                    w_start: take(&mut arrays, "head.start")?,
                    w_end: take(&mut arrays, "head.end")?,
                    freeze_embedding: meta.freeze_embedding,
                };
                model.validate()?;
                SavedModel::Qa { model, vocab }
            }
            other => return Err(fmt_err(format!("unknown model kind {other:?}"))),
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(fmt_err(format!("unexpected array {extra}")));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::SeedRng;
    use rand::SeedableRng;

    fn vocab(n: usize) -> Vocab {
        let toks: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        Vocab::build([toks.as_slice()])
    }

    #[test]
    fn classifier_round_trip_is_bit_exact() {
        let mut rng = SeedRng::seed_from_u64(9);
        let v = vocab(8);
        let model = ClassifierModel::new(v.len(), 3, 4, 6, Some(2), &mut rng).unwrap();
        let saved = SavedModel::Classifier {
            model,
            vocab: v,
            labels: LabelSet {
                labels: vec!["a".into(), "b".into(), "c".into()],
            },
        };
        let bytes = saved.to_weight_file().unwrap().to_bytes().unwrap();
        let back = SavedModel::from_weight_file(&WeightFile::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, saved);
        assert_eq!(back.to_weight_file().unwrap().to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[28..32], b"ifog");
    }

    #[test]
    fn qa_and_lstm_round_trip() {
        let mut rng = SeedRng::seed_from_u64(10);
        let v = vocab(5);
        let qa = SavedModel::Qa {
            model: QaAttentionModel::new(v.len(), 3, 4, Some(1), &mut rng).unwrap(),
            vocab: v.clone(),
        };
        let f = qa.to_weight_file().unwrap();
        assert_eq!(SavedModel::from_weight_file(&f).unwrap(), qa);

        let plain = SavedModel::Classifier {
            model: ClassifierModel::new(v.len(), 2, 3, 4, None, &mut rng).unwrap(),
            vocab: v,
            labels: LabelSet {
                labels: vec!["x".into(), "y".into()],
            },
        };
        let f = plain.to_weight_file().unwrap();
        assert_eq!(f.header.d_small, f.header.d);
        assert_eq!(SavedModel::from_weight_file(&f).unwrap(), plain);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut rng = SeedRng::seed_from_u64(11);
        let v = vocab(4);
        let saved = SavedModel::Classifier {
            model: ClassifierModel::new(v.len(), 2, 3, 4, Some(1), &mut rng).unwrap(),
            vocab: v,
            labels: LabelSet {
                labels: vec!["x".into(), "y".into()],
            },
        };
        let bytes = saved.to_weight_file().unwrap().to_bytes().unwrap();
        assert!(WeightFile::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightFile::read_from(&mut bad.as_slice()).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(WeightFile::read_from(&mut longer.as_slice()).is_err());
    }
}
