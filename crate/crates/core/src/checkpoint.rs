//! Versioned binary checkpoints: a JSON header with configuration,
//! vocabulary and a named-tensor index, followed by little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ErglModel, ModelConfig};
use crate::nn::ParamGroup;
use crate::ranking::EventVocabulary;
use crate::tensor::{Real, Tensor};
use crate::training::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ERGLCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn of<T: Real>() -> Self {
        if T::BITS == 32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    model: ModelConfig,
    train: TrainConfig,
    scenes: Vec<String>,
    vocabulary: EventVocabulary,
    best_epoch: usize,
    tensors: Vec<TensorEntry>,
    /// Adam step count when moments follow the parameters in the payload.
    optimizer_step: Option<u64>,
}

/// A trained model with everything needed to evaluate or resume it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ErglModel<T>,
    pub train: TrainConfig,
    pub scenes: Vec<String>,
    pub vocabulary: EventVocabulary,
    pub best_epoch: usize,
    pub optimizer: Option<AdamState<T>>,
}

fn put<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        if T::BITS == 32 {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn get<T: Real>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = DType::of::<T>();
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.model.store.len());
        for e in self.model.store.entries() {
            tensors.push(TensorEntry {
                name: e.name.clone(),
                group: e.group,
                shape: e.tensor.shape().to_vec(),
                trainable: e.tensor.requires_grad,
                offset: payload.len() as u64,
            });
            put(&mut payload, e.tensor.data());
        }
        if let Some(opt) = &self.optimizer {
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put(&mut payload, m);
                put(&mut payload, v);
            }
        }
        let header = Header {
            dtype,
            model: self.model.config.clone(),
            train: self.train.clone(),
            scenes: self.scenes.clone(),
            vocabulary: self.vocabulary.clone(),
            best_epoch: self.best_epoch,
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(14 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Format(format!("checkpoint truncated in {what}"));
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = u16::from_le_bytes(bytes.get(8..10).ok_or_else(|| truncated("version"))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes.get(10..14).ok_or_else(|| truncated("header length"))?.try_into().unwrap()) as usize;
        let json = bytes.get(14..14 + hlen).ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let payload = &bytes[14 + hlen..];
        header.vocabulary.validate()?;

        let mut model = ErglModel::<T>::new(&header.model, 0)?;
        if model.store.len() != header.tensors.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} tensors, architecture has {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        let width = header.dtype.width();
        let mut cursor = 0usize;
        for (entry, t) in model.store.entries_mut().iter_mut().zip(&header.tensors) {
            if entry.name != t.name || entry.tensor.shape() != t.shape.as_slice() || entry.group != t.group {
                return Err(Error::Compatibility(format!("tensor {} {:?} does not match {} {:?}", t.name, t.shape, entry.name, entry.tensor.shape())));
            }
            if t.offset as usize != cursor {
                return Err(Error::Format(format!("tensor {} has offset {} where {cursor} was expected", t.name, t.offset)));
            }
            let len = entry.tensor.numel() * width;
            let raw = payload.get(cursor..cursor + len).ok_or_else(|| truncated(&t.name))?;
            let mut tensor = Tensor::new(t.shape.clone(), get(raw, header.dtype))?;
            if t.trainable {
                tensor = tensor.with_grad();
            }
            entry.tensor = tensor;
            cursor += len;
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut state = AdamState::new(&model.store);
                state.step = step;
                for (m, v) in state.m.iter_mut().zip(state.v.iter_mut()) {
                    for buf in [m, v] {
                        let len = buf.len() * width;
                        let raw = payload.get(cursor..cursor + len).ok_or_else(|| truncated("optimizer state"))?;
                        *buf = get(raw, header.dtype);
                        cursor += len;
                    }
                }
                Some(state)
            }
            None => None,
        };
        if cursor != payload.len() {
            return Err(Error::Format(format!("checkpoint has {} trailing bytes", payload.len() - cursor)));
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            scenes: header.scenes,
            vocabulary: header.vocabulary,
            best_epoch: header.best_epoch,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Refuses to pair this checkpoint with data described by another
    /// vocabulary or scene list.
    pub fn check_compatible(&self, vocabulary: &EventVocabulary, scenes: &[String]) -> Result<()> {
        if self.vocabulary.event_ids != vocabulary.event_ids {
            return Err(Error::Compatibility(format!(
                "vocabulary mismatch: checkpoint has {:?}, data has {:?}",
                self.vocabulary.event_ids, vocabulary.event_ids
            )));
        }
        if self.scenes != scenes {
            return Err(Error::Compatibility("scene list differs from the checkpoint's".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::dataset::default_scenes;
    use crate::edges::MelFlags;
    use crate::ranking::{select_top_n, N_EVENT_CLASSES};

    fn checkpoint<T: Real>(seed: u64, with_opt: bool) -> Checkpoint<T> {
        let config = ModelConfig {
            backbone: BackboneConfig { channels: vec![2, 3], n_events: 3, ..Default::default() },
            mel: MelFlags::default(),
            gcn_layers: 1,
            n_scenes: 10,
        };
        let model = ErglModel::<T>::new(&config, seed).unwrap();
        let scores: Vec<f64> = (0..N_EVENT_CLASSES).map(|i| ((i * 37 + seed as usize) % 101) as f64 / 7.0).collect();
        let mut optimizer = with_opt.then(|| AdamState::new(&model.store));
        if let Some(o) = &mut optimizer {
            o.step = 7;
            o.m.iter_mut().flatten().enumerate().for_each(|(i, v)| *v = T::lit(i as f64 * 1e-3));
        }
        Checkpoint {
            model,
            train: TrainConfig { n: 3, channels: vec![2, 3], u: 1, seed, ..Default::default() },
            scenes: default_scenes(),
            vocabulary: select_top_n(&scores, 3).unwrap(),
            best_epoch: 4,
            optimizer,
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        for with_opt in [false, true] {
            let ck = checkpoint::<f32>(3, with_opt);
            let bytes = ck.to_bytes();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.model.store.entries(), ck.model.store.entries());
            assert_eq!(back.optimizer, ck.optimizer);
            let wide = checkpoint::<f64>(3, with_opt).to_bytes();
            assert_eq!(Checkpoint::<f64>::from_bytes(&wide).unwrap().to_bytes(), wide);
        }
    }

    #[test]
    fn truncation_and_magic_are_errors() {
        let bytes = checkpoint::<f32>(1, true).to_bytes();
        for cut in [0, 4, 9, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format(_))));
        let mut future = bytes.clone();
        future[8] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&future), Err(Error::Compatibility(_))));
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&longer).is_err());
    }

    #[test]
    fn compatibility_checks() {
        let ck = checkpoint::<f32>(2, false);
        assert!(ck.check_compatible(&ck.vocabulary, &default_scenes()).is_ok());
        let mut other = ck.vocabulary.clone();
        other.event_ids.reverse();
        assert!(matches!(ck.check_compatible(&other, &default_scenes()), Err(Error::Compatibility(_))));
    }
}
