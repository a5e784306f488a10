//! Training checkpoints.
//!
//! A checkpoint is one line of JSON metadata followed by raw little-endian
//! `f64` blocks in the order listed in the header: the model parameters, the
//! inner learning rates and, when present, the Adam moments.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Vocab;
use crate::mpnn::{ModelParams, ModelShape};
use crate::trainer::{AdamState, LearningRates, MetaState, TrainConfig, TrainMode};

pub const FORMAT: &str = "metaikg-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` does not survive every JSON reader, so it is kept as a string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub shape: ModelShape,
    pub flattening_order: Vec<String>,
    pub relation_vocab_sha256: String,
    pub mode: TrainMode,
    pub iteration: usize,
    pub rng: RngState,
    /// `"scalar"` or `"per-parameter"`.
    pub alpha_kind: String,
    pub adam_t: Option<u64>,
    pub blocks: Vec<BlockInfo>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: MetaState,
}

impl Checkpoint {
    /// Fails unless the checkpoint was written for this model shape, relation
    /// vocabulary and training mode.
    pub fn validate(&self, config: &TrainConfig, relations: &Vocab) -> Result<()> {
        let h = &self.header;
        let expected = config.model_shape(relations.len());
        if h.shape != expected {
            return Err(Error::Checkpoint(format!(
                "model shape {:?} does not match configured {:?}",
                h.shape, expected
            )));
        }
        self.validate_vocab(relations)?;
        if h.mode != config.mode {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained in mode {} but {} is configured",
                h.mode, config.mode
            )));
        }
        Ok(())
    }

    pub fn validate_vocab(&self, relations: &Vocab) -> Result<()> {
        if self.header.relation_vocab_sha256 != relations.fingerprint() {
            return Err(Error::Checkpoint(
                "relation vocabulary does not match".into(),
            ));
        }
        if self.header.shape.n_relations != relations.len() {
            return Err(Error::Checkpoint("relation count does not match".into()));
        }
        Ok(())
    }
}

fn write_block(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn save(path: &Path, state: &MetaState, config: &TrainConfig, relations: &Vocab) -> Result<()> {
    let shape = *state.params.shape();
    let n = state.params.len();
    let mut blocks = vec![BlockInfo {
        name: "params".into(),
        len: n,
    }];
    let mut body = Vec::with_capacity(8 * n * 2);
    write_block(&mut body, state.params.values());
    let alpha_kind = match &state.alpha {
        LearningRates::Scalar(a) => {
            blocks.push(BlockInfo {
                name: "alpha".into(),
                len: 1,
            });
            write_block(&mut body, &[*a]);
            "scalar"
        }
        LearningRates::PerParameter(a) => {
            blocks.push(BlockInfo {
                name: "alpha".into(),
                len: a.len(),
            });
            write_block(&mut body, a);
            "per-parameter"
        }
    };
    if let Some(adam) = &state.adam {
        for (name, v) in [("adam_m", &adam.m), ("adam_v", &adam.v)] {
            blocks.push(BlockInfo {
                name: name.into(),
                len: v.len(),
            });
            write_block(&mut body, v);
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        shape,
        flattening_order: shape.flattening_order(),
        relation_vocab_sha256: relations.fingerprint(),
        mode: config.mode,
        iteration: state.iteration,
        rng: RngState::capture(&state.rng),
        alpha_kind: alpha_kind.into(),
        adam_t: state.adam.as_ref().map(|a| a.t),
        blocks,
        config: config.clone(),
    };

    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        f.write_all(&body)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}`",
            header.format
        )));
    }
    if header.flattening_order != header.shape.flattening_order() {
        return Err(Error::Checkpoint(
            "parameter flattening order does not match".into(),
        ));
    }
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::io(path, e))?;
    let expected: usize = header.blocks.iter().map(|b| b.len * 8).sum();
    if body.len() != expected {
        return Err(Error::Checkpoint(format!(
            "body has {} bytes, header describes {expected}",
            body.len()
        )));
    }

    let take = |name: &str| -> Result<Option<Vec<f64>>> {
        let Some(b) = header.blocks.iter().find(|b| b.name == name) else {
            return Ok(None);
        };
        let start: usize = header
            .blocks
            .iter()
            .take_while(|x| x.name != name)
            .map(|x| x.len * 8)
            .sum();
        Ok(Some(
            body[start..start + b.len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    };
    let params = take("params")?.ok_or_else(|| Error::Checkpoint("missing params block".into()))?;
    let alpha = take("alpha")?.ok_or_else(|| Error::Checkpoint("missing alpha block".into()))?;
    let adam_m = take("adam_m")?;
    let adam_v = take("adam_v")?;

    let params = ModelParams::from_values(header.shape, params)
        .map_err(|e| Error::Checkpoint(format!("params: {e}")))?;
    let alpha = match header.alpha_kind.as_str() {
        "scalar" if alpha.len() == 1 => LearningRates::Scalar(alpha[0]),
        "per-parameter" if alpha.len() == params.len() => LearningRates::PerParameter(alpha),
        _ => return Err(Error::Checkpoint("inconsistent alpha block".into())),
    };
    let adam = match (adam_m, adam_v, header.adam_t) {
        (Some(m), Some(v), Some(t)) if m.len() == params.len() && v.len() == params.len() => {
            Some(AdamState { m, v, t })
        }
        (None, None, None) => None,
        _ => return Err(Error::Checkpoint("inconsistent optimizer state".into())),
    };
    let state = MetaState {
        params,
        alpha,
        iteration: header.iteration,
        rng: header.rng.restore()?,
        adam,
    };
    Ok(Checkpoint { header, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..37 {
            rng.gen::<u32>();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let relations = Vocab::from_names(["a", "b", "c"]);
        let config = TrainConfig {
            dim: 4,
            layers: 1,
            adam_lrup: true,
            ..TrainConfig::default()
        };
        let mut state = MetaState::new(&config, config.model_shape(3));
        state.iteration = 17;
        state.params.values_mut()[3] = -1.0 / 3.0;
        save(&path, &state, &config, &relations).unwrap();
        let ck = load(&path).unwrap();
        ck.validate(&config, &relations).unwrap();
        assert_eq!(ck.state.params, state.params);
        assert_eq!(ck.state.alpha, state.alpha);
        assert_eq!(ck.state.adam, state.adam);
        assert_eq!(ck.state.iteration, 17);
        assert_eq!(ck.header.config, config);

        let other = Vocab::from_names(["a", "c", "b"]);
        assert!(ck.validate(&config, &other).is_err());
        let wider = TrainConfig {
            dim: 8,
            ..config.clone()
        };
        assert!(ck.validate(&wider, &relations).is_err());
    }

    #[test]
    fn truncated_body_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let relations = Vocab::from_names(["a"]);
        let config = TrainConfig {
            dim: 2,
            layers: 1,
            ..TrainConfig::default()
        };
        let state = MetaState::new(&config, config.model_shape(1));
        save(&path, &state, &config, &relations).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
