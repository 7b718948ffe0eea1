//! Self-contained binary checkpoints: configuration, vocabularies, every
//! weight matrix, and the optimizer state. Weights are stored as raw
//! little-endian f64, so save/load/forward is bit-identical to the
//! pre-save forward on the same hardware.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use tapegrad::nn::HasParams;
use tapegrad::optim::Adam;
use tapegrad::Matrix;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TtsModel;

const MAGIC: &[u8; 4] = b"XUTC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    config: RunConfig,
    config_fingerprint: String,
    phoneme_vocab: Vec<String>,
    speaker_vocab: Vec<String>,
    n_mels: usize,
    params: Vec<ParamMeta>,
    adam_t: u64,
    adam_lr: f64,
    has_optimizer_state: bool,
}

fn collect_params(model: &TtsModel) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    model.visit(&mut |name, m| out.push((name.to_string(), m.clone())));
    out
}

fn push_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    let mut cell = [0u8; 8];
    for v in m.iter() {
        LittleEndian::write_f64(&mut cell, *v);
        buf.extend_from_slice(&cell);
    }
}

/// Write a checkpoint file.
pub fn save_checkpoint(path: &Path, model: &TtsModel, opt: &Adam, step: usize,
                       config: &RunConfig) -> Result<()> {
    let params = collect_params(model);
    let meta = CheckpointMeta {
        step,
        config: config.clone(),
        config_fingerprint: config.fingerprint(),
        phoneme_vocab: model.phoneme_vocab.clone(),
        speaker_vocab: model.speaker_vocab.clone(),
        n_mels: model.n_mels,
        params: params
            .iter()
            .map(|(name, m)| ParamMeta {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        adam_t: opt.t,
        adam_lr: opt.lr,
        has_optimizer_state: true,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let mut word = [0u8; 4];
    LittleEndian::write_u32(&mut word, VERSION);
    buf.extend_from_slice(&word);
    let mut len = [0u8; 8];
    LittleEndian::write_u64(&mut len, meta_json.len() as u64);
    buf.extend_from_slice(&len);
    buf.extend_from_slice(&meta_json);
    for (_, m) in &params {
        push_matrix(&mut buf, m);
    }
    // optimizer moments in the same order; zeros for never-updated params
    for (name, m) in &params {
        match opt.m.get(name) {
            Some(mm) => push_matrix(&mut buf, mm),
            None => push_matrix(&mut buf, &Matrix::zeros(m.dim())),
        }
    }
    for (name, m) in &params {
        match opt.v.get(name) {
            Some(vv) => push_matrix(&mut buf, vv),
            None => push_matrix(&mut buf, &Matrix::zeros(m.dim())),
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub struct LoadedCheckpoint {
    pub model: TtsModel,
    pub optimizer: Adam,
    pub step: usize,
    pub config: RunConfig,
}

fn read_matrix(buf: &[u8], offset: &mut usize, rows: usize, cols: usize) -> Result<Matrix> {
    let need = rows * cols * 8;
    if *offset + need > buf.len() {
        return Err(Error::Checkpoint("truncated weight payload".into()));
    }
    let mut m = Matrix::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = LittleEndian::read_f64(&buf[*offset..*offset + 8]);
        *offset += 8;
    }
    Ok(m)
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = LittleEndian::read_u32(&buf[4..8]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = LittleEndian::read_u64(&buf[8..16]) as usize;
    if 16 + meta_len > buf.len() {
        return Err(Error::Checkpoint("truncated checkpoint meta".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&buf[16..16 + meta_len])
        .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
    if meta.config.fingerprint() != meta.config_fingerprint {
        return Err(Error::Checkpoint(
            "embedded config does not match its fingerprint".into(),
        ));
    }

    let mut model = TtsModel::new(
        &meta.config.model,
        meta.n_mels,
        meta.phoneme_vocab.clone(),
        meta.speaker_vocab.clone(),
        0,
    )?;
    let mut offset = 16 + meta_len;
    let mut weights = Vec::with_capacity(meta.params.len());
    for p in &meta.params {
        weights.push((p.name.clone(), read_matrix(&buf, &mut offset, p.rows, p.cols)?));
    }
    let mut optimizer = Adam::new(meta.adam_lr);
    optimizer.t = meta.adam_t;
    if meta.has_optimizer_state {
        for p in &meta.params {
            let m = read_matrix(&buf, &mut offset, p.rows, p.cols)?;
            optimizer.m.insert(p.name.clone(), m);
        }
        for p in &meta.params {
            let v = read_matrix(&buf, &mut offset, p.rows, p.cols)?;
            optimizer.v.insert(p.name.clone(), v);
        }
    }

    // install weights; every stored name must land on a model parameter
    let mut installed = 0usize;
    model.visit_mut(&mut |name, m| {
        if let Some((_, w)) = weights.iter().find(|(n, _)| n == name) {
            if w.dim() == m.dim() {
                m.assign(w);
                installed += 1;
            }
        }
    });
    if installed != meta.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint carries {} parameters but {installed} matched the model",
            meta.params.len()
        )));
    }
    Ok(LoadedCheckpoint {
        model,
        optimizer,
        step: meta.step,
        config: meta.config,
    })
}
