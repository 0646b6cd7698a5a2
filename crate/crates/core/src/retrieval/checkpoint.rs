//! On-disk layout of a training state:
//!
//! ```text
//! <dir>/encoder.json          encparams-v1
//! <dir>/state.json            stage, step counter, epoch log, optimizer moments
//! <dir>/debias.json           debias-v1 (only once dictionaries exist)
//! <dir>/dictionaries/<culture>.<kind>.dict
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{EpochRecord, Stage, TrainState};
use super::{RetrievalError, TrainConfig};
use crate::corpus::CultureTag;
use crate::debias::{load_debias, save_debias};
use crate::dictionaries::{LabelDictionary, LabelKind};
use crate::encoders::EncoderParams;
use crate::tensor::Adam;

pub const STATE_FORMAT: &str = "trainstate-v1";

#[derive(Serialize, Deserialize)]
struct StoredState {
    format: String,
    stage: Stage,
    step: u64,
    log: Vec<EpochRecord>,
    adam: Adam,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RetrievalError {
    RetrievalError::Checkpoint(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, RetrievalError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, RetrievalError> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

pub fn dictionary_path(dir: &Path, culture: &CultureTag, kind: LabelKind) -> std::path::PathBuf {
    dir.join("dictionaries").join(format!("{culture}.{kind}.dict"))
}

/// Writes every dictionary of `state` below `dir/dictionaries`.
pub fn save_dictionaries(state: &TrainState, dir: &Path) -> Result<(), RetrievalError> {
    fs::create_dir_all(dir.join("dictionaries")).map_err(|e| io_err(dir, e))?;
    for (culture, (ing, act)) in state.dictionaries() {
        for d in [ing, act] {
            let path = dictionary_path(dir, &culture, d.kind());
            let mut w = create(&path)?;
            d.write_to(&mut w).map_err(|e| io_err(&path, e))?;
            w.flush().map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<(), RetrievalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("encoder.json");
    let mut w = create(&path)?;
    state.encoder.save(&mut w)?;
    w.flush().map_err(|e| io_err(&path, e))?;

    let stored = StoredState {
        format: STATE_FORMAT.into(),
        stage: state.stage,
        step: state.step,
        log: state.log.clone(),
        adam: state.adam.clone(),
    };
    let path = dir.join("state.json");
    let mut w = create(&path)?;
    serde_json::to_writer(&mut w, &stored).map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))?;

    if !state.debias.is_empty() {
        save_dictionaries(state, dir)?;
        let path = dir.join("debias.json");
        let mut w = create(&path)?;
        save_debias(&state.debias, &state.config.debias, &mut w)?;
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Restores a state saved by [`save_checkpoint`] under `config`.
pub fn load_checkpoint(dir: &Path, config: TrainConfig) -> Result<TrainState, RetrievalError> {
    config.validate()?;
    let encoder = EncoderParams::load(open(&dir.join("encoder.json"))?)?;
    let path = dir.join("state.json");
    let stored: StoredState = serde_json::from_reader(open(&path)?).map_err(|e| io_err(&path, e))?;
    if stored.format != STATE_FORMAT {
        return Err(io_err(&path, format!("unsupported format `{}`", stored.format)));
    }
    let mut debias = BTreeMap::new();
    let debias_path = dir.join("debias.json");
    if debias_path.exists() {
        let cultures = stored_cultures(dir)?;
        let mut dicts = BTreeMap::new();
        for culture in cultures {
            let read = |kind| {
                let path = dictionary_path(dir, &culture, kind);
                LabelDictionary::read_from(open(&path)?).map_err(|e| io_err(&path, e))
            };
            let pair = (read(LabelKind::Ingredient)?, read(LabelKind::Action)?);
            dicts.insert(culture, pair);
        }
        let (cfg, modules) = load_debias(open(&debias_path)?, dicts)?;
        if cfg != config.debias {
            return Err(RetrievalError::Config("debias settings differ from the checkpoint".into()));
        }
        debias = modules;
    }
    Ok(TrainState {
        config,
        encoder,
        debias,
        adam: stored.adam,
        stage: stored.stage,
        step: stored.step,
        log: stored.log,
    })
}

fn stored_cultures(dir: &Path) -> Result<Vec<CultureTag>, RetrievalError> {
    let d = dir.join("dictionaries");
    let suffix = format!(".{}.dict", LabelKind::Ingredient);
    let mut out = Vec::new();
    for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
        let name = entry.map_err(|e| io_err(&d, e))?.file_name();
        if let Some(c) = name.to_string_lossy().strip_suffix(&suffix) {
            out.push(CultureTag::new(c));
        }
    }
    out.sort();
    Ok(out)
}
