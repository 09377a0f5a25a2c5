//! Versioned on-disk container for model state.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::train_engine::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub rng: Option<ChaCha8Rng>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(kind: &str, config: C, params: ParamStore) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config,
            params,
            optimizer: None,
            rng: None,
            epoch: 0,
            step: 0,
        }
    }

    /// Writes through a temporary sibling and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            serde_json::to_writer(&mut w, self)?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Self = serde_json::from_reader(BufReader::new(f))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!("{}: holds a {} model, not {kind}", path.display(), ck.kind)));
        }
        ck.params.rebuild_index();
        Ok(ck)
    }
}
