//! Layout of a preprocessed data directory.

use std::path::{Path, PathBuf};

use alm_core::corpus::binfile::read_stream;
use alm_core::corpus::{BpeModel, Vocabulary};
use alm_core::layers::CharInventory;
use alm_core::model::{InputKind, LanguageModel};
use alm_core::Error;

use crate::error::CliResult;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const BPE_FILE: &str = "bpe.codes";

pub fn stream_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.bin"))
}

/// One byte per stream token, 1 where the token ends a word.
pub fn bounds_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.bounds"))
}

pub struct DataDir {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub bpe: Option<BpeModel>,
}

impl DataDir {
    pub fn open(dir: &Path) -> CliResult<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let bpe_path = dir.join(BPE_FILE);
        let bpe = if bpe_path.exists() {
            Some(BpeModel::load(&bpe_path)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            vocab,
            bpe,
        })
    }

    pub fn has_split(&self, split: &str) -> bool {
        stream_path(&self.dir, split).exists()
    }

    pub fn stream(&self, split: &str) -> CliResult<Vec<u32>> {
        Ok(read_stream(&stream_path(&self.dir, split), &self.vocab)?)
    }

    pub fn word_ends(&self, split: &str, len: usize) -> CliResult<Vec<bool>> {
        let path = bounds_path(&self.dir, split);
        let bytes = std::fs::read(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        if bytes.len() != len {
            return Err(Error::Format(format!(
                "{}: {} boundary flags for {len} tokens",
                path.display(),
                bytes.len()
            ))
            .into());
        }
        Ok(bytes.into_iter().map(|b| b != 0).collect())
    }

    pub fn chars(&self) -> CharInventory {
        CharInventory::from_words(self.vocab.words().iter().map(String::as_str))
    }

    /// Binds the character CNN, if the model has one, to this vocabulary.
    pub fn attach(&self, model: &mut LanguageModel) -> CliResult<()> {
        if model.config().input == InputKind::CharCnn {
            let chars = self.chars();
            model.set_char_words(self.vocab.words().iter().map(|w| chars.encode(w)).collect())?;
        }
        Ok(())
    }
}
