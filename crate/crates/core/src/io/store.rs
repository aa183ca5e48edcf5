use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::io::emb::{read_embeddings, write_embeddings};
use crate::matrix::{Matrix, TokenMatrix};
use crate::model::{EmbeddingRef, Study};

/// Embedding files keyed by name, either loaded from a directory or built in
/// memory. Lookups never touch the filesystem, so a loaded store can be
/// shared across worker threads.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    files: BTreeMap<String, Arc<TokenMatrix>>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: TokenMatrix) {
        self.files.insert(name.into(), Arc::new(m));
    }

    pub fn file(&self, name: &str) -> Option<&TokenMatrix> {
        self.files.get(name).map(|m| m.as_ref())
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Reads every file referenced by `studies` from `dir`.
    pub fn load_for(dir: impl AsRef<Path>, studies: &[Study]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut store = Self::new();
        for r in studies.iter().flat_map(referenced) {
            if !store.files.contains_key(&r.file) {
                let m = read_embeddings(dir.join(&r.file))?;
                store.insert(r.file.clone(), m);
            }
        }
        Ok(store)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in &self.files {
            write_embeddings(dir.join(name), m)?;
        }
        Ok(())
    }

    pub fn get(&self, r: &EmbeddingRef) -> Result<TokenMatrix> {
        let m = self
            .files
            .get(&r.file)
            .ok_or_else(|| Error::Config(format!("embedding file {} not loaded", r.file)))?;
        if r.rows.end > m.rows() || r.rows.start >= r.rows.end {
            return Err(Error::ShapeMismatch(format!(
                "rows {:?} outside {} ({} rows)",
                r.rows,
                r.file,
                m.rows()
            )));
        }
        Ok(m.slice_rows(r.rows.start, r.rows.end))
    }

    /// Row-concatenation of several references; all must share a dim.
    pub fn gather<'a>(
        &self,
        refs: impl IntoIterator<Item = &'a EmbeddingRef>,
    ) -> Result<Option<TokenMatrix>> {
        let parts = refs
            .into_iter()
            .map(|r| self.get(r))
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(None);
        }
        let borrowed: Vec<&Matrix> = parts.iter().collect();
        Matrix::vcat(&borrowed).map(Some)
    }
}

/// Every embedding reference a study carries.
pub fn referenced(study: &Study) -> impl Iterator<Item = &EmbeddingRef> {
    let images = study
        .images
        .iter()
        .flat_map(|i| std::iter::once(&i.embedding).chain(i.clip.iter()));
    let reports = std::iter::once(&study.report)
        .chain(study.prior1.iter())
        .chain(study.prior2.iter())
        .flat_map(|r| r.sentence_embeddings.iter().flatten());
    images.chain(reports)
}

/// Resolves the embedding directory for a corpus: `dir` if given, else the
/// corpus file's parent.
pub fn default_emb_dir(corpus: &Path, dir: Option<&Path>) -> PathBuf {
    match dir {
        Some(d) => d.to_path_buf(),
        None => corpus.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_and_gathers_rows() {
        let mut s = EmbeddingStore::new();
        s.insert("a", Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64));
        let r = EmbeddingRef::new("a", 1..3).unwrap();
        assert_eq!(s.get(&r).unwrap().row(0), &[2.0, 3.0]);
        let both = s
            .gather([&r, &EmbeddingRef::new("a", 0..1).unwrap()])
            .unwrap()
            .unwrap();
        assert_eq!(both.rows(), 3);
        assert!(s.get(&EmbeddingRef::new("a", 3..5).unwrap()).is_err());
        assert!(s.get(&EmbeddingRef::new("b", 0..1).unwrap()).is_err());
        assert!(s.gather([]).unwrap().is_none());
    }
}
