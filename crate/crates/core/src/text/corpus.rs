use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Requested split sizes, in lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    #[serde(default)]
    pub validation: usize,
    #[serde(default)]
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self { train, validation, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// 100k / 20k / 5k bitext split per direction.
    pub fn paper_parallel() -> Self {
        Self::new(100_000, 20_000, 5_000)
    }

    /// 70k monolingual sentences per language.
    pub fn paper_monolingual() -> Self {
        Self::new(70_000, 0, 0)
    }
}

/// Line indices (into the source file) selected for each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Draws a random subset of `n_lines` and partitions it into disjoint
    /// splits of exactly the requested sizes.
    pub fn sample(n_lines: usize, sizes: SplitSizes, seed: u64) -> Result<Self> {
        if sizes.total() > n_lines {
            return Err(Error::Data(format!(
                "requested {} lines (train {}, validation {}, test {}) but only {n_lines} available",
                sizes.total(),
                sizes.train,
                sizes.validation,
                sizes.test
            )));
        }
        let mut order: Vec<usize> = (0..n_lines).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train, rest) = order.split_at(sizes.train);
        let (validation, rest) = rest.split_at(sizes.validation);
        let test = &rest[..sizes.test];
        Ok(Self { train: train.to_vec(), validation: validation.to_vec(), test: test.to_vec() })
    }

    fn validate(&self, n_lines: usize) -> Result<()> {
        let mut seen = vec![false; n_lines];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n_lines {
                return Err(Error::Data(format!("split index {i} out of range for {n_lines} lines")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("line {i} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub source: String,
    pub target: String,
}

/// Sentence-aligned bitext with train/validation/test splits.
#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub source_lang: String,
    pub target_lang: String,
    pub indices: SplitIndices,
    pub train: Vec<TextPair>,
    pub validation: Vec<TextPair>,
    pub test: Vec<TextPair>,
}

impl ParallelCorpus {
    pub fn from_lines(
        source_lang: &str,
        target_lang: &str,
        source: &[String],
        target: &[String],
        indices: SplitIndices,
    ) -> Result<Self> {
        if source_lang == target_lang {
            return Err(Error::Config(format!("source and target language are both `{source_lang}`")));
        }
        if source.len() != target.len() {
            return Err(Error::Data(format!(
                "parallel files differ in length: {} source lines vs {} target lines",
                source.len(),
                target.len()
            )));
        }
        indices.validate(source.len())?;
        let pick = |idx: &[usize]| -> Vec<TextPair> {
            idx.iter()
                .map(|&i| TextPair { source: source[i].clone(), target: target[i].clone() })
                .collect()
        };
        Ok(Self {
            source_lang: source_lang.to_owned(),
            target_lang: target_lang.to_owned(),
            train: pick(&indices.train),
            validation: pick(&indices.validation),
            test: pick(&indices.test),
            indices,
        })
    }

    pub fn split(&self, which: Split) -> &[TextPair] {
        match which {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Single-language text with splits.
#[derive(Clone, Debug)]
pub struct MonolingualCorpus {
    pub language: String,
    pub indices: SplitIndices,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl MonolingualCorpus {
    pub fn from_lines(language: &str, lines: &[String], indices: SplitIndices) -> Result<Self> {
        indices.validate(lines.len())?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| lines[i].clone()).collect::<Vec<_>>();
        Ok(Self {
            language: language.to_owned(),
            train: pick(&indices.train),
            validation: pick(&indices.validation),
            test: pick(&indices.test),
            indices,
        })
    }

    pub fn split(&self, which: Split) -> &[String] {
        match which {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Reads a UTF-8 file as one sentence per line. Empty files are an error.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::Data(format!("{}: malformed UTF-8 on line {line}", path.display()))
    })?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    if lines.is_empty() {
        return Err(Error::Data(format!("{}: file is empty", path.display())));
    }
    Ok(lines)
}

pub fn load_parallel(
    source_file: &Path,
    target_file: &Path,
    source_lang: &str,
    target_lang: &str,
    sizes: SplitSizes,
    seed: u64,
) -> Result<ParallelCorpus> {
    let source = read_lines(source_file)?;
    let target = read_lines(target_file)?;
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "line-count mismatch: {} has {} lines, {} has {}",
            source_file.display(),
            source.len(),
            target_file.display(),
            target.len()
        )));
    }
    let indices = SplitIndices::sample(source.len(), sizes, seed)
        .map_err(|e| Error::Data(format!("{}: {e}", source_file.display())))?;
    ParallelCorpus::from_lines(source_lang, target_lang, &source, &target, indices)
}

pub fn load_monolingual(file: &Path, language: &str, sizes: SplitSizes, seed: u64) -> Result<MonolingualCorpus> {
    let lines = read_lines(file)?;
    let indices = SplitIndices::sample(lines.len(), sizes, seed)
        .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
    MonolingualCorpus::from_lines(language, &lines, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write(dir: &Path, name: &str, lines: impl IntoIterator<Item = String>) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    #[test]
    fn exact_disjoint_deterministic_splits() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.txt", (0..10).map(|i| format!("src {i}")));
        let t = write(dir.path(), "t.txt", (0..10).map(|i| format!("tgt {i}")));
        let c = load_parallel(&s, &t, "aa", "bb", SplitSizes::new(6, 2, 2), 7).unwrap();
        assert_eq!((c.train.len(), c.validation.len(), c.test.len()), (6, 2, 2));
        let hashed: HashSet<&str> =
            c.train.iter().chain(&c.validation).chain(&c.test).map(|p| p.source.as_str()).collect();
        assert_eq!(hashed.len(), 10);
        for p in &c.train {
            assert_eq!(p.source.replace("src", "tgt"), p.target);
        }
        let again = load_parallel(&s, &t, "aa", "bb", SplitSizes::new(6, 2, 2), 7).unwrap();
        assert_eq!(c.indices, again.indices);
    }

    #[test]
    fn paper_scale_sizes_accepted_when_large_enough() {
        let sizes = SplitSizes::paper_parallel();
        let idx = SplitIndices::sample(sizes.total(), sizes, 1).unwrap();
        assert_eq!((idx.train.len(), idx.validation.len(), idx.test.len()), (100_000, 20_000, 5_000));
        let mono = SplitSizes::paper_monolingual();
        assert_eq!(SplitIndices::sample(80_000, mono, 1).unwrap().train.len(), 70_000);
    }

    #[test]
    fn mismatched_and_insufficient_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.txt", (0..10).map(|i| i.to_string()));
        let t = write(dir.path(), "t.txt", (0..9).map(|i| i.to_string()));
        assert!(load_parallel(&s, &t, "aa", "bb", SplitSizes::new(1, 1, 1), 0).is_err());
        assert!(load_parallel(&s, &s, "aa", "bb", SplitSizes::new(8, 2, 1), 0).is_err());
        assert!(load_parallel(&s, &s, "aa", "aa", SplitSizes::new(1, 0, 0), 0).is_err());
    }

    #[test]
    fn monolingual_sizes_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.txt", (0..600).map(|i| format!("line {i}")));
        let c = load_monolingual(&m, "aa", SplitSizes::new(500, 0, 0), 3).unwrap();
        assert_eq!(c.train.len(), 500);
        let empty = write(dir.path(), "e.txt", std::iter::empty());
        assert!(load_monolingual(&empty, "aa", SplitSizes::new(1, 0, 0), 3).is_err());
    }

    #[test]
    fn malformed_utf8_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, b"ok\n\xff\xfe\n").unwrap();
        let err = read_lines(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
