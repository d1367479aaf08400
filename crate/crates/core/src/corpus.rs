//! Corpus preparation: loading dated documents, whole-document splits,
//! sub-document sharding, vocabulary construction, time windows and the
//! per-window word statistics that feed the mixture-prior network.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

/// A dated document. `time` is a year; negative values are BCE.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub time: i64,
}

impl Document {
    pub fn new(id: impl Into<String>, text: &str, time: i64) -> Self {
        Document {
            id: id.into(),
            tokens: tokenize(text),
            time,
        }
    }
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Builds a corpus, rejecting empty or duplicate ids.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if doc.id.is_empty() {
                return Err(Error::InvalidArgument("document id is empty".into()));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Corpus { documents })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn date_range(&self) -> Option<(i64, i64)> {
        date_range(&self.documents)
    }
}

fn date_range(docs: &[Document]) -> Option<(i64, i64)> {
    let min = docs.iter().map(|d| d.time).min()?;
    let max = docs.iter().map(|d| d.time).max()?;
    Some((min, max))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
    time: i64,
}

/// Reads a JSON-lines corpus with one `{"id", "text", "time"}` object per line.
/// Blank lines are skipped; record order is preserved.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: "empty id".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        documents.push(Document::new(record.id, &record.text, record.time));
    }
    Ok(Corpus { documents })
}

/// Writes `corpus` in the format `load_corpus` reads, tokens joined by spaces.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in &corpus.documents {
        let record = CorpusRecord { id: d.id.clone(), text: d.tokens.join(" "), time: d.time };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Whole-document train/validation/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Shuffles documents under `seed` and partitions them. Validation and test
/// sizes are `floor(n * ratio)`; whatever remains goes to train. Each split
/// keeps the corpus's record order.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty corpus".into()));
    }
    let n = corpus.len();
    let target = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_val = target(ratios[1]);
    let n_test = target(ratios[2]).min(n - n_val);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut test_idx = order[n_val..n_val + n_test].to_vec();
    let mut train_idx = order[n_val + n_test..].to_vec();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.documents[i].clone()).collect();
    Ok(Split {
        train: pick(&train_idx),
        validation: pick(&val_idx),
        test: pick(&test_idx),
    })
}

/// A contiguous shard of at most `max_subdoc_tokens` tokens from one document.
#[derive(Clone, Debug, PartialEq)]
pub struct SubDocument {
    pub parent_id: String,
    pub index: usize,
    pub tokens: Vec<String>,
    pub time: i64,
    pub window: Option<usize>,
}

/// Greedy left-to-right chunking into shards of `max_tokens`.
pub fn make_subdocuments(doc: &Document, max_tokens: usize) -> Result<Vec<SubDocument>> {
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
    }
    Ok(doc
        .tokens
        .chunks(max_tokens)
        .enumerate()
        .map(|(index, chunk)| SubDocument {
            parent_id: doc.id.clone(),
            index,
            tokens: chunk.to_vec(),
            time: doc.time,
            window: None,
        })
        .collect())
}

pub fn make_all_subdocuments(docs: &[Document], max_tokens: usize) -> Result<Vec<SubDocument>> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend(make_subdocuments(doc, max_tokens)?);
    }
    Ok(out)
}

/// Token/index map with training-set frequency metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    subdoc_fraction: Vec<f64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    version: String,
    tokens: Vec<String>,
    counts: Vec<u64>,
    subdoc_fraction: Vec<f64>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, counts: Vec<u64>, subdoc_fraction: Vec<f64>) -> Result<Self> {
        if tokens.len() != counts.len() || tokens.len() != subdoc_fraction.len() {
            return Err(Error::Shape(format!(
                "vocabulary columns differ in length: {} tokens, {} counts, {} fractions",
                tokens.len(),
                counts.len(),
                subdoc_fraction.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            counts,
            subdoc_fraction,
            index,
        })
    }

    /// A vocabulary with unit counts, mostly useful for synthetic data.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let n = tokens.len();
        Vocabulary::new(tokens, vec![1; n], vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn subdoc_fraction(&self) -> &[f64] {
        &self.subdoc_fraction
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// SHA-256 over the ordered token list; binds embeddings and
    /// checkpoints to this vocabulary.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    /// Maps tokens to indices, keeping out-of-vocabulary positions as `None`.
    pub fn encode_sequence(&self, tokens: &[String]) -> Vec<Option<usize>> {
        tokens.iter().map(|t| self.index_of(t)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabularyFile {
            version: FORMAT_VERSION.to_string(),
            tokens: self.tokens.clone(),
            counts: self.counts.clone(),
            subdoc_fraction: self.subdoc_fraction.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        check_version(&file.version)?;
        Vocabulary::new(file.tokens, file.counts, file.subdoc_fraction)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_json(&text)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        VocabularyFile {
            version: FORMAT_VERSION.to_string(),
            tokens: self.tokens.clone(),
            counts: self.counts.clone(),
            subdoc_fraction: self.subdoc_fraction.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = VocabularyFile::deserialize(deserializer)?;
        check_version(&file.version).map_err(serde::de::Error::custom)?;
        Vocabulary::new(file.tokens, file.counts, file.subdoc_fraction).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn check_version(found: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Drops tokens appearing in more than `max_word_sub_occurrence` of the
/// training sub-documents, then keeps the `max_size` most frequent of the
/// rest. Ordering is descending frequency, ties lexicographic.
pub fn build_vocabulary(
    train_subdocs: &[SubDocument],
    max_size: usize,
    max_word_sub_occurrence: f64,
) -> Result<Vocabulary> {
    if max_size < 1 {
        return Err(Error::InvalidArgument("max vocabulary size must be at least 1".into()));
    }
    if train_subdocs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from zero sub-documents".into(),
        ));
    }
    let mut freq: HashMap<&str, (u64, u64)> = HashMap::new();
    for sd in train_subdocs {
        let mut present: HashSet<&str> = HashSet::new();
        for t in &sd.tokens {
            freq.entry(t.as_str()).or_default().0 += 1;
            present.insert(t.as_str());
        }
        for t in present {
            freq.entry(t).or_default().1 += 1;
        }
    }
    let n = train_subdocs.len() as f64;
    let mut kept: Vec<(&str, u64, f64)> = freq
        .into_iter()
        .map(|(t, (count, df))| (t, count, df as f64 / n))
        .filter(|&(_, _, frac)| frac <= max_word_sub_occurrence)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(max_size);

    Vocabulary::new(
        kept.iter().map(|k| k.0.to_string()).collect(),
        kept.iter().map(|k| k.1).collect(),
        kept.iter().map(|k| k.2).collect(),
    )
}

/// Equal-width time windows over `[min_date, max_date]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub count: usize,
    pub boundaries: Vec<f64>,
}

impl WindowSpec {
    pub fn new(count: usize, min_date: i64, max_date: i64) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "window count must be at least 2, got {count}"
            )));
        }
        if max_date <= min_date {
            return Err(Error::InvalidArgument(format!(
                "date range [{min_date}, {max_date}] has zero width"
            )));
        }
        let (lo, hi) = (min_date as f64, max_date as f64);
        let mut boundaries: Vec<f64> = (0..=count)
            .map(|i| lo + (hi - lo) * i as f64 / count as f64)
            .collect();
        boundaries[count] = hi;
        Ok(WindowSpec { count, boundaries })
    }

    pub fn min_date(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn max_date(&self) -> f64 {
        self.boundaries[self.count]
    }

    /// `floor((d - min) * T / (max - min))`, with `d = max` clamped into the
    /// last window.
    pub fn window_of(&self, date: i64) -> Result<usize> {
        let (lo, hi) = (self.min_date(), self.max_date());
        let d = date as f64;
        if d < lo || d > hi {
            return Err(Error::InvalidArgument(format!(
                "date {date} outside window range [{lo}, {hi}]"
            )));
        }
        let w = ((d - lo) * self.count as f64 / (hi - lo)).floor() as usize;
        Ok(w.min(self.count - 1))
    }

    pub fn assign(&self, subdocs: &mut [SubDocument]) -> Result<()> {
        for sd in subdocs {
            sd.window = Some(self.window_of(sd.time)?);
        }
        Ok(())
    }
}

/// Builds the window spec spanning every document's date.
pub fn assign_windows(docs: &[Document], window_count: usize) -> Result<WindowSpec> {
    let (lo, hi) = date_range(docs)
        .ok_or_else(|| Error::InvalidArgument("no documents to assign windows over".into()))?;
    WindowSpec::new(window_count, lo, hi)
}

/// A sub-document reduced to its window and sparse in-vocabulary counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDoc {
    pub window: usize,
    /// `(vocab index, count)` sorted by index.
    pub counts: Vec<(usize, f64)>,
}

impl EncodedDoc {
    pub fn new(window: usize, mut counts: Vec<(usize, f64)>) -> Self {
        counts.sort_by_key(|c| c.0);
        EncodedDoc { window, counts }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().map(|c| c.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Encodes windowed sub-documents, dropping out-of-vocabulary tokens and any
/// sub-document left with no tokens.
pub fn encode_subdocuments(subdocs: &[SubDocument], vocab: &Vocabulary) -> Result<Vec<EncodedDoc>> {
    let mut out = Vec::with_capacity(subdocs.len());
    for sd in subdocs {
        let window = sd.window.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sub-document {}#{} has no window assigned",
                sd.parent_id, sd.index
            ))
        })?;
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for t in &sd.tokens {
            if let Some(i) = vocab.index_of(t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        if !counts.is_empty() {
            out.push(EncodedDoc::new(window, counts.into_iter().collect()));
        }
    }
    Ok(out)
}

/// Per-window normalized word counts.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStats {
    pub matrix: Array2<f64>,
    pub empty_mask: Vec<bool>,
    pub smoothed: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowStatsFile {
    version: String,
    window_count: usize,
    vocab_size: usize,
    matrix: Vec<Vec<f64>>,
    empty_mask: Vec<bool>,
    smoothed: bool,
}

impl WindowStats {
    pub fn window_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.ncols()
    }

    /// True when the matrix can be fed to the mixture-prior network.
    pub fn has_zero_rows(&self) -> bool {
        self.matrix.rows().into_iter().any(|r| r.sum() == 0.0)
    }

    pub fn from_encoded(docs: &[EncodedDoc], vocab_size: usize, window_count: usize) -> Result<Self> {
        let mut matrix = Array2::<f64>::zeros((window_count, vocab_size));
        for doc in docs {
            if doc.window >= window_count {
                return Err(Error::InvalidArgument(format!(
                    "window index {} outside [0, {window_count})",
                    doc.window
                )));
            }
            for &(v, c) in &doc.counts {
                if v >= vocab_size {
                    return Err(Error::Shape(format!("token index {v} outside vocabulary of {vocab_size}")));
                }
                matrix[[doc.window, v]] += c;
            }
        }
        let mut empty_mask = vec![false; window_count];
        for (t, mut row) in matrix.rows_mut().into_iter().enumerate() {
            let total = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|x| x / total);
            } else {
                empty_mask[t] = true;
            }
        }
        Ok(WindowStats {
            matrix,
            empty_mask,
            smoothed: false,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    fn to_file(&self) -> WindowStatsFile {
        WindowStatsFile {
            version: FORMAT_VERSION.to_string(),
            window_count: self.window_count(),
            vocab_size: self.vocab_size(),
            matrix: self.matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
            empty_mask: self.empty_mask.clone(),
            smoothed: self.smoothed,
        }
    }

    fn from_file(file: WindowStatsFile) -> Result<Self> {
        check_version(&file.version)?;
        if file.matrix.len() != file.window_count || file.empty_mask.len() != file.window_count {
            return Err(Error::Shape("window stats row count disagrees with window_count".into()));
        }
        let mut flat = Vec::with_capacity(file.window_count * file.vocab_size);
        for row in &file.matrix {
            if row.len() != file.vocab_size {
                return Err(Error::Shape("window stats row length disagrees with vocab_size".into()));
            }
            flat.extend_from_slice(row);
        }
        let matrix = Array2::from_shape_vec((file.window_count, file.vocab_size), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(WindowStats {
            matrix,
            empty_mask: file.empty_mask,
            smoothed: file.smoothed,
        })
    }
}

impl Serialize for WindowStats {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for WindowStats {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = WindowStatsFile::deserialize(deserializer)?;
        WindowStats::from_file(file).map_err(serde::de::Error::custom)
    }
}

/// Row `t` holds the normalized in-vocabulary counts of window `t`. Windows
/// with no in-vocabulary tokens get a zero row and are flagged in `empty_mask`.
pub fn window_word_stats(subdocs: &[SubDocument], vocab: &Vocabulary, spec: &WindowSpec) -> Result<WindowStats> {
    let encoded = encode_subdocuments(subdocs, vocab)?;
    WindowStats::from_encoded(&encoded, vocab.len(), spec.count)
}

/// Replaces each empty row by the mean of the nearest non-empty rows on
/// either side, or a copy of the only neighbor when it sits at an edge.
pub fn smooth_window_stats(stats: &WindowStats) -> Result<WindowStats> {
    let n = stats.window_count();
    let filled: Vec<usize> = (0..n).filter(|&t| !stats.empty_mask[t]).collect();
    if filled.is_empty() {
        return Err(Error::AllWindowsEmpty);
    }
    let mut matrix = stats.matrix.clone();
    for t in (0..n).filter(|&t| stats.empty_mask[t]) {
        // first filled window strictly after t
        let pos = filled.partition_point(|&f| f < t);
        let left = pos.checked_sub(1).map(|p| filled[p]);
        let right = filled.get(pos).copied();
        let row = match (left, right) {
            (Some(l), Some(r)) => (&stats.matrix.row(l) + &stats.matrix.row(r)) / 2.0,
            (Some(only), None) | (None, Some(only)) => stats.matrix.row(only).to_owned(),
            (None, None) => unreachable!("at least one window is non-empty"),
        };
        matrix.row_mut(t).assign(&row);
    }
    Ok(WindowStats {
        matrix,
        empty_mask: stats.empty_mask.clone(),
        smoothed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn doc(id: &str, n: usize, time: i64) -> Document {
        Document {
            id: id.into(),
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            time,
        }
    }

    fn sub(tokens: &[&str], window: usize) -> SubDocument {
        SubDocument {
            parent_id: "p".into(),
            index: 0,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            time: 0,
            window: Some(window),
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::from_documents(vec![Document::new("a", "Hello, world", -40), Document::new("b", "", 1990)]).unwrap();
        save_corpus(&corpus, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn loads_single_record() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","text":"Veni vidi vici","time":-44}}"#).unwrap();
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.documents[0].tokens, vec!["veni", "vidi", "vici"]);
        assert_eq!(corpus.documents[0].time, -44);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","text":"x","time":1}}"#).unwrap();
        writeln!(f, r#"{{"id":"a","text":"y","time":2}}"#).unwrap();
        match load_corpus(f.path()) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","text":"x","time":1}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","text":"y"}}"#).unwrap();
        match load_corpus(f.path()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record error, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes() {
        let corpus = Corpus::from_documents((0..10).map(|i| doc(&i.to_string(), 3, i)).collect()).unwrap();
        let s = split_corpus(&corpus, DEFAULT_SPLIT, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_corpus(&corpus, DEFAULT_SPLIT, 7).unwrap());

        let one = Corpus::from_documents(vec![doc("x", 3, 0)]).unwrap();
        let s = split_corpus(&one, DEFAULT_SPLIT, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 0, 0));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let corpus = Corpus::from_documents(vec![doc("x", 3, 0)]).unwrap();
        assert!(split_corpus(&corpus, [0.8, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn chunking() {
        let lens: Vec<usize> = make_subdocuments(&doc("a", 250, 0), 100)
            .unwrap()
            .iter()
            .map(|s| s.tokens.len())
            .collect();
        assert_eq!(lens, vec![100, 100, 50]);
        assert_eq!(make_subdocuments(&doc("a", 100, 0), 100).unwrap().len(), 1);
        assert!(make_subdocuments(&doc("a", 0, 0), 100).unwrap().is_empty());
        assert!(make_subdocuments(&doc("a", 5, 0), 0).is_err());
    }

    #[test]
    fn vocabulary_filters_and_orders() {
        let mut docs: Vec<SubDocument> = (0..9).map(|_| sub(&["the", "x"], 0)).collect();
        docs.push(sub(&["the", "y"], 0));
        // "the" appears in all 10, "x" in 9: both above 0.5
        let v = build_vocabulary(&docs, 10, 0.5).unwrap();
        assert_eq!(v.tokens(), &["y".to_string()]);

        let docs = vec![
            sub(&["a", "a", "b", "b"], 0),
            sub(&["a", "a", "b", "b"], 0),
            sub(&["b", "c", "a"], 0),
            sub(&["d"], 0),
            sub(&["e"], 0),
            sub(&["f"], 0),
            sub(&["g"], 0),
        ];
        // a:5 b:5 c:1 and the singletons d..g:1
        let v = build_vocabulary(&docs, 2, 0.5).unwrap();
        assert_eq!(v.tokens(), &["a".to_string(), "b".to_string()]);
        let v = build_vocabulary(&docs, 3, 0.5).unwrap();
        assert_eq!(v.token(2), Some("c"));
        assert_eq!(v.index_of("b"), Some(1));

        let small = build_vocabulary(&[sub(&["p", "q", "r"], 0), sub(&["s"], 0)], 10, 1.0).unwrap();
        assert_eq!(small.len(), 4);
        assert!(build_vocabulary(&docs, 0, 0.5).is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = build_vocabulary(&[sub(&["a", "b", "a"], 0)], 10, 1.0).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.checksum(), back.checksum());
        let tampered = v.to_json().unwrap().replace("detm-lab/1", "detm-lab/0");
        assert!(matches!(Vocabulary::from_json(&tampered), Err(Error::Version { .. })));
    }

    #[test]
    fn window_assignment_acl_range() {
        let spec = WindowSpec::new(2, 1965, 2006).unwrap();
        assert_eq!(spec.boundaries[1], 1985.5);
        assert_eq!(spec.window_of(1985).unwrap(), 0);
        assert_eq!(spec.window_of(1986).unwrap(), 1);
        assert_eq!(spec.window_of(2006).unwrap(), 1);
        assert_eq!(spec.window_of(1965).unwrap(), 0);
        assert!(spec.window_of(2007).is_err());
    }

    #[test]
    fn thirty_two_windows_over_41_years_leave_gaps() {
        let docs: Vec<Document> = (1965..=2006).map(|y| doc(&y.to_string(), 1, y)).collect();
        let spec = assign_windows(&docs, 32).unwrap();
        let mut used = [false; 32];
        for d in &docs {
            used[spec.window_of(d.time).unwrap()] = true;
        }
        assert!(used.iter().all(|u| *u), "42 distinct years cover all 32 windows");
        // with only the even years present some windows are empty
        let sparse: Vec<Document> = (1965..=2006).step_by(2).map(|y| doc(&y.to_string(), 1, y)).collect();
        let spec = WindowSpec::new(32, 1965, 2006).unwrap();
        let mut used = [false; 32];
        for d in &sparse {
            used[spec.window_of(d.time).unwrap()] = true;
        }
        assert!(used.iter().any(|u| !*u));
    }

    #[test]
    fn single_date_is_rejected() {
        let docs = vec![doc("a", 1, 5), doc("b", 1, 5)];
        assert!(assign_windows(&docs, 2).is_err());
        assert!(assign_windows(&docs[..1], 1).is_err());
    }

    #[test]
    fn stats_rows() {
        let vocab = Vocabulary::from_tokens(vec!["a".into(), "b".into()]).unwrap();
        let spec = WindowSpec::new(3, 0, 3).unwrap();
        let subdocs = vec![sub(&["a", "a", "b", "a"], 0), sub(&["zzz", "qqq"], 2)];
        let stats = window_word_stats(&subdocs, &vocab, &spec).unwrap();
        assert_eq!(stats.matrix.row(0).to_vec(), vec![0.75, 0.25]);
        assert_eq!(stats.matrix.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(stats.matrix.row(2).to_vec(), vec![0.0, 0.0]);
        assert_eq!(stats.empty_mask, vec![false, true, true]);
        assert!(!stats.smoothed);
    }

    fn stats_of(rows: Vec<Option<[f64; 2]>>) -> WindowStats {
        let n = rows.len();
        let mut matrix = Array2::zeros((n, 2));
        let mut empty_mask = vec![true; n];
        for (t, r) in rows.into_iter().enumerate() {
            if let Some(r) = r {
                matrix[[t, 0]] = r[0];
                matrix[[t, 1]] = r[1];
                empty_mask[t] = false;
            }
        }
        WindowStats {
            matrix,
            empty_mask,
            smoothed: false,
        }
    }

    #[test]
    fn smoothing_examples() {
        let x = [0.2, 0.8];
        let y = [0.6, 0.4];
        let s = smooth_window_stats(&stats_of(vec![Some(x), None, Some(y)])).unwrap();
        assert_eq!(s.matrix.row(1).to_vec(), vec![(0.2 + 0.6) / 2.0, (0.8 + 0.4) / 2.0]);
        assert!(s.smoothed);
        assert_eq!(s.empty_mask, vec![false, true, false]);

        let s = smooth_window_stats(&stats_of(vec![None, Some(x), Some(y)])).unwrap();
        assert_eq!(s.matrix.row(0).to_vec(), x.to_vec());

        let s = smooth_window_stats(&stats_of(vec![Some(x), None, None, Some(y)])).unwrap();
        assert_eq!(s.matrix.row(1), s.matrix.row(2));
        assert_eq!(s.matrix.row(1).to_vec(), vec![(0.2 + 0.6) / 2.0, (0.8 + 0.4) / 2.0]);

        assert!(matches!(
            smooth_window_stats(&stats_of(vec![None, None])),
            Err(Error::AllWindowsEmpty)
        ));
    }

    #[test]
    fn stats_json_round_trip() {
        let s = smooth_window_stats(&stats_of(vec![Some([0.1, 0.9]), None])).unwrap();
        let back = WindowStats::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.matrix, array![[0.1, 0.9], [0.1, 0.9]]);
    }
}
