//! Skip-gram with negative sampling, trained from scratch, plus the text
//! embedding file format (`V L [checksum]` header, then one
//! `token f1 ... fL` line per word).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{SubDocument, Vocabulary};
use crate::error::{Error, Result};

/// Word vectors aligned to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// `V x L`
    pub vectors: Tensor,
    pub vocab_hash: String,
}

impl EmbeddingMatrix {
    pub fn dimension(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnsConfig {
    pub dimension: usize,
    pub context_radius: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dimension: 300,
            context_radius: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log σ(u_o·v_c) + Σ_n log σ(−u_n·v_c)` for one positive pair.
pub fn pair_objective(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    log_sigmoid(dot(context, center)) + negatives.iter().map(|u| log_sigmoid(-dot(u, center))).sum::<f64>()
}

/// Gradient of [`pair_objective`] with respect to each argument.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradient {
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn pair_gradient(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> PairGradient {
    let g_pos = 1.0 - sigmoid(dot(context, center));
    let mut grad_center: Vec<f64> = context.iter().map(|u| g_pos * u).collect();
    let grad_context = center.iter().map(|v| g_pos * v).collect();
    let mut grad_neg = Vec::with_capacity(negatives.len());
    for u in negatives {
        let g = -sigmoid(dot(u, center));
        for (gc, ui) in grad_center.iter_mut().zip(u.iter()) {
            *gc += g * ui;
        }
        grad_neg.push(center.iter().map(|v| g * v).collect());
    }
    PairGradient {
        center: grad_center,
        context: grad_context,
        negatives: grad_neg,
    }
}

/// Seeded initial input vectors, uniform in `±0.5 / L`.
pub fn initial_vectors(vocab_size: usize, dimension: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / dimension as f64;
    let dist = Uniform::new_inclusive(-half, half).expect("finite bounds");
    Array2::from_shape_simple_fn((vocab_size, dimension), || dist.sample(&mut rng))
}

/// Trains skip-gram vectors on the given sub-documents; out-of-vocabulary
/// tokens are dropped before context windows are formed. Single-threaded and
/// deterministic under `config.seed`.
pub fn train_skipgram(subdocs: &[SubDocument], vocab: &Vocabulary, config: &SgnsConfig) -> Result<EmbeddingMatrix> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("vocabulary is empty".into()));
    }
    if config.dimension == 0 || config.negatives == 0 {
        return Err(Error::InvalidArgument("dimension and negatives must be at least 1".into()));
    }
    let v = vocab.len();
    let l = config.dimension;
    let mut input = initial_vectors(v, l, config.seed);
    let mut output = Array2::<f64>::zeros((v, l));

    let sentences: Vec<Vec<usize>> = subdocs
        .iter()
        .map(|sd| vocab.encode_sequence(&sd.tokens).into_iter().flatten().collect::<Vec<_>>())
        .filter(|s: &Vec<usize>| s.len() > 1)
        .collect();
    let mut freq = vec![0f64; v];
    for s in &sentences {
        for &w in s {
            freq[w] += 1.0;
        }
    }
    let total_words: f64 = freq.iter().sum();
    if config.epochs == 0 || total_words == 0.0 {
        return Ok(EmbeddingMatrix {
            vectors: input,
            vocab_hash: vocab.checksum(),
        });
    }
    let noise = WeightedIndex::new(freq.iter().map(|f| f.powf(0.75))).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    // a separate stream from the initializer
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let planned = config.epochs as f64 * total_words;
    let mut processed = 0.0;
    let mut negs: Vec<usize> = Vec::with_capacity(config.negatives);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &si in &order {
            let sentence = &sentences[si];
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = config.learning_rate * (1.0 - processed / planned).max(1e-4);
                processed += 1.0;
                let lo = pos.saturating_sub(config.context_radius);
                let hi = (pos + config.context_radius).min(sentence.len() - 1);
                for (cpos, &ctx) in sentence.iter().enumerate().take(hi + 1).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    negs.clear();
                    while negs.len() < config.negatives {
                        let n = noise.sample(&mut rng);
                        if n != ctx {
                            negs.push(n);
                        }
                    }
                    let c_row = input.row(center).to_vec();
                    let o_row = output.row(ctx).to_vec();
                    let n_rows: Vec<Vec<f64>> = negs.iter().map(|&n| output.row(n).to_vec()).collect();
                    let n_refs: Vec<&[f64]> = n_rows.iter().map(Vec::as_slice).collect();
                    let g = pair_gradient(&c_row, &o_row, &n_refs);

                    for (dst, gi) in output.row_mut(ctx).iter_mut().zip(&g.context) {
                        *dst += lr * gi;
                    }
                    for (&n, gn) in negs.iter().zip(&g.negatives) {
                        for (dst, gi) in output.row_mut(n).iter_mut().zip(gn) {
                            *dst += lr * gi;
                        }
                    }
                    for (dst, gi) in input.row_mut(center).iter_mut().zip(&g.center) {
                        *dst += lr * gi;
                    }
                }
            }
        }
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("skip-gram vectors".into()));
    }
    Ok(EmbeddingMatrix {
        vectors: input,
        vocab_hash: vocab.checksum(),
    })
}

/// Writes the text format, including the vocabulary checksum in the header.
pub fn save_embeddings(matrix: &EmbeddingMatrix, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if matrix.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "{} vectors for a vocabulary of {}",
            matrix.len(),
            vocab.len()
        )));
    }
    let mut out = String::new();
    writeln!(out, "{} {} {}", matrix.len(), matrix.dimension(), matrix.vocab_hash).expect("write to string");
    for (token, row) in vocab.tokens().iter().zip(matrix.vectors.rows()) {
        out.push_str(token);
        for x in row {
            write!(out, " {x}").expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an embedding file and aligns its rows to `vocab`. A checksum in the
/// header must match the vocabulary; files without one are aligned by token.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("embedding file is empty".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 2 || fields.len() > 3 {
        return Err(Error::Parse(format!("bad embedding header {header:?}")));
    }
    let rows: usize = fields[0].parse().map_err(|_| Error::Parse(format!("bad row count in {header:?}")))?;
    let dim: usize = fields[1].parse().map_err(|_| Error::Parse(format!("bad dimension in {header:?}")))?;
    let expected_hash = vocab.checksum();
    if let Some(found) = fields.get(2) {
        if *found != expected_hash {
            return Err(Error::ChecksumMismatch {
                expected: expected_hash,
                found: found.to_string(),
            });
        }
    }

    let mut vectors = Array2::<f64>::zeros((vocab.len(), dim));
    let mut filled = vec![false; vocab.len()];
    let mut bad_rows = Vec::new();
    let mut seen = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        seen += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("nonempty line");
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) if v.len() == dim => v,
            _ => {
                bad_rows.push(token.to_string());
                continue;
            }
        };
        if let Some(i) = vocab.index_of(token) {
            vectors.row_mut(i).assign(&ndarray::ArrayView1::from(&values));
            filled[i] = true;
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::Shape(format!(
            "rows without {dim} numeric values: {bad_rows:?}"
        )));
    }
    if seen != rows {
        return Err(Error::Parse(format!("header declares {rows} rows, file has {seen}")));
    }
    let missing: Vec<String> = filled
        .iter()
        .enumerate()
        .filter(|(_, f)| !**f)
        .map(|(i, _)| vocab.tokens()[i].clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTokens(missing));
    }
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding file".into()));
    }
    Ok(EmbeddingMatrix {
        vectors,
        vocab_hash: expected_hash,
    })
}
