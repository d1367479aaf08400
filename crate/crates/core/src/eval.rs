//! Per-word NLL, NPMI coherence, NLL/NPMI rank agreement, seed-variance
//! significance, and significance-aware best-cell marking.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedDoc;
use crate::corpus::WindowStats;
use crate::error::{Error, Result};
use crate::model::{topic_word_matrix, DecodedModel, DetmParams, Noise};

pub const NPMI_EPSILON: f64 = 1e-12;
const EVAL_CHUNK: usize = 512;

/// Metrics for one trained model on one evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_fingerprint: String,
    /// Nats per in-vocabulary token.
    pub per_word_nll: f64,
    pub npmi: f64,
    pub word_count: u64,
    pub timing_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Every noise term at zero.
    Deterministic,
    /// A single seeded draw of all noise terms.
    Sampled { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllResult {
    pub per_word_nll: f64,
    pub log_likelihood: f64,
    pub word_count: f64,
}

/// `-(Σ_d Σ_w log Σ_k β_{t_d,k,w} θ_{d,k}) / total_words`, where the word
/// count covers in-vocabulary tokens only.
pub fn per_word_nll(params: &DetmParams, docs: &[EncodedDoc], stats: &WindowStats, mode: EvalMode) -> Result<NllResult> {
    let docs: Vec<&EncodedDoc> = docs.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::NoTokens);
    }
    let cfg = &params.config;
    let k = cfg.topic_count;
    let mut rng = match mode {
        EvalMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        EvalMode::Deterministic => None,
    };
    let decoded = match rng.as_mut() {
        None => DecodedModel::means(params, stats)?,
        Some(rng) => {
            let noise = Noise::sample(cfg, 0, rng);
            DecodedModel::sampled(params, stats, &noise.eta, &noise.alpha)?
        }
    };

    let mut loglik = 0.0;
    let mut words = 0.0;
    for chunk in docs.chunks(EVAL_CHUNK) {
        let owned: Vec<EncodedDoc> = chunk.iter().map(|d| (*d).clone()).collect();
        let eps = rng.as_mut().map(|r| Noise::sample(cfg, owned.len(), r).theta);
        let theta = decoded.theta(params, &owned, eps.as_ref())?;
        for (doc, theta_d) in owned.iter().zip(theta.rows()) {
            for &(v, count) in &doc.counts {
                let p: f64 = (0..k).map(|j| theta_d[j] * decoded.beta[[doc.window * k + j, v]]).sum();
                loglik += count * p.ln();
                words += count;
            }
        }
    }
    if words == 0.0 {
        return Err(Error::NoTokens);
    }
    Ok(NllResult {
        per_word_nll: -loglik / words,
        log_likelihood: loglik,
        word_count: words,
    })
}

/// Indices of the `n` largest entries, largest first; ties by index.
pub fn top_words(distribution: ndarray::ArrayView1<f64>, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distribution.len()).collect();
    idx.sort_by(|&a, &b| distribution[b].total_cmp(&distribution[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Boolean sliding-window document frequencies for a fixed word set.
#[derive(Clone, Debug, Default)]
pub struct CooccurrenceCounts {
    pub windows: u64,
    single: HashMap<usize, u64>,
    pair: HashMap<(usize, usize), u64>,
}

impl CooccurrenceCounts {
    /// Slides a `context`-token window with stride 1 over each sequence,
    /// never crossing sequence boundaries. A sequence shorter than the
    /// window counts as one window. Only words in `relevant` are tracked.
    pub fn count(sequences: &[Vec<Option<usize>>], context: usize, relevant: &HashSet<usize>) -> Self {
        let context = context.max(1);
        let mut out = CooccurrenceCounts::default();
        let mut present: Vec<usize> = Vec::new();
        for seq in sequences {
            if seq.is_empty() {
                continue;
            }
            let n_windows = if seq.len() <= context { 1 } else { seq.len() - context + 1 };
            for start in 0..n_windows {
                let end = (start + context).min(seq.len());
                present.clear();
                present.extend(seq[start..end].iter().flatten().filter(|w| relevant.contains(w)));
                present.sort_unstable();
                present.dedup();
                out.windows += 1;
                for (i, &a) in present.iter().enumerate() {
                    *out.single.entry(a).or_default() += 1;
                    for &b in &present[i + 1..] {
                        *out.pair.entry((a, b)).or_default() += 1;
                    }
                }
            }
        }
        out
    }

    pub fn single(&self, w: usize) -> u64 {
        self.single.get(&w).copied().unwrap_or(0)
    }

    pub fn joint(&self, a: usize, b: usize) -> u64 {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.pair.get(&key).copied().unwrap_or(0)
    }

    /// `ln(p_ij / (p_i p_j)) / -ln p_ij`, with `ε` added to `p_ij`. Pairs that
    /// never co-occur score −1; pairs present in every window score 1.
    pub fn npmi(&self, a: usize, b: usize) -> f64 {
        let joint = self.joint(a, b);
        if joint == 0 || self.windows == 0 {
            return -1.0;
        }
        if joint == self.windows {
            return 1.0;
        }
        let n = self.windows as f64;
        let p_ij = joint as f64 / n;
        let p_i = self.single(a) as f64 / n;
        let p_j = self.single(b) as f64 / n;
        let smoothed = p_ij + NPMI_EPSILON;
        ((smoothed / (p_i * p_j)).ln() / -smoothed.ln()).clamp(-1.0, 1.0)
    }
}

/// Mean pairwise NPMI of one word list.
pub fn topic_npmi(words: &[usize], counts: &CooccurrenceCounts) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in words.iter().enumerate() {
        for &b in &words[i + 1..] {
            total += counts.npmi(a, b);
            pairs += 1;
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

/// Averages pair NPMI within each topic, then over the topics of each
/// window, then over windows. `topics[t]` holds the word lists of window `t`.
pub fn npmi_for_topics(topics: &[Vec<Vec<usize>>], sequences: &[Vec<Option<usize>>], context: usize) -> f64 {
    let relevant: HashSet<usize> = topics.iter().flatten().flatten().copied().collect();
    let counts = CooccurrenceCounts::count(sequences, context, &relevant);
    let window_means: Vec<f64> = topics
        .iter()
        .filter_map(|window| {
            let scores: Vec<f64> = window.iter().filter_map(|w| topic_npmi(w, &counts)).collect();
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect();
    if window_means.is_empty() {
        return 0.0;
    }
    window_means.iter().sum::<f64>() / window_means.len() as f64
}

/// NPMI of the model's top-`top_n` words for every (window, topic), measured
/// on `sequences` (token indices with out-of-vocabulary positions as `None`).
pub fn npmi_coherence(params: &DetmParams, sequences: &[Vec<Option<usize>>], top_n: usize, context: usize) -> f64 {
    let beta = topic_word_matrix(params);
    let k = params.config.topic_count;
    let topics: Vec<Vec<Vec<usize>>> = (0..params.config.window_count)
        .map(|t| (0..k).map(|j| top_words(beta.row(t * k + j), top_n)).collect())
        .collect();
    npmi_for_topics(&topics, sequences, context)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson on average ranks). Zero when either side is
/// constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Mean over rows of the Spearman correlation between NPMI and negated NLL
/// (so lower NLL ranks as better).
pub fn nll_npmi_rank_correlation(rows: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to correlate".into()));
    }
    let mut total = 0.0;
    for (nll, npmi) in rows {
        let inverse: Vec<f64> = nll.iter().map(|v| -v).collect();
        total += spearman(npmi, &inverse)?;
    }
    Ok(total / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEstimate {
    pub n_runs: usize,
    /// Twice the Bessel-corrected sample standard deviation.
    pub two_sigma: f64,
}

/// Welford's one-pass variance with the `n - 1` denominator.
pub fn seed_variance(scores: &[f64]) -> Result<SignificanceEstimate> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "seed variance needs at least 2 runs, got {}",
            scores.len()
        )));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in scores.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (scores.len() - 1) as f64;
    Ok(SignificanceEstimate {
        n_runs: scores.len(),
        two_sigma: 2.0 * var.max(0.0).sqrt(),
    })
}

/// Slack for comparing table cells that were rounded before the comparison.
const MARK_SLACK: f64 = 1e-9;

/// Index of the row minimum if it beats the runner-up by more than
/// `two_sigma`; `None` for ties, single cells, or insignificant gaps.
pub fn mark_best(row: &[f64], two_sigma: f64) -> Option<usize> {
    if row.len() < 2 {
        return None;
    }
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v < row[best] {
            best = i;
        }
    }
    let runner_up = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    (runner_up - row[best] > two_sigma + MARK_SLACK).then_some(best)
}

/// A results table with row labels (corpora) and condition columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl LabeledTable {
    /// CSV with a header `label,<condition>...` and one row per corpus.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let label = rec.get(0).unwrap_or_default().to_string();
            let values: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
            if values.len() != columns.len() {
                return Err(Error::Parse(format!("row {} has {} values for {} columns", i + 1, values.len(), columns.len())));
            }
            rows.push((label, values));
        }
        Ok(LabeledTable { columns, rows })
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn row(&self, label: &str) -> Option<&[f64]> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, v)| v.as_slice())
    }
}
