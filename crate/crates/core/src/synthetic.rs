//! Corpora sampled from a known dynamic embedded topic model, for
//! end-to-end checks where the generating process is known.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::autodiff::{softmax_rows, Tensor};
use crate::corpus::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub topic_count: usize,
    pub window_count: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub documents: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Norm of each topic's embedding; larger means more peaked topics.
    pub topic_scale: f64,
    /// Per-window standard deviation of the topic-embedding walk.
    pub topic_drift: f64,
    /// Per-window standard deviation of the mixture-prior walk.
    pub prior_drift: f64,
    /// Years per window; window `t` covers `[t * span, (t + 1) * span)`.
    pub years_per_window: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topic_count: 3,
            window_count: 4,
            vocab_size: 100,
            embed_dim: 16,
            documents: 2000,
            min_length: 40,
            max_length: 80,
            topic_scale: 4.0,
            topic_drift: 0.5,
            prior_drift: 0.5,
            years_per_window: 25,
            seed: 0,
        }
    }
}

/// A sampled corpus together with the parameters that generated it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Word embeddings in generator order (`w000`, `w001`, ...).
    pub rho: Tensor,
    /// `(T_w * K) x V` topic-word distributions.
    pub beta: Tensor,
    /// `T_w x K` mixture-prior means.
    pub eta: Tensor,
}

pub fn word_token(index: usize) -> String {
    format!("w{index:03}")
}

impl SyntheticCorpus {
    /// The generating embeddings re-ordered to `vocab`.
    pub fn rho_for(&self, vocab: &Vocabulary) -> Result<Tensor> {
        let mut out = Array2::zeros((vocab.len(), self.rho.ncols()));
        for (i, token) in vocab.tokens().iter().enumerate() {
            let src = token
                .strip_prefix('w')
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&s| s < self.rho.nrows())
                .ok_or_else(|| Error::MissingTokens(vec![token.clone()]))?;
            out.row_mut(i).assign(&self.rho.row(src));
        }
        Ok(out)
    }
}

/// Documents are dated so that window `t` of an equal-width split over the
/// full date range is exactly the generator's window `t`. Document `i` is
/// drawn from window `i mod T_w`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let (k, t, v, l) = (spec.topic_count, spec.window_count, spec.vocab_size, spec.embed_dim);
    if k == 0 || t < 2 || v == 0 || l == 0 || spec.min_length == 0 || spec.max_length < spec.min_length {
        return Err(Error::InvalidArgument("degenerate synthetic spec".into()));
    }
    if spec.documents < t * spec.years_per_window as usize {
        return Err(Error::InvalidArgument(
            "need at least one document per year so the date range is fully covered".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rho = Array2::from_shape_simple_fn((v, l), || rng.sample::<f64, _>(StandardNormal));

    let mut alpha = Array2::<f64>::zeros((t * k, l));
    for j in 0..k {
        let mut dir: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x *= spec.topic_scale / norm);
        for (c, x) in dir.iter().enumerate() {
            alpha[[j, c]] = *x;
        }
    }
    let drift = Normal::new(0.0, spec.topic_drift).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for w in 1..t {
        for j in 0..k {
            for c in 0..l {
                alpha[[w * k + j, c]] = alpha[[(w - 1) * k + j, c]] + drift.sample(&mut rng);
            }
        }
    }
    let beta = softmax_rows(&alpha.dot(&rho.t()));

    let prior = Normal::new(0.0, spec.prior_drift).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut eta = Array2::<f64>::zeros((t, k));
    for w in 0..t {
        for j in 0..k {
            eta[[w, j]] = if w == 0 { rng.sample(StandardNormal) } else { eta[[w - 1, j]] + prior.sample(&mut rng) };
        }
    }

    let topic_words: Vec<WeightedIndex<f64>> = beta
        .rows()
        .into_iter()
        .map(|row| WeightedIndex::new(row.iter().copied()).map_err(|e| Error::NonFinite(e.to_string())))
        .collect::<Result<_>>()?;

    let mut docs = Vec::with_capacity(spec.documents);
    for i in 0..spec.documents {
        let w = i % t;
        let year = w as i64 * spec.years_per_window + ((i / t) as i64 % spec.years_per_window);
        let logits: Vec<f64> = (0..k).map(|j| eta[[w, j]] + rng.sample::<f64, _>(StandardNormal)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let mixture = WeightedIndex::new(&weights).map_err(|e| Error::NonFinite(e.to_string()))?;
        let len = rng.random_range(spec.min_length..=spec.max_length);
        let tokens: Vec<String> = (0..len)
            .map(|_| {
                let topic = mixture.sample(&mut rng);
                word_token(topic_words[w * k + topic].sample(&mut rng))
            })
            .collect();
        docs.push(Document {
            id: format!("doc{i:05}"),
            tokens,
            time: year,
        });
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::from_documents(docs)?,
        rho,
        beta,
        eta,
    })
}
