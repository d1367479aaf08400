//! End-to-end runs: prepare a corpus, obtain embeddings, train, evaluate.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::checkpoint::{Checkpoint, CorpusContext};
use crate::corpus::{
    assign_windows, build_vocabulary, encode_subdocuments, make_all_subdocuments, split_corpus, smooth_window_stats, Corpus,
    EncodedDoc, SubDocument, Vocabulary, WindowSpec, WindowStats, DEFAULT_SPLIT,
};
use crate::embeddings::{load_embeddings, train_skipgram, SgnsConfig};
use crate::error::{Error, Result};
use crate::eval::{npmi_coherence, per_word_nll, EvalMode, EvaluationReport};
use crate::model::{deltas_for_ratio, init_model, ModelConfig, DEFAULT_DELTA};
use crate::trainer::{evaluation_stats, train_with_observer, EpochRecord, EvalSplit, Selection, SplitStats, StatsProvider, TrainingConfig};

/// Every knob of a single run in one flat record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topic_count: usize,
    pub window_count: usize,
    pub vocab_size: usize,
    pub max_subdoc_tokens: usize,
    pub max_word_sub_occurrence: f64,
    /// `delta_eta / delta_alpha`; the two share a fixed geometric mean.
    pub delta_ratio: f64,
    pub delta: f64,
    pub encoder_hidden: usize,
    pub rnn_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub reweight: bool,
    pub recompute: bool,
    pub seed: u64,
    pub split_seed: u64,
    pub gradient_clip_norm: f64,
    pub selection: Selection,
    pub npmi_top_n: usize,
    pub npmi_context: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let training = TrainingConfig::default();
        RunConfig {
            topic_count: 50,
            window_count: 8,
            vocab_size: 10_000,
            max_subdoc_tokens: 100,
            max_word_sub_occurrence: 0.5,
            delta_ratio: 1.0,
            delta: DEFAULT_DELTA,
            encoder_hidden: 256,
            rnn_hidden: 64,
            learning_rate: training.learning_rate,
            batch_size: training.batch_size,
            epochs: training.epochs,
            reweight: training.reweight,
            recompute: training.recompute,
            seed: training.seed,
            split_seed: 0,
            gradient_clip_norm: training.gradient_clip_norm,
            selection: training.selection,
            npmi_top_n: 20,
            npmi_context: 10,
        }
    }
}

impl RunConfig {
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            reweight: self.reweight,
            recompute: self.recompute,
            seed: self.seed,
            gradient_clip_norm: self.gradient_clip_norm,
            selection: self.selection,
        }
    }

    pub fn model(&self, vocab_size: usize, embed_dim: usize) -> Result<ModelConfig> {
        let (delta_alpha, delta_eta) = deltas_for_ratio(self.delta_ratio, self.delta)?;
        let cfg = ModelConfig {
            delta_alpha,
            delta_eta,
            encoder_hidden: self.encoder_hidden,
            rnn_hidden: self.rnn_hidden,
            ..ModelConfig::new(self.topic_count, self.window_count, vocab_size, embed_dim)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training().validate()?;
        self.model(1, 1)?;
        if self.max_subdoc_tokens == 0 || self.vocab_size == 0 || self.npmi_top_n == 0 || self.npmi_context == 0 {
            return Err(Error::InvalidArgument("sizes must be positive".into()));
        }
        if !(self.max_word_sub_occurrence > 0.0 && self.max_word_sub_occurrence <= 1.0) {
            return Err(Error::InvalidArgument("max_word_sub_occurrence must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A corpus split, sharded, windowed and encoded against a training vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub vocabulary: Vocabulary,
    pub window_spec: WindowSpec,
    pub train_subdocs: Vec<SubDocument>,
    pub validation_subdocs: Vec<SubDocument>,
    pub test_subdocs: Vec<SubDocument>,
    pub train: Vec<EncodedDoc>,
    pub validation: Vec<EncodedDoc>,
    pub test: Vec<EncodedDoc>,
}

impl PreparedCorpus {
    /// Test sub-documents as index sequences, out-of-vocabulary positions kept.
    pub fn test_sequences(&self) -> Vec<Vec<Option<usize>>> {
        self.test_subdocs.iter().map(|s| self.vocabulary.encode_sequence(&s.tokens)).collect()
    }
}

pub fn prepare(corpus: &Corpus, config: &RunConfig) -> Result<PreparedCorpus> {
    config.validate()?;
    let split = split_corpus(corpus, DEFAULT_SPLIT, config.split_seed)?;
    let spec = assign_windows(&corpus.documents, config.window_count)?;
    let shard = |docs: &[crate::corpus::Document]| -> Result<Vec<SubDocument>> {
        let mut subs = make_all_subdocuments(docs, config.max_subdoc_tokens)?;
        spec.assign(&mut subs)?;
        Ok(subs)
    };
    let train_subdocs = shard(&split.train)?;
    let validation_subdocs = shard(&split.validation)?;
    let test_subdocs = shard(&split.test)?;
    let vocabulary = build_vocabulary(&train_subdocs, config.vocab_size, config.max_word_sub_occurrence)?;
    if vocabulary.is_empty() {
        return Err(Error::InvalidArgument("training split produced an empty vocabulary".into()));
    }
    Ok(PreparedCorpus {
        train: encode_subdocuments(&train_subdocs, &vocabulary)?,
        validation: encode_subdocuments(&validation_subdocs, &vocabulary)?,
        test: encode_subdocuments(&test_subdocs, &vocabulary)?,
        vocabulary,
        window_spec: spec,
        train_subdocs,
        validation_subdocs,
        test_subdocs,
    })
}

/// Where the fixed word embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// A saved embedding file, aligned to the run's vocabulary by token.
    File(PathBuf),
    /// Skip-gram training on the training and validation sub-documents.
    Train(SgnsConfig),
    /// A matrix already aligned to the vocabulary that `prepare` will build.
    #[serde(skip)]
    Given(Tensor),
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Train(SgnsConfig::default())
    }
}

pub fn resolve_embeddings(source: &EmbeddingSource, prepared: &PreparedCorpus) -> Result<Tensor> {
    let rho = match source {
        EmbeddingSource::File(path) => load_embeddings(path, &prepared.vocabulary)?.vectors,
        EmbeddingSource::Train(cfg) => {
            let mut subdocs = prepared.train_subdocs.clone();
            subdocs.extend(prepared.validation_subdocs.iter().cloned());
            train_skipgram(&subdocs, &prepared.vocabulary, cfg)?.vectors
        }
        EmbeddingSource::Given(t) => t.clone(),
    };
    if rho.nrows() != prepared.vocabulary.len() {
        return Err(Error::Shape(format!(
            "embeddings have {} rows for a vocabulary of {}",
            rho.nrows(),
            prepared.vocabulary.len()
        )));
    }
    Ok(rho)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvaluationReport,
    pub checkpoint: Checkpoint,
}

/// Evaluates a checkpoint on the test split of `prepared`.
pub fn evaluate_prepared(checkpoint: &Checkpoint, prepared: &PreparedCorpus, config: &RunConfig) -> Result<EvaluationReport> {
    let start = Instant::now();
    let provider = SplitStats::from_docs(
        &prepared.train,
        prepared.validation.clone(),
        prepared.test.clone(),
        prepared.vocabulary.len(),
        config.window_count,
    )?;
    let stats = evaluation_stats(&provider, EvalSplit::Test, config.recompute)?;
    let nll = per_word_nll(&checkpoint.params, &prepared.test, &stats, EvalMode::Deterministic)?;
    let npmi = npmi_coherence(&checkpoint.params, &prepared.test_sequences(), config.npmi_top_n, config.npmi_context);
    Ok(EvaluationReport {
        config_fingerprint: config.fingerprint(),
        per_word_nll: nll.per_word_nll,
        npmi,
        word_count: nll.word_count as u64,
        timing_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_prepared(
    prepared: &PreparedCorpus,
    rho: Tensor,
    config: &RunConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let model_cfg = config.model(prepared.vocabulary.len(), rho.ncols())?;
    let provider = SplitStats::from_docs(
        &prepared.train,
        prepared.validation.clone(),
        prepared.test.clone(),
        prepared.vocabulary.len(),
        config.window_count,
    )?;
    let params = init_model(&model_cfg, &rho, config.seed)?;
    let training = config.training();
    let (params, history) = train_with_observer(params, &prepared.train, &prepared.validation, &provider, &training, observer)?;
    let checkpoint = Checkpoint {
        params,
        training,
        history,
        context: Some(CorpusContext {
            vocabulary: prepared.vocabulary.clone(),
            window_spec: prepared.window_spec.clone(),
            train_stats: provider.training_stats().clone(),
        }),
    };
    let mut report = evaluate_prepared(&checkpoint, prepared, config)?;
    report.timing_seconds = start.elapsed().as_secs_f64();
    Ok(ExperimentOutcome { report, checkpoint })
}

pub fn run_experiment(corpus: &Corpus, config: &RunConfig, embeddings: &EmbeddingSource) -> Result<ExperimentOutcome> {
    let prepared = prepare(corpus, config)?;
    let rho = resolve_embeddings(embeddings, &prepared)?;
    run_prepared(&prepared, rho, config, &mut |_| {})
}

/// Scores a saved checkpoint on the test split of `corpus`, using the
/// vocabulary, windows and training statistics frozen in the checkpoint.
/// `config` supplies the split seed, sharding and evaluation settings.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, corpus: &Corpus, config: &RunConfig) -> Result<EvaluationReport> {
    let start = Instant::now();
    let ctx = checkpoint
        .context
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint carries no corpus context".into()))?;
    let split = split_corpus(corpus, DEFAULT_SPLIT, config.split_seed)?;
    let mut test_subdocs = make_all_subdocuments(&split.test, config.max_subdoc_tokens)?;
    ctx.window_spec.assign(&mut test_subdocs)?;
    let test = encode_subdocuments(&test_subdocs, &ctx.vocabulary)?;
    let stats = if config.recompute {
        let raw = WindowStats::from_encoded(&test, ctx.vocabulary.len(), ctx.window_spec.count)?;
        smooth_window_stats(&raw)?
    } else {
        ctx.train_stats.clone()
    };
    let nll = per_word_nll(&checkpoint.params, &test, &stats, EvalMode::Deterministic)?;
    let sequences: Vec<Vec<Option<usize>>> =
        test_subdocs.iter().map(|s| ctx.vocabulary.encode_sequence(&s.tokens)).collect();
    let npmi = npmi_coherence(&checkpoint.params, &sequences, config.npmi_top_n, config.npmi_context);
    Ok(EvaluationReport {
        config_fingerprint: config.fingerprint(),
        per_word_nll: nll.per_word_nll,
        npmi,
        word_count: nll.word_count as u64,
        timing_seconds: start.elapsed().as_secs_f64(),
    })
}
