//! The dynamic embedded topic model: topic embeddings on a Gaussian random
//! walk, mixture priors on a second walk amortized by a gated recurrent
//! network over window statistics, per-sub-document logistic-normal topic
//! proportions, and an embedding inner-product softmax decoder.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::corpus::{EncodedDoc, WindowStats};
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const DEFAULT_DELTA: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub topic_count: usize,
    pub window_count: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Variance of the topic-embedding walk.
    pub delta_alpha: f64,
    /// Variance of the mixture-prior walk.
    pub delta_eta: f64,
    pub encoder_hidden: usize,
    pub rnn_hidden: usize,
}

impl ModelConfig {
    pub fn new(topic_count: usize, window_count: usize, vocab_size: usize, embed_dim: usize) -> Self {
        ModelConfig {
            topic_count,
            window_count,
            vocab_size,
            embed_dim,
            delta_alpha: DEFAULT_DELTA,
            delta_eta: DEFAULT_DELTA,
            encoder_hidden: 256,
            rnn_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topic_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "topic_count must be at least 2, got {}",
                self.topic_count
            )));
        }
        self.validate_dims()
    }

    /// Dimension checks without the `K >= 2` rule; a single topic is still
    /// a well-defined (if degenerate) model.
    pub(crate) fn validate_dims(&self) -> Result<()> {
        let sizes = [
            ("topic_count", self.topic_count),
            ("window_count", self.window_count),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("rnn_hidden", self.rnn_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.delta_alpha > 0.0 && self.delta_alpha.is_finite())
            || !(self.delta_eta > 0.0 && self.delta_eta.is_finite())
        {
            return Err(Error::InvalidArgument("walk deltas must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn delta_ratio(&self) -> f64 {
        self.delta_eta / self.delta_alpha
    }
}

/// Splits `ratio = delta_eta / delta_alpha` around a fixed geometric mean.
pub fn deltas_for_ratio(ratio: f64, geometric_mean: f64) -> Result<(f64, f64)> {
    if ratio <= 0.0 || !ratio.is_finite() || geometric_mean.is_nan() || geometric_mean <= 0.0 {
        return Err(Error::InvalidArgument(format!("invalid delta ratio {ratio}")));
    }
    let root = ratio.sqrt();
    Ok((geometric_mean / root, geometric_mean * root))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `in x out`
    pub weight: T,
    /// `1 x out`
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell<T> {
    pub input_update: Linear<T>,
    pub hidden_update: T,
    pub input_reset: Linear<T>,
    pub hidden_reset: T,
    pub input_candidate: Linear<T>,
    pub hidden_candidate: T,
}

/// Sequence network producing the per-window Gaussian over mixture priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaNetwork<T> {
    pub input_map: Linear<T>,
    pub gru: GruCell<T>,
    pub mean_head: Linear<T>,
    pub logvar_head: Linear<T>,
}

/// Feed-forward encoder from (normalized bag-of-words ⊕ η_t) to a Gaussian
/// over topic logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaEncoder<T> {
    pub hidden1: Linear<T>,
    pub hidden2: Linear<T>,
    pub mean_head: Linear<T>,
    pub logvar_head: Linear<T>,
}

/// Every trainable tensor. `T` is `Tensor` for values and gradients and
/// `Var` while a loss graph is being built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    /// `(T_w * K) x L`, row `t * K + k` is topic `k` at window `t`.
    pub alpha_mean: T,
    pub alpha_logvar: T,
    pub eta: EtaNetwork<T>,
    pub encoder: ThetaEncoder<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U, prefix: &str) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Weights<T> {
    /// Applies `f` to every tensor in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        let f = &mut f;
        Weights {
            alpha_mean: f("alpha_mean", &self.alpha_mean),
            alpha_logvar: f("alpha_logvar", &self.alpha_logvar),
            eta: EtaNetwork {
                input_map: self.eta.input_map.map(f, "eta.input_map"),
                gru: GruCell {
                    input_update: self.eta.gru.input_update.map(f, "eta.gru.input_update"),
                    hidden_update: f("eta.gru.hidden_update", &self.eta.gru.hidden_update),
                    input_reset: self.eta.gru.input_reset.map(f, "eta.gru.input_reset"),
                    hidden_reset: f("eta.gru.hidden_reset", &self.eta.gru.hidden_reset),
                    input_candidate: self.eta.gru.input_candidate.map(f, "eta.gru.input_candidate"),
                    hidden_candidate: f("eta.gru.hidden_candidate", &self.eta.gru.hidden_candidate),
                },
                mean_head: self.eta.mean_head.map(f, "eta.mean_head"),
                logvar_head: self.eta.logvar_head.map(f, "eta.logvar_head"),
            },
            encoder: ThetaEncoder {
                hidden1: self.encoder.hidden1.map(f, "encoder.hidden1"),
                hidden2: self.encoder.hidden2.map(f, "encoder.hidden2"),
                mean_head: self.encoder.mean_head.map(f, "encoder.mean_head"),
                logvar_head: self.encoder.logvar_head.map(f, "encoder.logvar_head"),
            },
        }
    }

    /// `(name, tensor)` pairs in the same order as [`Weights::map`].
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("alpha_mean".to_string(), &self.alpha_mean),
            ("alpha_logvar".to_string(), &self.alpha_logvar),
        ];
        self.eta.input_map.collect("eta.input_map", &mut out);
        let gru = &self.eta.gru;
        gru.input_update.collect("eta.gru.input_update", &mut out);
        out.push(("eta.gru.hidden_update".into(), &gru.hidden_update));
        gru.input_reset.collect("eta.gru.input_reset", &mut out);
        out.push(("eta.gru.hidden_reset".into(), &gru.hidden_reset));
        gru.input_candidate.collect("eta.gru.input_candidate", &mut out);
        out.push(("eta.gru.hidden_candidate".into(), &gru.hidden_candidate));
        self.eta.mean_head.collect("eta.mean_head", &mut out);
        self.eta.logvar_head.collect("eta.logvar_head", &mut out);
        self.encoder.hidden1.collect("encoder.hidden1", &mut out);
        self.encoder.hidden2.collect("encoder.hidden2", &mut out);
        self.encoder.mean_head.collect("encoder.mean_head", &mut out);
        self.encoder.logvar_head.collect("encoder.logvar_head", &mut out);
        out
    }

    /// Mutable tensors in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.alpha_mean, &mut self.alpha_logvar];
        self.eta.input_map.collect_mut(&mut out);
        let gru = &mut self.eta.gru;
        gru.input_update.collect_mut(&mut out);
        out.push(&mut gru.hidden_update);
        gru.input_reset.collect_mut(&mut out);
        out.push(&mut gru.hidden_reset);
        gru.input_candidate.collect_mut(&mut out);
        out.push(&mut gru.hidden_candidate);
        self.eta.mean_head.collect_mut(&mut out);
        self.eta.logvar_head.collect_mut(&mut out);
        self.encoder.hidden1.collect_mut(&mut out);
        self.encoder.hidden2.collect_mut(&mut out);
        self.encoder.mean_head.collect_mut(&mut out);
        self.encoder.logvar_head.collect_mut(&mut out);
        out
    }

    /// Rebuilds a `Weights` from tensors in canonical order, using `self` as
    /// the shape template.
    pub fn zip_from<U>(&self, items: Vec<U>) -> Result<Weights<U>> {
        let expected = self.named().len();
        if items.len() != expected {
            return Err(Error::Shape(format!("expected {expected} tensors, got {}", items.len())));
        }
        let mut iter = items.into_iter();
        Ok(self.map(|_, _| iter.next().expect("length checked")))
    }
}

impl Weights<Tensor> {
    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Array2::zeros(t.raw_dim()))
    }

    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// A model instance: configuration, fixed word embeddings and the
/// trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DetmParams {
    pub config: ModelConfig,
    /// `V x L`, fixed during training.
    pub rho: Tensor,
    pub weights: Weights<Tensor>,
}

fn linear_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Linear {
        weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
        bias: Array2::from_shape_simple_fn((1, fan_out), || dist.sample(rng)),
    }
}

fn square_init(rng: &mut impl Rng, n: usize) -> Tensor {
    let bound = 1.0 / (n as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((n, n), || dist.sample(rng))
}

const ALPHA_INIT_SCALE: f64 = 0.01;

/// Seeded initialization: small Gaussian topic-embedding means, zero
/// log-variances and fan-in-scaled uniform network weights.
pub fn init_model(config: &ModelConfig, rho: &Tensor, seed: u64) -> Result<DetmParams> {
    config.validate_dims()?;
    if rho.dim() != (config.vocab_size, config.embed_dim) {
        return Err(Error::Shape(format!(
            "embedding matrix is {}x{}, config expects {}x{}",
            rho.nrows(),
            rho.ncols(),
            config.vocab_size,
            config.embed_dim
        )));
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding matrix".into()));
    }
    let (k, t, v, l) = (config.topic_count, config.window_count, config.vocab_size, config.embed_dim);
    let (h, e) = (config.rnn_hidden, config.encoder_hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let alpha_mean = Array2::from_shape_simple_fn((t * k, l), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        ALPHA_INIT_SCALE * z
    });
    let weights = Weights {
        alpha_mean,
        alpha_logvar: Array2::zeros((t * k, l)),
        eta: EtaNetwork {
            input_map: linear_init(&mut rng, v, h),
            gru: GruCell {
                input_update: linear_init(&mut rng, h, h),
                hidden_update: square_init(&mut rng, h),
                input_reset: linear_init(&mut rng, h, h),
                hidden_reset: square_init(&mut rng, h),
                input_candidate: linear_init(&mut rng, h, h),
                hidden_candidate: square_init(&mut rng, h),
            },
            mean_head: linear_init(&mut rng, h + k, k),
            logvar_head: linear_init(&mut rng, h + k, k),
        },
        encoder: ThetaEncoder {
            hidden1: linear_init(&mut rng, v + k, e),
            hidden2: linear_init(&mut rng, e, e),
            mean_head: linear_init(&mut rng, e, k),
            logvar_head: linear_init(&mut rng, e, k),
        },
    };
    Ok(DetmParams {
        config: config.clone(),
        rho: rho.clone(),
        weights,
    })
}

impl DetmParams {
    pub fn check_shapes(&self) -> Result<()> {
        let expected = init_model(&self.config, &self.rho, 0)?;
        for ((name, a), (_, b)) in self.weights.named().iter().zip(expected.weights.named()) {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }

    /// Clamps the topic-embedding log-variances to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn clamp_logvars(&mut self) {
        self.weights
            .alpha_logvar
            .mapv_inplace(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    }
}

/// Standard-normal draws for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// `T_w x K`
    pub eta: Tensor,
    /// `(T_w * K) x L`
    pub alpha: Tensor,
    /// `batch x K`
    pub theta: Tensor,
}

impl Noise {
    /// All-zero noise: every sample equals its mean.
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let (k, t, l) = (config.topic_count, config.window_count, config.embed_dim);
        Noise {
            eta: Array2::zeros((t, k)),
            alpha: Array2::zeros((t * k, l)),
            theta: Array2::zeros((batch, k)),
        }
    }

    pub fn sample(config: &ModelConfig, batch: usize, rng: &mut impl Rng) -> Self {
        let (k, t, l) = (config.topic_count, config.window_count, config.embed_dim);
        let mut draw = |r, c| Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut *rng));
        Noise {
            eta: draw(t, k),
            alpha: draw(t * k, l),
            theta: draw(batch, k),
        }
    }
}

/// `KL(N(mu_q, exp(logvar_q)) || N(mu_p, exp(logvar_p)))` for diagonal Gaussians.
pub fn gaussian_kl(mu_q: &[f64], logvar_q: &[f64], mu_p: &[f64], logvar_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if logvar_q.len() != n || mu_p.len() != n || logvar_p.len() != n {
        return Err(Error::Shape("gaussian_kl arguments differ in length".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (mq, lq, mp, lp) = (mu_q[i], logvar_q[i], mu_p[i], logvar_p[i]);
        if !(mq.is_finite() && lq.is_finite() && mp.is_finite() && lp.is_finite()) {
            return Err(Error::NonFinite("gaussian_kl input".into()));
        }
        let diff = mp - mq;
        total += 0.5 * ((lq - lp).exp() + diff * diff / lp.exp() - 1.0 + lp - lq);
    }
    Ok(total)
}

/// `softmax(rho · alpha)` over the vocabulary.
pub fn compute_beta(alpha: ArrayView1<f64>, rho: &Tensor) -> Result<Array1<f64>> {
    if alpha.len() != rho.ncols() {
        return Err(Error::Shape(format!(
            "topic embedding has {} dims, word embeddings have {}",
            alpha.len(),
            rho.ncols()
        )));
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("topic embedding".into()));
    }
    let logits = rho.dot(&alpha).insert_axis(ndarray::Axis(0));
    Ok(softmax_rows(&logits).row(0).to_owned())
}

/// Graph for `KL(q || N(mu_p, exp(prior_logvar) I))`, summed over entries.
/// `mu_p = None` means a zero prior mean.
fn kl_isotropic(tape: &mut Tape, mu_q: Var, logvar_q: Var, mu_p: Option<Var>, prior_logvar: f64) -> Var {
    let n = tape.value(mu_q).len() as f64;
    let inv_var = (-prior_logvar).exp();
    let var_q = tape.exp(logvar_q);
    let var_ratio = tape.scale(var_q, inv_var);
    let diff = match mu_p {
        Some(p) => tape.sub(mu_q, p),
        None => mu_q,
    };
    let sq = tape.square(diff);
    let mahal = tape.scale(sq, inv_var);
    let a = tape.add(var_ratio, mahal);
    let b = tape.sub(a, logvar_q);
    let s = tape.sum(b);
    let shifted = tape.add_scalar(s, n * (prior_logvar - 1.0));
    tape.scale(shifted, 0.5)
}

fn linear(tape: &mut Tape, layer: &Linear<Var>, x: Var) -> Var {
    let xw = tape.matmul(x, layer.weight);
    tape.add_row(xw, layer.bias)
}

/// Graph nodes for the mixture-prior posterior, one `1 x K` node per window.
struct EtaGraph {
    mean: Vec<Var>,
    logvar: Vec<Var>,
    sample: Vec<Var>,
}

fn eta_graph(tape: &mut Tape, config: &ModelConfig, w: &EtaNetwork<Var>, stats: &Tensor, eps: &Tensor) -> EtaGraph {
    let (t_w, k, h) = (config.window_count, config.topic_count, config.rnn_hidden);
    let x = tape.constant(stats.clone());
    let projected = linear(tape, &w.input_map, x);
    let xz = linear(tape, &w.gru.input_update, projected);
    let xr = linear(tape, &w.gru.input_reset, projected);
    let xn = linear(tape, &w.gru.input_candidate, projected);

    let mut hidden = tape.constant(Array2::zeros((1, h)));
    let mut prev = tape.constant(Array2::zeros((1, k)));
    let mut out = EtaGraph {
        mean: Vec::with_capacity(t_w),
        logvar: Vec::with_capacity(t_w),
        sample: Vec::with_capacity(t_w),
    };
    for t in 0..t_w {
        let xz_t = tape.row(xz, t);
        let hz = tape.matmul(hidden, w.gru.hidden_update);
        let zin = tape.add(xz_t, hz);
        let z = tape.sigmoid(zin);

        let xr_t = tape.row(xr, t);
        let hr = tape.matmul(hidden, w.gru.hidden_reset);
        let rin = tape.add(xr_t, hr);
        let r = tape.sigmoid(rin);

        let xn_t = tape.row(xn, t);
        let rh = tape.mul(r, hidden);
        let hn = tape.matmul(rh, w.gru.hidden_candidate);
        let nin = tape.add(xn_t, hn);
        let cand = tape.tanh(nin);

        // h' = n + z * (h - n)
        let delta = tape.sub(hidden, cand);
        let gated = tape.mul(z, delta);
        hidden = tape.add(cand, gated);

        let inp = tape.concat_cols(hidden, prev);
        let mean = linear(tape, &w.mean_head, inp);
        let raw_lv = linear(tape, &w.logvar_head, inp);
        let logvar = tape.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX);
        let sample = reparameterize(tape, mean, logvar, eps.row(t).insert_axis(ndarray::Axis(0)).to_owned());

        out.mean.push(mean);
        out.logvar.push(logvar);
        out.sample.push(sample);
        prev = sample;
    }
    out
}

fn reparameterize(tape: &mut Tape, mean: Var, logvar: Var, eps: Tensor) -> Var {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps);
    let noise = tape.mul(std, e);
    tape.add(mean, noise)
}

struct ThetaGraph {
    mean: Var,
    logvar: Var,
    theta: Var,
}

/// `bow_norm` is `B x V` (rows sum to 1) and `eta_rows` is `B x K`.
fn theta_graph(tape: &mut Tape, w: &ThetaEncoder<Var>, bow_norm: Var, eta_rows: Var, eps: Tensor) -> ThetaGraph {
    let inp = tape.concat_cols(bow_norm, eta_rows);
    let h1 = linear(tape, &w.hidden1, inp);
    let h1 = tape.softplus(h1);
    let h2 = linear(tape, &w.hidden2, h1);
    let h2 = tape.softplus(h2);
    let mean = linear(tape, &w.mean_head, h2);
    let raw_lv = linear(tape, &w.logvar_head, h2);
    let logvar = tape.clamp(raw_lv, LOGVAR_MIN, LOGVAR_MAX);
    let z = reparameterize(tape, mean, logvar, eps);
    let theta = tape.softmax(z);
    ThetaGraph { mean, logvar, theta }
}

fn check_stats(stats: &WindowStats, config: &ModelConfig) -> Result<()> {
    if stats.window_count() != config.window_count || stats.vocab_size() != config.vocab_size {
        return Err(Error::Shape(format!(
            "window stats are {}x{}, model expects {}x{}",
            stats.window_count(),
            stats.vocab_size(),
            config.window_count,
            config.vocab_size
        )));
    }
    if stats.has_zero_rows() {
        return Err(Error::UnsmoothedStats);
    }
    Ok(())
}

/// Posterior over the per-window mixture priors, `T_w x K` each.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
}

/// Runs the sequence network over the (smoothed) window statistics in time
/// order. `eps = None` uses zero noise, so the sample equals the mean.
pub fn infer_eta(stats: &WindowStats, params: &DetmParams, eps: Option<&Tensor>) -> Result<EtaPosterior> {
    check_stats(stats, &params.config)?;
    let zeros = Noise::zeros(&params.config, 0).eta;
    let eps = eps.unwrap_or(&zeros);
    if eps.dim() != zeros.dim() {
        return Err(Error::Shape("eta noise must be T_w x K".into()));
    }
    let mut tape = Tape::new();
    let w = params.weights.map(|_, t| tape.constant(t.clone()));
    let g = eta_graph(&mut tape, &params.config, &w.eta, &stats.matrix, eps);
    let stack = |tape: &mut Tape, rows: &[Var]| {
        let v = tape.concat_rows(rows);
        tape.value(v).clone()
    };
    Ok(EtaPosterior {
        mean: stack(&mut tape, &g.mean),
        logvar: stack(&mut tape, &g.logvar),
        sample: stack(&mut tape, &g.sample),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaPosterior {
    pub mean_logits: Array1<f64>,
    pub logvar: Array1<f64>,
    pub theta: Array1<f64>,
}

fn normalized_bow(bow: ArrayView1<f64>) -> Result<Tensor> {
    if bow.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("bag-of-words counts must be finite and nonnegative".into()));
    }
    let total = bow.sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("bag-of-words is empty".into()));
    }
    Ok((&bow / total).insert_axis(ndarray::Axis(0)))
}

/// Encodes one sub-document. `eps = None` uses zero noise.
pub fn infer_theta(
    bow: ArrayView1<f64>,
    eta_t: ArrayView1<f64>,
    params: &DetmParams,
    eps: Option<ArrayView1<f64>>,
) -> Result<ThetaPosterior> {
    let cfg = &params.config;
    if bow.len() != cfg.vocab_size || eta_t.len() != cfg.topic_count {
        return Err(Error::Shape("bow must have V entries and eta_t K entries".into()));
    }
    let norm = normalized_bow(bow)?;
    let eps = match eps {
        Some(e) if e.len() != cfg.topic_count => return Err(Error::Shape("theta noise must have K entries".into())),
        Some(e) => e.to_owned().insert_axis(ndarray::Axis(0)),
        None => Array2::zeros((1, cfg.topic_count)),
    };
    let mut tape = Tape::new();
    let w = params.weights.map(|_, t| tape.constant(t.clone()));
    let bow_v = tape.constant(norm);
    let eta_v = tape.constant(eta_t.to_owned().insert_axis(ndarray::Axis(0)));
    let g = theta_graph(&mut tape, &w.encoder, bow_v, eta_v, eps);
    Ok(ThetaPosterior {
        mean_logits: tape.value(g.mean).row(0).to_owned(),
        logvar: tape.value(g.logvar).row(0).to_owned(),
        theta: tape.value(g.theta).row(0).to_owned(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl_theta: f64,
    pub kl_eta: f64,
    pub kl_alpha: f64,
    pub total: f64,
    pub reweighted: bool,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.kl_theta.is_finite() && self.kl_eta.is_finite() && self.kl_alpha.is_finite()
    }
}

/// How per-document terms are scaled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub reweight: bool,
    pub n_train: usize,
}

struct LossGraph {
    nll: Var,
    kl_theta: Var,
    kl_eta: Var,
    kl_alpha: Var,
    total: Var,
}

fn check_batch(batch: &[EncodedDoc], config: &ModelConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss needs a nonempty batch".into()));
    }
    for doc in batch {
        if doc.window >= config.window_count {
            return Err(Error::InvalidArgument(format!(
                "window index {} outside [0, {})",
                doc.window, config.window_count
            )));
        }
        if doc.is_empty() {
            return Err(Error::InvalidArgument("batch contains an empty sub-document".into()));
        }
        if let Some(&(v, _)) = doc.counts.last() {
            if v >= config.vocab_size {
                return Err(Error::Shape(format!("token index {v} outside vocabulary")));
            }
        }
    }
    Ok(())
}

/// Dense `n x V` count matrix for the given documents.
fn dense_counts<'a>(docs: impl ExactSizeIterator<Item = &'a EncodedDoc>, vocab_size: usize) -> Tensor {
    let mut out = Array2::zeros((docs.len(), vocab_size));
    for (r, doc) in docs.enumerate() {
        for &(v, c) in &doc.counts {
            out[[r, v]] = c;
        }
    }
    out
}

fn dense_normalized(docs: &[EncodedDoc], vocab_size: usize) -> Tensor {
    let mut out = dense_counts(docs.iter(), vocab_size);
    for mut row in out.rows_mut() {
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Batch rows grouped by window: `(window, row indices)`.
fn rows_by_window(batch: &[EncodedDoc], window_count: usize) -> Vec<(usize, Vec<usize>)> {
    let mut groups = vec![Vec::new(); window_count];
    for (i, doc) in batch.iter().enumerate() {
        groups[doc.window].push(i);
    }
    groups
        .into_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .collect()
}

fn build_loss(
    tape: &mut Tape,
    w: &Weights<Var>,
    params: &DetmParams,
    batch: &[EncodedDoc],
    stats: &WindowStats,
    opts: LossOptions,
    noise: &Noise,
) -> Result<LossGraph> {
    let cfg = &params.config;
    let (k, t_w, v) = (cfg.topic_count, cfg.window_count, cfg.vocab_size);
    check_stats(stats, cfg)?;
    check_batch(batch, cfg)?;
    if noise.eta.dim() != (t_w, k)
        || noise.alpha.dim() != (t_w * k, cfg.embed_dim)
        || noise.theta.dim() != (batch.len(), k)
    {
        return Err(Error::Shape("noise shapes disagree with the model and batch".into()));
    }

    // mixture priors
    let eta = eta_graph(tape, cfg, &w.eta, &stats.matrix, &noise.eta);
    let mut kl_eta_terms = Vec::with_capacity(t_w);
    for t in 0..t_w {
        let term = if t == 0 {
            kl_isotropic(tape, eta.mean[0], eta.logvar[0], None, 0.0)
        } else {
            kl_isotropic(tape, eta.mean[t], eta.logvar[t], Some(eta.sample[t - 1]), cfg.delta_eta.ln())
        };
        kl_eta_terms.push(term);
    }
    let kl_eta = sum_scalars(tape, &kl_eta_terms);
    let eta_samples = tape.concat_rows(&eta.sample);

    // topic embeddings
    let alpha_lv = tape.clamp(w.alpha_logvar, LOGVAR_MIN, LOGVAR_MAX);
    let alpha = reparameterize(tape, w.alpha_mean, alpha_lv, noise.alpha.clone());
    let first_mean = tape.slice_rows(w.alpha_mean, 0, k);
    let first_lv = tape.slice_rows(alpha_lv, 0, k);
    let mut kl_alpha = kl_isotropic(tape, first_mean, first_lv, None, 0.0);
    if t_w > 1 {
        let rest = (t_w - 1) * k;
        let later_mean = tape.slice_rows(w.alpha_mean, k, rest);
        let later_lv = tape.slice_rows(alpha_lv, k, rest);
        let prev = tape.slice_rows(alpha, 0, rest);
        let walk = kl_isotropic(tape, later_mean, later_lv, Some(prev), cfg.delta_alpha.ln());
        kl_alpha = tape.add(kl_alpha, walk);
    }

    // decoder
    let rho = tape.constant(params.rho.clone());
    let logits = tape.matmul_t(alpha, rho);
    let beta = tape.softmax(logits);

    // documents
    let windows: Vec<usize> = batch.iter().map(|d| d.window).collect();
    let bow_norm = tape.constant(dense_normalized(batch, v));
    let eta_rows = tape.gather_rows(eta_samples, &windows);
    let theta = theta_graph(tape, &w.encoder, bow_norm, eta_rows, noise.theta.clone());
    let kl_theta = kl_isotropic(tape, theta.mean, theta.logvar, Some(eta_rows), 0.0);

    let mut loglik_terms = Vec::new();
    for (t, rows) in rows_by_window(batch, t_w) {
        let theta_t = tape.gather_rows(theta.theta, &rows);
        let beta_t = tape.slice_rows(beta, t * k, k);
        let mix = tape.matmul(theta_t, beta_t);
        let log_mix = tape.log(mix);
        let counts = tape.constant(dense_counts(rows.iter().map(|&r| &batch[r]), v));
        let weighted = tape.mul(counts, log_mix);
        loglik_terms.push(tape.sum(weighted));
    }
    let loglik = sum_scalars(tape, &loglik_terms);
    let mut nll = tape.scale(loglik, -1.0);
    let mut kl_theta = kl_theta;
    if opts.reweight {
        let ratio = opts.n_train as f64 / batch.len() as f64;
        nll = tape.scale(nll, ratio);
        kl_theta = tape.scale(kl_theta, ratio);
    }

    let doc_terms = tape.add(nll, kl_theta);
    let shared = tape.add(kl_eta, kl_alpha);
    let total = tape.add(doc_terms, shared);
    Ok(LossGraph {
        nll,
        kl_theta,
        kl_eta,
        kl_alpha,
        total,
    })
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

fn breakdown(tape: &Tape, g: &LossGraph, reweighted: bool) -> LossBreakdown {
    LossBreakdown {
        nll: tape.scalar(g.nll),
        kl_theta: tape.scalar(g.kl_theta),
        kl_eta: tape.scalar(g.kl_eta),
        kl_alpha: tape.scalar(g.kl_alpha),
        total: tape.scalar(g.total),
        reweighted,
    }
}

/// Single-sample reparameterized ELBO estimate (as a loss to minimize).
pub fn elbo_loss(
    batch: &[EncodedDoc],
    params: &DetmParams,
    stats: &WindowStats,
    opts: LossOptions,
    noise: &Noise,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let w = params.weights.map(|_, t| tape.constant(t.clone()));
    let g = build_loss(&mut tape, &w, params, batch, stats, opts, noise)?;
    Ok(breakdown(&tape, &g, opts.reweight))
}

/// The loss and its gradient with respect to every trainable tensor.
pub fn elbo_loss_and_grad(
    batch: &[EncodedDoc],
    params: &DetmParams,
    stats: &WindowStats,
    opts: LossOptions,
    noise: &Noise,
) -> Result<(LossBreakdown, Weights<Tensor>)> {
    let mut tape = Tape::new();
    let w = params.weights.map(|_, t| tape.input(t.clone()));
    let g = build_loss(&mut tape, &w, params, batch, stats, opts, noise)?;
    let loss = breakdown(&tape, &g, opts.reweight);
    let mut grads = tape.backward(g.total);
    let grad = w.map(|_, var| grads.take(*var).unwrap_or_else(|| Array2::zeros(tape.value(*var).raw_dim())));
    Ok((loss, grad))
}

/// Decoded per-window quantities used for evaluation: mixture priors and
/// topic-word distributions, either at the variational means or at one
/// reparameterized draw.
#[derive(Clone, Debug)]
pub struct DecodedModel {
    /// `T_w x K`
    pub eta: Tensor,
    /// `(T_w * K) x V`
    pub beta: Tensor,
}

impl DecodedModel {
    /// All noise set to zero.
    pub fn means(params: &DetmParams, stats: &WindowStats) -> Result<Self> {
        let eta = infer_eta(stats, params, None)?.mean;
        let beta = topic_word_matrix(params);
        Ok(DecodedModel { eta, beta })
    }

    /// One draw of the mixture priors and topic embeddings.
    pub fn sampled(params: &DetmParams, stats: &WindowStats, eta_eps: &Tensor, alpha_eps: &Tensor) -> Result<Self> {
        let w = &params.weights;
        if alpha_eps.dim() != w.alpha_mean.dim() {
            return Err(Error::Shape("alpha noise must match alpha_mean".into()));
        }
        let eta = infer_eta(stats, params, Some(eta_eps))?.sample;
        let std = w.alpha_logvar.mapv(|lv| (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp());
        let alpha = &w.alpha_mean + &(&std * alpha_eps);
        let beta = softmax_rows(&alpha.dot(&params.rho.t()));
        Ok(DecodedModel { eta, beta })
    }

    pub fn topic(&self, window: usize, topic: usize, topic_count: usize) -> ArrayView1<'_, f64> {
        self.beta.row(window * topic_count + topic)
    }

    /// Topic proportions for a batch of sub-documents, `B x K`. `eps = None`
    /// gives the proportions at the encoder mean.
    pub fn theta(&self, params: &DetmParams, docs: &[EncodedDoc], eps: Option<&Tensor>) -> Result<Tensor> {
        check_batch(docs, &params.config)?;
        let k = params.config.topic_count;
        let eps = match eps {
            Some(e) if e.dim() != (docs.len(), k) => return Err(Error::Shape("theta noise must be B x K".into())),
            Some(e) => e.clone(),
            None => Array2::zeros((docs.len(), k)),
        };
        let mut tape = Tape::new();
        let w = params.weights.map(|_, t| tape.constant(t.clone()));
        let bow = tape.constant(dense_normalized(docs, params.config.vocab_size));
        let windows: Vec<usize> = docs.iter().map(|d| d.window).collect();
        let eta = tape.constant(self.eta.select(ndarray::Axis(0), &windows));
        let g = theta_graph(&mut tape, &w.encoder, bow, eta, eps);
        Ok(tape.value(g.theta).clone())
    }
}

/// `softmax(alpha_mean · rhoᵀ)` for every (window, topic), `(T_w * K) x V`.
pub fn topic_word_matrix(params: &DetmParams) -> Tensor {
    softmax_rows(&params.weights.alpha_mean.dot(&params.rho.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder_hidden: 6,
            rnn_hidden: 5,
            ..ModelConfig::new(2, 3, 20, 4)
        }
    }

    fn tiny_params(seed: u64) -> DetmParams {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rho = Array2::from_shape_simple_fn((20, 4), || StandardNormal.sample(&mut rng));
        init_model(&cfg, &rho, seed).unwrap()
    }

    fn uniform_stats(t: usize, v: usize) -> WindowStats {
        WindowStats {
            matrix: Array2::from_elem((t, v), 1.0 / v as f64),
            empty_mask: vec![false; t],
            smoothed: true,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = tiny_params(3);
        assert_eq!(a, tiny_params(3));
        assert_ne!(a.weights, tiny_params(4).weights);
        assert_eq!(a.weights.alpha_mean.dim(), (3 * 2, 4));
        assert!(a.weights.alpha_logvar.iter().all(|v| *v == 0.0));
        let bad_rho = Array2::zeros((19, 4));
        assert!(matches!(init_model(&tiny_config(), &bad_rho, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(gaussian_kl(&[0.3], &[0.2], &[0.3], &[0.2]).unwrap(), 0.0);
        assert!((gaussian_kl(&[1.0], &[0.0], &[0.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut d = || -> f64 {
                let z: f64 = StandardNormal.sample(&mut rng);
                3.0 * z
            };
            let v = [d(), d(), d(), d()];
            assert!(gaussian_kl(&v[..1], &v[1..2], &v[2..3], &v[3..]).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn walk_penalty_shrinks_with_larger_delta() {
        // monotone while delta stays below the KL-optimal var_q + step^2
        let kl = |delta: f64| gaussian_kl(&[1.5, -2.0], &[-3.0, -2.0], &[0.0, 0.0], &[delta.ln(), delta.ln()]).unwrap();
        let (a, b, c) = (kl(0.01), kl(0.1), kl(1.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn beta_examples() {
        let rho = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let b = compute_beta(array![2f64.ln(), 0.0, 0.0].view(), &rho).unwrap();
        for (x, y) in b.iter().zip([0.5, 0.25, 0.25]) {
            assert!((x - y).abs() < 1e-15);
        }
        let b = compute_beta(array![0.0, 0.0, 0.0].view(), &rho).unwrap();
        assert!(b.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let flat = Array2::from_elem((5, 3), 0.7);
        let b = compute_beta(array![4.0, -1.0, 2.0].view(), &flat).unwrap();
        assert!(b.iter().all(|x| (x - 0.2).abs() < 1e-15));
        assert!(compute_beta(array![f64::NAN, 0.0, 0.0].view(), &rho).is_err());
    }

    #[test]
    fn eta_reparameterization_and_order() {
        let p = tiny_params(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = WindowStats {
            matrix: Array2::from_shape_simple_fn((3, 20), || rng.random::<f64>() + 0.1),
            empty_mask: vec![false; 3],
            smoothed: true,
        };
        let post = infer_eta(&stats, &p, None).unwrap();
        assert_eq!(post.sample, post.mean);
        assert_eq!(post.mean.dim(), (3, 2));

        let mut reversed = stats.clone();
        for t in 0..3 {
            reversed.matrix.row_mut(t).assign(&stats.matrix.row(2 - t));
        }
        let rev = infer_eta(&reversed, &p, None).unwrap();
        // the middle window sees the same input but a different history
        assert_ne!(post.mean.row(1), rev.mean.row(1));

        let mut zero_row = stats.clone();
        zero_row.matrix.row_mut(1).fill(0.0);
        assert!(matches!(infer_eta(&zero_row, &p, None), Err(Error::UnsmoothedStats)));
    }

    #[test]
    fn theta_simplex_and_shift_invariance() {
        let p = tiny_params(0);
        let bow = Array1::from_shape_fn(20, |i| (i % 3) as f64);
        let eta = array![0.3, -0.1];
        let post = infer_theta(bow.view(), eta.view(), &p, None).unwrap();
        assert!(post.theta.iter().all(|v| *v > 0.0));
        assert!((post.theta.sum() - 1.0).abs() < 1e-7);
        let expect = softmax_rows(&post.mean_logits.clone().insert_axis(ndarray::Axis(0)));
        assert_eq!(post.theta, expect.row(0));
        let shifted = softmax_rows(&(&post.mean_logits + 5.0).insert_axis(ndarray::Axis(0)));
        for (a, b) in shifted.iter().zip(post.theta.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let eps = array![1.0, -2.0];
        let noisy = infer_theta(bow.view(), eta.view(), &p, Some(eps.view())).unwrap();
        assert!((noisy.theta.sum() - 1.0).abs() < 1e-7);
        assert!(infer_theta(Array1::zeros(20).view(), eta.view(), &p, None).is_err());
    }

    fn batch() -> Vec<EncodedDoc> {
        vec![
            EncodedDoc::new(0, vec![(1, 2.0), (5, 1.0)]),
            EncodedDoc::new(2, vec![(0, 1.0), (19, 3.0)]),
            EncodedDoc::new(2, vec![(7, 1.0)]),
        ]
    }

    #[test]
    fn reweight_semantics() {
        let p = tiny_params(1);
        let stats = uniform_stats(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Noise::sample(&p.config, 3, &mut rng);
        let plain = |n| elbo_loss(&batch(), &p, &stats, LossOptions { reweight: false, n_train: n }, &noise).unwrap();
        assert_eq!(plain(3).total, plain(1000).total);

        let rw = |n| elbo_loss(&batch(), &p, &stats, LossOptions { reweight: true, n_train: n }, &noise).unwrap();
        let same = rw(3);
        assert_eq!(same.total.to_bits(), plain(3).total.to_bits());

        let big = rw(30);
        let base = plain(30);
        assert_eq!(big.kl_eta.to_bits(), base.kl_eta.to_bits());
        assert_eq!(big.kl_alpha.to_bits(), base.kl_alpha.to_bits());
        assert_eq!(big.nll, base.nll * 10.0);
        assert_eq!(big.kl_theta, base.kl_theta * 10.0);
        assert!(big.reweighted && !base.reweighted);
    }

    #[test]
    fn loss_terms_are_nonnegative_and_finite() {
        let p = tiny_params(1);
        let stats = uniform_stats(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let noise = Noise::sample(&p.config, 3, &mut rng);
            let l = elbo_loss(&batch(), &p, &stats, LossOptions { reweight: false, n_train: 3 }, &noise).unwrap();
            assert!(l.is_finite());
            assert!(l.kl_theta >= -1e-9 && l.kl_eta >= -1e-9 && l.kl_alpha >= -1e-9);
            let sum = l.nll + l.kl_theta + l.kl_eta + l.kl_alpha;
            assert!((l.total - sum).abs() <= 1e-9 * sum.abs());
        }
    }

    #[test]
    fn bad_window_index_is_rejected() {
        let p = tiny_params(1);
        let stats = uniform_stats(3, 20);
        let docs = vec![EncodedDoc::new(3, vec![(0, 1.0)])];
        let noise = Noise::zeros(&p.config, 1);
        assert!(elbo_loss(&docs, &p, &stats, LossOptions { reweight: false, n_train: 1 }, &noise).is_err());
    }

    #[test]
    fn nll_term_matches_scalar_oracle() {
        // K=2, V=3, one sub-document, zero noise, hand-set parameters
        let mut cfg = ModelConfig::new(2, 2, 3, 3);
        cfg.encoder_hidden = 4;
        cfg.rnn_hidden = 3;
        let rho = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut p = init_model(&cfg, &rho, 0).unwrap();
        p.weights.alpha_mean = array![[2f64.ln(), 0.0, 0.0], [0.0, 2f64.ln(), 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        // encoder mean head -> 0, so theta = (0.5, 0.5)
        p.weights.encoder.mean_head.weight.fill(0.0);
        p.weights.encoder.mean_head.bias.fill(0.0);
        let stats = uniform_stats(2, 3);
        let doc = vec![EncodedDoc::new(0, vec![(0, 2.0), (2, 1.0)])];
        let noise = Noise::zeros(&cfg, 1);
        let l = elbo_loss(&doc, &p, &stats, LossOptions { reweight: false, n_train: 1 }, &noise).unwrap();

        // beta rows (0.5, 0.25, 0.25) and (0.25, 0.5, 0.25)
        let beta = [[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]];
        let theta = [0.5, 0.5];
        let bow = [2.0, 0.0, 1.0];
        let mut oracle = 0.0;
        for v in 0..3 {
            let mut p_v = 0.0;
            for k in 0..2 {
                p_v += theta[k] * beta[k][v];
            }
            oracle -= bow[v] * f64::ln(p_v);
        }
        assert!((l.nll - oracle).abs() < 1e-9, "{} vs {}", l.nll, oracle);
    }
}
