//! Fixtures shared by the integration tests.

use detm_core::corpus::{EncodedDoc, WindowStats};
use detm_core::model::{elbo_loss, elbo_loss_and_grad, init_model, DetmParams, LossOptions, ModelConfig, Noise};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[allow(dead_code)]
pub fn tiny_instance(seed: u64) -> (DetmParams, Vec<EncodedDoc>, WindowStats, Noise) {
    let cfg = ModelConfig {
        encoder_hidden: 8,
        rnn_hidden: 6,
        ..ModelConfig::new(2, 3, 20, 4)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = Array2::from_shape_simple_fn((20, 4), || StandardNormal.sample(&mut rng));
    let mut params = init_model(&cfg, &rho, seed).unwrap();
    // move topic embeddings and log-variances away from their initial values
    params.weights.alpha_mean.mapv_inplace(|_| 0.5 * rng.sample::<f64, _>(StandardNormal));
    params.weights.alpha_logvar.mapv_inplace(|_| -1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));

    let docs: Vec<EncodedDoc> = (0..5)
        .map(|i| {
            let counts = (0..6).map(|_| (rng.random_range(0..20), rng.random_range(1..4) as f64));
            let mut merged = std::collections::BTreeMap::new();
            for (v, c) in counts {
                *merged.entry(v).or_insert(0.0) += c;
            }
            EncodedDoc::new(i % 3, merged.into_iter().collect())
        })
        .collect();
    let stats = WindowStats {
        matrix: Array2::from_shape_simple_fn((3, 20), || rng.random::<f64>() + 0.05),
        empty_mask: vec![false; 3],
        smoothed: true,
    };
    let mut stats = stats;
    for mut row in stats.matrix.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let noise = Noise::sample(&cfg, docs.len(), &mut rng);
    (params, docs, stats, noise)
}

/// Per-group relative error `|g_a - g_n| / max(|g_a|, |g_n|)` (Frobenius norms).
#[allow(dead_code)]
pub fn gradient_errors(step: f64, reweight: bool) -> Vec<(String, f64)> {
    let (params, docs, stats, noise) = tiny_instance(11);
    let opts = LossOptions { reweight, n_train: 40 };
    let (_, analytic) = elbo_loss_and_grad(&docs, &params, &stats, opts, &noise).unwrap();

    let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let shape = params.weights.named()[gi].1.raw_dim();
        let mut numeric = Array2::<f64>::zeros(shape);
        for idx in 0..numeric.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut tensors = p.weights.tensors_mut();
                let t = &mut tensors[gi];
                let cols = t.ncols();
                t[[idx / cols, idx % cols]] += delta;
                elbo_loss(&docs, &p, &stats, opts, &noise).unwrap().total
            };
            let cols = numeric.ncols();
            numeric[[idx / cols, idx % cols]] = (eval(step) - eval(-step)) / (2.0 * step);
        }
        let a = analytic.named()[gi].1;
        let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
        out.push((name.clone(), if scale == 0.0 { 0.0 } else { diff / scale }));
    }
    out
}


#[allow(dead_code)]
pub fn fixture(name: &str) -> detm_core::eval::LabeledTable {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    detm_core::eval::LabeledTable::from_csv_path(path).unwrap()
}

/// (NLL, NPMI) table pairs for the six swept axes, in the same row order.
#[allow(dead_code)]
pub const AXIS_FIXTURES: [&str; 6] = ["recompute", "reweight", "topic_count", "window_count", "vocab_size", "delta_ratio"];
