use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{generate_passkey_document, SyntheticPasskeyTask, Vocabulary};
use super::model::cross_entropy;
use super::{Scalar, ToyModel};
use crate::{Error, Result};

/// Sliding-window perplexity. Windows of `eval_window` tokens start every
/// `stride` tokens; each token is scored once, by the first window that
/// predicts it, so later windows only contribute their last `stride`
/// predictions.
pub fn sliding_window_perplexity<S: Scalar>(
    model: &ToyModel<S>,
    stream: &[usize],
    eval_window: usize,
    stride: usize,
) -> Result<f64> {
    if eval_window < 2 {
        return Err(Error::invalid("evaluation window must hold at least two tokens"));
    }
    if eval_window > model.context_window() {
        return Err(Error::invalid(format!(
            "evaluation window {eval_window} exceeds the model window {}",
            model.context_window()
        )));
    }
    if stride == 0 || stride > eval_window {
        return Err(Error::invalid(format!(
            "stride {stride} must lie in 1..={eval_window}"
        )));
    }
    if stream.len() < eval_window {
        return Err(Error::invalid(format!(
            "stream of {} tokens is shorter than the evaluation window {eval_window}",
            stream.len()
        )));
    }
    let mut total_nll = 0.0;
    let mut scored = 0usize;
    // Index of the first token not yet scored.
    let mut next = 1;
    let mut begin = 0;
    while begin + eval_window <= stream.len() {
        let window = &stream[begin..begin + eval_window];
        let logits = model.forward(&window[..eval_window - 1])?;
        let (nll, _) = cross_entropy(logits.view(), &window[1..], false);
        let first = next.max(begin + 1) - (begin + 1);
        total_nll += nll[first..].iter().sum::<f64>();
        scored += nll.len() - first;
        next = begin + eval_window;
        begin += stride;
    }
    Ok((total_nll / scored as f64).exp())
}

/// `n` distances spread uniformly over `(0, window]`.
pub fn tested_distances(window: usize, n: usize) -> Vec<usize> {
    (1..=n)
        .map(|i| ((i * window) as f64 / n as f64).round() as usize)
        .collect()
}

/// Largest tested distance such that it and every smaller tested distance
/// reach a success rate of at least 20%; 0 if the first one already fails.
pub fn k_max(distances: &[usize], success_rates: &[f64]) -> usize {
    distances
        .iter()
        .zip(success_rates)
        .take_while(|(_, &r)| r >= 0.2)
        .last()
        .map_or(0, |(&k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWindowReport {
    pub window: usize,
    pub trials: usize,
    pub seed: u64,
    /// Nominal tested distances.
    pub distances: Vec<usize>,
    /// Distances actually placed in the prompt; the largest nominal ones are
    /// capped at the furthest a passkey can sit in a full-window prompt.
    pub placed_distances: Vec<usize>,
    pub success_rates: Vec<f64>,
    pub k_max: usize,
}

impl EffectiveWindowReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,success_rate\n");
        for (k, r) in self.distances.iter().zip(&self.success_rates) {
            out.push_str(&format!("{k},{r}\n"));
        }
        out
    }
}

/// Passkey retrieval at `n_distances` distances with `trials` documents
/// each. Every prompt plus its answer fills the whole `window`.
pub fn measure_effective_window<S: Scalar>(
    model: &ToyModel<S>,
    window: usize,
    n_distances: usize,
    trials: usize,
    seed: u64,
) -> Result<EffectiveWindowReport> {
    if window > model.context_window() {
        return Err(Error::invalid(format!(
            "window {window} exceeds the model window {}",
            model.context_window()
        )));
    }
    let vocab = Vocabulary::new(model.config().vocab_size)?;
    let base = SyntheticPasskeyTask::new(
        &vocab,
        window.saturating_sub(SyntheticPasskeyTask::DEFAULT_PASSKEY_LEN),
        0,
    );
    let distances = tested_distances(window, n_distances);
    let placed: Vec<usize> = distances
        .iter()
        .map(|&k| k.clamp(base.min_distance(), base.max_distance().max(base.min_distance())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut success_rates = Vec::with_capacity(distances.len());
    for &k in &placed {
        let task = base.with_distance(k);
        let mut hits = 0;
        for _ in 0..trials {
            let doc = generate_passkey_document(&task, &mut rng)?;
            if retrieves_passkey(model, &doc.tokens, &doc.passkey)? {
                hits += 1;
            }
        }
        success_rates.push(if trials == 0 { 0.0 } else { hits as f64 / trials as f64 });
    }
    Ok(EffectiveWindowReport {
        window,
        trials,
        seed,
        k_max: k_max(&distances, &success_rates),
        distances,
        placed_distances: placed,
        success_rates,
    })
}

/// Whether greedy decoding after `prompt` reproduces `passkey` exactly.
/// Greedy decoding matches the target iff the argmax agrees with it at
/// every step when the target itself is fed back, so one teacher-forced
/// pass decides it.
fn retrieves_passkey<S: Scalar>(model: &ToyModel<S>, prompt: &[usize], passkey: &[usize]) -> Result<bool> {
    let mut input = prompt.to_vec();
    input.extend_from_slice(&passkey[..passkey.len() - 1]);
    let logits = model.forward(&input)?;
    let offset = prompt.len() - 1;
    Ok(passkey.iter().enumerate().all(|(i, &target)| {
        let row = logits.row(offset + i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best == target
    }))
}
