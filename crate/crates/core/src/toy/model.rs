use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::rope::{FrequencyTable, PositionMap, DEFAULT_BASE};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

/// Shape and seed of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Context length `L` the model is pretrained on.
    pub trained_window: usize,
    pub seed: u64,
    #[serde(default = "default_base")]
    pub rope_base: f64,
}

fn default_base() -> f64 {
    DEFAULT_BASE
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            trained_window: 128,
            seed: 0,
            rope_base: DEFAULT_BASE,
        }
    }
}

impl ToyModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("trained_window", self.trained_window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::invalid(format!(
                "head dimension {} must be even for RoPE",
                self.head_dim()
            )));
        }
        FrequencyTable::new(self.head_dim(), self.rope_base)?;
        Ok(())
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub attn_norm: Array1<S>,
    pub wq: Array2<S>,
    pub wk: Array2<S>,
    pub wv: Array2<S>,
    pub wo: Array2<S>,
    pub mlp_norm: Array1<S>,
    pub w_in: Array2<S>,
    pub w_out: Array2<S>,
}

/// All model parameters. Matrices multiply from the right (`x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<S> {
    pub embed: Array2<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm: Array1<S>,
    pub head: Array2<S>,
}

/// Gradients share the parameter layout.
pub type Gradients<S> = Weights<S>;

impl<S: Scalar> Weights<S> {
    fn init(config: &ToyModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let hidden = MLP_RATIO * d;
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || S::lit(rng.random_range(-bound..bound)))
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Array1::ones(d),
                wq: uniform(d, d),
                wk: uniform(d, d),
                wv: uniform(d, d),
                wo: uniform(d, d),
                mlp_norm: Array1::ones(d),
                w_in: uniform(d, hidden),
                w_out: uniform(hidden, d),
            })
            .collect();
        let head = uniform(d, config.vocab_size);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let embed = Array2::from_shape_simple_fn((config.vocab_size, d), || {
            S::lit(normal.sample(&mut rng))
        });
        Self {
            embed,
            layers,
            final_norm: Array1::ones(d),
            head,
        }
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<S>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<S>| Array1::zeros(a.raw_dim());
        Self {
            embed: z2(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: z1(&l.attn_norm),
                    wq: z2(&l.wq),
                    wk: z2(&l.wk),
                    wv: z2(&l.wv),
                    wo: z2(&l.wo),
                    mlp_norm: z1(&l.mlp_norm),
                    w_in: z2(&l.w_in),
                    w_out: z2(&l.w_out),
                })
                .collect(),
            final_norm: z1(&self.final_norm),
            head: z2(&self.head),
        }
    }

    /// Every tensor with its name and shape, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        fn entry<S, D: ndarray::Dimension>(
            name: String,
            a: &ndarray::Array<S, D>,
        ) -> (String, Vec<usize>, &[S]) {
            (name, a.shape().to_vec(), a.as_slice().expect("contiguous"))
        }
        let mut out = vec![entry("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(entry(format!("layers.{i}.attn_norm"), &l.attn_norm));
            for (n, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                out.push(entry(format!("layers.{i}.{n}"), m));
            }
            out.push(entry(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push(entry(format!("layers.{i}.w_in"), &l.w_in));
            out.push(entry(format!("layers.{i}.w_out"), &l.w_out));
        }
        out.push(entry("final_norm".to_string(), &self.final_norm));
        out.push(entry("head".to_string(), &self.head));
        out
    }

    /// Mutable flat views in the order of [`Weights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = vec![self.embed.as_slice_mut().expect("contiguous")];
        for l in &mut self.layers {
            out.push(l.attn_norm.as_slice_mut().expect("contiguous"));
            out.push(l.wq.as_slice_mut().expect("contiguous"));
            out.push(l.wk.as_slice_mut().expect("contiguous"));
            out.push(l.wv.as_slice_mut().expect("contiguous"));
            out.push(l.wo.as_slice_mut().expect("contiguous"));
            out.push(l.mlp_norm.as_slice_mut().expect("contiguous"));
            out.push(l.w_in.as_slice_mut().expect("contiguous"));
            out.push(l.w_out.as_slice_mut().expect("contiguous"));
        }
        out.push(self.final_norm.as_slice_mut().expect("contiguous"));
        out.push(self.head.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `self += other * factor`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, factor: S) {
        let theirs: Vec<&[S]> = other.named_tensors().into_iter().map(|(_, _, t)| t).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(theirs) {
                *a = *a + b * factor;
            }
        }
    }

    pub fn squared_norm(&self) -> S {
        self.named_tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .fold(S::zero(), |acc, &x| acc + x * x)
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    /// Converts every tensor to another float type.
    pub fn cast<T: Scalar>(&self) -> Weights<T> {
        let c2 = |a: &Array2<S>| a.mapv(|x| T::lit(x.to_f64().expect("finite")));
        let c1 = |a: &Array1<S>| a.mapv(|x| T::lit(x.to_f64().expect("finite")));
        Weights {
            embed: c2(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: c1(&l.attn_norm),
                    wq: c2(&l.wq),
                    wk: c2(&l.wk),
                    wv: c2(&l.wv),
                    wo: c2(&l.wo),
                    mlp_norm: c1(&l.mlp_norm),
                    w_in: c2(&l.w_in),
                    w_out: c2(&l.w_out),
                })
                .collect(),
            final_norm: c1(&self.final_norm),
            head: c2(&self.head),
        }
    }
}

/// How a model's context is grown past its trained window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtensionMethod {
    /// Rescale positions by `L / L'` before RoPE.
    #[serde(rename = "pi")]
    PositionInterpolation,
    /// Feed positions past `L` unscaled.
    Direct,
}

impl std::str::FromStr for ExtensionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pi" | "interpolation" => Ok(Self::PositionInterpolation),
            "direct" => Ok(Self::Direct),
            other => Err(Error::invalid(format!(
                "unknown extension method {other:?} (expected pi or direct)"
            ))),
        }
    }
}

/// Decoder-only RoPE transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<S = f32> {
    config: ToyModelConfig,
    weights: Weights<S>,
    position_map: PositionMap,
    context_window: usize,
    freqs: Vec<f64>,
}

struct LayerCache<S> {
    x_in: Array2<S>,
    rinv_attn: Array1<S>,
    normed_attn: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    probs: Vec<Array2<S>>,
    attn_out: Array2<S>,
    x_mid: Array2<S>,
    rinv_mlp: Array1<S>,
    normed_mlp: Array2<S>,
    pre_act: Array2<S>,
    act: Array2<S>,
}

/// Activations saved by a forward pass, needed for backpropagation.
pub struct ForwardCache<S> {
    tokens: Vec<usize>,
    cos: Array2<S>,
    sin: Array2<S>,
    layers: Vec<LayerCache<S>>,
    final_in: Array2<S>,
    final_rinv: Array1<S>,
    final_normed: Array2<S>,
    logits: Array2<S>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn logits(&self) -> &Array2<S> {
        &self.logits
    }

    /// Attention probabilities of `layer`, one `T x T` matrix per head.
    pub fn attention_probs(&self, layer: usize) -> &[Array2<S>] {
        &self.layers[layer].probs
    }

    /// Rotated queries and keys of `layer` (`T x d_model`).
    pub fn rotated_query_key(&self, layer: usize) -> (&Array2<S>, &Array2<S>) {
        (&self.layers[layer].q, &self.layers[layer].k)
    }
}

fn rms_norm<S: Scalar>(x: &Array2<S>, gain: &Array1<S>) -> (Array2<S>, Array1<S>) {
    let d = S::lit(x.ncols() as f64);
    let eps = S::lit(NORM_EPS);
    let rinv = x.map_axis(Axis(1), |row| {
        let ms = row.iter().fold(S::zero(), |acc, &v| acc + v * v) / d;
        S::one() / (ms + eps).sqrt()
    });
    let mut out = x.clone();
    for (mut row, &r) in out.rows_mut().into_iter().zip(&rinv) {
        row.iter_mut().zip(gain).for_each(|(v, &g)| *v = *v * r * g);
    }
    (out, rinv)
}

/// Returns the input gradient and accumulates the gain gradient.
fn rms_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    x: &Array2<S>,
    rinv: &Array1<S>,
    gain: &Array1<S>,
    dgain: &mut Array1<S>,
) -> Array2<S> {
    let d = S::lit(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for t in 0..x.nrows() {
        let r = rinv[t];
        let (xr, dyr) = (x.row(t), dy.row(t));
        let mut dot = S::zero();
        for i in 0..x.ncols() {
            dgain[i] = dgain[i] + dyr[i] * xr[i] * r;
            dot = dot + dyr[i] * gain[i] * xr[i];
        }
        let coeff = r * r * r * dot / d;
        let mut out = dx.row_mut(t);
        for i in 0..x.ncols() {
            out[i] = r * gain[i] * dyr[i] - xr[i] * coeff;
        }
    }
    dx
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let (a, b, half) = (S::lit(GELU_A), S::lit(GELU_B), S::lit(0.5));
    half * x * (S::one() + (a * (x + b * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let (a, b, half) = (S::lit(GELU_A), S::lit(GELU_B), S::lit(0.5));
    let t = (a * (x + b * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * a * (S::one() + S::lit(3.0) * b * x * x)
}

/// Rotates each interleaved pair of every head in place; `inverse` rotates
/// by the negated angle, which is the transpose used in backpropagation.
fn rotate<S: Scalar>(x: &mut Array2<S>, cos: &Array2<S>, sin: &Array2<S>, n_heads: usize, inverse: bool) {
    let half = cos.ncols();
    let head_dim = 2 * half;
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        for h in 0..n_heads {
            for j in 0..half {
                let i = h * head_dim + 2 * j;
                let (c, mut sn) = (cos[(t, j)], sin[(t, j)]);
                if inverse {
                    sn = -sn;
                }
                let (re, im) = (row[i], row[i + 1]);
                row[i] = re * c - im * sn;
                row[i + 1] = re * sn + im * c;
            }
        }
    }
}

impl ToyModel<f32> {
    /// Deterministically initialised model for `config`.
    pub fn build(config: ToyModelConfig) -> Result<Self> {
        Self::build_in(config)
    }
}

impl<S: Scalar> ToyModel<S> {
    /// Like [`ToyModel::build`] for any float type.
    pub fn build_in(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Self::from_parts(config, weights, None, None)
    }

    /// Reassembles a model, checking every tensor shape against `config`.
    pub fn from_parts(
        config: ToyModelConfig,
        weights: Weights<S>,
        position_map: Option<PositionMap>,
        context_window: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = Weights::<S>::init_shapes(&config);
        let actual: Vec<(String, Vec<usize>)> = weights
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected != actual {
            return Err(Error::invalid("weight shapes do not match the model config"));
        }
        let position_map = match position_map {
            Some(map) => map,
            None => PositionMap::identity(config.trained_window)?,
        };
        if position_map.trained_window() != config.trained_window {
            return Err(Error::invalid(format!(
                "position map was built for window {} but the model was trained at {}",
                position_map.trained_window(),
                config.trained_window
            )));
        }
        let context_window = context_window.unwrap_or(position_map.extended_window());
        if context_window < config.trained_window
            || (!position_map.is_identity() && context_window != position_map.extended_window())
        {
            return Err(Error::invalid(format!(
                "context window {context_window} is inconsistent with the position map"
            )));
        }
        let freqs = FrequencyTable::new(config.head_dim(), config.rope_base)?
            .freqs()
            .to_vec();
        Ok(Self {
            config,
            weights,
            position_map,
            context_window,
            freqs,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<S> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<S> {
        &mut self.weights
    }

    pub fn position_map(&self) -> &PositionMap {
        &self.position_map
    }

    /// Longest sequence the model accepts.
    pub fn context_window(&self) -> usize {
        self.context_window
    }

    /// The same model in another float type.
    pub fn cast<T: Scalar>(&self) -> ToyModel<T> {
        ToyModel {
            config: self.config.clone(),
            weights: self.weights.cast(),
            position_map: self.position_map,
            context_window: self.context_window,
            freqs: self.freqs.clone(),
        }
    }

    /// Grows the context window to `new_window`. Only the position handling
    /// changes; every weight is carried over untouched.
    pub fn extend_context(&self, new_window: usize, method: ExtensionMethod) -> Result<Self> {
        let trained = self.config.trained_window;
        if new_window < trained {
            return Err(Error::invalid(format!(
                "cannot extend to {new_window}, below the trained window {trained}"
            )));
        }
        let (position_map, context_window) = match method {
            ExtensionMethod::PositionInterpolation => (PositionMap::new(trained, new_window)?, new_window),
            ExtensionMethod::Direct => (PositionMap::identity(trained)?, new_window),
        };
        let mut out = self.clone();
        out.position_map = position_map;
        out.context_window = context_window;
        Ok(out)
    }

    /// Encoded positions of a sequence of length `len`.
    pub fn positions(&self, len: usize) -> Vec<f64> {
        (0..len).map(|t| self.position_map.map_unchecked(t as f64)).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.context_window {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the context window {}",
                tokens.len(),
                self.context_window
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits (`T x vocab`) for every position.
    pub fn forward(&self, tokens: &[usize]) -> Result<Array2<S>> {
        Ok(self.forward_with_cache(tokens)?.logits)
    }

    pub fn forward_with_cache(&self, tokens: &[usize]) -> Result<ForwardCache<S>> {
        self.check_tokens(tokens)?;
        let positions = self.positions(tokens.len());
        Ok(self.run(tokens, &positions))
    }

    /// Forward pass at explicit encoded positions, bypassing the position
    /// map and the window check.
    pub fn forward_at_positions(&self, tokens: &[usize], positions: &[f64]) -> Result<ForwardCache<S>> {
        if tokens.len() != positions.len() || tokens.is_empty() {
            return Err(Error::invalid("need one position per token"));
        }
        if tokens.iter().any(|&t| t >= self.config.vocab_size) {
            return Err(Error::invalid("token outside vocabulary"));
        }
        Ok(self.run(tokens, positions))
    }

    fn run(&self, tokens: &[usize], positions: &[f64]) -> ForwardCache<S> {
        let n_heads = self.config.n_heads;
        let head_dim = self.config.head_dim();
        let seq = tokens.len();
        let half = head_dim / 2;
        let mut cos = Array2::zeros((seq, half));
        let mut sin = Array2::zeros((seq, half));
        for (t, &p) in positions.iter().enumerate() {
            for (j, &theta) in self.freqs.iter().enumerate() {
                let (sn, cs) = (p * theta).sin_cos();
                cos[(t, j)] = S::lit(cs);
                sin[(t, j)] = S::lit(sn);
            }
        }
        let scale = S::lit(1.0 / (head_dim as f64).sqrt());

        let mut x = Array2::zeros((seq, self.config.d_model));
        for (t, &tok) in tokens.iter().enumerate() {
            x.row_mut(t).assign(&self.weights.embed.row(tok));
        }

        let mut layers = Vec::with_capacity(self.weights.layers.len());
        for lw in &self.weights.layers {
            let x_in = x;
            let (normed_attn, rinv_attn) = rms_norm(&x_in, &lw.attn_norm);
            let mut q = normed_attn.dot(&lw.wq);
            let mut k = normed_attn.dot(&lw.wk);
            let v = normed_attn.dot(&lw.wv);
            rotate(&mut q, &cos, &sin, n_heads, false);
            rotate(&mut k, &cos, &sin, n_heads, false);

            let mut attn_out = Array2::zeros((seq, self.config.d_model));
            let mut probs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let cols = s![.., h * head_dim..(h + 1) * head_dim];
                let mut p = q.slice(cols).dot(&k.slice(cols).t());
                causal_softmax(&mut p, scale);
                attn_out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                probs.push(p);
            }
            let x_mid = &x_in + &attn_out.dot(&lw.wo);
            let (normed_mlp, rinv_mlp) = rms_norm(&x_mid, &lw.mlp_norm);
            let pre_act = normed_mlp.dot(&lw.w_in);
            let act = pre_act.mapv(gelu);
            x = &x_mid + &act.dot(&lw.w_out);
            layers.push(LayerCache {
                x_in,
                rinv_attn,
                normed_attn,
                q,
                k,
                v,
                probs,
                attn_out,
                x_mid,
                rinv_mlp,
                normed_mlp,
                pre_act,
                act,
            });
        }
        let (final_normed, final_rinv) = rms_norm(&x, &self.weights.final_norm);
        let logits = final_normed.dot(&self.weights.head);
        ForwardCache {
            tokens: tokens.to_vec(),
            cos,
            sin,
            layers,
            final_in: x,
            final_rinv,
            final_normed,
            logits,
        }
    }

    /// Backpropagates `dlogits` through a cached forward pass, accumulating
    /// into `grads`.
    pub fn backward(&self, cache: &ForwardCache<S>, dlogits: &Array2<S>, grads: &mut Gradients<S>) {
        let n_heads = self.config.n_heads;
        let head_dim = self.config.head_dim();
        let scale = S::lit(1.0 / (head_dim as f64).sqrt());

        grads.head += &cache.final_normed.t().dot(dlogits);
        let d_normed = dlogits.dot(&self.weights.head.t());
        let mut dx = rms_norm_backward(
            &d_normed,
            &cache.final_in,
            &cache.final_rinv,
            &self.weights.final_norm,
            &mut grads.final_norm,
        );

        for ((lw, lc), lg) in self
            .weights
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            // MLP
            lg.w_out += &lc.act.t().dot(&dx);
            let mut d_pre = dx.dot(&lw.w_out.t());
            d_pre.zip_mut_with(&lc.pre_act, |g, &u| *g = *g * gelu_grad(u));
            lg.w_in += &lc.normed_mlp.t().dot(&d_pre);
            let d_normed = d_pre.dot(&lw.w_in.t());
            dx += &rms_norm_backward(&d_normed, &lc.x_mid, &lc.rinv_mlp, &lw.mlp_norm, &mut lg.mlp_norm);

            // Attention
            lg.wo += &lc.attn_out.t().dot(&dx);
            let d_attn = dx.dot(&lw.wo.t());
            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for h in 0..n_heads {
                let cols = s![.., h * head_dim..(h + 1) * head_dim];
                let p = &lc.probs[h];
                let d_out = d_attn.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&d_out));
                let mut ds = d_out.dot(&lc.v.slice(cols).t());
                softmax_backward(&mut ds, p, scale);
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            rotate(&mut dq, &cache.cos, &cache.sin, n_heads, true);
            rotate(&mut dk, &cache.cos, &cache.sin, n_heads, true);
            lg.wq += &lc.normed_attn.t().dot(&dq);
            lg.wk += &lc.normed_attn.t().dot(&dk);
            lg.wv += &lc.normed_attn.t().dot(&dv);
            let d_normed = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
            dx += &rms_norm_backward(&d_normed, &lc.x_in, &lc.rinv_attn, &lw.attn_norm, &mut lg.attn_norm);
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let mut row = grads.embed.row_mut(tok);
            row += &dx.row(t);
        }
    }

    /// Mean next-token cross-entropy of `tokens` (predicting `tokens[1..]`).
    pub fn loss(&self, tokens: &[usize]) -> Result<f64> {
        let (input, targets) = split_targets(tokens)?;
        let logits = self.forward(input)?;
        let (nll, _) = cross_entropy(logits.view(), targets, false);
        Ok(nll.iter().sum::<f64>() / targets.len() as f64)
    }

    /// Mean next-token cross-entropy and its gradient, accumulated into
    /// `grads` with weight `weight`.
    pub fn loss_and_grad(&self, tokens: &[usize], weight: S, grads: &mut Gradients<S>) -> Result<f64> {
        let (input, targets) = split_targets(tokens)?;
        let cache = self.forward_with_cache(input)?;
        let (nll, dlogits) = cross_entropy(cache.logits.view(), targets, true);
        let n = S::lit(targets.len() as f64);
        let dlogits = dlogits.expect("requested") * (weight / n);
        self.backward(&cache, &dlogits, grads);
        Ok(nll.iter().sum::<f64>() / targets.len() as f64)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }
}

impl<S: Scalar> Weights<S> {
    fn init_shapes(config: &ToyModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let hidden = MLP_RATIO * d;
        let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
        for i in 0..config.n_layers {
            out.push((format!("layers.{i}.attn_norm"), vec![d]));
            for n in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{i}.{n}"), vec![d, d]));
            }
            out.push((format!("layers.{i}.mlp_norm"), vec![d]));
            out.push((format!("layers.{i}.w_in"), vec![d, hidden]));
            out.push((format!("layers.{i}.w_out"), vec![hidden, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("head".to_string(), vec![d, config.vocab_size]));
        out
    }
}

fn split_targets(tokens: &[usize]) -> Result<(&[usize], &[usize])> {
    if tokens.len() < 2 {
        return Err(Error::invalid("need at least two tokens to score a prediction"));
    }
    Ok((&tokens[..tokens.len() - 1], &tokens[1..]))
}

/// Scales, masks (keys after the query) and softmaxes raw scores in place.
fn causal_softmax<S: Scalar>(scores: &mut Array2<S>, scale: S) {
    for (t, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = S::neg_infinity();
        for j in 0..=t {
            row[j] = row[j] * scale;
            max = max.max(row[j]);
        }
        let mut sum = S::zero();
        for j in 0..=t {
            row[j] = (row[j] - max).exp();
            sum = sum + row[j];
        }
        for j in 0..row.len() {
            row[j] = if j <= t { row[j] / sum } else { S::zero() };
        }
    }
}

/// Turns `d probs` into `d raw scores` in place.
fn softmax_backward<S: Scalar>(dp: &mut Array2<S>, probs: &Array2<S>, scale: S) {
    for (mut drow, prow) in dp.rows_mut().into_iter().zip(probs.rows()) {
        let dot = drow.iter().zip(prow).fold(S::zero(), |acc, (&g, &p)| acc + g * p);
        drow.iter_mut()
            .zip(prow)
            .for_each(|(g, &p)| *g = p * (*g - dot) * scale);
    }
}

/// Per-position negative log-likelihoods (in `f64`) and optionally the
/// gradient of their sum with respect to the logits.
pub(crate) fn cross_entropy<S: Scalar>(
    logits: ArrayView2<S>,
    targets: &[usize],
    want_grad: bool,
) -> (Vec<f64>, Option<Array2<S>>) {
    let mut nll = Vec::with_capacity(targets.len());
    let mut grad = want_grad.then(|| Array2::zeros(logits.raw_dim()));
    for (t, (row, &target)) in logits.rows().into_iter().zip(targets).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64().unwrap()));
        let sum: f64 = row.iter().map(|&x| (x.to_f64().unwrap() - max).exp()).sum();
        let log_z = max + sum.ln();
        nll.push(log_z - row[target].to_f64().unwrap());
        if let Some(g) = grad.as_mut() {
            for (j, &x) in row.iter().enumerate() {
                let p = (x.to_f64().unwrap() - log_z).exp();
                g[(t, j)] = S::lit(if j == target { p - 1.0 } else { p });
            }
        }
    }
    (nll, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            trained_window: 8,
            seed: 3,
            rope_base: DEFAULT_BASE,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ToyModelConfig::default().validate().is_ok());
        assert_eq!(ToyModelConfig::default().head_dim(), 16);
        let bad = [
            ToyModelConfig { d_model: 10, n_heads: 4, ..tiny() },
            ToyModelConfig { d_model: 6, n_heads: 2, ..tiny() },
            ToyModelConfig { n_layers: 0, ..tiny() },
            ToyModelConfig { vocab_size: 0, ..tiny() },
            ToyModelConfig { rope_base: 1.0, ..tiny() },
        ];
        for cfg in bad {
            assert!(matches!(ToyModel::build(cfg), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ToyModel::build(ToyModelConfig::default()).unwrap();
        let b = ToyModel::build(ToyModelConfig::default()).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = ToyModel::build(ToyModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn single_token_forward_shape() {
        let m = ToyModel::build(ToyModelConfig::default()).unwrap();
        let logits = m.forward(&[5]).unwrap();
        assert_eq!(logits.shape(), &[1, 64]);
        assert!(logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = ToyModel::build(tiny()).unwrap();
        assert!(m.forward(&[]).is_err());
        assert!(m.forward(&[11]).is_err());
        assert!(m.forward(&[1; 9]).is_err());
        assert!(m.forward(&[1; 8]).is_ok());
        assert!(m.loss(&[1]).is_err());
    }

    #[test]
    fn causal_softmax_rows_sum_to_one() {
        let mut s = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 * 0.3);
        causal_softmax(&mut s, 1.0);
        for (t, row) in s.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().skip(t + 1).all(|&p| p == 0.0));
        }
    }

    #[test]
    fn rotate_inverse_undoes_rotation() {
        let m = ToyModel::<f64>::build_in(tiny()).unwrap();
        let x0 = Array2::from_shape_fn((3, 8), |(i, j)| (i as f64 - j as f64) * 0.37);
        let cache = m.forward_with_cache(&[1, 2, 3]).unwrap();
        let mut x = x0.clone();
        rotate(&mut x, &cache.cos, &cache.sin, 2, false);
        rotate(&mut x, &cache.cos, &cache.sin, 2, true);
        assert!(x.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn extension_keeps_weights_and_checks_window() {
        let m = ToyModel::build(tiny()).unwrap();
        assert!(m.extend_context(4, ExtensionMethod::PositionInterpolation).is_err());
        for method in [ExtensionMethod::PositionInterpolation, ExtensionMethod::Direct] {
            let e = m.extend_context(16, method).unwrap();
            assert_eq!(e.weights(), m.weights());
            assert_eq!(e.context_window(), 16);
            assert_eq!(e.position_map().trained_window(), 8);
            assert!(e.forward(&[1; 16]).is_ok());
        }
        let pi = m.extend_context(16, ExtensionMethod::PositionInterpolation).unwrap();
        assert_eq!(pi.positions(3), vec![0.0, 0.5, 1.0]);
        let direct = m.extend_context(16, ExtensionMethod::Direct).unwrap();
        assert_eq!(direct.positions(3), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("pi".parse::<ExtensionMethod>().unwrap(), ExtensionMethod::PositionInterpolation);
        assert_eq!("Direct".parse::<ExtensionMethod>().unwrap(), ExtensionMethod::Direct);
        assert!("yarn".parse::<ExtensionMethod>().is_err());
        assert_eq!(serde_json::to_string(&ExtensionMethod::PositionInterpolation).unwrap(), "\"pi\"");
    }

    #[test]
    fn gradient_accumulation_is_linear_in_weight() {
        let m = ToyModel::<f64>::build_in(tiny()).unwrap();
        let toks = [1, 4, 2, 7, 3];
        let mut g1 = m.weights().zeros_like();
        let mut g2 = m.weights().zeros_like();
        m.loss_and_grad(&toks, 1.0, &mut g1).unwrap();
        m.loss_and_grad(&toks, 0.5, &mut g2).unwrap();
        m.loss_and_grad(&toks, 0.5, &mut g2).unwrap();
        g1.add_scaled(&g2, -1.0);
        assert!(g1.squared_norm() < 1e-24);
    }
}
