//! A small VAE with a hand-rolled MLP and manual reverse-mode gradients.
//!
//! Encoder `D → H (tanh) → 2M` emits the Gaussian posterior `(m, log s²)`.
//! Decoder `M → H (tanh) → D` emits logits for the CB / Bernoulli kinds, or
//! `M → H (tanh) → 2D` emits `(η, log σ²)` for the Gaussian kind. All reported
//! objectives are nats per datum: summed over coordinates, averaged over rows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array, Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension, Zip};

use crate::data::Dataset;
use crate::distribution::CBParam;
use crate::estimation::mu_inverse;
use crate::numerics::{log_sum_exp, RandomStream};
use crate::{Error, Result};

/// Bound on `|log s²|` and `|log σ²|`.
pub const LOG_VAR_CLAMP: f64 = 7.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CBVAE001";
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Affine map `y = act(x W + b)` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.ncols() {
            return Err(Error::Dimension { expected: weights.ncols(), got: bias.len() });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self { weights, bias, activation })
    }

    fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self { weights: Array2::zeros((input, output)), bias: Array1::zeros(output), activation }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Forward activations kept for the backward pass.
struct Cache {
    input: Array2<f64>,
    outputs: Vec<Array2<f64>>,
}

impl Cache {
    fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension { expected: pair[0].output_dim(), got: pair[1].input_dim() });
            }
        }
        Ok(Self { layers })
    }

    /// All-zero parameters; layers after the first `widths.len() − 2` are identity.
    pub fn zeros(widths: &[usize], hidden: Activation) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n).map(|i| Layer::zeros(widths[i], widths[i + 1], if i + 1 == n { Activation::Identity } else { hidden })).collect();
        Self { layers }
    }

    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn random(widths: &[usize], hidden: Activation, stream: &mut RandomStream) -> Self {
        let mut p = Self::zeros(widths, hidden);
        for layer in &mut p.layers {
            let scale = (1.0 / layer.input_dim() as f64).sqrt();
            layer.weights.mapv_inplace(|_| scale * stream.normal());
        }
        p
    }

    fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Layer::zeros(l.input_dim(), l.output_dim(), l.activation)).collect() }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Row-wise forward pass.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = apply(layer, h.view());
        }
        h
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Cache {
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let h = if i == 0 { apply(layer, x) } else { apply(layer, outputs[i - 1].view()) };
            outputs.push(h);
        }
        Cache { input: x.to_owned(), outputs }
    }

    /// Parameter gradients and the gradient with respect to the input, given
    /// the gradient with respect to the output.
    fn backward(&self, cache: &Cache, d_out: Array2<f64>) -> (MlpParams, Array2<f64>) {
        let mut grads = self.zeros_like();
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if layer.activation == Activation::Tanh {
                Zip::from(&mut delta).and(&cache.outputs[i]).for_each(|d, y| *d *= 1.0 - y * y);
            }
            let input = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
            grads.layers[i].weights = input.t().dot(&delta);
            grads.layers[i].bias = delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weights.t());
        }
        (grads, delta)
    }
}

fn apply(layer: &Layer, x: ArrayView2<f64>) -> Array2<f64> {
    let mut h = x.dot(&layer.weights) + &layer.bias;
    if layer.activation == Activation::Tanh {
        h.mapv_inplace(f64::tanh);
    }
    h
}

/// Decoder likelihood family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodKind {
    Cb,
    Bernoulli,
    Gaussian,
}

impl LikelihoodKind {
    pub fn name(self) -> &'static str {
        match self {
            LikelihoodKind::Cb => "cb",
            LikelihoodKind::Bernoulli => "bernoulli",
            LikelihoodKind::Gaussian => "gaussian",
        }
    }

    fn code(self) -> u32 {
        match self {
            LikelihoodKind::Cb => 0,
            LikelihoodKind::Bernoulli => 1,
            LikelihoodKind::Gaussian => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LikelihoodKind::Cb),
            1 => Some(LikelihoodKind::Bernoulli),
            2 => Some(LikelihoodKind::Gaussian),
            _ => None,
        }
    }

    fn uses_logits(self) -> bool {
        self != LikelihoodKind::Gaussian
    }

    /// Decoder output width for data dimension `d`.
    pub fn decoder_width(self, d: usize) -> usize {
        if self.uses_logits() {
            d
        } else {
            2 * d
        }
    }
}

impl fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cb" => Ok(LikelihoodKind::Cb),
            "bernoulli" => Ok(LikelihoodKind::Bernoulli),
            "gaussian" => Ok(LikelihoodKind::Gaussian),
            other => Err(Error::Config(format!("unknown likelihood kind {other:?}"))),
        }
    }
}

/// How decoder logits become `λ` when scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// `λ = sigmoid(logit)`, clamped.
    Model,
    /// `λ = μ⁻¹(sigmoid(logit))`: reads the decoder output as a mean.
    MuInverse,
}

/// Encoder, decoder and the objective they were trained for.
///
/// The training objective includes the normalizer when `include_norm_const`
/// is set, except for the Bernoulli kind, which never does.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub kind: LikelihoodKind,
    pub include_norm_const: bool,
}

impl Vae {
    pub fn new(encoder: MlpParams, decoder: MlpParams, kind: LikelihoodKind, include_norm_const: bool) -> Result<Self> {
        if encoder.output_dim() != 2 * decoder.input_dim() {
            return Err(Error::Dimension { expected: 2 * decoder.input_dim(), got: encoder.output_dim() });
        }
        let width = kind.decoder_width(encoder.input_dim());
        if decoder.output_dim() != width {
            return Err(Error::Dimension { expected: width, got: decoder.output_dim() });
        }
        Ok(Self { encoder, decoder, kind, include_norm_const })
    }

    /// One tanh hidden layer of width `hidden` on each side, all weights zero.
    pub fn zeros(data_dim: usize, latent_dim: usize, hidden: usize, kind: LikelihoodKind, include_norm_const: bool) -> Self {
        Self {
            encoder: MlpParams::zeros(&[data_dim, hidden, 2 * latent_dim], Activation::Tanh),
            decoder: MlpParams::zeros(&[latent_dim, hidden, kind.decoder_width(data_dim)], Activation::Tanh),
            kind,
            include_norm_const,
        }
    }

    pub fn random(
        data_dim: usize,
        latent_dim: usize,
        hidden: usize,
        kind: LikelihoodKind,
        include_norm_const: bool,
        stream: &mut RandomStream,
    ) -> Self {
        Self {
            encoder: MlpParams::random(&[data_dim, hidden, 2 * latent_dim], Activation::Tanh, stream),
            decoder: MlpParams::random(&[latent_dim, hidden, kind.decoder_width(data_dim)], Activation::Tanh, stream),
            kind,
            include_norm_const,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    /// Whether the training objective is the proper ELBO.
    pub fn objective_includes_norm(&self) -> bool {
        self.include_norm_const && self.kind != LikelihoodKind::Bernoulli
    }

    fn check_batch(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.data_dim() {
            return Err(Error::Dimension { expected: self.data_dim(), got: x.ncols() });
        }
        if self.kind.uses_logits() {
            if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("input {v} outside [0, 1]")));
            }
        } else if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input".into()));
        }
        Ok(())
    }

    /// Posterior means `m(x)` for every row; the latent embedding.
    pub fn encode_means(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.data_dim() {
            return Err(Error::Dimension { expected: self.data_dim(), got: x.ncols() });
        }
        let out = self.encoder.forward(x);
        Ok(out.slice(s![.., ..self.latent_dim()]).to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOut {
    pub m: Array1<f64>,
    /// Clamped to `[−7, 7]`.
    pub log_s2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderOut {
    Cb {
        logits: Array1<f64>,
    },
    Bernoulli {
        logits: Array1<f64>,
    },
    /// `log_sigma2` clamped to `[−7, 7]`.
    Gaussian {
        eta: Array1<f64>,
        log_sigma2: Array1<f64>,
    },
}

fn split_encoder(raw: &Array2<f64>, latent: usize) -> (Array2<f64>, Array2<f64>) {
    let m = raw.slice(s![.., ..latent]).to_owned();
    let ls = raw.slice(s![.., latent..]).mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
    (m, ls)
}

pub fn encode(x: ArrayView1<f64>, vae: &Vae) -> Result<EncoderOut> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input".into()));
    }
    if x.len() != vae.data_dim() {
        return Err(Error::Dimension { expected: vae.data_dim(), got: x.len() });
    }
    let raw = vae.encoder.forward(x.insert_axis(Axis(0)));
    let (m, ls) = split_encoder(&raw, vae.latent_dim());
    Ok(EncoderOut { m: m.row(0).to_owned(), log_s2: ls.row(0).to_owned() })
}

pub fn decode(z: ArrayView1<f64>, vae: &Vae) -> Result<DecoderOut> {
    if z.len() != vae.latent_dim() {
        return Err(Error::Dimension { expected: vae.latent_dim(), got: z.len() });
    }
    let out = vae.decoder.forward(z.insert_axis(Axis(0))).row(0).to_owned();
    let d = vae.data_dim();
    Ok(match vae.kind {
        LikelihoodKind::Cb => DecoderOut::Cb { logits: out },
        LikelihoodKind::Bernoulli => DecoderOut::Bernoulli { logits: out },
        LikelihoodKind::Gaussian => DecoderOut::Gaussian {
            eta: out.slice(s![..d]).to_owned(),
            log_sigma2: out.slice(s![d..]).mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)),
        },
    })
}

/// `z = m + exp(½ log s²) ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparam_sample(enc: &EncoderOut, stream: &mut RandomStream) -> Array1<f64> {
    Zip::from(&enc.m).and(&enc.log_s2).map_collect(|m, ls| m + (0.5 * ls).exp() * stream.normal())
}

/// `KL(N(m, diag s²) ‖ N(0, I))`.
pub fn kl_std_normal(enc: &EncoderOut) -> f64 {
    Zip::from(&enc.m).and(&enc.log_s2).fold(0.0, |acc, m, ls| acc + 0.5 * (m * m + ls.exp() - 1.0 - ls))
}

/// Reconstruction log-likelihood of one datum.
///
/// CB / Bernoulli: `Σ x log λ + (1−x) log(1−λ)`, plus `Σ log C(λ)` when
/// `include_norm_const`. Gaussian: `−Σ (x−η)²/(2σ²)`, plus `−½ Σ log(2πσ²)`
/// when `include_norm_const`.
pub fn recon_log_lik(x: ArrayView1<f64>, dec: &DecoderOut, include_norm_const: bool) -> Result<f64> {
    let mut total = 0.0;
    match dec {
        DecoderOut::Cb { logits } | DecoderOut::Bernoulli { logits } => {
            if x.len() != logits.len() {
                return Err(Error::Dimension { expected: logits.len(), got: x.len() });
            }
            for (xv, eta) in x.iter().zip(logits) {
                let p = CBParam::from_logit(*eta);
                total += p.log_ptilde(*xv)?;
                if include_norm_const {
                    total += p.log_norm_const();
                }
            }
        }
        DecoderOut::Gaussian { eta, log_sigma2 } => {
            if x.len() != eta.len() {
                return Err(Error::Dimension { expected: eta.len(), got: x.len() });
            }
            for ((xv, e), lv) in x.iter().zip(eta).zip(log_sigma2) {
                if !xv.is_finite() {
                    return Err(Error::Domain(format!("input {xv} is not finite")));
                }
                total -= 0.5 * (xv - e).powi(2) * (-lv).exp();
                if include_norm_const {
                    total -= 0.5 * (LN_2PI + lv);
                }
            }
        }
    }
    Ok(total)
}

/// Batch-averaged ELBO pieces.
///
/// `log_c_sum` is the normalizer the improper objective omits: `Σ log C(λ)`
/// for CB / Bernoulli decoders and `−½ Σ log(2πσ²)` for the Gaussian one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub log_c_sum: f64,
}

impl ElboBreakdown {
    pub fn elbo_proper(&self) -> f64 {
        self.recon + self.log_c_sum - self.kl
    }

    pub fn elbo_improper(&self) -> f64 {
        self.recon - self.kl
    }

    pub fn objective(&self, includes_norm: bool) -> f64 {
        if includes_norm {
            self.elbo_proper()
        } else {
            self.elbo_improper()
        }
    }

    fn combine(parts: &[(ElboBreakdown, usize)]) -> Self {
        let n: usize = parts.iter().map(|(_, k)| k).sum();
        let w = |f: fn(&ElboBreakdown) -> f64| parts.iter().map(|(b, k)| f(b) * *k as f64).sum::<f64>() / n as f64;
        Self { recon: w(|b| b.recon), kl: w(|b| b.kl), log_c_sum: w(|b| b.log_c_sum) }
    }
}

/// Per-datum terms of a batch pass.
struct Terms {
    recon: Array1<f64>,
    log_c: Array1<f64>,
    kl: Array1<f64>,
}

impl Terms {
    fn breakdown(&self) -> ElboBreakdown {
        ElboBreakdown { recon: self.recon.mean().unwrap_or(0.0), kl: self.kl.mean().unwrap_or(0.0), log_c_sum: self.log_c.mean().unwrap_or(0.0) }
    }
}

struct Pass {
    enc: Cache,
    dec: Cache,
    m: Array2<f64>,
    ls: Array2<f64>,
}

fn forward_pass(vae: &Vae, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<Pass> {
    vae.check_batch(x)?;
    if eps.dim() != (x.nrows(), vae.latent_dim()) {
        return Err(Error::Dimension { expected: vae.latent_dim(), got: eps.ncols() });
    }
    let enc = vae.encoder.forward_cached(x);
    let (m, ls) = split_encoder(enc.output(), vae.latent_dim());
    let z = &m + &(ls.mapv(|v| (0.5 * v).exp()) * eps);
    let dec = vae.decoder.forward_cached(z.view());
    Ok(Pass { enc, dec, m, ls })
}

/// Per-datum recon / normalizer / KL and, when `grad_norm` is `Some(include)`,
/// the gradient of the per-datum objective with respect to the decoder output.
fn decoder_terms(vae: &Vae, x: ArrayView2<f64>, pass: &Pass, readout: Readout, grad_norm: Option<bool>) -> Result<(Terms, Option<Array2<f64>>)> {
    let (b, d) = x.dim();
    let out = pass.dec.output();
    let mut recon = Array1::zeros(b);
    let mut log_c = Array1::zeros(b);
    let mut grad = grad_norm.map(|_| Array2::zeros(out.dim()));
    let include = grad_norm.unwrap_or(false);
    if vae.kind.uses_logits() {
        for i in 0..b {
            let (mut r, mut c) = (0.0, 0.0);
            for j in 0..d {
                let eta = out[[i, j]];
                let xv = x[[i, j]];
                let mut p = CBParam::from_logit(eta);
                if readout == Readout::MuInverse {
                    p = mu_inverse(p.lambda());
                }
                let l = p.lambda();
                r += xv * l.ln() + (1.0 - xv) * (-l).ln_1p();
                c += p.log_norm_const();
                if let Some(g) = grad.as_mut() {
                    if !CBParam::is_clamped_logit(eta) {
                        let dc = if include { p.log_norm_const_dlambda() * l * (1.0 - l) } else { 0.0 };
                        g[[i, j]] = xv - l + dc;
                    }
                }
            }
            recon[i] = r;
            log_c[i] = c;
        }
    } else {
        if readout == Readout::MuInverse {
            return Err(Error::Config("the mean readout applies to logit decoders only".into()));
        }
        for i in 0..b {
            let (mut r, mut c) = (0.0, 0.0);
            for j in 0..d {
                let eta = out[[i, j]];
                let raw = out[[i, d + j]];
                let lv = raw.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                let diff = x[[i, j]] - eta;
                let inv = (-lv).exp();
                r -= 0.5 * diff * diff * inv;
                c -= 0.5 * (LN_2PI + lv);
                if let Some(g) = grad.as_mut() {
                    g[[i, j]] = diff * inv;
                    if raw.abs() <= LOG_VAR_CLAMP {
                        g[[i, d + j]] = 0.5 * diff * diff * inv - if include { 0.5 } else { 0.0 };
                    }
                }
            }
            recon[i] = r;
            log_c[i] = c;
        }
    }
    let kl = Zip::from(pass.m.rows())
        .and(pass.ls.rows())
        .map_collect(|m, ls| Zip::from(m).and(ls).fold(0.0, |acc, m, ls| acc + 0.5 * (m * m + ls.exp() - 1.0 - ls)));
    Ok((Terms { recon, log_c, kl }, grad))
}

/// `rows × M` standard normals drawn in row order from `stream`.
pub fn draw_noise(rows: usize, latent: usize, stream: &mut RandomStream) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, latent), || stream.normal())
}

/// Noise for the listed rows, row `i` from `base.substream(i)`; results do not
/// depend on batch composition.
pub fn indexed_noise(indices: &[usize], latent: usize, base: &RandomStream) -> Array2<f64> {
    let mut eps = Array2::zeros((indices.len(), latent));
    for (mut row, &i) in eps.rows_mut().into_iter().zip(indices) {
        let mut st = base.substream(i as u64);
        row.mapv_inplace(|_| st.normal());
    }
    eps
}

/// Single-sample ELBO with given noise `ε`, averaged over rows.
pub fn elbo_with_noise(vae: &Vae, batch: ArrayView2<f64>, eps: ArrayView2<f64>, readout: Readout) -> Result<ElboBreakdown> {
    let pass = forward_pass(vae, batch, eps)?;
    Ok(decoder_terms(vae, batch, &pass, readout, None)?.0.breakdown())
}

/// Single-sample reparameterized ELBO, noise drawn from `stream`.
pub fn elbo_minibatch(vae: &Vae, batch: ArrayView2<f64>, stream: &mut RandomStream) -> Result<ElboBreakdown> {
    let eps = draw_noise(batch.nrows(), vae.latent_dim(), stream);
    elbo_with_noise(vae, batch, eps.view(), Readout::Model)
}

/// ELBO over a whole dataset, row `i` using noise from `base.substream(i)`.
pub fn evaluate(vae: &Vae, data: &Dataset, base: &RandomStream, readout: Readout) -> Result<ElboBreakdown> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let mut parts = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = data.values().slice(s![chunk[0]..chunk[0] + chunk.len(), ..]);
        let eps = indexed_noise(chunk, vae.latent_dim(), base);
        parts.push((elbo_with_noise(vae, x, eps.view(), readout)?, chunk.len()));
    }
    Ok(ElboBreakdown::combine(&parts))
}

/// Gradients of the loss (negative training objective), shaped like the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
}

/// Batch-mean ELBO and gradients of `−objective` for fixed noise.
pub fn loss_gradients(vae: &Vae, batch: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<(ElboBreakdown, Gradients)> {
    let pass = forward_pass(vae, batch, eps)?;
    let include = vae.objective_includes_norm();
    let (terms, g_out) = decoder_terms(vae, batch, &pass, Readout::Model, Some(include))?;
    let scale = -1.0 / batch.nrows() as f64;
    let g_out = g_out.expect("requested") * scale;
    let (decoder, g_z) = vae.decoder.backward(&pass.dec, g_out);

    // Through z = m + exp(ls/2) ε and the analytic KL.
    let latent = vae.latent_dim();
    let raw = pass.enc.output();
    let mut g_enc = Array2::zeros(raw.dim());
    for i in 0..batch.nrows() {
        for j in 0..latent {
            let (m, ls) = (pass.m[[i, j]], pass.ls[[i, j]]);
            g_enc[[i, j]] = g_z[[i, j]] - scale * m;
            if raw[[i, latent + j]].abs() <= LOG_VAR_CLAMP {
                let s = (0.5 * ls).exp();
                g_enc[[i, latent + j]] = g_z[[i, j]] * eps[[i, j]] * 0.5 * s - scale * 0.5 * (ls.exp() - 1.0);
            }
        }
    }
    let (encoder, _) = vae.encoder.backward(&pass.enc, g_enc);
    let grads = Gradients { encoder, decoder };
    if !grads.encoder.all_finite() || !grads.decoder.all_finite() {
        return Err(Error::NonFinite(format!("gradient (batch ELBO {:?})", terms.breakdown())));
    }
    Ok((terms.breakdown(), grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(vae: &Vae) -> Self {
        let zero = Gradients { encoder: vae.encoder.zeros_like(), decoder: vae.decoder.zeros_like() };
        Self { step: 0, m: zero.clone(), v: zero }
    }
}

fn adam_array<D: Dimension>(p: &mut Array<f64, D>, g: &Array<f64, D>, m: &mut Array<f64, D>, v: &mut Array<f64, D>, cfg: &AdamConfig, lr_t: f64) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr_t * *m / (v.sqrt() + cfg.eps);
    });
}

fn adam_mlp(p: &mut MlpParams, g: &MlpParams, m: &mut MlpParams, v: &mut MlpParams, cfg: &AdamConfig, lr_t: f64) {
    for (((pl, gl), ml), vl) in p.layers.iter_mut().zip(&g.layers).zip(&mut m.layers).zip(&mut v.layers) {
        adam_array(&mut pl.weights, &gl.weights, &mut ml.weights, &mut vl.weights, cfg, lr_t);
        adam_array(&mut pl.bias, &gl.bias, &mut ml.bias, &mut vl.bias, cfg, lr_t);
    }
}

/// Applies one Adam update for `grads`.
pub fn adam_update(vae: &mut Vae, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let lr_t = cfg.learning_rate * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
    adam_mlp(&mut vae.encoder, &grads.encoder, &mut state.m.encoder, &mut state.v.encoder, cfg, lr_t);
    adam_mlp(&mut vae.decoder, &grads.decoder, &mut state.m.decoder, &mut state.v.decoder, cfg, lr_t);
}

/// Gradient of the loss on `batch` with noise `eps`, then one Adam update.
/// Returns the pre-update ELBO. Parameters are untouched if the gradient is not finite.
pub fn backprop_step(vae: &mut Vae, batch: ArrayView2<f64>, eps: ArrayView2<f64>, state: &mut AdamState, cfg: &AdamConfig) -> Result<ElboBreakdown> {
    let (elbo, grads) = loss_gradients(vae, batch, eps)?;
    adam_update(vae, &grads, state, cfg);
    Ok(elbo)
}

fn param_mut(vae: &mut Vae, net: usize, layer: usize, idx: usize) -> &mut f64 {
    let mlp = if net == 0 { &mut vae.encoder } else { &mut vae.decoder };
    let l = &mut mlp.layers[layer];
    let nw = l.weights.len();
    if idx < nw {
        let cols = l.weights.ncols();
        &mut l.weights[[idx / cols, idx % cols]]
    } else {
        &mut l.bias[idx - nw]
    }
}

fn param_grad(grads: &Gradients, net: usize, layer: usize, idx: usize) -> f64 {
    let mlp = if net == 0 { &grads.encoder } else { &grads.decoder };
    let l = &mlp.layers[layer];
    let nw = l.weights.len();
    if idx < nw {
        l.weights.as_slice().expect("standard layout")[idx]
    } else {
        l.bias[idx - nw]
    }
}

/// Largest relative error `|a − n| / max(|a|, |n|)` between analytic gradients
/// and central differences (`h = 1e-5`) over parameters with `|a| > 1e-6`.
pub fn grad_check(vae: &Vae, datum: ArrayView1<f64>, eps: ArrayView1<f64>) -> Result<f64> {
    const H: f64 = 1e-5;
    let x = datum.insert_axis(Axis(0));
    let e = eps.insert_axis(Axis(0));
    let (_, grads) = loss_gradients(vae, x, e)?;
    let include = vae.objective_includes_norm();
    let loss = |v: &Vae| -> Result<f64> { Ok(-elbo_with_noise(v, x, e, Readout::Model)?.objective(include)) };
    let mut probe = vae.clone();
    let mut worst: f64 = 0.0;
    for net in 0..2 {
        let n_layers = if net == 0 { vae.encoder.layers.len() } else { vae.decoder.layers.len() };
        for layer in 0..n_layers {
            let count = {
                let l = if net == 0 { &vae.encoder.layers[layer] } else { &vae.decoder.layers[layer] };
                l.weights.len() + l.bias.len()
            };
            for idx in 0..count {
                let analytic = param_grad(&grads, net, layer, idx);
                if analytic.abs() <= 1e-6 {
                    continue;
                }
                let orig = *param_mut(&mut probe, net, layer, idx);
                *param_mut(&mut probe, net, layer, idx) = orig + H;
                let up = loss(&probe)?;
                *param_mut(&mut probe, net, layer, idx) = orig - H;
                let down = loss(&probe)?;
                *param_mut(&mut probe, net, layer, idx) = orig;
                let numeric = (up - down) / (2.0 * H);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
            }
        }
    }
    Ok(worst)
}

/// `log (1/k) Σ p(x|zᵢ) p(zᵢ) / q(zᵢ|x)` with `zᵢ ~ q(z|x)`, using the proper
/// (normalized) decoder likelihood.
pub fn iw_log_lik(vae: &Vae, x: ArrayView1<f64>, k: usize, stream: &mut RandomStream) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("importance sampling needs k ≥ 1".into()));
    }
    let enc = encode(x, vae)?;
    let eps = draw_noise(k, vae.latent_dim(), stream);
    let s = enc.log_s2.mapv(|v| (0.5 * v).exp());
    let z = &eps * &s + &enc.m;
    let xs = x.insert_axis(Axis(0)).broadcast((k, x.len())).expect("row broadcast").to_owned();
    let pass = Pass {
        enc: Cache { input: Array2::zeros((0, 0)), outputs: Vec::new() },
        dec: vae.decoder.forward_cached(z.view()),
        m: Array2::zeros((k, 0)),
        ls: Array2::zeros((k, 0)),
    };
    vae.check_batch(xs.view())?;
    let (terms, _) = decoder_terms(vae, xs.view(), &pass, Readout::Model, None)?;
    let half_ls: f64 = 0.5 * enc.log_s2.sum();
    let log_w: Vec<f64> = (0..k)
        .map(|i| {
            let zz: f64 = z.row(i).iter().map(|v| v * v).sum();
            let ee: f64 = eps.row(i).iter().map(|v| v * v).sum();
            terms.recon[i] + terms.log_c[i] - 0.5 * zz + 0.5 * ee + half_ls
        })
        .collect();
    Ok(log_sum_exp(&log_w)? - (k as f64).ln())
}

/// [`iw_log_lik`] for every row, row `i` drawing from `base.substream(i)`.
pub fn iw_log_lik_dataset(vae: &Vae, data: &Dataset, k: usize, base: &RandomStream) -> Result<Vec<f64>> {
    (0..data.len()).map(|i| iw_log_lik(vae, data.row(i), k, &mut base.substream(i as u64))).collect()
}

/// Decoder outputs for `n` prior draws `z ~ N(0, I)`: `λ` (or `η`) when
/// `draws` is false, otherwise one sample from the decoded distribution.
pub fn decode_samples(vae: &Vae, n: usize, stream: &mut RandomStream, draws: bool) -> Array2<f64> {
    let d = vae.data_dim();
    let z = draw_noise(n, vae.latent_dim(), stream);
    let out = vae.decoder.forward(z.view());
    let mut res = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            res[[i, j]] = if vae.kind.uses_logits() {
                let p = CBParam::from_logit(out[[i, j]]);
                if draws {
                    p.sample(stream)
                } else {
                    p.lambda()
                }
            } else {
                let eta = out[[i, j]];
                if draws {
                    let lv = out[[i, d + j]].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                    eta + (0.5 * lv).exp() * stream.normal()
                } else {
                    eta
                }
            };
        }
    }
    res
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub kind: LikelihoodKind,
    pub include_norm_const: bool,
    /// Importance samples for the per-epoch `iwll` column; 0 disables it.
    pub iw_samples: usize,
    /// Leading rows scored by `iwll`.
    pub iw_rows: usize,
}

impl TrainConfig {
    pub fn new(kind: LikelihoodKind, include_norm_const: bool, seed: u64) -> Self {
        Self {
            latent_dim: 20,
            hidden: 500,
            learning_rate: 1e-3,
            batch_size: 100,
            epochs: 20,
            seed,
            kind,
            include_norm_const,
            iw_samples: 0,
            iw_rows: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent_dim, hidden and batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub elbo_proper: f64,
    pub elbo_improper: f64,
    pub iwll: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub vae: Vae,
    pub metrics: Vec<EpochMetrics>,
}

// Substream namespaces under the training seed.
const NS_INIT: u64 = 0;
const NS_SHUFFLE: u64 = 1;
const NS_NOISE: u64 = 2;
const NS_EVAL: u64 = 3;
const NS_IW: u64 = 4;

/// Evaluation noise for a training seed; shared by every epoch's metrics.
pub fn eval_stream(seed: u64) -> RandomStream {
    RandomStream::new(seed).substream(NS_EVAL)
}

/// Shuffled minibatch Adam on the training objective, recording metrics
/// before training and after each epoch.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let root = RandomStream::new(config.seed);
    let vae = Vae::random(data.dim(), config.latent_dim, config.hidden, config.kind, config.include_norm_const, &mut root.substream(NS_INIT));
    train_from(vae, data, config)
}

/// [`train`] starting from the given parameters.
pub fn train_from(mut vae: Vae, data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let start = Instant::now();
    let root = RandomStream::new(config.seed);
    let eval = root.substream(NS_EVAL);
    let iw_data = data.head(config.iw_rows.min(data.len()));
    let record = |vae: &Vae, epoch: usize| -> Result<EpochMetrics> {
        let elbo = evaluate(vae, data, &eval, Readout::Model)?;
        let iwll = if config.iw_samples > 0 {
            let v = iw_log_lik_dataset(vae, &iw_data, config.iw_samples, &root.substream(NS_IW))?;
            Some(v.iter().sum::<f64>() / v.len() as f64)
        } else {
            None
        };
        Ok(EpochMetrics {
            epoch,
            elbo_proper: elbo.elbo_proper(),
            elbo_improper: elbo.elbo_improper(),
            iwll,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    };
    let mut metrics = vec![record(&vae, 0)?];
    let adam = AdamConfig::new(config.learning_rate);
    let mut state = AdamState::new(&vae);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        let mut shuffle = root.substream(NS_SHUFFLE).substream(epoch as u64);
        for i in (1..order.len()).rev() {
            let j = (shuffle.uniform() * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }
        let noise = root.substream(NS_NOISE).substream(epoch as u64);
        for idx in order.chunks(config.batch_size) {
            let batch = data.values().select(Axis(0), idx);
            let eps = indexed_noise(idx, vae.latent_dim(), &noise);
            backprop_step(&mut vae, batch.view(), eps.view(), &mut state, &adam)?;
        }
        metrics.push(record(&vae, epoch)?);
    }
    Ok(TrainOutput { vae, metrics })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize) -> u32 {
    u32::try_from(v).expect("layer width fits in u32")
}

/// Little-endian binary: magic, kind, flag, encoder and decoder layer counts,
/// `(in, out, activation)` per layer, then per layer the row-major weights
/// followed by the bias.
pub fn checkpoint_bytes(vae: &Vae) -> Vec<u8> {
    let layers: Vec<&Layer> = vae.encoder.layers.iter().chain(&vae.decoder.layers).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, vae.kind.code());
    push_u32(&mut buf, vae.include_norm_const as u32);
    push_u32(&mut buf, dim_u32(vae.encoder.layers.len()));
    push_u32(&mut buf, dim_u32(vae.decoder.layers.len()));
    for l in &layers {
        push_u32(&mut buf, dim_u32(l.input_dim()));
        push_u32(&mut buf, dim_u32(l.output_dim()));
        push_u32(&mut buf, l.activation.code());
    }
    for l in &layers {
        for v in l.weights.iter().chain(l.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| self.fail("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Vae> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.fail("bad magic"));
    }
    let kind = LikelihoodKind::from_code(r.u32()?).ok_or_else(|| r.fail("unknown likelihood kind"))?;
    let flag = match r.u32()? {
        0 => false,
        1 => true,
        _ => return Err(r.fail("bad normalizer flag")),
    };
    let n_enc = r.u32()? as usize;
    let n_dec = r.u32()? as usize;
    if n_enc == 0 || n_dec == 0 || n_enc + n_dec > 64 {
        return Err(r.fail("bad layer count"));
    }
    let mut shapes = Vec::new();
    for _ in 0..n_enc + n_dec {
        let (i, o) = (r.u32()? as usize, r.u32()? as usize);
        let act = Activation::from_code(r.u32()?).ok_or_else(|| r.fail("unknown activation"))?;
        shapes.push((i, o, act));
    }
    let mut layers = Vec::new();
    for (i, o, act) in shapes {
        let count = i.checked_mul(o).ok_or_else(|| r.fail("layer size overflow"))?;
        if count.saturating_add(o).saturating_mul(8) > bytes.len() {
            return Err(r.fail("truncated checkpoint"));
        }
        let w: Vec<f64> = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
        let b: Vec<f64> = (0..o).map(|_| r.f64()).collect::<Result<_>>()?;
        let w = Array2::from_shape_vec((i, o), w).expect("sized above");
        layers.push(Layer::new(w, Array1::from(b), act).map_err(|e| r.fail(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    let dec = layers.split_off(n_enc);
    let wrap = |e: Error| r.fail(e.to_string());
    Vae::new(MlpParams::new(layers).map_err(wrap)?, MlpParams::new(dec).map_err(wrap)?, kind, flag).map_err(wrap)
}

pub fn write_checkpoint(path: impl AsRef<Path>, vae: &Vae) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(vae))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vae> {
    let path = path.as_ref();
    parse_checkpoint(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn tiny(kind: LikelihoodKind, flag: bool, seed: u64) -> Vae {
        let mut s = RandomStream::new(seed);
        let mut v = Vae::random(6, 2, 8, kind, flag, &mut s);
        // Larger decoder weights so the outputs move away from λ = ½.
        for l in &mut v.decoder.layers {
            l.weights.mapv_inplace(|w| 1.5 * w);
            l.bias.mapv_inplace(|_| 0.3 * s.normal());
        }
        v
    }

    fn datum(seed: u64) -> Array1<f64> {
        let mut s = RandomStream::new(seed);
        Array1::from_shape_simple_fn(6, || s.uniform())
    }

    #[test]
    fn encode_cases() {
        let v = Vae::zeros(5, 3, 4, LikelihoodKind::Cb, true);
        let e = encode(array![0.1, 0.2, 0.3, 0.4, 0.5].view(), &v).unwrap();
        assert_eq!(e.m, Array1::<f64>::zeros(3));
        assert_eq!(e.log_s2, Array1::<f64>::zeros(3));
        let r = tiny(LikelihoodKind::Cb, true, 1);
        let ones = Array1::ones(6);
        let a = encode(ones.view(), &r).unwrap();
        assert!(a.m.iter().chain(a.log_s2.iter()).all(|v| v.is_finite()));
        assert_eq!(a, encode(ones.view(), &r).unwrap());
        assert!(encode(Array1::ones(5).view(), &r).is_err());
        assert!(encode(array![0.0, 0.0, 0.0, 0.0, 0.0, f64::NAN].view(), &r).is_err());
    }

    #[test]
    fn log_variance_is_clamped() {
        let mut v = Vae::zeros(2, 1, 2, LikelihoodKind::Cb, true);
        v.encoder.layers[1].bias[1] = 50.0;
        assert_eq!(encode(array![0.5, 0.5].view(), &v).unwrap().log_s2[0], LOG_VAR_CLAMP);
        let mut g = Vae::zeros(2, 1, 2, LikelihoodKind::Gaussian, true);
        g.decoder.layers[1].bias[2] = -50.0;
        match decode(array![0.0].view(), &g).unwrap() {
            DecoderOut::Gaussian { log_sigma2, .. } => assert_eq!(log_sigma2[0], -LOG_VAR_CLAMP),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reparam_cases() {
        let enc = EncoderOut { m: array![0.3, -1.0], log_s2: array![-7.0, -7.0] };
        let mut a = RandomStream::new(2);
        let mut b = RandomStream::new(2);
        let z = reparam_sample(&enc, &mut a);
        for j in 0..2 {
            let e = b.normal();
            // exp(−3.5) ≈ 0.0302.
            assert_abs_diff_eq!((z[j] - enc.m[j]).abs(), (-3.5f64).exp() * e.abs(), epsilon = 1e-15);
            assert!((z[j] - enc.m[j]).abs() <= 0.031 * e.abs());
        }
        // Linear in m with slope 1 for fixed noise.
        let shifted = EncoderOut { m: &enc.m + 2.0, log_s2: enc.log_s2.clone() };
        let z2 = reparam_sample(&shifted, &mut RandomStream::new(2));
        for j in 0..2 {
            assert_abs_diff_eq!(z2[j] - z[j], 2.0, epsilon = 1e-12);
        }

        let std = EncoderOut { m: Array1::zeros(2), log_s2: Array1::zeros(2) };
        let mut s = RandomStream::new(3);
        let n = 100_000;
        let (mut c00, mut c01, mut c11) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = reparam_sample(&std, &mut s);
            c00 += z[0] * z[0];
            c01 += z[0] * z[1];
            c11 += z[1] * z[1];
        }
        let n = n as f64;
        // Sample second moments have sd ≈ sqrt(2/n) (diagonal) and sqrt(1/n) (off-diagonal).
        assert!((c00 / n - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        assert!((c11 / n - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        assert!((c01 / n).abs() < 4.0 * (1.0 / n).sqrt());
    }

    #[test]
    fn kl_cases() {
        let zero = EncoderOut { m: Array1::zeros(3), log_s2: Array1::zeros(3) };
        assert_eq!(kl_std_normal(&zero), 0.0);
        let one = EncoderOut { m: array![1.0, 0.0, 0.0], log_s2: Array1::zeros(3) };
        assert_abs_diff_eq!(kl_std_normal(&one), 0.5, epsilon = 1e-15);

        let enc = EncoderOut { m: array![0.4, -1.2], log_s2: array![0.5, -0.8] };
        let mut s = RandomStream::new(9);
        let n = 1_000_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let z = reparam_sample(&enc, &mut s);
            // log q(z) − log p0(z); the 2π terms cancel.
            let mut v = 0.0;
            for j in 0..2 {
                let s2 = enc.log_s2[j].exp();
                v += -0.5 * enc.log_s2[j] - 0.5 * (z[j] - enc.m[j]).powi(2) / s2 + 0.5 * z[j] * z[j];
            }
            vals.push(v);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean - kl_std_normal(&enc)).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn recon_cases() {
        let half = DecoderOut::Cb { logits: Array1::zeros(4) };
        let x = array![0.0, 0.3, 0.9, 1.0];
        assert_abs_diff_eq!(
            recon_log_lik(x.view(), &half, true).unwrap() - recon_log_lik(x.view(), &half, false).unwrap(),
            4.0 * LN2,
            epsilon = 1e-14
        );
        // Unnormalized density at λ = ½ is ½ everywhere, so the flag-off term is −D log 2;
        // the flag-on term is the uniform density, 0.
        assert_abs_diff_eq!(recon_log_lik(x.view(), &half, true).unwrap(), 0.0, epsilon = 1e-14);

        let logits = array![-2.0, 0.4, 1.7, 0.001];
        let dec = DecoderOut::Cb { logits: logits.clone() };
        let lc: f64 = logits.iter().map(|e| CBParam::from_logit(*e).log_norm_const()).sum();
        let gap = recon_log_lik(x.view(), &dec, true).unwrap() - recon_log_lik(x.view(), &dec, false).unwrap();
        assert_abs_diff_eq!(gap, lc, epsilon = 1e-13);
        assert!(recon_log_lik(array![0.0, 0.3, 0.9, 1.2].view(), &dec, true).is_err());

        let g = DecoderOut::Gaussian { eta: x.clone(), log_sigma2: Array1::zeros(4) };
        assert_abs_diff_eq!(recon_log_lik(x.view(), &g, true).unwrap(), -2.0 * LN_2PI, epsilon = 1e-14);
        assert_eq!(recon_log_lik(x.view(), &g, false).unwrap(), 0.0);
    }

    #[test]
    fn elbo_identities() {
        let v = tiny(LikelihoodKind::Cb, true, 4);
        let batch = Array2::from_shape_fn((7, 6), |(i, j)| datum(i as u64 + 10)[j]);
        let e = elbo_minibatch(&v, batch.view(), &mut RandomStream::new(1)).unwrap();
        assert!((e.elbo_proper() - e.elbo_improper() - e.log_c_sum).abs() < 1e-10);
        assert!(e.log_c_sum >= 6.0 * LN2);
        assert!(e.elbo_improper() < e.elbo_proper());

        // Independent recomputation per datum with the same noise.
        let eps = draw_noise(7, 2, &mut RandomStream::new(1));
        let mut proper = 0.0;
        for i in 0..7 {
            let enc = encode(batch.row(i), &v).unwrap();
            let z = &enc.m + &(enc.log_s2.mapv(|l| (0.5 * l).exp()) * eps.row(i));
            let dec = decode(z.view(), &v).unwrap();
            proper += recon_log_lik(batch.row(i), &dec, true).unwrap() - kl_std_normal(&enc);
        }
        assert_abs_diff_eq!(e.elbo_proper(), proper / 7.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_network_elbo() {
        let v = Vae::zeros(5, 2, 3, LikelihoodKind::Cb, true);
        let batch = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) % 7) as f64 / 6.0);
        let e = elbo_minibatch(&v, batch.view(), &mut RandomStream::new(0)).unwrap();
        assert_eq!(e.kl, 0.0);
        assert_abs_diff_eq!(e.log_c_sum, 5.0 * LN2, epsilon = 1e-13);
        assert_abs_diff_eq!(e.elbo_proper(), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(e.elbo_improper(), -5.0 * LN2, epsilon = 1e-13);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [LikelihoodKind::Cb, LikelihoodKind::Bernoulli, LikelihoodKind::Gaussian] {
            for flag in [true, false] {
                let v = tiny(kind, flag, 7);
                let eps = array![0.7, -1.1];
                let err = grad_check(&v, datum(3).view(), eps.view()).unwrap();
                assert!(err < 1e-4, "{kind} flag={flag}: {err}");
            }
        }
    }

    #[test]
    fn singleton_step_descends() {
        let mut v = tiny(LikelihoodKind::Cb, true, 8);
        let x = datum(2).insert_axis(Axis(0));
        let eps = array![[0.3, 0.2]];
        let before = elbo_with_noise(&v, x.view(), eps.view(), Readout::Model).unwrap().elbo_proper();
        let mut st = AdamState::new(&v);
        backprop_step(&mut v, x.view(), eps.view(), &mut st, &AdamConfig::new(1e-4)).unwrap();
        let after = elbo_with_noise(&v, x.view(), eps.view(), Readout::Model).unwrap().elbo_proper();
        assert!(after > before, "{before} -> {after}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let data = Dataset::new(Array2::from_shape_fn((30, 6), |(i, j)| datum(i as u64)[j]), None).unwrap();
        let cfg = TrainConfig { latent_dim: 2, hidden: 8, batch_size: 3, epochs: 1, ..TrainConfig::new(LikelihoodKind::Cb, true, 5) };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a.vae), checkpoint_bytes(&b.vae));
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!((x.elbo_proper, x.elbo_improper), (y.elbo_proper, y.elbo_improper));
        }
        let zero = train(&data, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
        assert_eq!(zero.metrics.len(), 1);
        let init = Vae::random(6, 2, 8, LikelihoodKind::Cb, true, &mut RandomStream::new(5).substream(NS_INIT));
        assert_eq!(zero.vae, init);
    }

    #[test]
    fn training_improves_objective() {
        let mut s = RandomStream::new(1);
        let protos = [[0.1, 0.9, 0.2, 0.8, 0.1, 0.7], [0.9, 0.2, 0.8, 0.1, 0.7, 0.3]];
        let data = Array2::from_shape_fn((200, 6), |(i, j)| (protos[i % 2][j] + 0.05 * s.normal()).clamp(0.0, 1.0));
        let data = Dataset::new(data, None).unwrap();
        let cfg = TrainConfig {
            latent_dim: 2,
            hidden: 16,
            batch_size: 20,
            epochs: 30,
            learning_rate: 1e-2,
            ..TrainConfig::new(LikelihoodKind::Cb, true, 2)
        };
        let out = train(&data, &cfg).unwrap();
        assert!(out.metrics.last().unwrap().elbo_proper > out.metrics[0].elbo_proper);
    }

    #[test]
    fn iw_cases() {
        let v = tiny(LikelihoodKind::Cb, true, 3);
        let x = datum(4);
        // k = 1: log p(x|z) + log p0(z) − log q(z|x) for the same draw.
        let lw = iw_log_lik(&v, x.view(), 1, &mut RandomStream::new(6)).unwrap();
        let enc = encode(x.view(), &v).unwrap();
        let mut s = RandomStream::new(6);
        let z = reparam_sample(&enc, &mut s);
        let dec = decode(z.view(), &v).unwrap();
        let mut log_q = 0.0;
        let mut log_p0 = 0.0;
        for j in 0..2 {
            let s2 = enc.log_s2[j].exp();
            log_q += -0.5 * (LN_2PI + enc.log_s2[j]) - 0.5 * (z[j] - enc.m[j]).powi(2) / s2;
            log_p0 += -0.5 * (LN_2PI + z[j] * z[j]);
        }
        assert_abs_diff_eq!(lw, recon_log_lik(x.view(), &dec, true).unwrap() + log_p0 - log_q, epsilon = 1e-10);
        assert!(iw_log_lik(&v, x.view(), 0, &mut s).is_err());

        // Decoder constant in z: log p(x) is exact and every weight equals it.
        let mut c = Vae::zeros(6, 2, 8, LikelihoodKind::Cb, true);
        c.decoder.layers[1].bias = array![-1.0, 0.5, 2.0, 0.0, -0.3, 1.1];
        c.encoder = tiny(LikelihoodKind::Cb, true, 5).encoder;
        let exact: f64 = x.iter().zip(c.decoder.layers[1].bias.iter()).map(|(x, e)| CBParam::from_logit(*e).log_pdf(*x).unwrap()).sum();
        // The weight still carries log p0(z) − log q(z|x), whose mean-exp is 1.
        let est = iw_log_lik(&c, x.view(), 20_000, &mut RandomStream::new(2)).unwrap();
        assert!((est - exact).abs() < 0.02, "{est} vs {exact}");
    }

    #[test]
    fn iw_bound_tightens_with_k() {
        let v = tiny(LikelihoodKind::Cb, true, 11);
        let xs: Vec<Array1<f64>> = (0..100).map(|i| datum(100 + i)).collect();
        let mut d1 = 0.0;
        let mut d100 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let base = RandomStream::new(i as u64);
            d1 += iw_log_lik(&v, x.view(), 1, &mut base.substream(0)).unwrap();
            d100 += iw_log_lik(&v, x.view(), 100, &mut base.substream(1)).unwrap();
        }
        assert!(d100 >= d1);
    }

    #[test]
    fn decode_samples_cases() {
        let z = Vae::zeros(4, 2, 3, LikelihoodKind::Cb, true);
        let out = decode_samples(&z, 5, &mut RandomStream::new(1), false);
        assert!(out.iter().all(|v| *v == 0.5));
        let v = tiny(LikelihoodKind::Bernoulli, false, 2);
        let a = decode_samples(&v, 8, &mut RandomStream::new(4), false);
        assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(a, decode_samples(&v, 8, &mut RandomStream::new(4), false));
        let d = decode_samples(&v, 8, &mut RandomStream::new(4), true);
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        for kind in [LikelihoodKind::Cb, LikelihoodKind::Bernoulli, LikelihoodKind::Gaussian] {
            let v = tiny(kind, kind == LikelihoodKind::Cb, 3);
            let bytes = checkpoint_bytes(&v);
            assert_eq!(&bytes[..8], b"CBVAE001");
            assert_eq!(parse_checkpoint(&bytes, Path::new("x")).unwrap(), v);
        }
        let bytes = checkpoint_bytes(&tiny(LikelihoodKind::Cb, true, 3));
        let p = Path::new("ckpt");
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint(&extra, p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad, p).is_err());
        let mut bad_kind = bytes;
        bad_kind[8] = 9;
        assert!(parse_checkpoint(&bad_kind, p).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let v = tiny(LikelihoodKind::Gaussian, false, 1);
        write_checkpoint(&path, &v).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), v);
    }

    #[test]
    fn mean_readout_changes_only_logit_models() {
        let v = tiny(LikelihoodKind::Bernoulli, false, 4);
        let batch = Array2::from_shape_fn((3, 6), |(i, j)| datum(i as u64)[j]);
        let eps = draw_noise(3, 2, &mut RandomStream::new(0));
        let a = elbo_with_noise(&v, batch.view(), eps.view(), Readout::Model).unwrap();
        let b = elbo_with_noise(&v, batch.view(), eps.view(), Readout::MuInverse).unwrap();
        assert_eq!(a.kl, b.kl);
        assert_ne!(a.recon, b.recon);
        let g = tiny(LikelihoodKind::Gaussian, true, 4);
        assert!(elbo_with_noise(&g, batch.view(), eps.view(), Readout::MuInverse).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(m in prop::collection::vec(-5.0..5.0f64, 3), ls in prop::collection::vec(-7.0..7.0f64, 3)) {
            let enc = EncoderOut { m: Array1::from(m), log_s2: Array1::from(ls) };
            prop_assert!(kl_std_normal(&enc) >= 0.0);
        }

        #[test]
        fn normalizer_gap_is_at_least_d_log2(logits in prop::collection::vec(-15.0..15.0f64, 5), x in prop::collection::vec(0.0..=1.0f64, 5)) {
            let dec = DecoderOut::Cb { logits: Array1::from(logits) };
            let x = Array1::from(x);
            let gap = recon_log_lik(x.view(), &dec, true).unwrap() - recon_log_lik(x.view(), &dec, false).unwrap();
            prop_assert!(gap >= 5.0 * LN2 - 1e-12);
        }
    }
}
