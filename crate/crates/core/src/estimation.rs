//! Estimators built on the continuous Bernoulli: `μ⁻¹`, maximum likelihood,
//! mixtures fitted by EM, Monte-Carlo KL between mixtures, and k-NN accuracy of
//! latent embeddings.

use ndarray::{Array1, Array2, Axis};

use crate::data::Dataset;
use crate::distribution::{CBParam, LAMBDA_EPS};
use crate::numerics::{bisect_monotone, log_sum_exp, RandomStream};
use crate::{Error, Result};

/// Clamp applied to target means before inversion.
pub const MEAN_EPS: f64 = 1e-6;
const MU_INV_TOL: f64 = 1e-12;
const RESPONSIBILITY_FLOOR: f64 = 1e-300;

/// `λ` with `μ(λ) = m`, the inverse of [`CBParam::mean`].
///
/// Bisection runs over the logit, where `dμ/dη = Var[X] ≤ 1/12`, so the residual
/// `|μ(λ) − m|` is driven below `1e-12`. Targets outside the range of `μ` on
/// `[ε, 1−ε]` map to the nearest clamp.
pub fn mu_inverse(m: f64) -> CBParam {
    let m = m.clamp(MEAN_EPS, 1.0 - MEAN_EPS);
    if m == 0.5 {
        return CBParam::clamped(0.5);
    }
    let lo = CBParam::clamped(LAMBDA_EPS);
    let hi = CBParam::clamped(1.0 - LAMBDA_EPS);
    if m <= lo.mean() {
        return lo;
    }
    if m >= hi.mean() {
        return hi;
    }
    let eta =
        bisect_monotone(|eta| CBParam::from_logit(eta).mean(), lo.logit(), hi.logit(), m, MU_INV_TOL).expect("target bracketed by the clamp means");
    CBParam::from_logit(eta)
}

/// Maximum-likelihood `λ̂`: the parameter whose mean equals the sample mean.
pub fn mle_cb(samples: &[f64]) -> Result<CBParam> {
    if samples.is_empty() {
        return Err(Error::Empty("mle_cb needs at least one sample"));
    }
    if let Some(bad) = samples.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("sample {bad} outside [0, 1]")));
    }
    Ok(mu_inverse(samples.iter().sum::<f64>() / samples.len() as f64))
}

/// `Σᵢ log p(xᵢ | λ)`.
pub fn cb_log_likelihood(samples: &[f64], param: &CBParam) -> Result<f64> {
    samples.iter().map(|x| param.log_pdf(*x)).sum()
}

/// Per-coordinate likelihood used inside a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// Proper continuous Bernoulli density.
    Cb,
    /// Unnormalized `λ^x (1−λ)^(1−x)`.
    Bernoulli,
}

/// `K`-component mixture of `D`-dimensional products of independent CBs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    weights: Vec<f64>,
    lambdas: Vec<Vec<CBParam>>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, lambdas: Vec<Vec<CBParam>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("mixture needs at least one component"));
        }
        if lambdas.len() != weights.len() {
            return Err(Error::Dimension { expected: weights.len(), got: lambdas.len() });
        }
        let d = lambdas[0].len();
        if d == 0 {
            return Err(Error::Empty("mixture components need at least one coordinate"));
        }
        if let Some(row) = lambdas.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension { expected: d, got: row.len() });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights must be a simplex (sum {total})")));
        }
        Ok(Self { weights, lambdas })
    }

    /// Weights are normalized here; useful after an M-step.
    fn from_unnormalized(mut weights: Vec<f64>, lambdas: Vec<Vec<CBParam>>) -> Self {
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { weights, lambdas }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lambdas(&self) -> &[Vec<CBParam>] {
        &self.lambdas
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.lambdas[0].len()
    }

    /// Per-component `D × K` logit matrix and length-`K` offsets so that the
    /// component log density of a row `x` is `x · logits[:, k] + offset[k]`.
    fn linear_form(&self, likelihood: Likelihood) -> (Array2<f64>, Array1<f64>) {
        let (k, d) = (self.components(), self.dim());
        let logits = Array2::from_shape_fn((d, k), |(j, c)| self.lambdas[c][j].logit());
        let offsets = Array1::from_shape_fn(k, |c| {
            self.lambdas[c]
                .iter()
                .map(|p| {
                    let base = (-p.lambda()).ln_1p();
                    match likelihood {
                        Likelihood::Cb => base + p.log_norm_const(),
                        Likelihood::Bernoulli => base,
                    }
                })
                .sum()
        });
        (logits, offsets)
    }

    /// `N × K` matrix of `log πₖ + log p(xₙ | component k)`.
    fn joint_log_density(&self, data: &Array2<f64>, likelihood: Likelihood) -> Array2<f64> {
        let (logits, offsets) = self.linear_form(likelihood);
        let log_w = Array1::from_iter(self.weights.iter().map(|w| w.ln()));
        let mut out = data.dot(&logits);
        out += &(&offsets + &log_w);
        out
    }
}

/// `log Σₖ πₖ exp(Σ_d ℓ(x_d, λ_kd))`.
pub fn mixture_log_pdf(x: &[f64], mixture: &Mixture, likelihood: Likelihood) -> Result<f64> {
    if x.len() != mixture.dim() {
        return Err(Error::Dimension { expected: mixture.dim(), got: x.len() });
    }
    let mut terms = Vec::with_capacity(mixture.components());
    for (w, comp) in mixture.weights.iter().zip(&mixture.lambdas) {
        let mut s = w.ln();
        for (xd, p) in x.iter().zip(comp) {
            s += match likelihood {
                Likelihood::Cb => p.log_pdf(*xd)?,
                Likelihood::Bernoulli => p.log_ptilde(*xd)?,
            };
        }
        terms.push(s);
    }
    log_sum_exp(&terms)
}

/// Mean per-row mixture log density over a dataset.
pub fn mixture_mean_log_pdf(data: &Dataset, mixture: &Mixture, likelihood: Likelihood) -> Result<f64> {
    if data.dim() != mixture.dim() {
        return Err(Error::Dimension { expected: mixture.dim(), got: data.dim() });
    }
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let joint = mixture.joint_log_density(data.values(), likelihood);
    Ok(row_log_sum_exp(&joint).sum() / data.len() as f64)
}

fn row_log_sum_exp(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |row| {
        let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    })
}

/// Which likelihood EM maximizes, and whether `μ⁻¹` is applied afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmVariant {
    Cb,
    Bernoulli,
    BernoulliCorrected,
}

impl EmVariant {
    pub const ALL: [EmVariant; 3] = [EmVariant::Cb, EmVariant::Bernoulli, EmVariant::BernoulliCorrected];

    pub fn name(self) -> &'static str {
        match self {
            EmVariant::Cb => "cb",
            EmVariant::Bernoulli => "bernoulli",
            EmVariant::BernoulliCorrected => "bernoulli_corrected",
        }
    }

    fn likelihood(self) -> Likelihood {
        match self {
            EmVariant::Cb => Likelihood::Cb,
            EmVariant::Bernoulli | EmVariant::BernoulliCorrected => Likelihood::Bernoulli,
        }
    }

    /// M-step map from a weighted mean to a parameter.
    fn param_from_mean(self, m: f64) -> CBParam {
        match self {
            EmVariant::Cb => mu_inverse(m),
            EmVariant::Bernoulli | EmVariant::BernoulliCorrected => CBParam::clamped(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Convergence threshold on the change of the mean per-row log-likelihood.
    pub loglik_tol: f64,
    pub variant: EmVariant,
    pub init_seed: u64,
    pub restarts: usize,
}

impl EmConfig {
    pub fn new(variant: EmVariant, init_seed: u64) -> Self {
        Self { max_iters: 500, loglik_tol: 1e-8, variant, init_seed, restarts: 5 }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || self.restarts < 1 {
            return Err(Error::Config("EM needs max_iters ≥ 1 and restarts ≥ 1".into()));
        }
        if self.loglik_tol.is_nan() || self.loglik_tol <= 0.0 {
            return Err(Error::Config(format!("EM tolerance must be positive, got {}", self.loglik_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub mixture: Mixture,
    /// Mean per-row log-likelihood (under the variant's likelihood) at each E-step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components re-seeded by the collapse guard.
    pub reseeds: usize,
}

/// Row-normalized responsibilities and the mean per-row log-likelihood.
pub fn responsibilities(data: &Dataset, mixture: &Mixture, likelihood: Likelihood) -> (Array2<f64>, f64) {
    let mut joint = mixture.joint_log_density(data.values(), likelihood);
    let lse = row_log_sum_exp(&joint);
    let mean_ll = lse.sum() / data.len() as f64;
    for (mut row, norm) in joint.axis_iter_mut(Axis(0)).zip(lse.iter()) {
        row.mapv_inplace(|v| (v - norm).exp().max(RESPONSIBILITY_FLOOR));
        let s = row.sum();
        row /= s;
    }
    (joint, mean_ll)
}

/// Fits a `K`-component mixture by EM, keeping the best of `config.restarts` runs.
pub fn em_fit(data: &Dataset, k: usize, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("EM needs data"));
    }
    if k < 1 || k > data.len() {
        return Err(Error::Config(format!("EM needs 1 ≤ K ≤ N, got K = {k}, N = {}", data.len())));
    }
    let fit_variant = match config.variant {
        EmVariant::BernoulliCorrected => EmVariant::Bernoulli,
        v => v,
    };
    let root = RandomStream::new(config.init_seed);
    let mut best: Option<EmResult> = None;
    for r in 0..config.restarts {
        let mut stream = root.substream(r as u64);
        let run = em_single(data, k, fit_variant, config, &mut stream);
        let better = match &best {
            None => true,
            Some(b) => run.loglik_trace.last() > b.loglik_trace.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    if config.variant == EmVariant::BernoulliCorrected {
        best.mixture = correct_with_mu_inverse(&best.mixture);
    }
    Ok(best)
}

/// Maps every component parameter through `μ⁻¹`, keeping the weights.
pub fn correct_with_mu_inverse(mixture: &Mixture) -> Mixture {
    Mixture {
        weights: mixture.weights.clone(),
        lambdas: mixture.lambdas.iter().map(|row| row.iter().map(|p| mu_inverse(p.lambda())).collect()).collect(),
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by one hard assignment pass; returns initial
/// component means clamped away from `{0, 1}`.
fn initial_means(data: &Dataset, k: usize, stream: &mut RandomStream) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut seeds = vec![(stream.uniform() * n as f64) as usize % n];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(seeds[0]))).collect();
    while seeds.len() < k {
        let next = stream.categorical(&d2).unwrap_or_else(|_| (stream.uniform() * n as f64) as usize % n);
        seeds.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    let dim = data.dim();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = (0..k).min_by(|&a, &b| sq_dist(data.row(i), data.row(seeds[a])).total_cmp(&sq_dist(data.row(i), data.row(seeds[b])))).expect("k ≥ 1");
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(data.row(i).iter()) {
            *s += x;
        }
    }
    (0..k)
        .map(|c| {
            if counts[c] == 0 { data.row(seeds[c]).to_vec() } else { sums[c].iter().map(|s| s / counts[c] as f64).collect() }
                .into_iter()
                .map(|m| m.clamp(1e-3, 1.0 - 1e-3))
                .collect()
        })
        .collect()
}

fn em_single(data: &Dataset, k: usize, variant: EmVariant, config: &EmConfig, stream: &mut RandomStream) -> EmResult {
    let likelihood = variant.likelihood();
    let n = data.len() as f64;
    let means = initial_means(data, k, stream);
    let mut mixture =
        Mixture::from_unnormalized(vec![1.0; k], means.iter().map(|row| row.iter().map(|m| variant.param_from_mean(*m)).collect()).collect());
    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeds = 0;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let (resp, ll) = responsibilities(data, &mixture, likelihood);
        let done = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < config.loglik_tol);
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
        // M-step.
        let counts = resp.sum_axis(Axis(0));
        let weighted = resp.t().dot(data.values());
        let mut weights: Vec<f64> = counts.iter().map(|c| c / n).collect();
        let mut lambdas: Vec<Vec<CBParam>> =
            weighted.axis_iter(Axis(0)).zip(counts.iter()).map(|(row, c)| row.iter().map(|s| variant.param_from_mean(s / c)).collect()).collect();
        for c in 0..k {
            if k > 1 && weights[c] < 1.0 / (100.0 * k as f64) {
                let r = (stream.uniform() * n) as usize % data.len();
                lambdas[c] = data.row(r).iter().map(|x| variant.param_from_mean(x.clamp(0.05, 0.95))).collect();
                weights[c] = 1.0 / k as f64;
                reseeds += 1;
            }
        }
        mixture = Mixture::from_unnormalized(weights, lambdas);
    }
    EmResult { mixture, loglik_trace: trace, iterations, converged, reseeds }
}

/// Random ground-truth mixture: `λ ~ U[0.05, 0.95]`, weights `∝ U[1, 2]`.
pub fn synth_mixture(k: usize, d: usize, stream: &mut RandomStream) -> Result<Mixture> {
    if k < 1 || d < 1 {
        return Err(Error::Config("synth_mixture needs K ≥ 1 and D ≥ 1".into()));
    }
    let weights: Vec<f64> = (0..k).map(|_| 1.0 + stream.uniform()).collect();
    let lambdas = (0..k).map(|_| (0..d).map(|_| CBParam::clamped(0.05 + 0.9 * stream.uniform())).collect()).collect();
    Ok(Mixture::from_unnormalized(weights, lambdas))
}

/// `n` rows: a component by its weight, then independent CB draws per coordinate.
pub fn sample_mixture(mixture: &Mixture, n: usize, stream: &mut RandomStream) -> Dataset {
    let d = mixture.dim();
    let mut values = Array2::zeros((n, d));
    for mut row in values.axis_iter_mut(Axis(0)) {
        let c = stream.categorical(&mixture.weights).expect("mixture weights form a simplex");
        for (v, p) in row.iter_mut().zip(&mixture.lambdas[c]) {
            *v = p.sample(stream);
        }
    }
    Dataset::new(values, None).expect("CB samples lie in [0, 1]")
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `KL(p_true ‖ p_est)` estimated from `n_samples` draws of `p_true`, both
/// densities evaluated with the proper CB likelihood.
pub fn kl_mc(p_true: &Mixture, p_est: &Mixture, n_samples: usize, stream: &mut RandomStream) -> Result<McEstimate> {
    if p_true.dim() != p_est.dim() {
        return Err(Error::Dimension { expected: p_true.dim(), got: p_est.dim() });
    }
    if n_samples == 0 {
        return Err(Error::Config("kl_mc needs at least one sample".into()));
    }
    let xs = sample_mixture(p_true, n_samples, stream);
    let lp = row_log_sum_exp(&p_true.joint_log_density(xs.values(), Likelihood::Cb));
    let lq = row_log_sum_exp(&p_est.joint_log_density(xs.values(), Likelihood::Cb));
    let diffs = lp - lq;
    let n = n_samples as f64;
    let mean = diffs.sum() / n;
    let var = if n_samples > 1 { diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(McEstimate { value: mean, std_error: (var / n).sqrt() })
}

/// Labels predicted by majority vote among the `k` nearest (Euclidean) training
/// points; distance ties go to the lower training index and vote ties to the
/// smaller label.
pub fn knn_predict(train: &Array2<f64>, train_labels: &[u32], test: &Array2<f64>, k: usize) -> Result<Vec<u32>> {
    if train.nrows() == 0 {
        return Err(Error::Empty("k-NN training set"));
    }
    if k < 1 || k > train.nrows() {
        return Err(Error::Config(format!("k-NN needs 1 ≤ k ≤ {}, got {k}", train.nrows())));
    }
    if train_labels.len() != train.nrows() {
        return Err(Error::Dimension { expected: train.nrows(), got: train_labels.len() });
    }
    if test.ncols() != train.ncols() {
        return Err(Error::Dimension { expected: train.ncols(), got: test.ncols() });
    }
    let n_labels = train_labels.iter().max().map_or(0, |m| *m as usize + 1);
    let train_sq: Vec<f64> = train.rows().into_iter().map(|r| r.dot(&r)).collect();
    let cross = test.dot(&train.t());
    let mut out = Vec::with_capacity(test.nrows());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(train.nrows());
    for (i, row) in test.rows().into_iter().enumerate() {
        let q = row.dot(&row);
        order.clear();
        order.extend((0..train.nrows()).map(|j| (q + train_sq[j] - 2.0 * cross[[i, j]], j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes = vec![0usize; n_labels];
        for (_, j) in &order[..k] {
            votes[train_labels[*j] as usize] += 1;
        }
        let best = votes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l as u32).expect("at least one label");
        out.push(best);
    }
    Ok(out)
}

/// Fraction of `test_labels` predicted correctly by [`knn_predict`].
pub fn knn_classify(train: &Array2<f64>, train_labels: &[u32], test: &Array2<f64>, test_labels: &[u32], k: usize) -> Result<f64> {
    if test_labels.len() != test.nrows() {
        return Err(Error::Dimension { expected: test.nrows(), got: test_labels.len() });
    }
    if test.nrows() == 0 {
        return Err(Error::Empty("k-NN test set"));
    }
    let pred = knn_predict(train, train_labels, test, k)?;
    let correct = pred.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / test_labels.len() as f64)
}
