//! Exact Gaussian process regression over graph-plus-scalar inputs.
//!
//! The kernel is a product: squared exponential over the SWWL embedding
//! distance between graphs, times a Matérn-5/2 factor per scalar input,
//! scaled by a signal variance. Hyperparameters are trained by maximizing
//! the marginal likelihood with analytic gradients, multiple restarts,
//! and a jitter ladder guarding the Cholesky factorization.
//!
//! Other graph kernels can slot in by producing their own embedding
//! vectors; everything downstream only sees Euclidean distances.

mod optimize;
pub mod swwl;

pub use swwl::{SwwlConfig, SwwlEmbedding, SwwlSpec};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.23606797749979;
/// Largest |log parameter| the optimizer may visit; beyond this the
/// objective reports infeasible instead of overflowing.
const LOG_PARAM_LIMIT: f64 = 50.0;

/// Matérn-5/2 correlation at scaled distance `r >= 0`.
pub fn matern52(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// d matern52(t/l) / d log(l), expressed through r = t/l; equals
/// (5/3) r^2 (1 + sqrt5 r) exp(-sqrt5 r), and divided by matern52(r)
/// gives the log-derivative factor used in Gram gradients.
fn matern52_log_ratio(r: f64) -> f64 {
    let s = SQRT5 * r;
    let poly = 1.0 + s + s * s / 3.0;
    (s * s / 3.0) * (1.0 + s) / poly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyperparams {
    pub signal_variance: f64,
    pub graph_lengthscale: f64,
    pub scalar_lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, what: &str| -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{what} must be positive and finite, got {v}"
                )));
            }
            Ok(())
        };
        pos(self.signal_variance, "signal variance")?;
        pos(self.graph_lengthscale, "graph lengthscale")?;
        for (i, &l) in self.scalar_lengthscales.iter().enumerate() {
            pos(l, &format!("scalar lengthscale {i}"))?;
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be nonnegative and finite, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.signal_variance.ln(), self.graph_lengthscale.ln()];
        v.extend(self.scalar_lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.max(1e-300).ln());
        v
    }

    fn from_log(x: &[f64]) -> Self {
        let m = x.len() - 3;
        Self {
            signal_variance: x[0].exp(),
            graph_lengthscale: x[1].exp(),
            scalar_lengthscales: x[2..2 + m].iter().map(|v| v.exp()).collect(),
            noise_variance: x[2 + m].exp(),
        }
    }
}

/// Tensorized kernel between two (embedding, scalars) inputs.
pub fn kernel_eval(
    a: (&SwwlEmbedding, &[f64]),
    b: (&SwwlEmbedding, &[f64]),
    hp: &GpHyperparams,
) -> Result<f64> {
    hp.validate()?;
    let m = hp.scalar_lengthscales.len();
    if a.1.len() != m || b.1.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "inputs carry {} and {} scalars but the kernel has {m} scalar lengthscales",
            a.1.len(),
            b.1.len()
        )));
    }
    let d2 = a.0.distance_squared(b.0)?;
    let lg = hp.graph_lengthscale;
    let mut k = hp.signal_variance * (-d2 / (2.0 * lg * lg)).exp();
    for ((sa, sb), l) in a.1.iter().zip(b.1).zip(&hp.scalar_lengthscales) {
        k *= matern52((sa - sb).abs() / l);
    }
    Ok(k)
}

/// Immutable training set for one scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpTrainingData {
    embeddings: Vec<SwwlEmbedding>,
    scalars: Vec<Vec<f64>>,
    targets: DVector<f64>,
}

impl GpTrainingData {
    pub fn new(
        embeddings: Vec<SwwlEmbedding>,
        scalars: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let n = embeddings.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "training data must be nonempty".into(),
            ));
        }
        if scalars.len() != n || targets.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "got {n} embeddings, {} scalar rows, {} targets",
                scalars.len(),
                targets.len()
            )));
        }
        let emb_len = embeddings[0].len();
        let m = scalars[0].len();
        for e in &embeddings {
            if e.len() != emb_len {
                return Err(Error::ShapeMismatch(
                    "embeddings have inconsistent lengths".into(),
                ));
            }
        }
        for s in &scalars {
            if s.len() != m {
                return Err(Error::ShapeMismatch(
                    "scalar rows have inconsistent lengths".into(),
                ));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data {
                    sample: None,
                    message: "scalar input is not finite".into(),
                });
            }
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data {
                sample: None,
                message: "training target is not finite".into(),
            });
        }
        Ok(Self {
            embeddings,
            scalars,
            targets: DVector::from_vec(targets),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.scalars[0].len()
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }
}

/// Cached pairwise pieces the Gram matrix is assembled from; they do not
/// depend on hyperparameters, so one precomputation serves a whole fit.
struct Pairwise {
    d2: DMatrix<f64>,
    sdiff: Vec<DMatrix<f64>>,
}

fn pairwise(data: &GpTrainingData) -> Result<Pairwise> {
    let n = data.len();
    let m = data.scalar_count();
    let mut d2 = DMatrix::zeros(n, n);
    let mut sdiff = vec![DMatrix::zeros(n, n); m];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = data.embeddings[i].distance_squared(&data.embeddings[j])?;
            d2[(i, j)] = v;
            d2[(j, i)] = v;
            for (t, sd) in sdiff.iter_mut().enumerate() {
                let d = (data.scalars[i][t] - data.scalars[j][t]).abs();
                sd[(i, j)] = d;
                sd[(j, i)] = d;
            }
        }
    }
    Ok(Pairwise { d2, sdiff })
}

/// Noiseless Gram matrix.
fn gram(pw: &Pairwise, hp: &GpHyperparams) -> DMatrix<f64> {
    let n = pw.d2.nrows();
    let lg2 = 2.0 * hp.graph_lengthscale * hp.graph_lengthscale;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in (i + 1)..n {
            let mut v = hp.signal_variance * (-pw.d2[(i, j)] / lg2).exp();
            for (t, l) in hp.scalar_lengthscales.iter().enumerate() {
                v *= matern52(pw.sdiff[t][(i, j)] / l);
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorize `k + noise I`, escalating jitter from 1e-10 to 1e-4 of the
/// mean diagonal until the Cholesky succeeds. `jitter_floor` starts the
/// ladder higher when a previous factorization proved too ill-conditioned.
fn factorize_noised(
    k: &DMatrix<f64>,
    noise: f64,
    jitter_floor: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let base = k.trace() / n as f64;
    let mut jitter = jitter_floor;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
        jitter = if jitter == 0.0 {
            1e-10 * base
        } else {
            2.0 * jitter
        };
        if !(jitter > 0.0) || jitter > 1e-4 * base {
            return Err(Error::Conditioning(format!(
                "Gram matrix not positive definite even with jitter {jitter:.3e}"
            )));
        }
    }
}

struct MllEval {
    value: f64,
    /// Gradient w.r.t. log parameters, ordered
    /// [log sig^2, log l_graph, log l_1.., log eta^2].
    grad: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

fn mll_eval(
    pw: &Pairwise,
    hp: &GpHyperparams,
    y: &DVector<f64>,
    jitter_floor: f64,
) -> Result<MllEval> {
    let n = y.len();
    let k = gram(pw, hp);
    let (chol, jitter) = factorize_noised(&k, hp.noise_variance, jitter_floor)?;
    let alpha = chol.solve(y);
    let l = chol.l();
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += l[(i, i)].ln();
    }
    let value = -0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let minv = chol.inverse();
    let lg2 = hp.graph_lengthscale * hp.graph_lengthscale;
    let m = hp.scalar_lengthscales.len();
    let mut g_sig = 0.0;
    let mut g_lg = 0.0;
    let mut g_scal = vec![0.0; m];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - minv[(i, j)];
            let wk = w * k[(i, j)];
            g_sig += wk;
            g_lg += wk * pw.d2[(i, j)] / lg2;
            for (t, l) in hp.scalar_lengthscales.iter().enumerate() {
                g_scal[t] += wk * matern52_log_ratio(pw.sdiff[t][(i, j)] / l);
            }
        }
    }
    let g_eta = hp.noise_variance * (alpha.norm_squared() - minv.trace());
    let mut grad = vec![0.5 * g_sig, 0.5 * g_lg];
    grad.extend(g_scal.iter().map(|g| 0.5 * g));
    grad.push(0.5 * g_eta);
    Ok(MllEval {
        value,
        grad,
        chol,
        alpha,
        jitter,
    })
}

/// Marginal log-likelihood and its gradient with respect to the log
/// hyperparameters, in the order
/// [log sig^2, log l_graph, log l_scalar.., log eta^2].
pub fn log_marginal_likelihood(
    hp: &GpHyperparams,
    data: &GpTrainingData,
) -> Result<(f64, Vec<f64>)> {
    hp.validate()?;
    if hp.scalar_lengthscales.len() != data.scalar_count() {
        return Err(Error::ShapeMismatch(format!(
            "kernel has {} scalar lengthscales but data carries {} scalars",
            hp.scalar_lengthscales.len(),
            data.scalar_count()
        )));
    }
    let pw = pairwise(data)?;
    let eval = mll_eval(&pw, hp, &data.targets, 0.0)?;
    Ok((eval.value, eval.grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpFitConfig {
    /// Independent optimizer starts; the first is unperturbed.
    pub restarts: usize,
    pub seed: u64,
    pub max_opt_iters: usize,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self {
            restarts: 3,
            seed: 0,
            max_opt_iters: 200,
        }
    }
}

/// A trained GP: hyperparameters plus cached factorization.
#[derive(Clone, Debug)]
pub struct GpModel {
    hyperparams: GpHyperparams,
    data: GpTrainingData,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    mll: f64,
}

/// Serializable form: the factorization is rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModelRecord {
    pub hyperparams: GpHyperparams,
    pub data: GpTrainingData,
}

impl GpModel {
    /// Assemble a model from fixed hyperparameters (no optimization).
    pub fn from_parts(hyperparams: GpHyperparams, data: GpTrainingData) -> Result<Self> {
        hyperparams.validate()?;
        if hyperparams.scalar_lengthscales.len() != data.scalar_count() {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {} scalar lengthscales but data carries {} scalars",
                hyperparams.scalar_lengthscales.len(),
                data.scalar_count()
            )));
        }
        let pw = pairwise(&data)?;
        let n = data.len();
        let tol = 1e-8 * data.targets.amax();
        // The gram diagonal is exactly the signal variance, matching the
        // jitter ladder's reference scale.
        let base = hyperparams.signal_variance;
        let mut floor = 0.0;
        loop {
            let eval = mll_eval(&pw, &hyperparams, &data.targets, floor)?;
            // Polish the weight vector with iterative refinement: a plain
            // Cholesky solve can miss the reproduction invariant when the
            // optimizer lands on an ill-conditioned kernel.
            let mut m = gram(&pw, &hyperparams);
            let noise = hyperparams.noise_variance + eval.jitter;
            for i in 0..n {
                m[(i, i)] += noise;
            }
            let mut alpha = eval.alpha;
            let mut residual = (&m * &alpha - &data.targets).amax();
            for _ in 0..4 {
                if residual <= tol {
                    break;
                }
                let correction = eval.chol.solve(&(&data.targets - &m * &alpha));
                alpha += correction;
                residual = (&m * &alpha - &data.targets).amax();
            }
            if residual <= tol {
                return Ok(Self {
                    hyperparams,
                    data,
                    chol: eval.chol,
                    alpha,
                    jitter: eval.jitter,
                    mll: eval.value,
                });
            }
            // Too ill-conditioned for the reproduction invariant: climb
            // the jitter ladder and refactorize.
            floor = if eval.jitter == 0.0 {
                1e-10 * base
            } else {
                2.0 * eval.jitter
            };
            if !(floor > 0.0) || floor > 1e-4 * base {
                return Err(Error::Conditioning(format!(
                    "weight vector residual {residual:.3e} exceeds {tol:.3e} even at maximum jitter"
                )));
            }
        }
    }

    pub fn to_record(&self) -> GpModelRecord {
        GpModelRecord {
            hyperparams: self.hyperparams.clone(),
            data: self.data.clone(),
        }
    }

    pub fn from_record(record: GpModelRecord) -> Result<Self> {
        Self::from_parts(record.hyperparams, record.data)
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyperparams
    }

    pub fn data(&self) -> &GpTrainingData {
        &self.data
    }

    pub fn mll(&self) -> f64 {
        self.mll
    }

    /// Noise variance plus any jitter the factorization needed.
    pub fn effective_noise(&self) -> f64 {
        self.hyperparams.noise_variance + self.jitter
    }

    /// Posterior mean and standard deviation at each test input.
    pub fn posterior(
        &self,
        embeddings: &[SwwlEmbedding],
        scalars: &[Vec<f64>],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if embeddings.len() != scalars.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings vs {} scalar rows",
                embeddings.len(),
                scalars.len()
            )));
        }
        let n = self.data.len();
        let mut means = DVector::zeros(embeddings.len());
        let mut stds = DVector::zeros(embeddings.len());
        let l = self.chol.l();
        for (t, (e, s)) in embeddings.iter().zip(scalars).enumerate() {
            let mut kstar = DVector::zeros(n);
            for i in 0..n {
                kstar[i] = kernel_eval(
                    (e, s.as_slice()),
                    (&self.data.embeddings[i], self.data.scalars[i].as_slice()),
                    &self.hyperparams,
                )?;
            }
            means[t] = kstar.dot(&self.alpha);
            let v = l
                .solve_lower_triangular(&kstar)
                .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
            stds[t] = (self.hyperparams.signal_variance - v.norm_squared())
                .max(0.0)
                .sqrt();
        }
        Ok((means, stds))
    }

    pub fn posterior_one(&self, embedding: &SwwlEmbedding, scalars: &[f64]) -> Result<(f64, f64)> {
        let (m, s) = self.posterior(
            std::slice::from_ref(embedding),
            std::slice::from_ref(&scalars.to_vec()),
        )?;
        Ok((m[0], s[0]))
    }
}

/// Median-heuristic starting point.
fn initial_hyperparams(pw: &Pairwise, data: &GpTrainingData) -> GpHyperparams {
    let n = data.len();
    let mut emb = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = pw.d2[(i, j)].sqrt();
            if d > 0.0 {
                emb.push(d);
            }
        }
    }
    let lg = crate::util::median(&emb).unwrap_or(1.0).max(1e-12);
    let mut scalar_ls = Vec::with_capacity(data.scalar_count());
    for t in 0..data.scalar_count() {
        let mut ds = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = pw.sdiff[t][(i, j)];
                if d > 0.0 {
                    ds.push(d);
                }
            }
        }
        scalar_ls.push(crate::util::median(&ds).unwrap_or(1.0).max(1e-12));
    }
    let var = crate::util::variance(data.targets.as_slice()).max(1e-12);
    GpHyperparams {
        signal_variance: var,
        graph_lengthscale: lg,
        scalar_lengthscales: scalar_ls,
        noise_variance: (1e-2 * var).max(1e-12),
    }
}

/// Maximize the marginal likelihood over log hyperparameters with
/// `cfg.restarts` starts. The first start is the median heuristic (or
/// `warm_start` when given); the rest perturb it by e^U(-1,1) per
/// parameter, deterministically from `cfg.seed`.
pub fn fit_gp(
    data: &GpTrainingData,
    cfg: &GpFitConfig,
    warm_start: Option<&GpHyperparams>,
) -> Result<GpModel> {
    if data.len() < 2 {
        return Err(Error::InvalidParameter(
            "fitting needs at least two training samples".into(),
        ));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidParameter(
            "restarts must be at least 1".into(),
        ));
    }
    if let Some(hp) = warm_start {
        hp.validate()?;
        if hp.scalar_lengthscales.len() != data.scalar_count() {
            return Err(Error::ShapeMismatch(
                "warm-start lengthscale count does not match the data".into(),
            ));
        }
    }
    let pw = pairwise(data)?;
    let base = warm_start
        .cloned()
        .unwrap_or_else(|| initial_hyperparams(&pw, data));
    let base_log = base.to_log();
    let y = &data.targets;

    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        if x.iter()
            .any(|v| !v.is_finite() || v.abs() > LOG_PARAM_LIMIT)
        {
            return None;
        }
        let hp = GpHyperparams::from_log(x);
        match mll_eval(&pw, &hp, y, 0.0) {
            Ok(eval) => Some((-eval.value, eval.grad.iter().map(|g| -g).collect())),
            Err(_) => None,
        }
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..cfg.restarts {
        let mut x0 = base_log.clone();
        if r > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            for v in x0.iter_mut() {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        if let Some(out) = optimize::lbfgs_minimize(&x0, objective, cfg.max_opt_iters) {
            let better = match &best {
                None => true,
                Some((bv, _)) => out.value < *bv,
            };
            if better {
                best = Some((out.value, out.x));
            }
        }
    }
    let (_, x) = best.ok_or_else(|| {
        Error::Conditioning("every restart failed to produce a usable factorization".into())
    })?;
    GpModel::from_parts(GpHyperparams::from_log(&x), data.clone())
}
