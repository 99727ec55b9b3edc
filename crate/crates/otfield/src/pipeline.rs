//! End-to-end orchestration: training (lift graphs, couple to the
//! reference, transfer signals, reduce, regress), prediction with
//! per-node uncertainties, the relative error metric and its stage
//! decomposition, and the regularization/smoothing grid search.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{plan_via_cache, PlanCache};
use crate::dataset::Dataset;
use crate::dimred::{fit_reduction, DimensionReduction, PcaConfig, PcaModel};
use crate::error::{Error, Result};
use crate::gp::{
    fit_gp, GpFitConfig, GpModel, GpTrainingData, SwwlConfig, SwwlEmbedding, SwwlSpec,
};
use crate::graph::{continuous_wl_embed, AttributedGraph};
use crate::ot::{
    back_transfer, propagate_covariance, push_forward_columns, transfer_signal, EmpiricalMeasure,
    SinkhornConfig,
};
use crate::reference::{build_reference, ReferenceConfig, ReferenceContext, ReferenceMeasure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Entropic regularization for training plans.
    pub lambda: f64,
    /// Test-side regularization; `None` reuses `lambda`.
    pub lambda0: Option<f64>,
    /// Smoothing iterations H; node features get dimension d*(H+1).
    pub wl_iterations: usize,
    /// Dimension-reduction strategy name.
    pub reduction: String,
    pub sinkhorn: SinkhornConfig,
    pub pca: PcaConfig,
    pub swwl: SwwlConfig,
    pub gp: GpFitConfig,
    /// Drop samples whose plan does not converge instead of failing.
    pub skip_bad_samples: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            lambda0: None,
            wl_iterations: 1,
            reduction: "pca".into(),
            sinkhorn: SinkhornConfig::default(),
            pca: PcaConfig::default(),
            swwl: SwwlConfig::default(),
            gp: GpFitConfig::default(),
            skip_bad_samples: false,
        }
    }
}

impl TrainConfig {
    pub fn lambda0(&self) -> f64 {
        self.lambda0.unwrap_or(self.lambda)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if let Some(l0) = self.lambda0 {
            if !(l0 > 0.0) || !l0.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "test-side lambda must be positive and finite, got {l0}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to predict on new graphs.
#[derive(Clone, Debug)]
pub struct TrainedSurrogate {
    field: String,
    scalar_names: Vec<String>,
    attr_dim: usize,
    wl_iterations: usize,
    lambda: f64,
    lambda0: f64,
    sinkhorn: SinkhornConfig,
    reference: ReferenceMeasure,
    swwl: SwwlSpec,
    pca: PcaModel,
    gps: Vec<GpModel>,
    train_fingerprint: String,
}

impl TrainedSurrogate {
    /// Assemble a surrogate from already-fitted parts, checking the
    /// cross-component invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        field: String,
        scalar_names: Vec<String>,
        attr_dim: usize,
        wl_iterations: usize,
        lambda: f64,
        lambda0: f64,
        sinkhorn: SinkhornConfig,
        reference: ReferenceMeasure,
        swwl_config: SwwlConfig,
        pca: PcaModel,
        gps: Vec<GpModel>,
        train_fingerprint: String,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !(lambda0 > 0.0) {
            return Err(Error::InvalidParameter(
                "regularization strengths must be positive".into(),
            ));
        }
        if attr_dim == 0 {
            return Err(Error::InvalidParameter(
                "attribute dimension must be positive".into(),
            ));
        }
        if reference.dim() != attr_dim * (wl_iterations + 1) {
            return Err(Error::ShapeMismatch(format!(
                "reference dimension {} does not equal attribute dimension {} times {} smoothing levels",
                reference.dim(),
                attr_dim,
                wl_iterations + 1
            )));
        }
        if pca.field_dim() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "reducer expects fields of length {} but the reference has {} points",
                pca.field_dim(),
                reference.len()
            )));
        }
        if pca.latent_dim() != gps.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} kept components but {} coefficient models",
                pca.latent_dim(),
                gps.len()
            )));
        }
        for (q, gp) in gps.iter().enumerate() {
            if gp.data().scalar_count() != scalar_names.len() {
                return Err(Error::ShapeMismatch(format!(
                    "coefficient model {q} consumes {} scalars but the dataset declares {}",
                    gp.data().scalar_count(),
                    scalar_names.len()
                )));
            }
        }
        let swwl = SwwlSpec::new(swwl_config, reference.dim())?;
        Ok(Self {
            field,
            scalar_names,
            attr_dim,
            wl_iterations,
            lambda,
            lambda0,
            sinkhorn,
            reference,
            swwl,
            pca,
            gps,
            train_fingerprint,
        })
    }

    pub fn field(&self) -> &str {
        &self.field
    }

    pub fn scalar_names(&self) -> &[String] {
        &self.scalar_names
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn wl_iterations(&self) -> usize {
        self.wl_iterations
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn sinkhorn(&self) -> &SinkhornConfig {
        &self.sinkhorn
    }

    pub fn reference(&self) -> &ReferenceMeasure {
        &self.reference
    }

    pub fn swwl_config(&self) -> &SwwlConfig {
        self.swwl.config()
    }

    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    pub fn gps(&self) -> &[GpModel] {
        &self.gps
    }

    pub fn latent_dim(&self) -> usize {
        self.pca.latent_dim()
    }

    pub fn train_fingerprint(&self) -> &str {
        &self.train_fingerprint
    }

    /// WL-lift a graph and embed it for the kernel.
    fn lift(&self, graph: &AttributedGraph) -> Result<(EmpiricalMeasure, SwwlEmbedding)> {
        if graph.attr_dim() != self.attr_dim {
            return Err(Error::ShapeMismatch(format!(
                "graph attributes have dimension {} but the model was trained on {}",
                graph.attr_dim(),
                self.attr_dim
            )));
        }
        let wl = continuous_wl_embed(graph, self.wl_iterations);
        let measure = EmpiricalMeasure::from_wl(&wl);
        let embedding = self.swwl.embed(&wl)?;
        Ok((measure, embedding))
    }

    fn check_scalars(&self, scalars: &[f64]) -> Result<()> {
        if scalars.len() != self.scalar_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "got {} scalar inputs, model expects {} ({})",
                scalars.len(),
                self.scalar_names.len(),
                self.scalar_names.join(", ")
            )));
        }
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "scalar inputs must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Coefficient posteriors and the decoded field on the reference.
    fn posterior_transferred(
        &self,
        embedding: &SwwlEmbedding,
        scalars: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let q = self.latent_dim();
        let mut means = DVector::zeros(q);
        let mut stds = DVector::zeros(q);
        for (j, gp) in self.gps.iter().enumerate() {
            let (m, s) = gp.posterior_one(embedding, scalars)?;
            means[j] = m;
            stds[j] = s;
        }
        let transferred = self.pca.decode(&means)?;
        Ok((means, stds, transferred))
    }

    /// Predict the signal on a new graph with per-node uncertainties.
    pub fn predict(
        &self,
        graph: &AttributedGraph,
        scalars: &[f64],
        options: &PredictOptions<'_>,
    ) -> Result<PredictionResult> {
        self.check_scalars(scalars)?;
        let (measure, embedding) = self.lift(graph)?;
        let plan = plan_via_cache(
            options.cache,
            &measure,
            self.reference.measure(),
            self.lambda0,
            &self.sinkhorn,
        )?;
        let (coeff_means, coeff_stds, transferred) =
            self.posterior_transferred(&embedding, scalars)?;
        let signal = back_transfer(&plan, &transferred)?;

        // Per-node variances of (n P) E c with independent coefficients:
        // row norms of (n P) E scaled by the coefficient deviations.
        let n = graph.node_count();
        let mut node_var = DVector::zeros(n);
        if self.latent_dim() > 0 {
            let pushed_basis = push_forward_columns(&plan, self.pca.basis())?;
            for i in 0..n {
                let mut v = 0.0;
                for j in 0..self.latent_dim() {
                    let b = pushed_basis[(i, j)];
                    v += b * b * coeff_stds[j] * coeff_stds[j];
                }
                node_var[i] = v;
            }
        }
        let node_std = node_var.map(|v| v.max(0.0).sqrt());

        let full_covariance = if options.full_covariance {
            let field_cov = self.pca.coeff_std_to_field_cov(coeff_stds.as_slice())?;
            Some(propagate_covariance(&plan, &field_cov)?)
        } else {
            None
        };

        Ok(PredictionResult {
            signal,
            node_std,
            transferred,
            coeff_means,
            coeff_stds,
            full_covariance,
        })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PredictOptions<'a> {
    /// Also materialize the full node covariance (quadratic memory).
    pub full_covariance: bool,
    pub cache: Option<&'a PlanCache>,
}

#[derive(Clone, Debug)]
pub struct PredictionResult {
    /// Predicted signal, one value per node.
    pub signal: DVector<f64>,
    /// Per-node posterior standard deviation.
    pub node_std: DVector<f64>,
    /// Predicted field on the reference support.
    pub transferred: DVector<f64>,
    pub coeff_means: DVector<f64>,
    pub coeff_stds: DVector<f64>,
    pub full_covariance: Option<DMatrix<f64>>,
}

/// Per-sample training artifacts kept for diagnostics, aligned with the
/// dataset order; `None` marks skipped samples.
#[derive(Clone, Debug)]
pub struct TrainDiagnostics {
    /// Signals transferred onto the reference support.
    pub transferred: Vec<Option<DVector<f64>>>,
    /// Round-trip reconstructions back on each training graph.
    pub reconstructions: Vec<Option<DVector<f64>>>,
    /// rrmse between training signals and their reconstructions.
    pub approximation: RrmseReport,
    /// Dropped samples with the reason.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub surrogate: TrainedSurrogate,
    pub diagnostics: TrainDiagnostics,
}

struct StagedSample {
    embedding: SwwlEmbedding,
    transferred: DVector<f64>,
    reconstruction: DVector<f64>,
}

/// WL-lifted measures for every sample, in dataset order.
pub fn wl_measures(dataset: &Dataset, wl_iterations: usize) -> Result<Vec<EmpiricalMeasure>> {
    Ok(dataset
        .samples
        .par_iter()
        .map(|s| EmpiricalMeasure::from_wl(&continuous_wl_embed(&s.graph, wl_iterations)))
        .collect())
}

/// Build a reference measure for a dataset at a given smoothing depth.
pub fn prepare_reference(
    dataset: &Dataset,
    cfg: &ReferenceConfig,
    wl_iterations: usize,
    swwl: SwwlConfig,
    base_dir: &Path,
) -> Result<ReferenceMeasure> {
    let measures = wl_measures(dataset, wl_iterations)?;
    let ctx = ReferenceContext {
        measures: &measures,
        swwl,
        base_dir,
    };
    build_reference(cfg, &ctx)
}

fn common_attr_dim(dataset: &Dataset) -> Result<usize> {
    let first = dataset.samples[0].graph.attr_dim();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.graph.attr_dim() != first {
            return Err(Error::Data {
                sample: Some(i),
                message: format!(
                    "graph attributes have dimension {}, expected {} like the first sample",
                    s.graph.attr_dim(),
                    first
                ),
            });
        }
    }
    Ok(first)
}

/// Fit the full surrogate for one signal field.
pub fn train(
    dataset: &Dataset,
    field: &str,
    reference: &ReferenceMeasure,
    cfg: &TrainConfig,
    cache: Option<&PlanCache>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data {
            sample: None,
            message: "dataset has no samples".into(),
        });
    }
    let signals = dataset.field_signals(field)?;
    let attr_dim = common_attr_dim(dataset)?;
    if reference.dim() != attr_dim * (cfg.wl_iterations + 1) {
        return Err(Error::ShapeMismatch(format!(
            "reference dimension {} does not match attribute dimension {} at {} smoothing iterations (expected {})",
            reference.dim(),
            attr_dim,
            cfg.wl_iterations,
            attr_dim * (cfg.wl_iterations + 1)
        )));
    }
    let swwl_spec = SwwlSpec::new(cfg.swwl, reference.dim())?;

    // Stage 1, per sample: lift, couple, transfer, reconstruct.
    let staged: Vec<std::result::Result<StagedSample, Error>> = dataset
        .samples
        .par_iter()
        .zip(&signals)
        .enumerate()
        .map(|(i, (sample, signal))| {
            let run = || -> Result<StagedSample> {
                let wl = continuous_wl_embed(&sample.graph, cfg.wl_iterations);
                let measure = EmpiricalMeasure::from_wl(&wl);
                let embedding = swwl_spec.embed(&wl)?;
                let plan = plan_via_cache(
                    cache,
                    &measure,
                    reference.measure(),
                    cfg.lambda,
                    &cfg.sinkhorn,
                )?;
                let transferred = transfer_signal(&plan, signal.values())?;
                let reconstruction = back_transfer(&plan, &transferred)?;
                Ok(StagedSample {
                    embedding,
                    transferred,
                    reconstruction,
                })
            };
            run().map_err(|e| e.with_sample(i))
        })
        .collect();

    let n_samples = dataset.len();
    let mut transferred_diag: Vec<Option<DVector<f64>>> = vec![None; n_samples];
    let mut reconstructions: Vec<Option<DVector<f64>>> = vec![None; n_samples];
    let mut skipped = Vec::new();
    let mut kept_idx = Vec::new();
    let mut kept = Vec::new();
    for (i, r) in staged.into_iter().enumerate() {
        match r {
            Ok(s) => {
                transferred_diag[i] = Some(s.transferred.clone());
                reconstructions[i] = Some(s.reconstruction.clone());
                kept_idx.push(i);
                kept.push(s);
            }
            Err(e @ Error::NonConvergence { .. }) if cfg.skip_bad_samples => {
                log::warn!("skipping sample {i}: {e}");
                skipped.push((i, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if kept.len() < 2 {
        return Err(Error::Data {
            sample: None,
            message: format!(
                "only {} usable samples after skipping; need at least 2",
                kept.len()
            ),
        });
    }

    // Stage 2: reduce the transferred fields.
    let n_ref = reference.len();
    let fields_matrix = DMatrix::from_fn(kept.len(), n_ref, |r, c| kept[r].transferred[c]);
    let pca = fit_reduction(&cfg.reduction, &fields_matrix, &cfg.pca)?;
    let q = pca.latent_dim();

    // Stage 3: one GP per kept component, warm-started from the first.
    let gps = if q == 0 {
        Vec::new()
    } else {
        let embeddings: Vec<SwwlEmbedding> = kept.iter().map(|s| s.embedding.clone()).collect();
        let scalar_rows: Vec<Vec<f64>> = kept_idx
            .iter()
            .map(|&i| dataset.samples[i].scalars.clone())
            .collect();
        let coeffs = DMatrix::from_fn(kept.len(), q, |r, c| {
            pca.encode(&kept[r].transferred)
                .map(|v| v[c])
                .unwrap_or(f64::NAN)
        });
        if coeffs.iter().any(|v| v.is_nan()) {
            return Err(Error::Conditioning(
                "encoding training fields failed".into(),
            ));
        }
        let coeff_data = |j: usize| -> Result<GpTrainingData> {
            GpTrainingData::new(
                embeddings.clone(),
                scalar_rows.clone(),
                coeffs.column(j).iter().copied().collect(),
            )
        };
        let first = fit_gp(&coeff_data(0)?, &cfg.gp, None)?;
        let warm = first.hyperparams().clone();
        let rest: Vec<GpModel> = (1..q)
            .into_par_iter()
            .map(|j| fit_gp(&coeff_data(j)?, &cfg.gp, Some(&warm)))
            .collect::<Result<_>>()?;
        let mut gps = Vec::with_capacity(q);
        gps.push(first);
        gps.extend(rest);
        gps
    };

    // Train-side approximation quality over the kept samples.
    let truths: Vec<DVector<f64>> = kept_idx
        .iter()
        .map(|&i| signals[i].values().clone())
        .collect();
    let recons: Vec<DVector<f64>> = kept.iter().map(|s| s.reconstruction.clone()).collect();
    let approximation = rrmse(&truths, &recons)?;

    let surrogate = TrainedSurrogate::from_parts(
        field.to_string(),
        dataset.scalar_names.clone(),
        attr_dim,
        cfg.wl_iterations,
        cfg.lambda,
        cfg.lambda0(),
        cfg.sinkhorn,
        reference.clone(),
        cfg.swwl,
        pca,
        gps,
        dataset.fingerprint.clone(),
    )?;
    Ok(TrainOutput {
        surrogate,
        diagnostics: TrainDiagnostics {
            transferred: transferred_diag,
            reconstructions,
            approximation,
            skipped,
        },
    })
}

/// Relative root-mean-square error report. A sample's contribution is
/// ‖y − ŷ‖₂² / (n_i · ‖y‖∞²); the total squares-averages the included
/// contributions. Samples whose truth is identically zero are excluded.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RrmseReport {
    pub total: f64,
    /// Per-sample error; `None` marks excluded samples.
    pub per_sample: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

pub fn rrmse(truths: &[DVector<f64>], predictions: &[DVector<f64>]) -> Result<RrmseReport> {
    if truths.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} truths vs {} predictions",
            truths.len(),
            predictions.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::InvalidParameter(
            "error metric needs at least one sample".into(),
        ));
    }
    let mut per_sample = Vec::with_capacity(truths.len());
    let mut excluded = Vec::new();
    let mut sum_sq = 0.0;
    let mut included = 0usize;
    for (i, (y, yhat)) in truths.iter().zip(predictions).enumerate() {
        if y.len() != yhat.len() {
            return Err(Error::ShapeMismatch(format!(
                "sample {i}: truth has {} values, prediction {}",
                y.len(),
                yhat.len()
            )));
        }
        let max_abs = y.amax();
        if max_abs == 0.0 {
            log::warn!("sample {i} has an identically zero truth signal; excluded from the error");
            per_sample.push(None);
            excluded.push(i);
            continue;
        }
        let sq = (y - yhat).norm_squared() / (y.len() as f64 * max_abs * max_abs);
        per_sample.push(Some(sq.sqrt()));
        sum_sq += sq;
        included += 1;
    }
    if included == 0 {
        return Err(Error::Data {
            sample: None,
            message: "every sample was excluded from the error metric".into(),
        });
    }
    Ok(RrmseReport {
        total: (sum_sq / included as f64).sqrt(),
        per_sample,
        excluded,
    })
}

/// Stage-wise errors on a labelled evaluation set: reconstruction-only
/// (approximation), coefficient regression on the reference
/// (transferred-prediction), and the end-to-end total. The total is not
/// the sum of the parts.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorDecomposition {
    pub approximation: RrmseReport,
    pub transferred_prediction: RrmseReport,
    pub total: RrmseReport,
}

pub fn error_decomposition(
    surrogate: &TrainedSurrogate,
    dataset: &Dataset,
    cache: Option<&PlanCache>,
) -> Result<ErrorDecomposition> {
    if dataset.is_empty() {
        return Err(Error::Data {
            sample: None,
            message: "evaluation dataset has no samples".into(),
        });
    }
    let signals = dataset.field_signals(surrogate.field())?;
    struct Staged {
        truth: DVector<f64>,
        reconstruction: DVector<f64>,
        transferred_truth: DVector<f64>,
        transferred_pred: DVector<f64>,
        prediction: DVector<f64>,
    }
    let staged: Vec<std::result::Result<Staged, Error>> = dataset
        .samples
        .par_iter()
        .zip(&signals)
        .enumerate()
        .map(|(i, (sample, signal))| {
            let run = || -> Result<Staged> {
                surrogate.check_scalars(&sample.scalars)?;
                let (measure, embedding) = surrogate.lift(&sample.graph)?;
                let plan = plan_via_cache(
                    cache,
                    &measure,
                    surrogate.reference().measure(),
                    surrogate.lambda0(),
                    surrogate.sinkhorn(),
                )?;
                let transferred_truth = transfer_signal(&plan, signal.values())?;
                let reconstruction = back_transfer(&plan, &transferred_truth)?;
                let (_, _, transferred_pred) =
                    surrogate.posterior_transferred(&embedding, &sample.scalars)?;
                let prediction = back_transfer(&plan, &transferred_pred)?;
                Ok(Staged {
                    truth: signal.values().clone(),
                    reconstruction,
                    transferred_truth,
                    transferred_pred,
                    prediction,
                })
            };
            run().map_err(|e| e.with_sample(i))
        })
        .collect();
    let staged: Vec<Staged> = staged.into_iter().collect::<Result<_>>()?;

    let truths: Vec<DVector<f64>> = staged.iter().map(|s| s.truth.clone()).collect();
    let recons: Vec<DVector<f64>> = staged.iter().map(|s| s.reconstruction.clone()).collect();
    let t_truth: Vec<DVector<f64>> = staged.iter().map(|s| s.transferred_truth.clone()).collect();
    let t_pred: Vec<DVector<f64>> = staged.iter().map(|s| s.transferred_pred.clone()).collect();
    let preds: Vec<DVector<f64>> = staged.iter().map(|s| s.prediction.clone()).collect();
    Ok(ErrorDecomposition {
        approximation: rrmse(&truths, &recons)?,
        transferred_prediction: rrmse(&t_truth, &t_pred)?,
        total: rrmse(&truths, &preds)?,
    })
}

/// One grid-search configuration and its train-reconstruction score.
#[derive(Clone, Debug, Serialize)]
pub struct GridCell {
    pub lambda: f64,
    pub wl_iterations: usize,
    pub reference: String,
    /// Train approximation RRMSE; `None` when the cell failed.
    pub criterion: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub wl_iterations: Vec<usize>,
    pub references: Vec<ReferenceConfig>,
}

/// Score every (H, reference, lambda) cell by the unsupervised train
/// reconstruction criterion and rank ascending; failed cells sort last
/// in construction order, carrying their reason.
pub fn grid_search(
    dataset: &Dataset,
    field: &str,
    spec: &GridSpec,
    sinkhorn: &SinkhornConfig,
    swwl: SwwlConfig,
    base_dir: &Path,
    cache: Option<&PlanCache>,
) -> Result<Vec<GridCell>> {
    if spec.lambdas.is_empty() || spec.wl_iterations.is_empty() || spec.references.is_empty() {
        return Err(Error::InvalidParameter(
            "grid search needs at least one lambda, one smoothing depth, and one reference".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Data {
            sample: None,
            message: "dataset has no samples".into(),
        });
    }
    let signals = dataset.field_signals(field)?;
    let truths: Vec<DVector<f64>> = signals.iter().map(|s| s.values().clone()).collect();

    let mut cells = Vec::new();
    for &h in &spec.wl_iterations {
        let measures = wl_measures(dataset, h)?;
        for ref_cfg in &spec.references {
            let ctx = ReferenceContext {
                measures: &measures,
                swwl,
                base_dir,
            };
            let reference = build_reference(ref_cfg, &ctx);
            for &lambda in &spec.lambdas {
                let mut cell = GridCell {
                    lambda,
                    wl_iterations: h,
                    reference: ref_cfg.describe(),
                    criterion: None,
                    failure: None,
                };
                match &reference {
                    Err(e) => cell.failure = Some(e.to_string()),
                    Ok(reference) => {
                        let score = grid_cell_criterion(
                            &measures, &truths, reference, lambda, sinkhorn, cache,
                        );
                        match score {
                            Ok(c) => cell.criterion = Some(c),
                            Err(e) => cell.failure = Some(e.to_string()),
                        }
                    }
                }
                cells.push(cell);
            }
        }
    }
    // Ascending by criterion; failures keep construction order at the end.
    cells.sort_by(|a, b| match (a.criterion, b.criterion) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(cells)
}

fn grid_cell_criterion(
    measures: &[EmpiricalMeasure],
    truths: &[DVector<f64>],
    reference: &ReferenceMeasure,
    lambda: f64,
    sinkhorn: &SinkhornConfig,
    cache: Option<&PlanCache>,
) -> Result<f64> {
    let recons: Vec<std::result::Result<DVector<f64>, Error>> = measures
        .par_iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (measure, truth))| {
            let run = || -> Result<DVector<f64>> {
                let plan = plan_via_cache(cache, measure, reference.measure(), lambda, sinkhorn)?;
                let transferred = transfer_signal(&plan, truth)?;
                back_transfer(&plan, &transferred)
            };
            run().map_err(|e| e.with_sample(i))
        })
        .collect();
    let recons: Vec<DVector<f64>> = recons.into_iter().collect::<Result<_>>()?;
    Ok(rrmse(truths, &recons)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::gp::GpHyperparams;
    use crate::graph::NodeSignal;
    use crate::ot::cost_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    /// Chain graph with 1-d node attributes.
    fn chain_graph(xs: &[f64]) -> AttributedGraph {
        let n = xs.len();
        let features = DMatrix::from_fn(n, 1, |r, _| xs[r]);
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        AttributedGraph::new(features, edges).unwrap()
    }

    fn make_dataset(samples: Vec<(AttributedGraph, Vec<f64>, Vec<f64>)>) -> Dataset {
        let samples = samples
            .into_iter()
            .map(|(graph, values, scalars)| {
                let n = graph.node_count();
                let mut signals = BTreeMap::new();
                signals.insert("u".to_string(), NodeSignal::new(values, n).unwrap());
                Sample {
                    graph,
                    signals,
                    scalars,
                }
            })
            .collect();
        Dataset {
            id: "toy".into(),
            fields: vec!["u".into()],
            scalar_names: vec!["theta".into()],
            samples,
            fingerprint: "test-fingerprint".into(),
        }
    }

    /// Identical 8-node geometry, rank-1 signals a(theta) * phi(x).
    fn rank1_dataset(n_samples: usize) -> Dataset {
        let xs: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let samples = (0..n_samples)
            .map(|k| {
                let theta = k as f64 / (n_samples - 1) as f64;
                let a = 1.0 + 2.0 * theta;
                let values = xs.iter().map(|&x| a * (1.5 * x + 0.2).sin()).collect();
                (chain_graph(&xs), values, vec![theta])
            })
            .collect();
        make_dataset(samples)
    }

    fn full_subsample_reference(dataset: &Dataset, h: usize) -> ReferenceMeasure {
        prepare_reference(
            dataset,
            &ReferenceConfig::default(),
            h,
            SwwlConfig {
                n_projections: 4,
                n_quantiles: 8,
                seed: 0,
            },
            Path::new("."),
        )
        .unwrap()
    }

    fn fast_config(h: usize, lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            wl_iterations: h,
            swwl: SwwlConfig {
                n_projections: 4,
                n_quantiles: 8,
                seed: 0,
            },
            gp: GpFitConfig {
                restarts: 1,
                seed: 0,
                max_opt_iters: 60,
            },
            ..Default::default()
        }
    }

    #[test]
    fn identity_geometry_transfers_signals_almost_verbatim() {
        let dataset = rank1_dataset(6);
        let reference = full_subsample_reference(&dataset, 0);
        // Tiny regularization relative to the cost scale sharpens the
        // plan toward the identity permutation.
        let wl = continuous_wl_embed(&dataset.samples[0].graph, 0);
        let measure = EmpiricalMeasure::from_wl(&wl);
        let lambda = 1e-4 * cost_matrix(&measure, reference.measure()).unwrap().median();
        let out = train(&dataset, "u", &reference, &fast_config(0, lambda), None).unwrap();
        assert!(
            out.diagnostics.approximation.total <= 1e-3,
            "approximation rrmse {}",
            out.diagnostics.approximation.total
        );
        // The reference support is a (possibly reordered) copy of the
        // common geometry, so the transferred signal must match the
        // analytic field evaluated at the reference coordinates.
        let support = reference.measure().support();
        for (i, t) in out.diagnostics.transferred.iter().enumerate() {
            let t = t.as_ref().unwrap();
            let theta = i as f64 / 5.0;
            let a = 1.0 + 2.0 * theta;
            for j in 0..t.len() {
                let expected = a * (1.5 * support[(j, 0)] + 0.2).sin();
                assert!(
                    (t[j] - expected).abs() <= 1e-3 * t.amax(),
                    "sample {i} point {j}: {} vs {expected}",
                    t[j]
                );
            }
        }
    }

    #[test]
    fn rank1_signals_keep_the_floor_with_a_dominant_first_component() {
        let dataset = rank1_dataset(8);
        let reference = full_subsample_reference(&dataset, 0);
        let out = train(&dataset, "u", &reference, &fast_config(0, 1e-3), None).unwrap();
        let pca = out.surrogate.pca();
        assert_eq!(pca.latent_dim(), 4);
        assert!(
            pca.explained_variance_ratio()[0] >= 0.999,
            "first component ratio {}",
            pca.explained_variance_ratio()[0]
        );
    }

    #[test]
    fn two_sample_run_trains_and_predicts() {
        let dataset = rank1_dataset(2);
        let reference = full_subsample_reference(&dataset, 1);
        let out = train(&dataset, "u", &reference, &fast_config(1, 1e-3), None).unwrap();
        assert_eq!(out.surrogate.latent_dim(), 1);
        let pred = out
            .surrogate
            .predict(
                &dataset.samples[0].graph,
                &dataset.samples[0].scalars,
                &PredictOptions::default(),
            )
            .unwrap();
        assert_eq!(pred.signal.len(), 8);
        assert!(pred.node_std.iter().all(|&s| s >= 0.0));
    }

    /// Surrogate with hand-picked interpolating GP hyperparameters so the
    /// prediction path can be checked against the training reconstruction
    /// without depending on optimizer quality.
    fn interpolating_surrogate(dataset: &Dataset) -> (TrainedSurrogate, TrainOutput) {
        let reference = full_subsample_reference(dataset, 0);
        let cfg = fast_config(0, 1e-3);
        let out = train(dataset, "u", &reference, &cfg, None).unwrap();

        let swwl_spec = SwwlSpec::new(cfg.swwl, reference.dim()).unwrap();
        let embeddings: Vec<SwwlEmbedding> = dataset
            .samples
            .iter()
            .map(|s| swwl_spec.embed(&continuous_wl_embed(&s.graph, 0)).unwrap())
            .collect();
        let scalar_rows: Vec<Vec<f64>> =
            dataset.samples.iter().map(|s| s.scalars.clone()).collect();
        let pca = out.surrogate.pca().clone();
        let gps: Vec<GpModel> = (0..pca.latent_dim())
            .map(|j| {
                let targets: Vec<f64> = out
                    .diagnostics
                    .transferred
                    .iter()
                    .map(|t| pca.encode(t.as_ref().unwrap()).unwrap()[j])
                    .collect();
                let spread = 2.0 * crate::util::variance(&targets).max(1e-6);
                let data =
                    GpTrainingData::new(embeddings.clone(), scalar_rows.clone(), targets).unwrap();
                GpModel::from_parts(
                    GpHyperparams {
                        signal_variance: spread,
                        graph_lengthscale: 1.0,
                        scalar_lengthscales: vec![0.5],
                        noise_variance: 1e-10,
                    },
                    data,
                )
                .unwrap()
            })
            .collect();
        let surrogate = TrainedSurrogate::from_parts(
            "u".into(),
            dataset.scalar_names.clone(),
            1,
            0,
            cfg.lambda,
            cfg.lambda0(),
            cfg.sinkhorn,
            reference,
            cfg.swwl,
            pca,
            gps,
            dataset.fingerprint.clone(),
        )
        .unwrap();
        (surrogate, out)
    }

    #[test]
    fn predicting_a_training_input_reproduces_its_reconstruction() {
        let dataset = rank1_dataset(6);
        let (surrogate, out) = interpolating_surrogate(&dataset);
        for i in [0usize, 3, 5] {
            let pred = surrogate
                .predict(
                    &dataset.samples[i].graph,
                    &dataset.samples[i].scalars,
                    &PredictOptions::default(),
                )
                .unwrap();
            let recon = out.diagnostics.reconstructions[i].as_ref().unwrap();
            let scale = recon.amax().max(1.0);
            assert!(
                (&pred.signal - recon).amax() <= 1e-4 * scale,
                "sample {i}: {}",
                (&pred.signal - recon).amax()
            );
            assert!(pred.node_std.amax() <= 1e-3, "std {}", pred.node_std.amax());
        }
    }

    #[test]
    fn constant_signals_predict_the_constant_on_any_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 3.7;
        let samples: Vec<_> = (0..5)
            .map(|_| {
                let n = rng.gen_range(5..9);
                let xs: Vec<f64> = (0..n)
                    .map(|i| i as f64 / (n - 1) as f64 + rng.gen_range(-0.02..0.02))
                    .collect();
                let theta = rng.gen_range(0.0..1.0);
                (chain_graph(&xs), vec![c; n], vec![theta])
            })
            .collect();
        let dataset = make_dataset(samples);
        let reference = full_subsample_reference(&dataset, 1);
        let out = train(&dataset, "u", &reference, &fast_config(1, 1e-3), None).unwrap();

        // Transferred fields deviate from c only by the plans' marginal
        // tolerance, and back-transfer preserves weighted means, so the
        // prediction is constant to the same order on any geometry.
        let test_xs: Vec<f64> = (0..7).map(|i| 0.05 + i as f64 * 0.13).collect();
        let pred = out
            .surrogate
            .predict(&chain_graph(&test_xs), &[0.4], &PredictOptions::default())
            .unwrap();
        for v in pred.signal.iter() {
            assert!((v - c).abs() <= 1e-4 * c, "{v}");
        }
        assert!(pred.node_std.amax() <= 1e-3 * c);

        // Exactly constant transferred fields drop every component; the
        // zero-component surrogate must still predict (the mean field).
        let n_ref = reference.len();
        let exact = DMatrix::from_element(4, n_ref, c);
        let pca = fit_reduction("pca", &exact, &PcaConfig::default()).unwrap();
        assert_eq!(pca.latent_dim(), 0);
        let surrogate = TrainedSurrogate::from_parts(
            "u".into(),
            dataset.scalar_names.clone(),
            1,
            1,
            1e-3,
            1e-3,
            SinkhornConfig::default(),
            reference,
            SwwlConfig {
                n_projections: 4,
                n_quantiles: 8,
                seed: 0,
            },
            pca,
            Vec::new(),
            dataset.fingerprint.clone(),
        )
        .unwrap();
        let pred = surrogate
            .predict(&chain_graph(&test_xs), &[0.4], &PredictOptions::default())
            .unwrap();
        for v in pred.signal.iter() {
            assert!((v - c).abs() <= 1e-12 * c, "{v}");
        }
        assert_eq!(pred.node_std.amax(), 0.0);
    }

    #[test]
    fn zero_targets_predict_zero_with_prior_uncertainty() {
        let dataset = rank1_dataset(4);
        let reference = full_subsample_reference(&dataset, 0);
        let n_ref = reference.len();
        // One-component reducer around a zero mean plus a GP on zero
        // targets: posterior means vanish, deviations stay prior-sized.
        let unit = DVector::from_element(n_ref, 1.0 / (n_ref as f64).sqrt());
        let fields = DMatrix::from_fn(4, n_ref, |r, c| (r as f64 - 1.5) * unit[c]);
        let pca = fit_reduction(
            "pca",
            &fields,
            &PcaConfig {
                var_threshold: 0.95,
                min_components: 1,
            },
        )
        .unwrap();
        assert_eq!(pca.latent_dim(), 1);

        let swwl = SwwlConfig {
            n_projections: 4,
            n_quantiles: 8,
            seed: 0,
        };
        let spec = SwwlSpec::new(swwl, reference.dim()).unwrap();
        let embeddings: Vec<SwwlEmbedding> = dataset
            .samples
            .iter()
            .map(|s| spec.embed(&continuous_wl_embed(&s.graph, 0)).unwrap())
            .collect();
        let scalars: Vec<Vec<f64>> = dataset.samples.iter().map(|s| s.scalars.clone()).collect();
        let gp = GpModel::from_parts(
            GpHyperparams {
                signal_variance: 2.0,
                graph_lengthscale: 1.0,
                scalar_lengthscales: vec![0.3],
                noise_variance: 1e-6,
            },
            GpTrainingData::new(embeddings, scalars, vec![0.0; 4]).unwrap(),
        )
        .unwrap();
        let mean_zero_pca = {
            // Refit on fields centered at zero so the decoded mean is 0.
            let mut centered = fields.clone();
            let mean = fields.row_mean();
            for mut row in centered.row_iter_mut() {
                row -= &mean;
            }
            fit_reduction(
                "pca",
                &centered,
                &PcaConfig {
                    var_threshold: 0.95,
                    min_components: 1,
                },
            )
            .unwrap()
        };
        let surrogate = TrainedSurrogate::from_parts(
            "u".into(),
            dataset.scalar_names.clone(),
            1,
            0,
            1e-3,
            1e-3,
            SinkhornConfig::default(),
            reference,
            swwl,
            mean_zero_pca,
            vec![gp],
            dataset.fingerprint.clone(),
        )
        .unwrap();

        let pred = surrogate
            .predict(
                &dataset.samples[1].graph,
                &dataset.samples[1].scalars,
                &PredictOptions::default(),
            )
            .unwrap();
        assert!(pred.signal.amax() <= 1e-9, "{}", pred.signal.amax());
        assert!(pred.coeff_means.amax() <= 1e-9);
        // Far-from-zero prior deviation pushed onto the nodes.
        assert!(pred.node_std.amax() > 0.0);
    }

    #[test]
    fn rrmse_matches_hand_computations() {
        let zero = rrmse(
            &[DVector::from_vec(vec![1.0, 2.0])],
            &[DVector::from_vec(vec![1.0, 2.0])],
        )
        .unwrap();
        assert_eq!(zero.total, 0.0);

        let unit = rrmse(
            &[DVector::from_vec(vec![1.0, 1.0])],
            &[DVector::from_vec(vec![0.0, 0.0])],
        )
        .unwrap();
        assert!((unit.total - 1.0).abs() < 1e-15);
        assert!((unit.per_sample[0].unwrap() - 1.0).abs() < 1e-15);

        // Two samples: contributions 2/(2*4)=0.25 and 8/(2*16)=0.25;
        // total = sqrt((0.25 + 0.25)/2) = 0.5.
        let two = rrmse(
            &[
                DVector::from_vec(vec![2.0, 0.0]),
                DVector::from_vec(vec![0.0, 4.0]),
            ],
            &[
                DVector::from_vec(vec![1.0, 1.0]),
                DVector::from_vec(vec![2.0, 2.0]),
            ],
        )
        .unwrap();
        assert!((two.per_sample[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((two.per_sample[1].unwrap() - 0.5).abs() < 1e-15);
        assert!((two.total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rrmse_is_invariant_to_joint_scaling_and_excludes_zero_truths() {
        let y = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        let yhat = DVector::from_vec(vec![0.1, -1.0, 1.1]);
        let base = rrmse(std::slice::from_ref(&y), std::slice::from_ref(&yhat)).unwrap();
        for c in [2.0, -0.4, 1e6] {
            let scaled = rrmse(&[&y * c], &[&yhat * c]).unwrap();
            assert!(
                (scaled.total - base.total).abs() <= 1e-12 * base.total,
                "c={c}"
            );
        }

        let with_zero = rrmse(
            &[DVector::zeros(2), y.clone()],
            &[DVector::from_vec(vec![1.0, 1.0]), yhat.clone()],
        )
        .unwrap();
        assert_eq!(with_zero.excluded, vec![0]);
        assert!(with_zero.per_sample[0].is_none());
        assert!((with_zero.total - base.total).abs() <= 1e-15);

        assert!(rrmse(&[DVector::zeros(2)], &[DVector::zeros(2)]).is_err());
        assert!(rrmse(std::slice::from_ref(&y), &[DVector::zeros(2)]).is_err());
        assert!(rrmse(&[], &[]).is_err());
    }

    #[test]
    fn decomposition_of_an_interpolating_model_collapses_to_approximation() {
        let dataset = rank1_dataset(6);
        let (surrogate, _) = interpolating_surrogate(&dataset);
        let dec = error_decomposition(&surrogate, &dataset, None).unwrap();
        // Coefficients are reproduced at the training inputs, so the
        // regression stage contributes (almost) nothing.
        assert!(
            dec.transferred_prediction.total <= 1e-4,
            "transferred-prediction {}",
            dec.transferred_prediction.total
        );
        assert!(
            (dec.total.total - dec.approximation.total).abs()
                <= 1e-4 + 1e-3 * dec.approximation.total,
            "total {} vs approximation {}",
            dec.total.total,
            dec.approximation.total
        );
    }

    #[test]
    fn non_convergence_is_fatal_unless_samples_may_be_skipped() {
        let dataset = rank1_dataset(4);
        let reference = full_subsample_reference(&dataset, 0);
        let mut cfg = fast_config(0, 1e-3);
        // A solver budget of one iteration cannot converge.
        cfg.sinkhorn.max_iter = 1;
        cfg.sinkhorn.tol = 1e-14;
        let err = train(&dataset, "u", &reference, &cfg, None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::NonConvergence {
                    sample: Some(0),
                    ..
                }
            ),
            "{err:?}"
        );
        cfg.skip_bad_samples = true;
        let err = train(&dataset, "u", &reference, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Data { .. }), "{err:?}");
    }

    #[test]
    fn skipping_keeps_the_convergent_samples() {
        // Three easy samples and one needle-in-haystack instance that
        // cannot converge within the budget: widely spread points at a
        // regularization far below the cost scale.
        let easy_xs: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let hard_xs: Vec<f64> = (0..40).map(|i| (i as f64 * 7.3).sin() * 50.0).collect();
        let mk = |xs: &[f64], theta: f64| {
            let values = xs.iter().map(|&x| (x + theta).cos()).collect();
            (chain_graph(xs), values, vec![theta])
        };
        let dataset = make_dataset(vec![
            mk(&easy_xs, 0.0),
            mk(&hard_xs, 0.3),
            mk(&easy_xs, 0.6),
            mk(&easy_xs, 0.9),
        ]);
        let reference = prepare_reference(
            &dataset,
            &ReferenceConfig {
                sample: Some(0),
                ..Default::default()
            },
            0,
            SwwlConfig {
                n_projections: 4,
                n_quantiles: 8,
                seed: 0,
            },
            Path::new("."),
        )
        .unwrap();
        let mut cfg = fast_config(0, 1e-9);
        cfg.sinkhorn.max_iter = 400;
        cfg.sinkhorn.tol = 1e-9;
        cfg.skip_bad_samples = true;
        let out = train(&dataset, "u", &reference, &cfg, None).unwrap();
        assert_eq!(out.diagnostics.skipped.len(), 1);
        assert_eq!(out.diagnostics.skipped[0].0, 1);
        assert!(out.diagnostics.reconstructions[1].is_none());
        assert!(out.diagnostics.reconstructions[0].is_some());
        assert_eq!(out.diagnostics.per_kept_len(), 3);
    }

    impl TrainDiagnostics {
        fn per_kept_len(&self) -> usize {
            self.reconstructions.iter().filter(|r| r.is_some()).count()
        }
    }

    #[test]
    fn grid_search_prefers_the_smallest_lambda_on_identity_geometry() {
        let dataset = rank1_dataset(5);
        let spec = GridSpec {
            lambdas: vec![1e-4, 1e-3, 1e-2],
            wl_iterations: vec![0],
            references: vec![ReferenceConfig::default()],
        };
        let swwl = SwwlConfig {
            n_projections: 4,
            n_quantiles: 8,
            seed: 0,
        };
        let cells = grid_search(
            &dataset,
            "u",
            &spec,
            &SinkhornConfig::default(),
            swwl,
            Path::new("."),
            None,
        )
        .unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0].lambda, 1e-4);
        assert!(cells[0].criterion.unwrap() <= cells[1].criterion.unwrap());
        assert!(cells[1].criterion.unwrap() <= cells[2].criterion.unwrap());
        assert_eq!(cells[1].lambda, 1e-3);
        assert_eq!(cells[2].lambda, 1e-2);
    }

    #[test]
    fn grid_search_ranking_matches_an_independent_recomputation() {
        // Geometry-sensitive signals over varying chains; H in {0, 1}.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..5)
            .map(|k| {
                let n = 6 + (k % 3);
                let xs: Vec<f64> = (0..n)
                    .map(|i| i as f64 / (n - 1) as f64 + rng.gen_range(-0.03..0.03f64))
                    .collect();
                let theta = k as f64 * 0.2;
                let values = xs.iter().map(|&x| (3.0 * x).sin() + theta).collect();
                (chain_graph(&xs), values, vec![theta])
            })
            .collect();
        let dataset = make_dataset(samples);
        let spec = GridSpec {
            lambdas: vec![1e-3, 1e-2],
            wl_iterations: vec![0, 1],
            references: vec![ReferenceConfig::default()],
        };
        let swwl = SwwlConfig {
            n_projections: 4,
            n_quantiles: 8,
            seed: 0,
        };
        // Small absolute regularization on these geometries needs more
        // than the default solver budget.
        let sinkhorn = SinkhornConfig {
            max_iter: 300_000,
            ..Default::default()
        };
        let cells =
            grid_search(&dataset, "u", &spec, &sinkhorn, swwl, Path::new("."), None).unwrap();
        assert_eq!(cells.len(), 4);
        for cell in &cells {
            assert!(cell.failure.is_none(), "{:?}", cell.failure);
        }

        // Recompute each criterion directly from the solver primitives.
        for cell in &cells {
            let reference = full_subsample_reference(&dataset, cell.wl_iterations);
            let mut recons = Vec::new();
            let mut truths = Vec::new();
            for sample in &dataset.samples {
                let wl = continuous_wl_embed(&sample.graph, cell.wl_iterations);
                let measure = EmpiricalMeasure::from_wl(&wl);
                let plan =
                    crate::ot::sinkhorn_plan(&measure, reference.measure(), cell.lambda, &sinkhorn)
                        .unwrap();
                let y = sample.signals["u"].values().clone();
                let t = transfer_signal(&plan, &y).unwrap();
                recons.push(back_transfer(&plan, &t).unwrap());
                truths.push(y);
            }
            let expected = rrmse(&truths, &recons).unwrap().total;
            let got = cell.criterion.unwrap();
            assert!(
                (got - expected).abs() <= 1e-12 * expected.max(1e-12),
                "cell λ={} H={}: {} vs {}",
                cell.lambda,
                cell.wl_iterations,
                got,
                expected
            );
        }
        for w in cells.windows(2) {
            assert!(w[0].criterion.unwrap() <= w[1].criterion.unwrap());
        }
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let dataset = rank1_dataset(6);
        let reference = full_subsample_reference(&dataset, 1);
        let cfg = fast_config(1, 1e-3);
        let a = train(&dataset, "u", &reference, &cfg, None).unwrap();
        let b = train(&dataset, "u", &reference, &cfg, None).unwrap();
        assert_eq!(a.surrogate.pca(), b.surrogate.pca());
        assert_eq!(a.surrogate.gps().len(), b.surrogate.gps().len());
        for (ga, gb) in a.surrogate.gps().iter().zip(b.surrogate.gps()) {
            assert_eq!(ga.hyperparams(), gb.hyperparams());
        }
        let pred_a = a
            .surrogate
            .predict(
                &dataset.samples[2].graph,
                &dataset.samples[2].scalars,
                &PredictOptions::default(),
            )
            .unwrap();
        let pred_b = b
            .surrogate
            .predict(
                &dataset.samples[2].graph,
                &dataset.samples[2].scalars,
                &PredictOptions::default(),
            )
            .unwrap();
        assert_eq!(pred_a.signal, pred_b.signal);
        assert_eq!(pred_a.node_std, pred_b.node_std);
    }

    #[test]
    fn full_covariance_diagonal_matches_the_streamed_variances() {
        let dataset = rank1_dataset(6);
        let (surrogate, _) = interpolating_surrogate(&dataset);
        let test_xs: Vec<f64> = (0..8).map(|i| i as f64 / 7.0 + 0.01).collect();
        let pred = surrogate
            .predict(
                &chain_graph(&test_xs),
                &[0.35],
                &PredictOptions {
                    full_covariance: true,
                    cache: None,
                },
            )
            .unwrap();
        let cov = pred.full_covariance.as_ref().unwrap();
        for i in 0..pred.signal.len() {
            let var = pred.node_std[i] * pred.node_std[i];
            assert!(
                (cov[(i, i)] - var).abs() <= 1e-12 * (1.0 + var),
                "node {i}: {} vs {var}",
                cov[(i, i)]
            );
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected_with_context() {
        let dataset = rank1_dataset(4);
        let reference = full_subsample_reference(&dataset, 0);
        // Reference dimension disagrees with H=1 lifting.
        let err = train(&dataset, "u", &reference, &fast_config(1, 1e-3), None).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err:?}");

        let out = train(&dataset, "u", &reference, &fast_config(0, 1e-3), None).unwrap();
        let xs: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let err = out
            .surrogate
            .predict(&chain_graph(&xs), &[0.1, 0.2], &PredictOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err:?}");
        let err = train(&dataset, "v", &reference, &fast_config(0, 1e-3), None).unwrap_err();
        assert!(matches!(err, Error::Data { .. }), "{err:?}");
    }
}
