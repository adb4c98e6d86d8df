//! Global scores: TCAV aggregation, significance against permuted CAVs, the
//! Model Contrast Score with bootstrap intervals, counterfactual concept
//! influence and the n/d ablation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, BaselineSpec};
use crate::barsdata::{self, AugmentOp, AugmentRanges, BarsSample, BarsSet, Color, Concept, ConceptEdit, LabelledImages, Orientation};
use crate::cav::{self, Cav, CavConfig, ConceptSet, SignificanceResult};
use crate::error::{Error, Result};
use crate::netcore::{ActivationVector, Network, Samples};
use crate::scalar::Real;
use crate::streams;

// ---------------------------------------------------------------------------
// aggregation and statistics

/// Fraction of strictly positive CS values.
pub fn tcav_sign(cs_values: &[f64]) -> Result<f64> {
    if cs_values.is_empty() {
        return Err(Error::InvalidArgument("TCAV needs at least one value".into()));
    }
    Ok(cs_values.iter().filter(|v| **v > 0.0).count() as f64 / cs_values.len() as f64)
}

/// Mean ICS.
pub fn tcav_ics(ics_values: &[f64]) -> Result<f64> {
    if ics_values.is_empty() {
        return Err(Error::InvalidArgument("TCAV needs at least one value".into()));
    }
    Ok(ics_values.iter().sum::<f64>() / ics_values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    SignCs,
    Ics,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 2] = [ScoreMethod::SignCs, ScoreMethod::Ics];

    pub fn name(self) -> &'static str {
        match self {
            Self::SignCs => "sign_cs",
            Self::Ics => "ics",
        }
    }

    pub fn aggregate(self, values: &[f64]) -> Result<f64> {
        match self {
            Self::SignCs => tcav_sign(values),
            Self::Ics => tcav_ics(values),
        }
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "sign_cs" | "cs" | "tcav" => Ok(Self::SignCs),
            "ics" => Ok(Self::Ics),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Local,
    Global,
}

/// Observed scores next to scores from permuted CAVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub values: Vec<f64>,
    pub null_values: Vec<f64>,
    pub level: Level,
    pub p_value: Option<f64>,
}

/// Median with linear interpolation; `values` need not be sorted.
pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Percentile `q ∈ [0, 100]`, linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Two-sided test of the observed median against the null distribution:
/// the share of null values at least as far from the null median as the
/// observed median is, with add-one smoothing and Bonferroni correction.
pub fn score_significance(dist: &ScoreDistribution, alpha: f64, correction_n: usize) -> Result<SignificanceResult> {
    if dist.values.is_empty() || dist.null_values.is_empty() {
        return Err(Error::InvalidArgument("significance needs observed and null values".into()));
    }
    let null_med = median(&dist.null_values);
    let gap = (median(&dist.values) - null_med).abs();
    let exceed = dist.null_values.iter().filter(|v| (**v - null_med).abs() >= gap).count();
    Ok(SignificanceResult::from_count(
        exceed,
        dist.values.len(),
        dist.null_values.len(),
        alpha,
        correction_n,
    ))
}

/// How a score distribution is compared with its permuted-CAV null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTest {
    /// Two-sided rank test on medians ([`score_significance`]).
    #[default]
    Rank,
    /// Two-sided Welch t-test on means, the convention of the reference
    /// TCAV implementation ([`welch_significance`]).
    WelchT,
}

impl ScoreTest {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rank => "rank",
            Self::WelchT => "welch_t",
        }
    }

    pub fn run(self, dist: &ScoreDistribution, alpha: f64, correction_n: usize) -> Result<SignificanceResult> {
        match self {
            Self::Rank => score_significance(dist, alpha, correction_n),
            Self::WelchT => welch_significance(dist, alpha, correction_n),
        }
    }
}

impl std::str::FromStr for ScoreTest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "rank" | "permutation" => Ok(Self::Rank),
            "welch_t" | "t" | "ttest" => Ok(Self::WelchT),
            other => Err(Error::InvalidArgument(format!("unknown score test '{other}'"))),
        }
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

/// Two-sided Welch t-test of the observed mean against the null mean.
///
/// Equal means give p = 1. Two constant samples with different means give
/// the smallest positive double, since the statistic is unbounded.
pub fn welch_significance(dist: &ScoreDistribution, alpha: f64, correction_n: usize) -> Result<SignificanceResult> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if dist.values.is_empty() || dist.null_values.is_empty() {
        return Err(Error::InvalidArgument("significance needs observed and null values".into()));
    }
    let (n1, n2) = (dist.values.len() as f64, dist.null_values.len() as f64);
    let (m1, v1) = mean_var(&dist.values);
    let (m2, v2) = mean_var(&dist.null_values);
    let se2 = v1 / n1 + v2 / n2;
    let p = if (m1 - m2).abs() <= f64::EPSILON * (m1.abs() + m2.abs()) {
        1.0
    } else if se2 <= 0.0 {
        f64::MIN_POSITIVE
    } else {
        let t = (m1 - m2) / se2.sqrt();
        // Welch–Satterthwaite degrees of freedom; a constant side contributes nothing
        let term = |v: f64, n: f64| if n > 1.0 { (v / n).powi(2) / (n - 1.0) } else { 0.0 };
        let df = (se2 * se2 / (term(v1, n1) + term(v2, n2))).clamp(1.0, 1e9);
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::NonFinite(format!("t distribution: {e}")))?;
        (2.0 * dist.sf(t.abs())).clamp(f64::MIN_POSITIVE, 1.0)
    };
    let n_tests = correction_n.max(1);
    Ok(SignificanceResult {
        p_value: p,
        n_real: dist.values.len(),
        n_null: dist.null_values.len(),
        alpha,
        n_tests,
        significant: p < alpha / n_tests as f64,
    })
}

/// Model Contrast Score: relevant TCAV minus the largest irrelevant one.
pub fn mcs(tcav_relevant: f64, tcav_irrelevant_per_class: &[f64]) -> Result<f64> {
    let max = tcav_irrelevant_per_class
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidArgument("MCS needs the irrelevant model's class scores".into()))?;
    Ok(tcav_relevant - max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsReport {
    pub concept: String,
    pub layer: usize,
    pub method: ScoreMethod,
    pub baseline: String,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Per-bootstrap MCS values.
    pub values: Vec<f64>,
}

impl McsReport {
    pub fn from_values(concept: &str, layer: usize, method: ScoreMethod, baseline: &str, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no bootstrap MCS values".into()));
        }
        Ok(Self {
            concept: concept.to_string(),
            layer,
            method,
            baseline: baseline.to_string(),
            median: median(&values),
            ci_low: percentile(&values, 2.5),
            ci_high: percentile(&values, 97.5),
            values,
        })
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

// ---------------------------------------------------------------------------
// attribution over many CAVs

/// How local attributions are computed before aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSettings {
    pub method: ScoreMethod,
    pub baseline: BaselineSpec,
    pub steps: usize,
}

impl AttributionSettings {
    /// The baseline tag, or `none` for CS which has no baseline.
    pub fn baseline_tag(&self) -> &'static str {
        match self.method {
            ScoreMethod::SignCs => "none",
            ScoreMethod::Ics => self.baseline.tag(),
        }
    }

    pub fn new(method: ScoreMethod, baseline: BaselineSpec) -> Self {
        Self {
            method,
            baseline,
            steps: attribution::DEFAULT_STEPS,
        }
    }
}

/// Baseline rows for each activation row when the baseline does not depend
/// on the CAV; `None` for the informative kinds.
pub fn cav_free_baselines<T: Real>(
    net: &Network<T>,
    layer: usize,
    activations: ArrayView2<T>,
    spec: &BaselineSpec,
    reference: Option<ArrayView2<T>>,
) -> Result<Option<Array2<T>>> {
    if spec.needs_cav() {
        return Ok(None);
    }
    if spec.is_image() {
        let a = attribution::image_baseline_activation(spec, net, layer, reference)?;
        let rows = a.values.insert_axis(Axis(0));
        return Ok(Some(rows.broadcast(activations.raw_dim()).expect("one row").to_owned()));
    }
    let rows: Vec<Array1<T>> = (0..activations.nrows())
        .into_par_iter()
        .map(|i| {
            let a = ActivationVector::new(layer, activations.row(i).to_owned());
            attribution::make_baseline(spec, net, layer, &a, Default::default()).map(|b| b.values)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(activations.raw_dim());
    for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&r);
    }
    Ok(Some(out))
}

/// Local attributions of class `k`, one row per CAV and one column per
/// activation row.
pub fn attribution_matrix<T: Real>(
    net: &Network<T>,
    layer: usize,
    k: usize,
    activations: ArrayView2<T>,
    cavs: &[Cav<T>],
    settings: &AttributionSettings,
    reference: Option<ArrayView2<T>>,
) -> Result<Array2<f64>> {
    let n = activations.nrows();
    let mut out = Array2::zeros((cavs.len(), n));
    if n == 0 || cavs.is_empty() {
        return Ok(out);
    }
    match settings.method {
        ScoreMethod::SignCs => {
            let g = net.grad_head_wrt_activation_batch(k, layer, activations)?;
            for (mut row, cav) in out.rows_mut().into_iter().zip(cavs) {
                check_cav_layer(cav, layer)?;
                row.assign(&g.dot(&cav.unit).mapv(|v| v.as_f64()));
            }
        }
        ScoreMethod::Ics => {
            if let Some(base) = cav_free_baselines(net, layer, activations, &settings.baseline, reference)? {
                // the path integral does not involve the CAV: integrate once
                let g = attribution::integrated_path_gradients(net, k, layer, activations, base.view(), settings.steps)?;
                let diff = &activations - &base;
                for (mut row, cav) in out.rows_mut().into_iter().zip(cavs) {
                    check_cav_layer(cav, layer)?;
                    let proj = diff.dot(&cav.unit);
                    let grad = g.dot(&cav.unit);
                    row.assign(&(proj * grad).mapv(|v| v.as_f64()));
                }
            } else {
                let rows: Vec<Array1<f64>> = cavs
                    .par_iter()
                    .map(|cav| informative_row(net, layer, k, activations, cav, settings))
                    .collect::<Result<_>>()?;
                for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
                    dst.assign(&r);
                }
            }
        }
    }
    Ok(out)
}

fn check_cav_layer<T: Real>(cav: &Cav<T>, layer: usize) -> Result<()> {
    if cav.layer != layer {
        return Err(Error::InvalidArgument(format!("CAV for layer {} used at layer {layer}", cav.layer)));
    }
    Ok(())
}

fn informative_row<T: Real>(
    net: &Network<T>,
    layer: usize,
    k: usize,
    activations: ArrayView2<T>,
    cav: &Cav<T>,
    settings: &AttributionSettings,
) -> Result<Array1<f64>> {
    check_cav_layer(cav, layer)?;
    match settings.baseline {
        // the forgetting closed form is exact, no quadrature needed
        BaselineSpec::ConceptForgetting(strength) => {
            let mut base = activations.to_owned();
            for mut row in base.rows_mut() {
                let lambda = attribution::forgetting_lambda(strength, cav, row.view());
                row.scaled_add(-lambda, &cav.direction);
            }
            let p = net.head_from_layer_batch(layer, activations)?;
            let q = net.head_from_layer_batch(layer, base.view())?;
            Ok((&p.column(k) - &q.column(k)).mapv(|v| v.as_f64()))
        }
        BaselineSpec::ConceptOccluding => {
            let mut base = activations.to_owned();
            for mut row in base.rows_mut() {
                let b = attribution::occluding_baseline(cav, row.view());
                row.assign(&b);
            }
            let g = attribution::integrated_path_gradients(net, k, layer, activations, base.view(), settings.steps)?;
            let proj = (&activations - &base).dot(&cav.unit);
            Ok((proj * g.dot(&cav.unit)).mapv(|v| v.as_f64()))
        }
        _ => unreachable!("CAV-free baselines handled by the caller"),
    }
}

/// Per-sample distributions for local significance: column `i` of the real
/// matrix against column `i` of the permuted one.
pub fn local_distributions(real: &Array2<f64>, null: &Array2<f64>) -> Result<Vec<ScoreDistribution>> {
    if real.ncols() != null.ncols() {
        return Err(Error::dim("null attribution columns", real.ncols(), null.ncols()));
    }
    Ok(real
        .columns()
        .into_iter()
        .zip(null.columns())
        .map(|(r, n)| ScoreDistribution {
            values: r.to_vec(),
            null_values: n.to_vec(),
            level: Level::Local,
            p_value: None,
        })
        .collect())
}

/// One TCAV score per CAV.
pub fn tcav_per_cav(matrix: &Array2<f64>, method: ScoreMethod) -> Result<Vec<f64>> {
    matrix
        .rows()
        .into_iter()
        .map(|r| method.aggregate(r.as_slice().expect("standard layout")))
        .collect()
}

// ---------------------------------------------------------------------------
// BARS study data

/// A network and the concept it was trained to predict.
#[derive(Debug, Clone, Copy)]
pub struct BarsModel<'a, T> {
    pub net: &'a Network<T>,
    pub target: Concept,
    pub name: &'a str,
}

/// Hidden activations and top-1 predictions of one model on one image set.
#[derive(Debug, Clone)]
pub struct Captured<T> {
    pub activations: Vec<Array2<T>>,
    pub predictions: Vec<usize>,
}

const CAPTURE_CHUNK: usize = 128;

/// Runs `net` over `samples` in chunks, keeping hidden activations only.
pub fn capture<T: Real, S: Samples<T> + ?Sized>(net: &Network<T>, samples: &S) -> Result<Captured<T>> {
    let n = samples.len();
    let starts: Vec<usize> = (0..n).step_by(CAPTURE_CHUNK).collect();
    let parts: Vec<(Vec<Array2<T>>, Array2<T>)> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CAPTURE_CHUNK).min(n)).collect();
            net.capture_batch(samples.batch(&idx).view())
        })
        .collect::<Result<_>>()?;
    let mut activations: Vec<Array2<T>> = (0..net.n_hidden()).map(|l| Array2::zeros((0, net.layers()[l].out_dim()))).collect();
    let mut predictions = Vec::with_capacity(n);
    for (acts, probs) in parts {
        for (dst, a) in activations.iter_mut().zip(acts) {
            dst.append(Axis(0), a.view()).expect("same width");
        }
        predictions.extend(probs.rows().into_iter().map(|r| crate::netcore::argmax(r)));
    }
    Ok(Captured { activations, predictions })
}

/// Activations of both models on a CAV pool and an evaluation set.
pub struct BarsStudy<'a, T> {
    pub models: Vec<BarsModel<'a, T>>,
    pub pool: BarsSet,
    pub pool_labels: Vec<(Orientation, Color)>,
    pub pool_captured: Vec<Captured<T>>,
    pub eval_labels: Vec<(Orientation, Color)>,
    pub eval_captured: Vec<Captured<T>>,
}

impl<'a, T: Real> BarsStudy<'a, T> {
    pub fn new(models: Vec<BarsModel<'a, T>>, pool: BarsSet, eval: BarsSet) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("study needs at least one model".into()));
        }
        let pool_view = pool.labelled_by(Concept::Orientation);
        let eval_view = eval.labelled_by(Concept::Orientation);
        let pool_captured = models.iter().map(|m| capture(m.net, &pool_view)).collect::<Result<_>>()?;
        let eval_captured = models.iter().map(|m| capture(m.net, &eval_view)).collect::<Result<_>>()?;
        Ok(Self {
            pool_labels: (0..pool.len).map(|i| pool.labels(i)).collect(),
            eval_labels: (0..eval.len).map(|i| eval.labels(i)).collect(),
            models,
            pool,
            pool_captured,
            eval_captured,
        })
    }

    pub fn model_for(&self, target: Concept) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m.target == target)
            .ok_or_else(|| Error::Missing(format!("no model trained on {target}")))
    }

    fn check_layer(&self, model: usize, layer: usize) -> Result<()> {
        let net = self.models[model].net;
        if layer >= net.n_hidden() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range for {}",
                self.models[model].name
            )));
        }
        Ok(())
    }

    /// Positives have the positive concept value (vertical, green).
    pub fn concept_set(&self, model: usize, layer: usize, concept: Concept) -> Result<ConceptSet<T>> {
        self.check_layer(model, layer)?;
        let (pos, neg): (Vec<usize>, Vec<usize>) =
            (0..self.pool_labels.len()).partition(|&i| concept.label_of(self.pool_labels[i].0, self.pool_labels[i].1) == 1);
        let acts = &self.pool_captured[model].activations[layer];
        ConceptSet::new(concept.name(), layer, acts.select(Axis(0), &pos), acts.select(Axis(0), &neg))
    }

    /// Evaluation samples of `class` that the model predicts correctly.
    pub fn true_positives(&self, model: usize, class: usize) -> Result<Vec<usize>> {
        let m = &self.models[model];
        let preds = &self.eval_captured[model].predictions;
        let tp: Vec<usize> = (0..self.eval_labels.len())
            .filter(|&i| {
                let (o, c) = self.eval_labels[i];
                m.target.label_of(o, c) == class && preds[i] == class
            })
            .collect();
        if tp.is_empty() {
            return Err(Error::EmptyTruePositives {
                model: m.name.to_string(),
                class,
            });
        }
        Ok(tp)
    }

    pub fn tp_activations(&self, model: usize, layer: usize, class: usize) -> Result<Array2<T>> {
        self.check_layer(model, layer)?;
        let tp = self.true_positives(model, class)?;
        Ok(self.eval_captured[model].activations[layer].select(Axis(0), &tp))
    }

    /// Bootstrap CAVs; the seed depends on the concept and layer only, so both
    /// models resample the same images.
    pub fn bootstrap_cavs(
        &self,
        model: usize,
        layer: usize,
        concept: Concept,
        k: usize,
        cfg: &CavConfig,
        seed: u64,
    ) -> Result<Vec<Cav<T>>> {
        let cs = self.concept_set(model, layer, concept)?;
        cav::bootstrap_cavs(&cs, k, cfg, cav_seed(seed, concept, layer))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn permuted_cavs(
        &self,
        model: usize,
        layer: usize,
        concept: Concept,
        k: usize,
        n_perm: usize,
        cfg: &CavConfig,
        seed: u64,
    ) -> Result<Vec<Cav<T>>> {
        let cs = self.concept_set(model, layer, concept)?;
        cav::permuted_cavs(&cs, k, n_perm, cfg, cav_seed(seed, concept, layer))
    }

    /// One TCAV score per CAV for `class` on the model's true positives.
    pub fn tcav_scores(
        &self,
        model: usize,
        layer: usize,
        class: usize,
        cavs: &[Cav<T>],
        settings: &AttributionSettings,
        reference: Option<ArrayView2<T>>,
    ) -> Result<Vec<f64>> {
        let acts = self.tp_activations(model, layer, class)?;
        let m = attribution_matrix(self.models[model].net, layer, class, acts.view(), cavs, settings, reference)?;
        tcav_per_cav(&m, settings.method)
    }
}

pub fn cav_seed(seed: u64, concept: Concept, layer: usize) -> u64 {
    streams::derive_seed(seed, &format!("cavs-{}", concept.name()), layer as u64)
}

/// Bootstrapped MCS given CAVs already fitted in both models (index `k` of
/// each list forms one bootstrap pair).
#[allow(clippy::too_many_arguments)]
pub fn mcs_from_cavs<T: Real>(
    study: &BarsStudy<'_, T>,
    relevant: usize,
    irrelevant: usize,
    concept: Concept,
    layer: usize,
    relevant_cavs: &[Cav<T>],
    irrelevant_cavs: &[Cav<T>],
    settings: &AttributionSettings,
    reference: Option<ArrayView2<T>>,
) -> Result<McsReport> {
    if relevant_cavs.len() != irrelevant_cavs.len() || relevant_cavs.is_empty() {
        return Err(Error::InvalidArgument(
            "MCS needs the same positive number of CAVs for both models".into(),
        ));
    }
    if study.models[relevant].target != concept {
        log::warn!("relevant model {} is not trained on {concept}", study.models[relevant].name);
    }
    // the positive concept value is the class where the concept is relevant
    let rel = study.tcav_scores(relevant, layer, 1, relevant_cavs, settings, reference)?;
    let n_classes = study.models[irrelevant].net.n_classes();
    let irr: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| study.tcav_scores(irrelevant, layer, c, irrelevant_cavs, settings, reference))
        .collect::<Result<_>>()?;
    let values = (0..rel.len())
        .map(|k| mcs(rel[k], &irr.iter().map(|v| v[k]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    McsReport::from_values(concept.name(), layer, settings.method, settings.baseline_tag(), values)
}

/// Options of the MCS procedure besides the models and the concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McsOptions {
    /// Images for CAV training (step 1); the evaluation set has the same size.
    pub n_images: usize,
    /// Bootstrap CAVs per model (step 3).
    pub k: usize,
    pub cav: CavConfig,
}

impl Default for McsOptions {
    fn default() -> Self {
        Self {
            n_images: 1000,
            k: 100,
            cav: CavConfig::default(),
        }
    }
}

/// The six-step bootstrap MCS: sample images, capture both models, fit `K`
/// bootstrap CAVs per model, score them on unseen true positives, take the
/// per-bootstrap differences and their 2.5/97.5 percentiles.
#[allow(clippy::too_many_arguments)]
pub fn mcs_bootstrap<T: Real>(
    f1: BarsModel<'_, T>,
    f2: BarsModel<'_, T>,
    concept: Concept,
    layer: usize,
    settings: &AttributionSettings,
    opts: &McsOptions,
    seed: u64,
) -> Result<McsReport> {
    if opts.n_images == 0 || opts.k == 0 {
        return Err(Error::InvalidArgument("MCS needs N >= 1 and K >= 1".into()));
    }
    let params = barsdata::BarsParams::default();
    let pool = BarsSet::new(params, streams::derive_seed(seed, "mcs-pool", 0), opts.n_images)?;
    let eval = BarsSet::new(params, streams::derive_seed(seed, "mcs-eval", 0), opts.n_images)?;
    let study = BarsStudy::new(vec![f1, f2], pool, eval)?;
    let rel = study.bootstrap_cavs(0, layer, concept, opts.k, &opts.cav, seed)?;
    let irr = study.bootstrap_cavs(1, layer, concept, opts.k, &opts.cav, seed)?;
    mcs_from_cavs(&study, 0, 1, concept, layer, &rel, &irr, settings, None)
}

// ---------------------------------------------------------------------------
// counterfactual influence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub concept: String,
    /// `g_C(x)` per sample.
    pub local: Vec<f64>,
    /// `G_C`, the mean of `local`.
    pub global: f64,
}

/// `g_C(x) = max` over pairs of concept values and over classes of the
/// change in predicted probability between the two counterfactuals.
pub fn concept_influence<T: Real>(net: &Network<T>, samples: &[BarsSample], concept: Concept) -> Result<InfluenceReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("influence needs samples".into()));
    }
    let values = concept.domain_size();
    let local: Vec<f64> = samples
        .par_chunks(CAPTURE_CHUNK / values)
        .map(|chunk| -> Result<Vec<f64>> {
            let variants: Vec<BarsSample> = chunk
                .iter()
                .flat_map(|s| (0..values).map(move |v| barsdata::counterfactual(s, ConceptEdit::set(concept, v))))
                .collect();
            let x: Array2<T> = LabelledImages {
                samples: &variants,
                concept,
            }
            .batch(&(0..variants.len()).collect::<Vec<_>>());
            let p = net.predict_proba(x.view())?;
            Ok((0..chunk.len())
                .map(|i| {
                    let mut g = 0.0f64;
                    for a in 0..values {
                        for b in a + 1..values {
                            let (ra, rb) = (p.row(i * values + a), p.row(i * values + b));
                            for (pa, pb) in ra.iter().zip(rb) {
                                g = g.max((*pa - *pb).abs().as_f64());
                            }
                        }
                    }
                    g
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let global = local.iter().sum::<f64>() / local.len() as f64;
    Ok(InfluenceReport {
        concept: concept.name().to_string(),
        local,
        global,
    })
}

// ---------------------------------------------------------------------------
// n/d ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NdOptions {
    /// CAV draws per ratio.
    pub k: usize,
    /// Augmented copies added per original when augmentation is on.
    pub augment_copies: usize,
    pub augment_ops: Vec<AugmentOp>,
    pub augment_ranges: AugmentRanges,
    pub cav: CavConfig,
}

impl Default for NdOptions {
    fn default() -> Self {
        Self {
            k: 50,
            augment_copies: 10,
            augment_ops: AugmentOp::ALL.to_vec(),
            augment_ranges: AugmentRanges::default(),
            cav: CavConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdRow {
    pub ratio: f64,
    /// Original images per side.
    pub n_per_side: usize,
    pub augmented: bool,
    /// Rows per side the CAVs were trained on, augmentations included.
    pub n_train_per_side: usize,
    pub report: McsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdTable {
    pub rows: Vec<NdRow>,
    /// Median MCS never decreases as n/d grows.
    pub monotone: bool,
}

/// MCS (attribution settings as given) for CAVs trained on `n = ratio·d`
/// images per side, drawn afresh from the study pool for every one of the `k`
/// draws. With augmentation, each drawn image also contributes
/// `augment_copies` augmented versions.
#[allow(clippy::too_many_arguments)]
pub fn nd_ablation<T: Real>(
    study: &BarsStudy<'_, T>,
    concept: Concept,
    layer: usize,
    ratios: &[f64],
    augmentation: bool,
    settings: &AttributionSettings,
    opts: &NdOptions,
    seed: u64,
) -> Result<NdTable> {
    let relevant = study.model_for(concept)?;
    let irrelevant = (0..study.models.len())
        .find(|&m| m != relevant)
        .ok_or_else(|| Error::Missing("n/d ablation needs a second model".into()))?;
    let d = study.models[relevant].net.layer_width(layer)?;
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..study.pool_labels.len()).partition(|&i| concept.label_of(study.pool_labels[i].0, study.pool_labels[i].1) == 1);
    let mut rows = Vec::with_capacity(ratios.len());
    for (ri, &ratio) in ratios.iter().enumerate() {
        if !(ratio > 0.0) {
            return Err(Error::InvalidArgument(format!("n/d ratio must be > 0, got {ratio}")));
        }
        let n = ((ratio * d as f64).round() as usize).max(2);
        if n > pos.len().min(neg.len()) {
            return Err(Error::InvalidArgument(format!(
                "n/d = {ratio} needs {n} images per side, pool has {} / {}",
                pos.len(),
                neg.len()
            )));
        }
        let draws: Vec<(Cav<T>, Cav<T>)> = (0..opts.k)
            .into_par_iter()
            .map(|k| {
                let mut rng = streams::stream(seed, &format!("nd-draw-{ri}"), k as u64);
                let p: Vec<usize> = sample_indices(&mut rng, pos.len(), n).into_iter().map(|i| pos[i]).collect();
                let q: Vec<usize> = sample_indices(&mut rng, neg.len(), n).into_iter().map(|i| neg[i]).collect();
                let split = streams::derive_seed(seed, &format!("nd-split-{ri}"), k as u64);
                let fit = |model: usize| -> Result<Cav<T>> {
                    let (pa, na) = if augmentation {
                        (
                            augmented_activations(study, model, layer, &p, opts, seed, k)?,
                            augmented_activations(study, model, layer, &q, opts, seed, k)?,
                        )
                    } else {
                        let acts = &study.pool_captured[model].activations[layer];
                        (acts.select(Axis(0), &p), acts.select(Axis(0), &q))
                    };
                    cav::fit_cav(&ConceptSet::new(concept.name(), layer, pa, na)?, &opts.cav, split)
                };
                Ok((fit(relevant)?, fit(irrelevant)?))
            })
            .collect::<Result<_>>()?;
        let (rel, irr): (Vec<Cav<T>>, Vec<Cav<T>>) = draws.into_iter().unzip();
        let report = mcs_from_cavs(study, relevant, irrelevant, concept, layer, &rel, &irr, settings, None)?;
        rows.push(NdRow {
            ratio,
            n_per_side: n,
            augmented: augmentation,
            n_train_per_side: if augmentation { n * (1 + opts.augment_copies) } else { n },
            report,
        });
    }
    let mut by_ratio: Vec<&NdRow> = rows.iter().collect();
    by_ratio.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let monotone = by_ratio.windows(2).all(|w| w[1].report.median >= w[0].report.median);
    Ok(NdTable { rows, monotone })
}

/// Activations of the pool images `indices` followed by their augmented copies.
fn augmented_activations<T: Real>(
    study: &BarsStudy<'_, T>,
    model: usize,
    layer: usize,
    indices: &[usize],
    opts: &NdOptions,
    seed: u64,
    draw: usize,
) -> Result<Array2<T>> {
    let originals = study.pool_captured[model].activations[layer].select(Axis(0), indices);
    let mut images = Vec::with_capacity(indices.len() * opts.augment_copies);
    for &i in indices {
        let sample = study.pool.sample(i);
        for c in 0..opts.augment_copies {
            let s = streams::derive_seed(seed, &format!("nd-augment-{draw}-{i}"), c as u64);
            images.push(barsdata::augment(&sample, &opts.augment_ops, &opts.augment_ranges, s)?);
        }
    }
    if images.is_empty() {
        return Ok(originals);
    }
    let captured = capture(
        study.models[model].net,
        &LabelledImages {
            samples: &images,
            concept: Concept::Orientation,
        },
    )?;
    let mut out = originals;
    out.append(Axis(0), captured.activations[layer].view()).expect("same width");
    Ok(out)
}
