//! Concept Activation Vectors.
//!
//! A CAV is the weight vector of a regularised logistic classifier separating
//! concept activations (positives) from control activations (negatives) in
//! one layer. Both the raw-scale weights with their bias and the unit-normed
//! direction are kept: attribution uses the unit direction, the informative
//! baselines use the raw hyperplane.
//!
//! Held-out AUC comes from a stratified 80/20 split over distinct samples, so
//! bootstrap duplicates never straddle the split.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::streams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularization {
    L2,
    /// `strength · (ρ‖w‖₁ + (1−ρ)/2 ‖w‖²)` with `ρ = l1_ratio`.
    ElasticNet {
        l1_ratio: f64,
    },
}

/// Optimiser for the logistic fit. `Auto` picks Newton for pure L2 and FISTA
/// otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Auto,
    Newton,
    Fista,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavConfig {
    pub regularization: Regularization,
    pub solver: Solver,
    pub strength: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub heldout_fraction: f64,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            regularization: Regularization::L2,
            solver: Solver::Auto,
            strength: 1e-3,
            tolerance: 1e-8,
            max_iterations: 5000,
            heldout_fraction: 0.2,
        }
    }
}

impl CavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0) {
            return Err(Error::InvalidArgument("regularization strength must be > 0".into()));
        }
        if let Regularization::ElasticNet { l1_ratio } = self.regularization {
            if !(0.0..=1.0).contains(&l1_ratio) {
                return Err(Error::InvalidArgument("l1_ratio must be in [0, 1]".into()));
            }
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::InvalidArgument("heldout fraction must be in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        Ok(())
    }

    fn l1_ratio(&self) -> f64 {
        match self.regularization {
            Regularization::L2 => 0.0,
            Regularization::ElasticNet { l1_ratio } => l1_ratio,
        }
    }
}

/// Activations of concept examples (positives) and controls (negatives) at
/// one layer, one sample per row.
#[derive(Debug, Clone)]
pub struct ConceptSet<T> {
    pub name: String,
    pub layer: usize,
    pub positives: Array2<T>,
    pub negatives: Array2<T>,
}

impl<T: Real> ConceptSet<T> {
    pub fn new(name: impl Into<String>, layer: usize, positives: Array2<T>, negatives: Array2<T>) -> Result<Self> {
        if positives.nrows() == 0 || negatives.nrows() == 0 {
            return Err(Error::InvalidArgument("concept set needs both positives and negatives".into()));
        }
        if positives.ncols() != negatives.ncols() {
            return Err(Error::dim("concept activations", positives.ncols(), negatives.ncols()));
        }
        Ok(Self {
            name: name.into(),
            layer,
            positives,
            negatives,
        })
    }

    pub fn dim(&self) -> usize {
        self.positives.ncols()
    }

    fn pooled(&self) -> Array2<T> {
        ndarray::concatenate(Axis(0), &[self.positives.view(), self.negatives.view()]).expect("same width")
    }

    fn n_pos(&self) -> usize {
        self.positives.nrows()
    }

    fn n_neg(&self) -> usize {
        self.negatives.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub bootstrap: Option<usize>,
    pub permuted: bool,
    pub permutation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Cav<T> {
    pub layer: usize,
    /// Raw classifier weights `w`; positives score `wᵀa + b > 0` on average.
    pub direction: Array1<T>,
    pub bias: T,
    /// `w / ‖w‖₂`.
    pub unit: Array1<T>,
    pub heldout_auc: f64,
    pub provenance: Provenance,
    pub iterations: usize,
}

impl<T: Real> Cav<T> {
    /// Builds a CAV from an explicit hyperplane.
    pub fn from_hyperplane(layer: usize, direction: Array1<T>, bias: T) -> Result<Self> {
        let norm = direction.dot(&direction).sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::DegenerateConcept("CAV direction has zero or non-finite norm".into()));
        }
        Ok(Self {
            layer,
            unit: direction.mapv(|v| v / norm),
            direction,
            bias,
            heldout_auc: f64::NAN,
            provenance: Provenance::default(),
            iterations: 0,
        })
    }

    /// `wᵀa + b`.
    pub fn score(&self, a: ArrayView1<T>) -> T {
        self.direction.dot(&a) + self.bias
    }

    pub fn norm(&self) -> T {
        self.direction.dot(&self.direction).sqrt()
    }
}

/// Outcome of a permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub n_real: usize,
    pub n_null: usize,
    pub alpha: f64,
    pub n_tests: usize,
    pub significant: bool,
}

impl SignificanceResult {
    pub(crate) fn from_count(exceed: usize, n_real: usize, n_null: usize, alpha: f64, n_tests: usize) -> Self {
        let p_value = (1 + exceed) as f64 / (1 + n_null) as f64;
        let n_tests = n_tests.max(1);
        Self {
            p_value,
            n_real,
            n_null,
            alpha,
            n_tests,
            significant: p_value < alpha / n_tests as f64,
        }
    }
}

// ---------------------------------------------------------------------------
// fitting

/// One training row: index into the pooled matrix and its label.
#[derive(Debug, Clone, Copy)]
struct Entry {
    row: usize,
    positive: bool,
}

/// Fits a CAV on the full concept set with an internal held-out split.
pub fn fit_cav<T: Real>(cs: &ConceptSet<T>, cfg: &CavConfig, seed: u64) -> Result<Cav<T>> {
    cfg.validate()?;
    let pooled = cs.pooled();
    check_not_degenerate(pooled.view())?;
    let entries = identity_entries(cs);
    fit_entries(pooled.view(), cs.layer, &entries, cfg, seed)
}

fn identity_entries<T: Real>(cs: &ConceptSet<T>) -> Vec<Entry> {
    (0..cs.n_pos())
        .map(|row| Entry { row, positive: true })
        .chain((0..cs.n_neg()).map(|i| Entry {
            row: cs.n_pos() + i,
            positive: false,
        }))
        .collect()
}

fn check_not_degenerate<T: Real>(pooled: ArrayView2<T>) -> Result<()> {
    let first = pooled.row(0);
    if pooled.rows().into_iter().all(|r| r == first) {
        return Err(Error::DegenerateConcept("all activations are identical".into()));
    }
    Ok(())
}

fn fit_entries<T: Real>(pooled: ArrayView2<T>, layer: usize, entries: &[Entry], cfg: &CavConfig, split_seed: u64) -> Result<Cav<T>> {
    let (train, test) = split_entries(entries, cfg.heldout_fraction, split_seed)?;
    let x = gather(pooled, &train);
    let y: Vec<bool> = train.iter().map(|e| e.positive).collect();
    let (mut w, mut b, iterations) = logistic_fit(x.view(), &y, cfg);
    if w.iter().all(|v| *v == T::zero()) {
        return Err(Error::DegenerateConcept(
            "classifier weights collapsed to zero (regularization too strong or no signal)".into(),
        ));
    }
    // positives must score higher on average
    let scores = x.dot(&w) + b;
    let (mut sp, mut np, mut sn, mut nn) = (T::zero(), 0usize, T::zero(), 0usize);
    for (s, &pos) in scores.iter().zip(&y) {
        if pos {
            sp += *s;
            np += 1;
        } else {
            sn += *s;
            nn += 1;
        }
    }
    if sp / T::lit(np as f64) < sn / T::lit(nn as f64) {
        w.mapv_inplace(|v| -v);
        b = -b;
    }
    let mut cav = Cav::from_hyperplane(layer, w, b)?;
    cav.iterations = iterations;
    let test_x = gather(pooled, &test);
    let test_scores: Vec<f64> = test_x.dot(&cav.direction).iter().map(|s| (*s + cav.bias).as_f64()).collect();
    let test_y: Vec<bool> = test.iter().map(|e| e.positive).collect();
    cav.heldout_auc = roc_auc(&test_scores, &test_y);
    Ok(cav)
}

fn gather<T: Real>(pooled: ArrayView2<T>, entries: &[Entry]) -> Array2<T> {
    let mut out = Array2::zeros((entries.len(), pooled.ncols()));
    for (mut dst, e) in out.rows_mut().into_iter().zip(entries) {
        dst.assign(&pooled.row(e.row));
    }
    out
}

/// Stratified split over distinct rows. A row that appears several times (a
/// bootstrap duplicate) lands entirely on one side.
fn split_entries(entries: &[Entry], heldout: f64, seed: u64) -> Result<(Vec<Entry>, Vec<Entry>)> {
    // group label = label of first occurrence
    let mut groups: BTreeMap<usize, bool> = BTreeMap::new();
    for e in entries {
        groups.entry(e.row).or_insert(e.positive);
    }
    let mut rng = streams::stream(seed, "cav-split", 0);
    let mut test_rows = std::collections::BTreeSet::new();
    for label in [true, false] {
        let mut rows: Vec<usize> = groups.iter().filter(|(_, &l)| l == label).map(|(&r, _)| r).collect();
        if rows.len() < 2 {
            return Err(Error::DegenerateConcept(format!(
                "need at least two distinct {} samples, got {}",
                if label { "positive" } else { "negative" },
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let n_test = ((rows.len() as f64 * heldout).round() as usize).clamp(1, rows.len() - 1);
        test_rows.extend(rows.into_iter().take(n_test));
    }
    let (test, train): (Vec<Entry>, Vec<Entry>) = entries.iter().partition(|e| test_rows.contains(&e.row));
    // held-out rows are scored once each
    let mut seen = std::collections::BTreeSet::new();
    let test = test.into_iter().filter(|e| seen.insert(e.row)).collect::<Vec<_>>();
    if !(train.iter().any(|e| e.positive) && train.iter().any(|e| !e.positive)) {
        return Err(Error::DegenerateConcept("training split lost a class".into()));
    }
    Ok((train, test))
}

/// Regularised logistic regression; the bias is not penalised. Pure L2 uses
/// damped Newton steps, anything with an L1 part uses FISTA.
///
/// Returns `(w, b, iterations)`.
pub(crate) fn logistic_fit<T: Real>(x: ArrayView2<T>, y: &[bool], cfg: &CavConfig) -> (Array1<T>, T, usize) {
    match cfg.solver {
        Solver::Newton if cfg.l1_ratio() == 0.0 => newton_fit(x, y, cfg),
        Solver::Auto if cfg.l1_ratio() == 0.0 => newton_fit(x, y, cfg),
        _ => fista_fit(x, y, cfg),
    }
}

fn softplus<T: Real>(u: T) -> T {
    u.max(T::zero()) + (-u.abs()).exp().ln_1p()
}

fn logistic_objective<T: Real>(x: ArrayView2<T>, targets: &Array1<T>, w: &Array1<T>, b: T, l2: T) -> T {
    let z = x.dot(w) + b;
    let n = T::lit(x.nrows() as f64);
    let loss: T = z
        .iter()
        .zip(targets)
        .map(|(&zi, &ti)| if ti > T::zero() { softplus(-zi) } else { softplus(zi) })
        .sum();
    loss / n + l2 * w.dot(w) / T::lit(2.0)
}

/// Newton's method with Armijo backtracking on the L2-penalised logistic loss.
fn newton_fit<T: Real>(x: ArrayView2<T>, y: &[bool], cfg: &CavConfig) -> (Array1<T>, T, usize) {
    let (n, d) = x.dim();
    let inv_n = T::lit(1.0 / n as f64);
    let l2 = T::lit(cfg.strength);
    let targets: Array1<T> = y.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
    let mut xa = Array2::<T>::ones((n, d + 1));
    xa.slice_mut(ndarray::s![.., ..d]).assign(&x);
    let mut theta = Array1::<T>::zeros(d + 1);
    let tol = T::lit(cfg.tolerance);
    let mut iterations = 0;
    let mut f = logistic_objective(x, &targets, &theta.slice(ndarray::s![..d]).to_owned(), T::zero(), l2);
    for it in 1..=cfg.max_iterations {
        iterations = it;
        let z = xa.dot(&theta);
        let p = z.mapv(|v| v.sigmoid());
        let resid = (&p - &targets) * inv_n;
        let mut grad = xa.t().dot(&resid);
        let mut hess = {
            let sw = p.mapv(|v| (v * (T::one() - v) * inv_n).sqrt());
            let xs = &xa * &sw.insert_axis(Axis(1));
            xs.t().dot(&xs)
        };
        for j in 0..d {
            grad[j] += l2 * theta[j];
            hess[[j, j]] += l2;
        }
        let Some(step_dir) = cholesky_solve(hess, &grad) else {
            break;
        };
        let slope = grad.dot(&step_dir);
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - &(&step_dir * t);
            let fc = logistic_objective(x, &targets, &cand.slice(ndarray::s![..d]).to_owned(), cand[d], l2);
            if fc <= f - T::lit(1e-4) * t * slope {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t /= T::lit(2.0);
        }
        let scale = theta.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let moved = step_dir.iter().fold(T::zero(), |m, v| m.max(v.abs())) * t;
        if !accepted || moved <= tol * scale {
            break;
        }
    }
    let b = theta[d];
    (theta.slice(ndarray::s![..d]).to_owned(), b, iterations)
}

/// Solves `A x = r` for symmetric positive definite `A`.
fn cholesky_solve<T: Real>(mut a: Array2<T>, r: &Array1<T>) -> Option<Array1<T>> {
    let n = r.len();
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= a[[j, k]] * a[[j, k]];
        }
        if !(diag > T::zero()) {
            return None;
        }
        let ljj = diag.sqrt();
        a[[j, j]] = ljj;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / ljj;
        }
    }
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut v = r[i];
        for k in 0..i {
            v -= a[[i, k]] * y[k];
        }
        y[i] = v / a[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= a[[k, i]] * x[k];
        }
        x[i] = v / a[[i, i]];
    }
    Some(x)
}

/// Accelerated proximal gradient descent (FISTA with gradient restarts).
fn fista_fit<T: Real>(x: ArrayView2<T>, y: &[bool], cfg: &CavConfig) -> (Array1<T>, T, usize) {
    let (n, d) = x.dim();
    let inv_n = T::lit(1.0 / n as f64);
    let rho = cfg.l1_ratio();
    let l2 = T::lit(cfg.strength * (1.0 - rho));
    let l1 = T::lit(cfg.strength * rho);
    let targets: Array1<T> = y.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();

    let lipschitz = T::lit(0.25) * spectral_bound(x) + l2;
    let step = T::one() / lipschitz;

    let mut w = Array1::<T>::zeros(d);
    let mut b = T::zero();
    let mut w_prev = w.clone();
    let mut b_prev: T;
    let mut yw = w.clone();
    let mut yb = b;
    let mut t = T::one();
    let tol = T::lit(cfg.tolerance);
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        // gradient of the smooth part at the extrapolated point
        let z = x.dot(&yw) + yb;
        let resid = Array1::from_shape_fn(n, |i| (z[i].sigmoid() - targets[i]) * inv_n);
        let gw = x.t().dot(&resid) + &yw * l2;
        let gb = resid.sum();

        let mut w_new = &yw - &(&gw * step);
        if l1 > T::zero() {
            let thr = l1 * step;
            w_new.mapv_inplace(|v| soft_threshold(v, thr));
        }
        let b_new = yb - step * gb;

        // restart momentum when the step opposes the previous direction
        let restart = (&yw - &w_new).dot(&(&w_new - &w)) + (yb - b_new) * (b_new - b) > T::zero();
        let t_new = if restart {
            T::one()
        } else {
            (T::one() + (T::one() + T::lit(4.0) * t * t).sqrt()) / T::lit(2.0)
        };
        let momentum = if restart { T::zero() } else { (t - T::one()) / t_new };

        w_prev.assign(&w);
        b_prev = b;
        w = w_new;
        b = b_new;
        yw = &w + &((&w - &w_prev) * momentum);
        yb = b + (b - b_prev) * momentum;
        t = t_new;

        let scale = w.iter().fold(b.abs(), |m, v| m.max(v.abs())).max(T::one());
        let change = w
            .iter()
            .zip(w_prev.iter())
            .fold((b - b_prev).abs(), |m, (a, c)| m.max((*a - *c).abs()));
        if change <= tol * scale {
            break;
        }
    }
    (w, b, iterations)
}

#[inline]
fn soft_threshold<T: Real>(v: T, thr: T) -> T {
    if v > thr {
        v - thr
    } else if v < -thr {
        v + thr
    } else {
        T::zero()
    }
}

/// Upper bound on `λ_max([X 1]ᵀ[X 1] / n)` by power iteration with a safety
/// margin.
fn spectral_bound<T: Real>(x: ArrayView2<T>) -> T {
    let (n, d) = x.dim();
    let inv_n = T::lit(1.0 / n as f64);
    let mut v = Array1::from_elem(d + 1, T::one());
    let mut lambda = T::zero();
    for _ in 0..50 {
        let xv = x.dot(&v.slice(ndarray::s![..d])) + v[d];
        let mut next = Array1::zeros(d + 1);
        next.slice_mut(ndarray::s![..d]).assign(&(x.t().dot(&xv) * inv_n));
        next[d] = xv.sum() * inv_n;
        let norm = next.dot(&next).sqrt();
        if !(norm > T::zero()) {
            return T::one();
        }
        let new_lambda = norm / v.dot(&v).sqrt();
        v = next / norm;
        if (new_lambda - lambda).abs() <= T::lit(1e-6) * new_lambda {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    (lambda * T::lit(1.05)).max(T::lit(1e-12))
}

/// Area under the ROC curve (Mann–Whitney, ties counted one half).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

// ---------------------------------------------------------------------------
// bootstrap and permutation

/// With-replacement resample of each side, same sizes. Sides with at least two
/// distinct samples are redrawn until the resample keeps two distinct ones,
/// which the held-out split needs.
fn resample<T: Real>(cs: &ConceptSet<T>, seed: u64, b: usize) -> Vec<Entry> {
    let mut rng = streams::stream(seed, "cav-bootstrap", b as u64);
    let mut draw_side = |offset: usize, n: usize, positive: bool| -> Vec<Entry> {
        loop {
            let rows: Vec<usize> = (0..n).map(|_| offset + rng.random_range(0..n)).collect();
            let distinct = rows.iter().any(|&r| r != rows[0]);
            if distinct || n < 2 {
                return rows.into_iter().map(|row| Entry { row, positive }).collect();
            }
        }
    };
    let mut entries = draw_side(0, cs.n_pos(), true);
    entries.extend(draw_side(cs.n_pos(), cs.n_neg(), false));
    entries
}

fn split_seed(seed: u64, b: usize) -> u64 {
    streams::derive_seed(seed, "cav-split-seed", b as u64)
}

/// `B` CAVs, each trained on a with-replacement resample of the concept set.
pub fn bootstrap_cavs<T: Real>(cs: &ConceptSet<T>, n_bootstraps: usize, cfg: &CavConfig, seed: u64) -> Result<Vec<Cav<T>>> {
    if n_bootstraps == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap".into()));
    }
    cfg.validate()?;
    let pooled = cs.pooled();
    check_not_degenerate(pooled.view())?;
    (0..n_bootstraps)
        .into_par_iter()
        .map(|b| {
            let entries = resample(cs, seed, b);
            let mut cav = fit_entries(pooled.view(), cs.layer, &entries, cfg, split_seed(seed, b))?;
            cav.provenance = Provenance {
                bootstrap: Some(b),
                permuted: false,
                permutation: None,
            };
            Ok(cav)
        })
        .collect()
}

/// Label shuffling used for null CAVs. `Identity` exists to check that the
/// permuted path reduces to the real one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelShuffle {
    Random,
    Identity,
}

/// `B · n_perm` null CAVs: for each bootstrap resample (the same resamples as
/// [`bootstrap_cavs`] with this seed), `n_perm` fits on label-shuffled copies.
pub fn permuted_cavs<T: Real>(cs: &ConceptSet<T>, n_bootstraps: usize, n_perm: usize, cfg: &CavConfig, seed: u64) -> Result<Vec<Cav<T>>> {
    permuted_cavs_with(cs, n_bootstraps, n_perm, cfg, seed, LabelShuffle::Random)
}

pub fn permuted_cavs_with<T: Real>(
    cs: &ConceptSet<T>,
    n_bootstraps: usize,
    n_perm: usize,
    cfg: &CavConfig,
    seed: u64,
    shuffle: LabelShuffle,
) -> Result<Vec<Cav<T>>> {
    if n_bootstraps == 0 || n_perm == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap and one permutation".into()));
    }
    cfg.validate()?;
    let pooled = cs.pooled();
    check_not_degenerate(pooled.view())?;
    (0..n_bootstraps * n_perm)
        .into_par_iter()
        .map(|job| {
            let (b, p) = (job / n_perm, job % n_perm);
            let mut entries = resample(cs, seed, b);
            if shuffle == LabelShuffle::Random {
                let mut labels: Vec<bool> = entries.iter().map(|e| e.positive).collect();
                labels.shuffle(&mut streams::stream(seed, "cav-permute", job as u64));
                for (e, l) in entries.iter_mut().zip(labels) {
                    e.positive = l;
                }
            }
            let mut cav = fit_entries(pooled.view(), cs.layer, &entries, cfg, split_seed(seed, b))?;
            cav.provenance = Provenance {
                bootstrap: Some(b),
                permuted: true,
                permutation: Some(p),
            };
            Ok(cav)
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Permutation test of CAV quality: the fraction of null CAVs whose held-out
/// AUC reaches the median real AUC, with add-one smoothing, compared against a
/// Bonferroni-corrected `alpha`.
pub fn cav_significance<T: Real>(real: &[Cav<T>], permuted: &[Cav<T>], alpha: f64, n_tests: usize) -> Result<SignificanceResult> {
    if real.is_empty() || permuted.is_empty() {
        return Err(Error::InvalidArgument("significance needs real and permuted CAVs".into()));
    }
    if permuted.iter().any(|c| !c.provenance.permuted) {
        return Err(Error::InvalidArgument("null population contains non-permuted CAVs".into()));
    }
    let mut aucs: Vec<f64> = real.iter().map(|c| c.heldout_auc).collect();
    let med = median(&mut aucs);
    let exceed = permuted.iter().filter(|c| c.heldout_auc >= med).count();
    Ok(SignificanceResult::from_count(exceed, real.len(), permuted.len(), alpha, n_tests))
}

// ---------------------------------------------------------------------------
// bundle I/O

pub const CAV_BUNDLE_FORMAT: &str = "icscope-cav-bundle";

#[derive(Debug, Serialize, Deserialize)]
struct CavRecord<T> {
    layer: usize,
    v: Vec<T>,
    v_unit: Vec<T>,
    bias: T,
    auc: f64,
    provenance: Provenance,
}

/// Serialises CAVs as a JSON array of `{layer, v, v_unit, bias, auc, provenance}`.
pub fn cavs_to_json<T: Real>(cavs: &[Cav<T>]) -> Result<String> {
    let records: Vec<CavRecord<T>> = cavs
        .iter()
        .map(|c| CavRecord {
            layer: c.layer,
            v: c.direction.to_vec(),
            v_unit: c.unit.to_vec(),
            bias: c.bias,
            auc: c.heldout_auc,
            provenance: c.provenance,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn cavs_from_json<T: Real>(text: &str) -> Result<Vec<Cav<T>>> {
    let records: Vec<CavRecord<T>> = serde_json::from_str(text)?;
    records
        .into_iter()
        .map(|r| {
            if r.v.len() != r.v_unit.len() {
                return Err(Error::dim("CAV unit direction", r.v.len(), r.v_unit.len()));
            }
            Ok(Cav {
                layer: r.layer,
                direction: Array1::from(r.v),
                bias: r.bias,
                unit: Array1::from(r.v_unit),
                heldout_auc: r.auc,
                provenance: r.provenance,
                iterations: 0,
            })
        })
        .collect()
}
