//! Concept attribution: conceptual sensitivity (CS), integrated gradients
//! (IG) and integrated conceptual sensitivity (ICS), the baseline catalogue,
//! and the two closed forms used as fast paths.
//!
//! Path integrals use the midpoint rule, `α_j = (j + ½)/m`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::error::{Error, Result};
use crate::netcore::{ActivationVector, Head, Network};
use crate::scalar::Real;
use crate::streams;

pub const DEFAULT_STEPS: usize = 50;

/// Midpoint quadrature nodes on `[0, 1]`.
pub fn midpoint_nodes<T: Real>(m: usize) -> Result<Vec<T>> {
    if m == 0 {
        return Err(Error::InvalidArgument("quadrature needs m >= 1".into()));
    }
    Ok((0..m).map(|j| T::lit((j as f64 + 0.5) / m as f64)).collect())
}

fn ensure_finite<'a, T: Real>(values: impl IntoIterator<Item = &'a T>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

// ---------------------------------------------------------------------------
// baselines

/// How far concept forgetting moves along the raw CAV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "lambda", rename_all = "snake_case")]
pub enum ForgettingStrength {
    Fixed(f64),
    /// `λ = 2(aᵀv + b)/‖v‖²`: mirror `a` across the CAV hyperplane.
    Reflection,
}

/// Settings for the general entropy-maximising baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyOptions {
    /// Weight on the entropy term of `‖a − x‖ − λ_H·H(h(x))`.
    pub lambda_h: f64,
    pub max_iterations: usize,
    /// Largest tolerated deviation of the logits from uniform output.
    pub tolerance: f64,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        Self {
            lambda_h: 1e6,
            max_iterations: 200,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    ZeroImage,
    OneImage,
    /// i.i.d. `N(0, σ²)` pixels, clipped to `[0, 1]` like any image.
    NoiseImage {
        sigma: f64,
        seed: u64,
    },
    PixelwiseAverage,
    PixelwiseMedian,
    EntropyMaximizing(EntropyOptions),
    ConceptForgetting(ForgettingStrength),
    ConceptOccluding,
}

impl BaselineSpec {
    pub const TAGS: [&'static str; 8] = [
        "zero_image",
        "one_image",
        "noise_image",
        "pixelwise_average",
        "pixelwise_median",
        "entropy_maximizing",
        "concept_forgetting",
        "concept_occluding",
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Self::ZeroImage => "zero_image",
            Self::OneImage => "one_image",
            Self::NoiseImage { .. } => "noise_image",
            Self::PixelwiseAverage => "pixelwise_average",
            Self::PixelwiseMedian => "pixelwise_median",
            Self::EntropyMaximizing(_) => "entropy_maximizing",
            Self::ConceptForgetting(_) => "concept_forgetting",
            Self::ConceptOccluding => "concept_occluding",
        }
    }

    /// Image-space kinds are a fixed input pushed through the network.
    pub fn is_image(&self) -> bool {
        matches!(
            self,
            Self::ZeroImage | Self::OneImage | Self::NoiseImage { .. } | Self::PixelwiseAverage | Self::PixelwiseMedian
        )
    }

    /// Informative kinds are built from the CAV hyperplane.
    pub fn needs_cav(&self) -> bool {
        matches!(self, Self::ConceptForgetting(_) | Self::ConceptOccluding)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::NoiseImage { sigma, .. } if !(sigma > 0.0) => Err(Error::InvalidArgument("noise baseline needs sigma > 0".into())),
            Self::ConceptForgetting(ForgettingStrength::Fixed(l)) if !(l > 0.0) => {
                Err(Error::InvalidArgument("concept forgetting needs lambda > 0".into()))
            }
            Self::EntropyMaximizing(o) if !(o.lambda_h > 0.0) || o.max_iterations == 0 => Err(Error::InvalidArgument(
                "entropy baseline needs lambda_h > 0 and iterations >= 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BaselineSpec {
    type Err = Error;

    /// Parses a tag with default parameters (σ = 1, reflection strength).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().replace('-', "_").as_str() {
            "zero_image" | "black" | "zero" => Self::ZeroImage,
            "one_image" | "white" | "one" => Self::OneImage,
            "noise_image" | "noise" => Self::NoiseImage { sigma: 1.0, seed: 0 },
            "pixelwise_average" | "average" => Self::PixelwiseAverage,
            "pixelwise_median" | "median" => Self::PixelwiseMedian,
            "entropy_maximizing" | "entropy" => Self::EntropyMaximizing(EntropyOptions::default()),
            "concept_forgetting" | "forgetting" => Self::ConceptForgetting(ForgettingStrength::Reflection),
            "concept_occluding" | "occluding" => Self::ConceptOccluding,
            other => return Err(Error::InvalidArgument(format!("unknown baseline '{other}'"))),
        })
    }
}

/// What baselines may draw on besides the network and the activation.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineContext<'a, T> {
    pub cav: Option<&'a Cav<T>>,
    /// Reference images, one flattened image per row.
    pub reference: Option<ArrayView2<'a, T>>,
}

/// The input image of an image-space baseline.
pub fn baseline_input<T: Real>(spec: &BaselineSpec, input_dim: usize, reference: Option<ArrayView2<T>>) -> Result<Array1<T>> {
    spec.validate()?;
    let need_reference = || -> Result<ArrayView2<T>> {
        let r = reference.ok_or_else(|| Error::Missing(format!("{spec} baseline needs a reference dataset")))?;
        if r.nrows() == 0 {
            return Err(Error::Missing(format!("{spec} baseline reference dataset is empty")));
        }
        if r.ncols() != input_dim {
            return Err(Error::dim("reference image", input_dim, r.ncols()));
        }
        Ok(r)
    };
    match *spec {
        BaselineSpec::ZeroImage => Ok(Array1::zeros(input_dim)),
        BaselineSpec::OneImage => Ok(Array1::ones(input_dim)),
        BaselineSpec::NoiseImage { sigma, seed } => {
            let mut rng = streams::stream(seed, "noise-baseline", 0);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok((0..input_dim).map(|_| T::lit(normal.sample(&mut rng).clamp(0.0, 1.0))).collect())
        }
        BaselineSpec::PixelwiseAverage => Ok(need_reference()?.mean_axis(Axis(0)).expect("non-empty reference")),
        BaselineSpec::PixelwiseMedian => {
            let r = need_reference()?;
            Ok(r.axis_iter(Axis(1))
                .map(|col| {
                    let mut v = col.to_vec();
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    let n = v.len();
                    if n % 2 == 1 {
                        v[n / 2]
                    } else {
                        (v[n / 2 - 1] + v[n / 2]) / T::lit(2.0)
                    }
                })
                .collect())
        }
        _ => Err(Error::InvalidArgument(format!("{spec} is not an image-space baseline"))),
    }
}

/// `f_l` of an image-space baseline.
pub fn image_baseline_activation<T: Real>(
    spec: &BaselineSpec,
    net: &Network<T>,
    layer: usize,
    reference: Option<ArrayView2<T>>,
) -> Result<ActivationVector<T>> {
    net.layer_width(layer)?;
    let x = baseline_input(spec, net.input_dim(), reference)?;
    let fwd = net.forward_capture(x.as_slice().expect("contiguous"))?;
    Ok(fwd.activations.into_iter().nth(layer).expect("checked layer"))
}

fn require_cav<'a, T: Real>(spec: &BaselineSpec, layer: usize, a: &ActivationVector<T>, cav: Option<&'a Cav<T>>) -> Result<&'a Cav<T>> {
    let cav = cav.ok_or_else(|| Error::Missing(format!("{spec} baseline needs a CAV")))?;
    if cav.layer != layer {
        return Err(Error::InvalidArgument(format!(
            "CAV is for layer {}, baseline requested at layer {layer}",
            cav.layer
        )));
    }
    if cav.direction.len() != a.dim() {
        return Err(Error::dim("CAV direction", a.dim(), cav.direction.len()));
    }
    Ok(cav)
}

/// Forgetting strength for activation `a`.
pub fn forgetting_lambda<T: Real>(strength: ForgettingStrength, cav: &Cav<T>, a: ArrayView1<T>) -> T {
    match strength {
        ForgettingStrength::Fixed(l) => T::lit(l),
        ForgettingStrength::Reflection => T::lit(2.0) * cav.score(a) / cav.direction.dot(&cav.direction),
    }
}

/// `a − (aᵀv + b) v/‖v‖²` with the raw CAV.
pub fn occluding_baseline<T: Real>(cav: &Cav<T>, a: ArrayView1<T>) -> Array1<T> {
    let t = cav.score(a) / cav.direction.dot(&cav.direction);
    &a - &(&cav.direction * t)
}

/// The baseline activation `a'` for `a` at `layer`.
pub fn make_baseline<T: Real>(
    spec: &BaselineSpec,
    net: &Network<T>,
    layer: usize,
    a: &ActivationVector<T>,
    ctx: BaselineContext<'_, T>,
) -> Result<ActivationVector<T>> {
    spec.validate()?;
    let width = net.layer_width(layer)?;
    if a.layer != layer {
        return Err(Error::InvalidArgument(format!(
            "activation belongs to layer {}, requested {layer}",
            a.layer
        )));
    }
    if a.dim() != width {
        return Err(Error::dim("activation", width, a.dim()));
    }
    let values = match spec {
        s if s.is_image() => return image_baseline_activation(s, net, layer, ctx.reference),
        BaselineSpec::EntropyMaximizing(opts) => {
            if let Some(projected) = binary_boundary_projection(net, layer, a.values.view()) {
                projected
            } else {
                entropy_maximizing_general(net, layer, a, opts)?.activation.values
            }
        }
        BaselineSpec::ConceptForgetting(strength) => {
            let cav = require_cav(spec, layer, a, ctx.cav)?;
            let lambda = forgetting_lambda(*strength, cav, a.values.view());
            &a.values - &(&cav.direction * lambda)
        }
        BaselineSpec::ConceptOccluding => occluding_baseline(require_cav(spec, layer, a, ctx.cav)?, a.values.view()),
        _ => unreachable!("image kinds handled above"),
    };
    ensure_finite(values.iter(), "baseline activation")?;
    Ok(ActivationVector::new(layer, values))
}

/// Orthogonal projection onto the decision boundary when `layer` feeds a
/// sigmoid output directly.
fn binary_boundary_projection<T: Real>(net: &Network<T>, layer: usize, a: ArrayView1<T>) -> Option<Array1<T>> {
    if net.head() != Head::Sigmoid || layer + 1 != net.n_hidden() {
        return None;
    }
    let out = net.output_layer();
    let w = out.weights.row(0);
    let ww = w.dot(&w);
    if !(ww > T::zero()) {
        return None;
    }
    let t = (w.dot(&a) + out.bias[0]) / ww;
    Some(&a - &(&w * t))
}

fn entropy<T: Real>(p: ArrayView1<T>) -> T {
    p.iter().filter(|v| **v > T::zero()).map(|v| -*v * v.ln()).sum()
}

/// Result of [`entropy_maximizing_general`].
#[derive(Debug, Clone)]
pub struct EntropyBaseline<T> {
    pub activation: ActivationVector<T>,
    /// `H(h(a'))`.
    pub entropy: T,
    /// `‖a − a'‖ − λ_H·H(h(a'))`.
    pub objective: T,
    pub iterations: usize,
}

/// Entropy-maximising baseline for any layer and head:
/// `a' = argmin_x ‖a − x‖ − λ_H·H(h(x))`.
///
/// For `λ_H` beyond the curvature scale of the head, the minimiser is the
/// point of maximal (uniform-output) entropy nearest to `a`, up to O(1/λ_H).
/// That limit is solved directly on the constraints "all logits equal"
/// (sigmoid: "logit zero"). Gauss–Newton minimum-norm steps first reach the
/// constraint set from `a`; tangential steps towards `a`, each followed by the
/// same restoration, then shorten the distance while staying feasible.
pub fn entropy_maximizing_general<T: Real>(
    net: &Network<T>,
    layer: usize,
    a: &ActivationVector<T>,
    opts: &EntropyOptions,
) -> Result<EntropyBaseline<T>> {
    BaselineSpec::EntropyMaximizing(*opts).validate()?;
    let width = net.layer_width(layer)?;
    if a.dim() != width {
        return Err(Error::dim("activation", width, a.dim()));
    }
    let tol = T::lit(opts.tolerance);
    let target = a.values.view();
    let mut budget = opts.max_iterations;
    let restored = restore_feasibility(net, layer, a.values.clone(), tol, &mut budget)?;
    let mut x = match restored {
        Ok(x) => x,
        Err(x) => return Err(entropy_failure(net, layer, x.view(), opts.max_iterations - budget)),
    };
    let dist = |p: &Array1<T>| (p - &target).mapv(|v| v * v).sum().sqrt();
    while budget > 0 {
        let jac = constraint_jacobian(net, layer, x.view())?;
        let to_target = &target - &x;
        let Some(y) = solve_regularised(jac.dot(&jac.t()), jac.dot(&to_target)) else {
            break;
        };
        let tangent = &to_target - &jac.t().dot(&y);
        let scale = max_abs(x.view()).max(T::one());
        if max_abs(tangent.view()) <= T::lit(1e-12) * scale {
            break;
        }
        let current = dist(&x);
        let mut step = T::one();
        let mut accepted = None;
        while step >= T::lit(1e-10) && budget > 0 {
            budget -= 1;
            let cand = &x + &(&tangent * step);
            if let Ok(c) = restore_feasibility(net, layer, cand, tol, &mut budget)? {
                if dist(&c) < current {
                    accepted = Some(c);
                    break;
                }
            }
            step /= T::lit(2.0);
        }
        match accepted {
            Some(c) => {
                let moved = max_abs((&c - &x).view());
                x = c;
                if moved <= T::lit(1e-12) * scale {
                    break;
                }
            }
            None => break,
        }
    }
    let probs = net.head_from_layer_batch(layer, x.view().insert_axis(Axis(0)))?;
    let h = entropy(probs.row(0));
    Ok(EntropyBaseline {
        objective: dist(&x) - T::lit(opts.lambda_h) * h,
        entropy: h,
        activation: ActivationVector::new(layer, x),
        iterations: opts.max_iterations - budget,
    })
}

fn entropy_failure<T: Real>(net: &Network<T>, layer: usize, x: ArrayView1<T>, iterations: usize) -> Error {
    let h = net
        .head_from_layer_batch(layer, x.insert_axis(Axis(0)))
        .map(|p| entropy(p.row(0)).as_f64())
        .unwrap_or(f64::NAN);
    Error::NoConvergence {
        iterations,
        residual: (net.n_classes() as f64).ln() - h,
    }
}

/// Gauss–Newton minimum-norm steps onto the uniform-output set. The constraint
/// residual must decrease strictly at every accepted step; `Ok(Err(x))` is the
/// last iterate when that stalls or the budget runs out.
#[allow(clippy::type_complexity)]
fn restore_feasibility<T: Real>(
    net: &Network<T>,
    layer: usize,
    mut x: Array1<T>,
    tol: T,
    budget: &mut usize,
) -> Result<std::result::Result<Array1<T>, Array1<T>>> {
    let mut c = constraint_residual(net, layer, x.view())?;
    loop {
        let viol = max_abs(c.view());
        if viol <= tol {
            return Ok(Ok(x));
        }
        if *budget == 0 {
            return Ok(Err(x));
        }
        *budget -= 1;
        let jac = constraint_jacobian(net, layer, x.view())?;
        let Some(y) = solve_regularised(jac.dot(&jac.t()), c.clone()) else {
            return Ok(Err(x));
        };
        let delta = jac.t().dot(&y);
        let mut step = T::one();
        loop {
            let cand = &x - &(&delta * step);
            let c_cand = constraint_residual(net, layer, cand.view())?;
            let viol_cand = max_abs(c_cand.view());
            // a step into a region of dead units would strand the iteration
            let alive = || -> Result<bool> { Ok(max_abs_2(constraint_jacobian(net, layer, cand.view())?.view()) > T::zero()) };
            if viol_cand < viol && (viol_cand <= tol || alive()?) {
                x = cand;
                c = c_cand;
                break;
            }
            step /= T::lit(2.0);
            if step < T::lit(1e-12) {
                return Ok(Err(x));
            }
        }
    }
}

fn max_abs_2<T: Real>(m: ArrayView2<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

fn max_abs<T: Real>(v: ArrayView1<T>) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Uniform output ⇔ these residuals vanish.
fn constraint_residual<T: Real>(net: &Network<T>, layer: usize, x: ArrayView1<T>) -> Result<Array1<T>> {
    let z = net.logits_from_layer_batch(layer, x.insert_axis(Axis(0)))?;
    let z = z.row(0);
    Ok(match net.head() {
        Head::Sigmoid => z.to_owned(),
        Head::Softmax => z.iter().skip(1).map(|v| *v - z[0]).collect(),
    })
}

fn constraint_jacobian<T: Real>(net: &Network<T>, layer: usize, x: ArrayView1<T>) -> Result<Array2<T>> {
    let j = net.logit_jacobian_wrt_activation(layer, x)?;
    Ok(match net.head() {
        Head::Sigmoid => j,
        Head::Softmax => {
            let first = j.row(0).to_owned();
            let mut out = j.slice(ndarray::s![1.., ..]).to_owned();
            for mut row in out.rows_mut() {
                row -= &first;
            }
            out
        }
    })
}

/// Solves the Gram system, adding a growing ridge when it is singular (fewer
/// active units than constraints).
fn solve_regularised<T: Real>(gram: Array2<T>, rhs: Array1<T>) -> Option<Array1<T>> {
    if let Some(y) = solve_small(gram.clone(), rhs.clone()) {
        return Some(y);
    }
    let trace = gram.diag().sum();
    if !(trace > T::zero()) {
        return None;
    }
    let mut ridge = trace * T::lit(1e-8);
    for _ in 0..6 {
        let mut g = gram.clone();
        g.diag_mut().mapv_inplace(|v| v + ridge);
        if let Some(y) = solve_small(g, rhs.clone()) {
            return Some(y);
        }
        ridge *= T::lit(100.0);
    }
    None
}

/// Gaussian elimination with partial pivoting for the tiny Gram systems of the
/// entropy solver. `None` when singular.
fn solve_small<T: Real>(mut m: Array2<T>, mut rhs: Array1<T>) -> Option<Array1<T>> {
    let n = rhs.len();
    let scale = m.iter().fold(T::zero(), |s, v| s.max(v.abs()));
    if !(scale > T::zero()) {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap())?;
        if m[[pivot, col]].abs() <= T::lit(1e-14) * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
            }
            rhs.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                let v = m[[col, k]];
                m[[row, k]] -= f * v;
            }
            let r = rhs[col];
            rhs[row] -= f * r;
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= m[[row, k]] * x[k];
        }
        x[row] = s / m[[row, row]];
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// attributions

fn check_cav<T: Real>(cav: &Cav<T>, layer: usize, width: usize) -> Result<()> {
    if cav.layer != layer {
        return Err(Error::InvalidArgument(format!(
            "CAV is for layer {}, attribution requested at layer {layer}",
            cav.layer
        )));
    }
    if cav.unit.len() != width {
        return Err(Error::dim("CAV direction", width, cav.unit.len()));
    }
    Ok(())
}

/// Input-space integrated gradients of class `k` from `x_base` to `x`.
pub fn integrated_gradients<T: Real>(net: &Network<T>, k: usize, x: &[T], x_base: &[T], m: usize) -> Result<Array1<T>> {
    let alphas = midpoint_nodes::<T>(m)?;
    let g = net.mean_input_gradient_on_path(k, x, x_base, &alphas)?;
    ensure_finite(g.iter(), "input gradient on IG path")?;
    Ok(Array1::from_shape_fn(x.len(), |i| (x[i] - x_base[i]) * g[i]))
}

/// Conceptual sensitivity `∇h_k(a)ᵀ v` with the unit CAV.
pub fn conceptual_sensitivity<T: Real>(net: &Network<T>, k: usize, layer: usize, a: &ActivationVector<T>, cav: &Cav<T>) -> Result<T> {
    check_cav(cav, layer, a.dim())?;
    let g = net.grad_head_wrt_activation(k, layer, a)?;
    ensure_finite(g.iter(), "activation gradient")?;
    Ok(g.dot(&cav.unit))
}

/// CS for each row of `activations`.
pub fn conceptual_sensitivity_batch<T: Real>(
    net: &Network<T>,
    k: usize,
    layer: usize,
    activations: ArrayView2<T>,
    cav: &Cav<T>,
) -> Result<Array1<T>> {
    check_cav(cav, layer, activations.ncols())?;
    let g = net.grad_head_wrt_activation_batch(k, layer, activations)?;
    ensure_finite(g.iter(), "activation gradient")?;
    Ok(g.dot(&cav.unit))
}

/// `∫₀¹ ∇h_k(a' + α(a − a')) dα` by the midpoint rule.
pub fn integrated_path_gradient<T: Real>(
    net: &Network<T>,
    k: usize,
    layer: usize,
    a: ArrayView1<T>,
    a_base: ArrayView1<T>,
    m: usize,
) -> Result<Array1<T>> {
    if a.len() != a_base.len() {
        return Err(Error::dim("baseline activation", a.len(), a_base.len()));
    }
    let alphas = midpoint_nodes::<T>(m)?;
    let diff = &a - &a_base;
    let mut path = Array2::zeros((m, a.len()));
    for (mut row, &alpha) in path.rows_mut().into_iter().zip(&alphas) {
        row.assign(&(&a_base + &(&diff * alpha)));
    }
    let g = net.grad_head_wrt_activation_batch(k, layer, path.view())?;
    let mean = g.mean_axis(Axis(0)).expect("m >= 1");
    ensure_finite(mean.iter(), "activation gradient on ICS path")?;
    Ok(mean)
}

/// Integrated path gradients for many (activation, baseline) row pairs.
pub fn integrated_path_gradients<T: Real>(
    net: &Network<T>,
    k: usize,
    layer: usize,
    activations: ArrayView2<T>,
    baselines: ArrayView2<T>,
    m: usize,
) -> Result<Array2<T>> {
    if activations.dim() != baselines.dim() {
        return Err(Error::dim("baseline rows", activations.nrows(), baselines.nrows()));
    }
    let rows: Vec<Array1<T>> = (0..activations.nrows())
        .into_par_iter()
        .map(|i| integrated_path_gradient(net, k, layer, activations.row(i), baselines.row(i), m))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(activations.raw_dim());
    for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&r);
    }
    Ok(out)
}

/// ICS given the path-integrated gradient: `((a − a')·v)(G·v)`.
pub fn ics_from_path_gradient<T: Real>(a: ArrayView1<T>, a_base: ArrayView1<T>, path_gradient: ArrayView1<T>, v_unit: ArrayView1<T>) -> T {
    let value = (&a - &a_base).dot(&v_unit) * path_gradient.dot(&v_unit);
    if value.abs() > T::one() {
        log::debug!("ICS value {value} outside [-1, 1]");
    }
    value
}

/// Integrated conceptual sensitivity of class `k` at `layer`.
pub fn ics<T: Real>(
    net: &Network<T>,
    k: usize,
    layer: usize,
    a: &ActivationVector<T>,
    a_base: &ActivationVector<T>,
    cav: &Cav<T>,
    m: usize,
) -> Result<T> {
    check_cav(cav, layer, a.dim())?;
    if a_base.layer != layer || a.layer != layer {
        return Err(Error::InvalidArgument(
            "activation and baseline must belong to the CAV layer".into(),
        ));
    }
    let g = integrated_path_gradient(net, k, layer, a.values.view(), a_base.values.view(), m)?;
    Ok(ics_from_path_gradient(
        a.values.view(),
        a_base.values.view(),
        g.view(),
        cav.unit.view(),
    ))
}

/// Closed-form ICS for `h = σ(wᵀa + b)` with the entropy-maximising baseline,
/// `(vᵀw/‖w‖)² (σ(wᵀa + b) − ½)`.
pub fn ics_closed_form_entropy<T: Real>(w: ArrayView1<T>, b: T, v_unit: ArrayView1<T>, a: ArrayView1<T>) -> Result<T> {
    if w.len() != a.len() || v_unit.len() != a.len() {
        return Err(Error::dim("closed-form operands", a.len(), w.len().max(v_unit.len())));
    }
    let ww = w.dot(&w);
    if !(ww > T::zero()) {
        return Err(Error::InvalidArgument("weight vector is zero".into()));
    }
    let cos = v_unit.dot(&w) / ww.sqrt();
    Ok(cos * cos * ((w.dot(&a) + b).sigmoid() - T::lit(0.5)))
}

/// Closed-form ICS with the concept-forgetting baseline, `h_k(a) − h_k(a − λv)`.
pub fn ics_closed_form_forgetting<T: Real>(
    net: &Network<T>,
    k: usize,
    layer: usize,
    a: &ActivationVector<T>,
    cav: &Cav<T>,
    strength: ForgettingStrength,
) -> Result<T> {
    check_cav(cav, layer, a.dim())?;
    if k >= net.n_classes() {
        return Err(Error::InvalidArgument(format!("class {k} out of range")));
    }
    let lambda = forgetting_lambda(strength, cav, a.values.view());
    let base = &a.values - &(&cav.direction * lambda);
    let both = ndarray::stack(Axis(0), &[a.values.view(), base.view()]).expect("same length");
    let p = net.head_from_layer_batch(layer, both.view())?;
    Ok(p[[0, k]] - p[[1, k]])
}

/// Orthonormal basis (rows) whose first vector is `v/‖v‖`, from the
/// Householder reflection exchanging `e₁` and `v`.
pub fn basis_with_first_axis<T: Real>(v: ArrayView1<T>) -> Result<Array2<T>> {
    let d = v.len();
    let norm = v.dot(&v).sqrt();
    if d == 0 || !(norm > T::zero()) {
        return Err(Error::InvalidArgument("basis axis must be nonzero".into()));
    }
    let unit = v.mapv(|x| x / norm);
    let mut u = unit.mapv(|x| -x);
    u[0] += T::one();
    let uu = u.dot(&u);
    let mut h = Array2::<T>::eye(d);
    if uu > T::lit(1e-24) {
        for i in 0..d {
            for j in 0..d {
                h[[i, j]] -= T::lit(2.0) * u[i] * u[j] / uu;
            }
        }
    }
    Ok(h)
}

/// Layer-space integrated gradients in the coordinates of `basis` (rows are
/// orthonormal axes): `(B(a − a'))_i · (B G)_i`.
pub fn layer_integrated_gradients_in_basis<T: Real>(
    net: &Network<T>,
    k: usize,
    layer: usize,
    a: ArrayView1<T>,
    a_base: ArrayView1<T>,
    basis: ArrayView2<T>,
    m: usize,
) -> Result<Array1<T>> {
    if basis.dim() != (a.len(), a.len()) {
        return Err(Error::dim("basis", a.len(), basis.nrows()));
    }
    let g = integrated_path_gradient(net, k, layer, a, a_base, m)?;
    let diff = basis.dot(&(&a - &a_base));
    Ok(diff * basis.dot(&g))
}

// ---------------------------------------------------------------------------
// records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cs,
    Ics,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cs => "cs",
            Self::Ics => "ics",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: u64,
    pub concept: String,
    pub layer: usize,
    pub class: usize,
    pub cs: f64,
    pub ics: f64,
    pub baseline: String,
    pub steps: usize,
}

pub const ATTRIBUTION_COLUMNS: [&str; 8] = ["sample_id", "concept", "layer", "class", "method", "baseline", "m", "value"];

/// Two rows per record (cs, then ics); `m` is blank on cs rows.
pub fn write_attributions<W: std::io::Write>(out: W, records: &[AttributionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ATTRIBUTION_COLUMNS)?;
    for r in records {
        let common = [r.sample_id.to_string(), r.concept.clone(), r.layer.to_string(), r.class.to_string()];
        for (method, m, value) in [(Method::Cs, String::new(), r.cs), (Method::Ics, r.steps.to_string(), r.ics)] {
            let mut row = common.to_vec();
            row.extend([method.name().to_string(), r.baseline.clone(), m, format!("{value:e}")]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{DenseLayer, Nonlinearity};
    use ndarray::array;
    use rand::Rng;

    fn net(head: Head, classes: usize, widths: &[usize], seed: u64) -> Network<f64> {
        let mut n = Network::init(6, widths, head, classes, 0.0, seed).unwrap();
        let mut rng = streams::stream(seed, "test-bias", 0);
        let layers: Vec<DenseLayer<f64>> = n
            .layers()
            .iter()
            .map(|l| {
                let b = l.bias.mapv(|_| rng.random_range(0.0..0.4));
                DenseLayer::new(l.weights.clone(), b, l.nonlinearity).unwrap()
            })
            .collect();
        n = Network::new(layers, head, 0.0).unwrap();
        n
    }

    fn random_vec(d: usize, seed: u64) -> Array1<f64> {
        let mut rng = streams::stream(seed, "test-vec", 0);
        Array1::from_shape_fn(d, |_| rng.random_range(0.0..1.0))
    }

    fn linear_sigmoid(w: Array1<f64>, b: f64) -> Network<f64> {
        let d = w.len();
        let hidden = DenseLayer::new(Array2::eye(d), Array1::zeros(d), Nonlinearity::Identity).unwrap();
        let out = DenseLayer::new(w.insert_axis(Axis(0)), array![b], Nonlinearity::Identity).unwrap();
        Network::new(vec![hidden, out], Head::Sigmoid, 0.0).unwrap()
    }

    #[test]
    fn midpoint_nodes_are_centred() {
        assert_eq!(midpoint_nodes::<f64>(2).unwrap(), vec![0.25, 0.75]);
        assert!(midpoint_nodes::<f64>(0).is_err());
    }

    #[test]
    fn ig_identity_and_linear_cases() {
        let n = net(Head::Sigmoid, 2, &[4], 3);
        let x = random_vec(6, 1);
        let ig = integrated_gradients(&n, 1, x.as_slice().unwrap(), x.as_slice().unwrap(), 10).unwrap();
        assert!(ig.iter().all(|v| *v == 0.0));

        // one affine layer: the gradient is σ'(z)w, so IG_i ∝ w_i x_i
        let w = array![0.3, -0.2, 0.1];
        let lin = {
            let out = DenseLayer::new(w.clone().insert_axis(Axis(0)), array![0.0], Nonlinearity::Identity).unwrap();
            Network::new(vec![out], Head::Sigmoid, 0.0).unwrap()
        };
        let x = [1.0, 2.0, 3.0];
        let ig = integrated_gradients(&lin, 1, &x, &[0.0; 3], 2000).unwrap();
        let f = |v: &[f64]| lin.forward_capture(v).unwrap().probabilities[1];
        assert!((ig.sum() - (f(&x) - f(&[0.0; 3]))).abs() < 1e-8);
        // attribution proportional to w_i x_i since the gradient is a multiple of w
        let ratio: Vec<f64> = (0..3).map(|i| ig[i] / (w[i] * x[i])).collect();
        assert!(ratio.iter().all(|r| (r - ratio[0]).abs() < 1e-12));
    }

    #[test]
    fn cs_formula_on_binary_last_layer() {
        let n = net(Head::Sigmoid, 2, &[5, 4], 8);
        let a = ActivationVector::new(1, random_vec(4, 2));
        let cav = Cav::from_hyperplane(1, random_vec(4, 3) - 0.5, 0.1).unwrap();
        let out = n.output_layer();
        let w = out.weights.row(0);
        let z: f64 = w.dot(&a.values) + out.bias[0];
        let expected = z.sigmoid() * (1.0 - z.sigmoid()) * w.dot(&cav.unit);
        let cs = conceptual_sensitivity(&n, 1, 1, &a, &cav).unwrap();
        assert!((cs - expected).abs() < 1e-12);
        let wrong_layer = Cav::from_hyperplane(0, Array1::ones(5), 0.0).unwrap();
        assert!(conceptual_sensitivity(&n, 1, 1, &a, &wrong_layer).is_err());
    }

    #[test]
    fn cs_orthogonal_and_aligned() {
        let n = linear_sigmoid(array![1.0, 0.0], 0.0);
        let a = ActivationVector::new(0, array![0.0, 0.0]);
        // gradient at z=0 is (0.25, 0)
        let ortho = Cav::from_hyperplane(0, array![0.0, 1.0], 0.0).unwrap();
        assert_eq!(conceptual_sensitivity(&n, 1, 0, &a, &ortho).unwrap(), 0.0);
        let aligned = Cav::from_hyperplane(0, array![3.0, 0.0], 0.0).unwrap();
        assert!((conceptual_sensitivity(&n, 1, 0, &a, &aligned).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ics_zero_prefactor() {
        let n = net(Head::Sigmoid, 2, &[5, 4], 1);
        let a = ActivationVector::new(0, array![1.0, 0.5, 0.0, 0.0, 0.0]);
        let b = ActivationVector::new(0, array![0.0, 0.5, 0.0, 0.0, 0.0]);
        let cav = Cav::from_hyperplane(0, array![0.0, 1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(ics(&n, 1, 0, &a, &b, &cav, 50).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_ics_matches_output_difference() {
        let n = net(Head::Softmax, 3, &[5, 4], 5);
        let a = ActivationVector::new(0, random_vec(5, 9));
        let cav = Cav::from_hyperplane(0, random_vec(5, 10) - 0.5, 0.2).unwrap();
        for strength in [ForgettingStrength::Fixed(0.7), ForgettingStrength::Reflection] {
            let spec = BaselineSpec::ConceptForgetting(strength);
            let ctx = BaselineContext {
                cav: Some(&cav),
                reference: None,
            };
            let base = make_baseline(&spec, &n, 0, &a, ctx).unwrap();
            let mut total = 0.0;
            for k in 0..3 {
                let closed = ics_closed_form_forgetting(&n, k, 0, &a, &cav, strength).unwrap();
                let quad = ics(&n, k, 0, &a, &base, &cav, 500).unwrap();
                assert!((closed - quad).abs() < 1e-4, "{closed} vs {quad}");
                total += closed;
            }
            assert!(total.abs() < 1e-10);
        }
        let tiny = ics_closed_form_forgetting(&n, 0, 0, &a, &cav, ForgettingStrength::Fixed(1e-8)).unwrap();
        assert!(tiny.abs() < 1e-6);
    }

    #[test]
    fn entropy_closed_form_matches_quadrature() {
        let mut rng = streams::stream(4, "entropy-cf", 0);
        for trial in 0..20 {
            let w = Array1::from_shape_fn(4, |_| rng.random_range(-2.0..2.0));
            let b = rng.random_range(-1.0..1.0);
            let n = linear_sigmoid(w.clone(), b);
            let a = ActivationVector::new(0, Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)));
            let v = Cav::from_hyperplane(0, Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)), 0.0).unwrap();
            let spec = BaselineSpec::EntropyMaximizing(EntropyOptions::default());
            let base = make_baseline(&spec, &n, 0, &a, BaselineContext::default()).unwrap();
            assert!((n.head_from_layer(0, &base).unwrap()[1] - 0.5).abs() < 1e-12);
            let quad = ics(&n, 1, 0, &a, &base, &v, 1000).unwrap();
            let closed = ics_closed_form_entropy(w.view(), b, v.unit.view(), a.values.view()).unwrap();
            assert!((quad - closed).abs() < 1e-4, "trial {trial}: {quad} vs {closed}");
        }
        let z = Array1::<f64>::zeros(3);
        assert!(ics_closed_form_entropy(z.view(), 0.0, z.view(), z.view()).is_err());
        // on the boundary, and orthogonal CAV
        let w = array![1.0, 0.0];
        assert_eq!(
            ics_closed_form_entropy(w.view(), 0.0, array![0.6, 0.8].view(), array![0.0, 5.0].view()).unwrap(),
            0.0
        );
        assert_eq!(
            ics_closed_form_entropy(w.view(), 0.0, array![0.0, 1.0].view(), array![3.0, 5.0].view()).unwrap(),
            0.0
        );
    }

    #[test]
    fn general_entropy_solver_matches_projection() {
        let n = net(Head::Sigmoid, 2, &[5, 4], 11);
        let a = ActivationVector::new(1, random_vec(4, 12) + 0.5);
        let general = entropy_maximizing_general(&n, 1, &a, &EntropyOptions::default()).unwrap();
        let proj = binary_boundary_projection(&n, 1, a.values.view()).unwrap();
        let err = (&general.activation.values - &proj).mapv(f64::abs).fold(0.0, |m: f64, v| m.max(*v));
        assert!(err < 1e-4, "{err}");
        assert!((general.entropy - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn general_entropy_solver_on_softmax_and_hidden_layers() {
        let n = net(Head::Softmax, 3, &[12, 10], 2);
        for (layer, d) in [(0usize, 12usize), (1, 10)] {
            let a = ActivationVector::new(layer, random_vec(d, 20 + layer as u64) * 2.0);
            let r = entropy_maximizing_general(&n, layer, &a, &EntropyOptions::default()).unwrap();
            assert!(r.entropy >= 0.95 * 3f64.ln());
            let p = n.head_from_layer(layer, &r.activation).unwrap();
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-9), "{p:?}");
        }
    }

    #[test]
    fn uniform_output_needs_no_move() {
        let n = linear_sigmoid(array![1.0, -1.0], 0.0);
        let a = ActivationVector::new(0, array![0.3, 0.3]);
        let r = entropy_maximizing_general(&n, 0, &a, &EntropyOptions::default()).unwrap();
        assert_eq!(r.activation.values, a.values);
    }

    #[test]
    fn entropy_solver_reports_stuck_optimisation() {
        // the ReLU layer after `a` is dead for this input, so the output cannot move
        let first = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Nonlinearity::Identity).unwrap();
        let dead = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Nonlinearity::Relu).unwrap();
        let out = DenseLayer::new(array![[1.0, 1.0]], array![2.0], Nonlinearity::Identity).unwrap();
        let n = Network::new(vec![first, dead, out], Head::Sigmoid, 0.0).unwrap();
        let a = ActivationVector::new(0, array![-1.0, -1.0]);
        match entropy_maximizing_general(&n, 0, &a, &EntropyOptions::default()) {
            Err(Error::NoConvergence { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn occluding_baseline_lies_on_hyperplane() {
        let cav = Cav::<f64>::from_hyperplane(0, array![2.0, 1.0], -1.0).unwrap();
        let on = array![0.5, 0.0];
        assert_eq!(occluding_baseline(&cav, on.view()), on);
        let off = array![3.0, 1.0];
        assert!(cav.score(occluding_baseline(&cav, off.view()).view()).abs() < 1e-12);
        let n = linear_sigmoid(array![1.0, 1.0], 0.0);
        let a = ActivationVector::new(0, off);
        assert!(matches!(
            make_baseline(&BaselineSpec::ConceptOccluding, &n, 0, &a, BaselineContext::default()),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn image_baselines() {
        let refs: Array2<f64> = array![[0.0, 1.0, 0.2], [1.0, 1.0, 0.4], [0.5, 0.0, 0.9]];
        let avg = baseline_input(&BaselineSpec::PixelwiseAverage, 3, Some(refs.view())).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-15 && (avg[2] - 0.5).abs() < 1e-15);
        let med = baseline_input(&BaselineSpec::PixelwiseMedian, 3, Some(refs.view())).unwrap();
        assert_eq!(med, array![0.5, 1.0, 0.4]);
        assert!(baseline_input::<f64>(&BaselineSpec::PixelwiseMedian, 3, None).is_err());
        let noise = baseline_input::<f64>(&BaselineSpec::NoiseImage { sigma: 1.0, seed: 3 }, 1000, None).unwrap();
        assert!(noise.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(noise.iter().any(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(baseline_input::<f64>(&BaselineSpec::OneImage, 2, None).unwrap(), array![1.0, 1.0]);
    }

    #[test]
    fn rotated_basis_first_component_is_ics() {
        let n = net(Head::Sigmoid, 2, &[5, 4], 6);
        let a = random_vec(5, 1);
        let base = random_vec(5, 2) * 0.2;
        let cav = Cav::from_hyperplane(0, random_vec(5, 3) - 0.5, 0.0).unwrap();
        let basis = basis_with_first_axis(cav.direction.view()).unwrap();
        let gram = basis.dot(&basis.t());
        assert!((gram - Array2::<f64>::eye(5)).iter().all(|v| v.abs() < 1e-12));
        let ig = layer_integrated_gradients_in_basis(&n, 1, 0, a.view(), base.view(), basis.view(), 200).unwrap();
        let value = ics(
            &n,
            1,
            0,
            &ActivationVector::new(0, a.clone()),
            &ActivationVector::new(0, base.clone()),
            &cav,
            200,
        )
        .unwrap();
        assert!((ig[0] - value).abs() < 1e-12);
        // basis change preserves the total
        let std = layer_integrated_gradients_in_basis(&n, 1, 0, a.view(), base.view(), Array2::eye(5).view(), 200).unwrap();
        assert!((std.sum() - ig.sum()).abs() < 1e-12);
    }

    #[test]
    fn baseline_tags_round_trip() {
        for tag in BaselineSpec::TAGS {
            assert_eq!(tag.parse::<BaselineSpec>().unwrap().tag(), tag);
        }
        assert!("sideways".parse::<BaselineSpec>().is_err());
        assert!(BaselineSpec::ConceptForgetting(ForgettingStrength::Fixed(0.0)).validate().is_err());
    }

    #[test]
    fn csv_rows() {
        let rec = AttributionRecord {
            sample_id: 7,
            concept: "color".into(),
            layer: 2,
            class: 1,
            cs: 0.5,
            ics: -0.25,
            baseline: "zero_image".into(),
            steps: 50,
        };
        let mut buf = Vec::new();
        write_attributions(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,concept,layer,class,method,baseline,m,value");
        assert_eq!(lines[1], "7,color,2,1,cs,zero_image,,5e-1");
        assert_eq!(lines[2], "7,color,2,1,ics,zero_image,50,-2.5e-1");
    }
}
