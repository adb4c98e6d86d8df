//! Configuration-driven experiment runner for the BARS studies.
//!
//! A run is a pure function of an [`ExperimentConfig`]: every random draw is
//! keyed by the master seed, so the same config reproduces the same report
//! files byte for byte on one platform.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attribution::{self, BaselineContext, BaselineSpec, EntropyOptions};
use crate::barsdata::{BarsParams, BarsSet, Concept};
use crate::cav::{self, CavConfig, SignificanceResult};
use crate::error::{Error, Result};
use crate::netcore::{self, ActivationVector, Head, Network, Samples, TrainConfig, TrainReport};
use crate::scores::{
    self, AttributionSettings, BarsModel, BarsStudy, Level, McsReport, NdOptions, ScoreDistribution, ScoreMethod, ScoreTest,
};
use crate::streams::derive_seed;

/// Version of the CSV/JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub params: BarsParams,
    pub n_train: usize,
    pub n_test: usize,
    /// Concept pool for CAV training, disjoint from train and test.
    pub n_pool: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            params: BarsParams::default(),
            n_train: 10_000,
            n_test: 2_000,
            n_pool: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_accuracy: Option<f64>,
    /// Load this network instead of training one.
    pub path: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: vec![128, 64, 32],
            dropout: 0.5,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            early_stop_accuracy: t.early_stop_accuracy,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    /// F_o, predicts the orientation.
    pub orientation: ModelSpec,
    /// F_c, predicts the color.
    pub color: ModelSpec,
}

impl ModelsConfig {
    pub fn spec(&self, target: Concept) -> &ModelSpec {
        match target {
            Concept::Orientation => &self.orientation,
            Concept::Color => &self.color,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavSettings {
    /// Bootstrap CAVs per concept and layer.
    pub bootstraps: usize,
    /// Permuted CAVs per bootstrap.
    pub n_perm: usize,
    pub alpha: f64,
    pub fit: CavConfig,
}

impl Default for CavSettings {
    fn default() -> Self {
        Self {
            bootstraps: 20,
            n_perm: 10,
            alpha: 0.05,
            fit: CavConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureModeConfig {
    pub baseline: BaselineSpec,
    /// Test that decides the flag for sign(CS) scores.
    pub sign_cs_test: ScoreTest,
    /// Test that decides the flag for ICS scores.
    pub ics_test: ScoreTest,
}

impl Default for FailureModeConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineSpec::ZeroImage,
            sign_cs_test: ScoreTest::WelchT,
            ics_test: ScoreTest::Rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalExamplesConfig {
    pub layer: usize,
    pub baseline: BaselineSpec,
}

impl Default for LocalExamplesConfig {
    fn default() -> Self {
        Self {
            layer: 2,
            baseline: BaselineSpec::ZeroImage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineProbabilitiesConfig {
    /// Pool images used by the average and median baselines.
    pub n_reference: usize,
    /// Independent draws of the noise baseline.
    pub n_noise: usize,
    /// Test samples whose entropy-maximizing baselines are evaluated.
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub entropy: EntropyOptions,
}

impl Default for BaselineProbabilitiesConfig {
    fn default() -> Self {
        Self {
            n_reference: 500,
            n_noise: 50,
            n_samples: 200,
            noise_sigma: 1.0,
            entropy: EntropyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McsConfig {
    /// Images sampled for CAV training.
    pub n_images: usize,
    /// Bootstrap CAVs per model.
    pub k: usize,
    pub baselines: Vec<BaselineSpec>,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            n_images: 1000,
            k: 100,
            baselines: vec![BaselineSpec::ZeroImage, BaselineSpec::EntropyMaximizing(EntropyOptions::default())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct InfluenceConfig {
    /// Test samples to evaluate; 0 means the whole test set.
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdConfig {
    pub concept: Concept,
    pub layer: usize,
    pub ratios: Vec<f64>,
    /// Ratios that are also run with augmented concept sets.
    pub augmented_ratios: Vec<f64>,
    pub baseline: BaselineSpec,
    pub options: NdOptions,
}

impl Default for NdConfig {
    fn default() -> Self {
        Self {
            concept: Concept::Orientation,
            layer: 2,
            ratios: vec![30.0, 10.0, 3.0, 1.0, 0.3, 0.1],
            augmented_ratios: vec![0.3, 0.1],
            baseline: BaselineSpec::ZeroImage,
            options: NdOptions::default(),
        }
    }
}

/// One JSON document describing a whole study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub models: ModelsConfig,
    pub concepts: Vec<Concept>,
    pub layers: Vec<usize>,
    pub cav: CavSettings,
    pub methods: Vec<ScoreMethod>,
    /// Quadrature points for ICS.
    pub steps: usize,
    pub failure_mode: FailureModeConfig,
    pub local_examples: LocalExamplesConfig,
    pub baseline_probabilities: BaselineProbabilitiesConfig,
    pub mcs: McsConfig,
    pub influence: InfluenceConfig,
    pub nd: NdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 2021,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            models: ModelsConfig::default(),
            concepts: Concept::ALL.to_vec(),
            layers: vec![0, 1, 2],
            cav: CavSettings::default(),
            methods: ScoreMethod::ALL.to_vec(),
            steps: attribution::DEFAULT_STEPS,
            failure_mode: FailureModeConfig::default(),
            local_examples: LocalExamplesConfig::default(),
            baseline_probabilities: BaselineProbabilitiesConfig::default(),
            mcs: McsConfig::default(),
            influence: InfluenceConfig::default(),
            nd: NdConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset
            .params
            .validate()
            .map_err(|e| config_err(format!("dataset.params: {e}")))?;
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 || self.dataset.n_pool == 0 {
            return Err(config_err("dataset sizes must be >= 1"));
        }
        for c in Concept::ALL {
            let m = self.models.spec(c);
            if m.path.is_none() && m.hidden.is_empty() {
                return Err(config_err(format!("models.{}: needs at least one hidden layer", c.name())));
            }
            if !(0.0..1.0).contains(&m.dropout) || !(m.learning_rate > 0.0) || m.batch_size == 0 {
                return Err(config_err(format!("models.{}: invalid training settings", c.name())));
            }
            if m.path.is_none() {
                let depth = m.hidden.len();
                let deepest = self
                    .layers
                    .iter()
                    .chain([&self.local_examples.layer, &self.nd.layer])
                    .max()
                    .copied()
                    .unwrap_or(0);
                if deepest >= depth {
                    return Err(config_err(format!(
                        "layer {deepest} does not exist in models.{} ({depth} hidden layers)",
                        c.name()
                    )));
                }
            }
        }
        if self.concepts.is_empty() || self.layers.is_empty() || self.methods.is_empty() {
            return Err(config_err("concepts, layers and methods must be non-empty"));
        }
        if self.steps == 0 {
            return Err(config_err("steps must be >= 1"));
        }
        if self.cav.bootstraps == 0 || self.cav.n_perm == 0 || !(self.cav.alpha > 0.0 && self.cav.alpha < 1.0) {
            return Err(config_err("cav: bootstraps, n_perm >= 1 and alpha in (0, 1) required"));
        }
        self.cav.fit.validate().map_err(|e| config_err(format!("cav.fit: {e}")))?;
        for b in self
            .mcs
            .baselines
            .iter()
            .chain([&self.failure_mode.baseline, &self.local_examples.baseline, &self.nd.baseline])
        {
            b.validate().map_err(|e| config_err(format!("baseline: {e}")))?;
        }
        if self.mcs.n_images < 2 || self.mcs.k == 0 {
            return Err(config_err("mcs: n_images >= 2 and k >= 1 required"));
        }
        if self.nd.ratios.is_empty() || self.nd.options.k == 0 {
            return Err(config_err("nd: ratios must be non-empty and k >= 1"));
        }
        Ok(())
    }

    /// Parses a config document, or the `config` member of a run manifest.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_err(format!("config is not JSON: {e}")))?;
        let value = match value {
            Value::Object(mut map) if map.contains_key("config") && map.contains_key("schema_version") => {
                map.remove("config").expect("checked")
            }
            v => v,
        };
        let cfg: Self = serde_json::from_value(value).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Applies `path=value` overrides; the value is parsed as JSON and falls
    /// back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (path, raw) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| config_err(format!("override '{}' is not of the form path=value", o.as_ref())))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, path.trim(), value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| config_err(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let next = match cur {
            Value::Object(map) => {
                // optional fields serialize as null and may be filled in
                map.get_mut(*part)
            }
            Value::Array(items) => part.parse::<usize>().ok().and_then(|j| items.get_mut(j)),
            _ => None,
        }
        .ok_or_else(|| config_err(format!("invalid override path '{path}' at '{part}'")))?;
        if last {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    Err(config_err("empty override path"))
}

/// Seeds derived from the master seed, one per purpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train_data: u64,
    pub test_data: u64,
    pub pool_data: u64,
    pub init_orientation: u64,
    pub init_color: u64,
    pub train_orientation: u64,
    pub train_color: u64,
    pub preset: BTreeMap<String, u64>,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Self {
            train_data: derive_seed(master, "bars-train", 0),
            test_data: derive_seed(master, "bars-test", 0),
            pool_data: derive_seed(master, "bars-pool", 0),
            init_orientation: derive_seed(master, "init", 0),
            init_color: derive_seed(master, "init", 1),
            train_orientation: derive_seed(master, "train", 0),
            train_color: derive_seed(master, "train", 1),
            preset: Preset::ALL
                .iter()
                .map(|p| (p.name().to_string(), derive_seed(master, p.name(), 0)))
                .collect(),
        }
    }

    pub fn for_preset(&self, p: Preset) -> u64 {
        self.preset[p.name()]
    }

    fn init(&self, c: Concept) -> u64 {
        match c {
            Concept::Orientation => self.init_orientation,
            Concept::Color => self.init_color,
        }
    }

    fn train(&self, c: Concept) -> u64 {
        match c {
            Concept::Orientation => self.train_orientation,
            Concept::Color => self.train_color,
        }
    }
}

/// The three BARS image sets of a config.
#[derive(Debug, Clone, Copy)]
pub struct BarsSplits {
    pub train: BarsSet,
    pub test: BarsSet,
    pub pool: BarsSet,
}

impl BarsSplits {
    pub fn new(cfg: &DatasetConfig, seeds: &Seeds) -> Result<Self> {
        Ok(Self {
            train: BarsSet::new(cfg.params, seeds.train_data, cfg.n_train)?,
            test: BarsSet::new(cfg.params, seeds.test_data, cfg.n_test)?,
            pool: BarsSet::new(cfg.params, seeds.pool_data, cfg.n_pool)?,
        })
    }
}

// ---------------------------------------------------------------------------
// models

/// How a model of the study came about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub target: Concept,
    pub source: String,
    pub sha256: String,
    pub report: Option<TrainReport>,
}

/// F_o and F_c.
#[derive(Debug, Clone)]
pub struct BarsModels {
    pub orientation: Network<f64>,
    pub color: Network<f64>,
    pub provenance: Vec<ModelProvenance>,
}

pub fn model_name(target: Concept) -> &'static str {
    match target {
        Concept::Orientation => "F_o",
        Concept::Color => "F_c",
    }
}

impl BarsModels {
    pub fn get(&self, target: Concept) -> &Network<f64> {
        match target {
            Concept::Orientation => &self.orientation,
            Concept::Color => &self.color,
        }
    }

    /// F_o first, then F_c.
    pub fn study_models(&self) -> Vec<BarsModel<'_, f64>> {
        Concept::ALL
            .iter()
            .map(|&c| BarsModel {
                net: self.get(c),
                target: c,
                name: model_name(c),
            })
            .collect()
    }
}

/// Trains the BARS MLP predicting `target`.
pub fn train_bars_model(spec: &ModelSpec, target: Concept, splits: &BarsSplits, seeds: &Seeds) -> Result<(Network<f64>, TrainReport)> {
    let net = Network::<f64>::init(
        splits.train.params.input_dim(),
        &spec.hidden,
        Head::Sigmoid,
        2,
        spec.dropout,
        seeds.init(target),
    )?;
    let cfg = TrainConfig {
        learning_rate: spec.learning_rate,
        batch_size: spec.batch_size,
        epochs: spec.epochs,
        seed: seeds.train(target),
        early_stop_accuracy: spec.early_stop_accuracy,
        ..TrainConfig::default()
    };
    netcore::train(net, &splits.train.labelled_by(target), Some(&splits.test.labelled_by(target)), &cfg)
}

/// Loads or trains both models.
pub fn obtain_models(cfg: &ExperimentConfig) -> Result<BarsModels> {
    let seeds = Seeds::derive(cfg.master_seed);
    let splits = BarsSplits::new(&cfg.dataset, &seeds)?;
    let mut nets = Vec::new();
    let mut provenance = Vec::new();
    for c in Concept::ALL {
        let spec = cfg.models.spec(c);
        let (net, source, report) = match &spec.path {
            Some(p) => (Network::<f64>::load(p)?, format!("loaded:{}", p.display()), None),
            None => {
                log::info!("training {} on {} images", model_name(c), cfg.dataset.n_train);
                let (net, rep) = train_bars_model(spec, c, &splits, &seeds)?;
                (net, "trained".to_string(), Some(rep))
            }
        };
        if net.input_dim() != cfg.dataset.params.input_dim() || net.n_classes() != 2 {
            return Err(config_err(format!("{} does not take BARS images to two classes", model_name(c))));
        }
        if let Some(&l) = cfg.layers.iter().max() {
            if l >= net.n_hidden() {
                return Err(config_err(format!("layer {l} does not exist in {}", model_name(c))));
            }
        }
        provenance.push(ModelProvenance {
            target: c,
            source,
            sha256: hex::encode(Sha256::digest(net.to_json()?.as_bytes())),
            report,
        });
        nets.push(net);
    }
    let color = nets.pop().expect("two models");
    let orientation = nets.pop().expect("two models");
    Ok(BarsModels {
        orientation,
        color,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    FailureMode,
    LocalExamples,
    McsTable,
    BaselineProbabilities,
    Influence,
    NdAblation,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::FailureMode,
        Preset::LocalExamples,
        Preset::McsTable,
        Preset::BaselineProbabilities,
        Preset::Influence,
        Preset::NdAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FailureMode => "failure-mode",
            Self::LocalExamples => "local-examples",
            Self::McsTable => "mcs-table",
            Self::BaselineProbabilities => "baseline-probabilities",
            Self::Influence => "influence",
            Self::NdAblation => "nd-ablation",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| config_err(format!("unknown preset '{s}' (known: {})", Self::ALL.map(|p| p.name()).join(", "))))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn settings(method: ScoreMethod, baseline: &BaselineSpec, steps: usize) -> AttributionSettings {
    AttributionSettings {
        method,
        baseline: baseline.clone(),
        steps,
    }
}

/// One (layer, concept, method) cell of the failure-mode study on F_o.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureModeRow {
    pub layer: usize,
    pub concept: Concept,
    pub method: ScoreMethod,
    pub baseline: String,
    pub tcav_median: f64,
    pub tcav_mean: f64,
    pub null_median: f64,
    /// Median held-out AUC of the real CAVs and its permutation test.
    pub cav_auc: f64,
    pub cav_significance: SignificanceResult,
    pub rank: SignificanceResult,
    pub welch: SignificanceResult,
    /// Verdict of the test configured for this method.
    pub flagged: bool,
    /// TCAV per real CAV.
    pub values: Vec<f64>,
    /// TCAV per permuted CAV.
    pub null_values: Vec<f64>,
    /// Per-sample median attribution over the real CAVs.
    pub local_medians: Vec<f64>,
}

/// TCAV^sign(CS) and TCAV^ICS of class 1 (vertical) of F_o against permuted
/// CAV nulls, for every configured layer and concept.
pub fn failure_mode(study: &BarsStudy<'_, f64>, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<FailureModeRow>> {
    let model = study.model_for(Concept::Orientation)?;
    let n_tests = cfg.layers.len() * cfg.concepts.len();
    let fm = &cfg.failure_mode;
    let mut rows = Vec::new();
    for &layer in &cfg.layers {
        for &concept in &cfg.concepts {
            let real = study.bootstrap_cavs(model, layer, concept, cfg.cav.bootstraps, &cfg.cav.fit, seed)?;
            let perm = study.permuted_cavs(model, layer, concept, cfg.cav.bootstraps, cfg.cav.n_perm, &cfg.cav.fit, seed)?;
            let cav_significance = cav::cav_significance(&real, &perm, cfg.cav.alpha, n_tests)?;
            let aucs: Vec<f64> = real.iter().map(|c| c.heldout_auc).collect();
            let acts = study.tp_activations(model, layer, 1)?;
            let net = study.models[model].net;
            for &method in &cfg.methods {
                let s = settings(method, &fm.baseline, cfg.steps);
                let real_m = scores::attribution_matrix(net, layer, 1, acts.view(), &real, &s, None)?;
                let null_m = scores::attribution_matrix(net, layer, 1, acts.view(), &perm, &s, None)?;
                let values = scores::tcav_per_cav(&real_m, method)?;
                let null_values = scores::tcav_per_cav(&null_m, method)?;
                let dist = ScoreDistribution {
                    values: values.clone(),
                    null_values: null_values.clone(),
                    level: Level::Global,
                    p_value: None,
                };
                let rank = ScoreTest::Rank.run(&dist, cfg.cav.alpha, n_tests)?;
                let welch = ScoreTest::WelchT.run(&dist, cfg.cav.alpha, n_tests)?;
                let chosen = match method {
                    ScoreMethod::SignCs => fm.sign_cs_test,
                    ScoreMethod::Ics => fm.ics_test,
                };
                let flagged = match chosen {
                    ScoreTest::Rank => rank.significant,
                    ScoreTest::WelchT => welch.significant,
                };
                rows.push(FailureModeRow {
                    layer,
                    concept,
                    method,
                    baseline: s.baseline_tag().to_string(),
                    tcav_median: scores::median(&values),
                    tcav_mean: values.iter().sum::<f64>() / values.len() as f64,
                    null_median: scores::median(&null_values),
                    cav_auc: scores::median(&aucs),
                    cav_significance,
                    rank,
                    welch,
                    flagged,
                    local_medians: real_m.columns().into_iter().map(|c| scores::median(&c.to_vec())).collect(),
                    values,
                    null_values,
                });
            }
        }
    }
    Ok(rows)
}

/// ICS of one test image for one concept with its local significance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExample {
    pub sample: usize,
    pub orientation: usize,
    pub color: usize,
    pub concept: Concept,
    pub layer: usize,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub null_median: f64,
    pub significance: SignificanceResult,
}

/// One correctly classified test image per (orientation, color) pair, with
/// ICS of class 1 (vertical) of F_o for every concept.
pub fn local_examples(study: &BarsStudy<'_, f64>, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<LocalExample>> {
    let model = study.model_for(Concept::Orientation)?;
    let layer = cfg.local_examples.layer;
    let net = study.models[model].net;
    let preds = &study.eval_captured[model].predictions;
    let mut picks = Vec::new();
    for o in 0..2 {
        for c in 0..2 {
            let found = (0..study.eval_labels.len()).find(|&i| {
                let (lo, lc) = study.eval_labels[i];
                Concept::Orientation.label_of(lo, lc) == o && Concept::Color.label_of(lo, lc) == c && preds[i] == o
            });
            match found {
                Some(i) => picks.push((i, o, c)),
                None => {
                    return Err(Error::EmptyTruePositives {
                        model: model_name(Concept::Orientation).into(),
                        class: o,
                    })
                }
            }
        }
    }
    let idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
    let acts = study.eval_captured[model].activations[layer].select(Axis(0), &idx);
    let s = settings(ScoreMethod::Ics, &cfg.local_examples.baseline, cfg.steps);
    let n_tests = cfg.concepts.len() * idx.len();
    let mut out = Vec::new();
    for &concept in &cfg.concepts {
        let real = study.bootstrap_cavs(model, layer, concept, cfg.cav.bootstraps, &cfg.cav.fit, seed)?;
        let perm = study.permuted_cavs(model, layer, concept, cfg.cav.bootstraps, cfg.cav.n_perm, &cfg.cav.fit, seed)?;
        let real_m = scores::attribution_matrix(net, layer, 1, acts.view(), &real, &s, None)?;
        let null_m = scores::attribution_matrix(net, layer, 1, acts.view(), &perm, &s, None)?;
        for (dist, &(sample, o, c)) in scores::local_distributions(&real_m, &null_m)?.iter().zip(&picks) {
            out.push(LocalExample {
                sample,
                orientation: o,
                color: c,
                concept,
                layer,
                median: scores::median(&dist.values),
                ci_low: scores::percentile(&dist.values, 2.5),
                ci_high: scores::percentile(&dist.values, 97.5),
                null_median: scores::median(&dist.null_values),
                significance: scores::score_significance(dist, cfg.cav.alpha, n_tests)?,
            });
        }
    }
    Ok(out)
}

/// P(vertical) of F_o at one baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineProbability {
    pub baseline: String,
    pub layer: usize,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Predicted probability of "vertical" for each uninformative baseline and
/// the average activation, per layer.
pub fn baseline_probabilities(
    models: &BarsModels,
    splits: &BarsSplits,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<BaselineProbability>> {
    let net = &models.orientation;
    let bp = &cfg.baseline_probabilities;
    let n_ref = bp.n_reference.min(splits.pool.len).max(1);
    let reference: Array2<f64> = splits.pool.labelled_by(Concept::Orientation).batch(&(0..n_ref).collect::<Vec<_>>());
    let ref_acts = net.capture_batch(reference.view())?.0;
    let image_prob = |spec: &BaselineSpec| -> Result<f64> {
        let x = attribution::baseline_input(spec, net.input_dim(), Some(reference.view()))?;
        Ok(net.forward_capture(x.as_slice().expect("contiguous"))?.probabilities[1])
    };
    let noise: Vec<f64> = (0..bp.n_noise.max(1))
        .map(|i| {
            image_prob(&BaselineSpec::NoiseImage {
                sigma: bp.noise_sigma,
                seed: derive_seed(seed, "noise-baseline", i as u64),
            })
        })
        .collect::<Result<_>>()?;
    let fixed = [
        ("zero_image", image_prob(&BaselineSpec::ZeroImage)?),
        ("one_image", image_prob(&BaselineSpec::OneImage)?),
        ("pixelwise_average", image_prob(&BaselineSpec::PixelwiseAverage)?),
        ("pixelwise_median", image_prob(&BaselineSpec::PixelwiseMedian)?),
    ];
    let n_eval = bp.n_samples.min(splits.test.len).max(1);
    let eval: Array2<f64> = splits
        .test
        .labelled_by(Concept::Orientation)
        .batch(&(0..n_eval).collect::<Vec<_>>());
    let eval_acts = net.capture_batch(eval.view())?.0;
    let entropy_spec = BaselineSpec::EntropyMaximizing(bp.entropy);
    let mut rows = Vec::new();
    for &layer in &cfg.layers {
        let (m, s) = mean_sd(&noise);
        rows.push(BaselineProbability {
            baseline: "noise_image".into(),
            layer,
            mean: m,
            sd: s,
            n: noise.len(),
        });
        for (tag, p) in fixed {
            rows.push(BaselineProbability {
                baseline: tag.into(),
                layer,
                mean: p,
                sd: 0.0,
                n: 1,
            });
        }
        let avg = ref_acts[layer].mean_axis(Axis(0)).expect("non-empty reference");
        let p = net.head_from_layer(layer, &ActivationVector::new(layer, avg))?[1];
        rows.push(BaselineProbability {
            baseline: "average_activation".into(),
            layer,
            mean: p,
            sd: 0.0,
            n: 1,
        });
        use rayon::prelude::*;
        let probs: Vec<f64> = (0..n_eval)
            .into_par_iter()
            .map(|i| {
                let a = ActivationVector::new(layer, eval_acts[layer].row(i).to_owned());
                let b = attribution::make_baseline(&entropy_spec, net, layer, &a, BaselineContext::default())?;
                Ok(net.head_from_layer(layer, &b)?[1])
            })
            .collect::<Result<_>>()?;
        let (m, s) = mean_sd(&probs);
        rows.push(BaselineProbability {
            baseline: "entropy_maximizing".into(),
            layer,
            mean: m,
            sd: s,
            n: probs.len(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub model: String,
    pub concept: Concept,
    pub global: f64,
    pub max_local: f64,
    pub local: Vec<f64>,
}

/// `G_C` of every configured concept in both models on the test set.
pub fn influence(models: &BarsModels, splits: &BarsSplits, cfg: &ExperimentConfig) -> Result<Vec<InfluenceRow>> {
    let n = if cfg.influence.n_samples == 0 {
        splits.test.len
    } else {
        cfg.influence.n_samples.min(splits.test.len)
    };
    let samples: Vec<_> = splits.test.samples().take(n).collect();
    let mut rows = Vec::new();
    for target in Concept::ALL {
        for &concept in &cfg.concepts {
            let r = scores::concept_influence(models.get(target), &samples, concept)?;
            rows.push(InfluenceRow {
                model: model_name(target).into(),
                concept,
                global: r.global,
                max_local: r.local.iter().copied().fold(0.0, f64::max),
                local: r.local,
            });
        }
    }
    Ok(rows)
}

/// MCS for every concept, layer and method; ICS once per configured baseline.
pub fn mcs_table(study: &BarsStudy<'_, f64>, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<McsReport>> {
    let mut variants = Vec::new();
    for &m in &cfg.methods {
        match m {
            ScoreMethod::SignCs => variants.push(settings(m, &BaselineSpec::ZeroImage, cfg.steps)),
            ScoreMethod::Ics => variants.extend(cfg.mcs.baselines.iter().map(|b| settings(m, b, cfg.steps))),
        }
    }
    let mut out = Vec::new();
    for &concept in &cfg.concepts {
        let relevant = study.model_for(concept)?;
        let irrelevant = 1 - relevant;
        for &layer in &cfg.layers {
            let rel = study.bootstrap_cavs(relevant, layer, concept, cfg.mcs.k, &cfg.cav.fit, seed)?;
            let irr = study.bootstrap_cavs(irrelevant, layer, concept, cfg.mcs.k, &cfg.cav.fit, seed)?;
            for s in &variants {
                out.push(scores::mcs_from_cavs(
                    study, relevant, irrelevant, concept, layer, &rel, &irr, s, None,
                )?);
            }
        }
    }
    Ok(out)
}

/// The n/d table without augmentation, then the augmented one.
pub fn nd_tables(study: &BarsStudy<'_, f64>, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<scores::NdTable>> {
    let s = settings(ScoreMethod::Ics, &cfg.nd.baseline, cfg.steps);
    let mut out = vec![scores::nd_ablation(
        study,
        cfg.nd.concept,
        cfg.nd.layer,
        &cfg.nd.ratios,
        false,
        &s,
        &cfg.nd.options,
        seed,
    )?];
    if !cfg.nd.augmented_ratios.is_empty() {
        out.push(scores::nd_ablation(
            study,
            cfg.nd.concept,
            cfg.nd.layer,
            &cfg.nd.augmented_ratios,
            true,
            &s,
            &cfg.nd.options,
            seed,
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reports

/// A named table with a fixed column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Everything one preset run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub preset: String,
    pub schema_version: u32,
    pub master_seed: u64,
    pub config_hash: String,
    pub tables: Vec<Table>,
    /// Full distributions and nulls.
    pub details: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(config_err(format!("unknown report format '{other}'"))),
        }
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// First line of every CSV report.
pub fn csv_header_line(bundle: &ReportBundle) -> String {
    format!(
        "# schema_version={} preset={} master_seed={} config_hash={}",
        bundle.schema_version, bundle.preset, bundle.master_seed, bundle.config_hash
    )
}

/// Writes the bundle into `dir`: one CSV per table, or `report.json`.
pub fn emit_report(bundle: &ReportBundle, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            for t in &bundle.tables {
                let path = dir.join(format!("{}.csv", t.name));
                let mut buf = format!("{}\n", csv_header_line(bundle)).into_bytes();
                {
                    let mut w = csv::Writer::from_writer(&mut buf);
                    w.write_record(&t.columns)?;
                    for r in &t.rows {
                        w.write_record(r)?;
                    }
                    w.flush()?;
                }
                std::fs::write(&path, buf)?;
                written.push(path);
            }
        }
        ReportFormat::Json => {
            let path = dir.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(bundle)? + "\n")?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads a CSV report written by [`emit_report`].
pub fn read_csv_table(path: &Path) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let columns = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Table {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        columns,
        rows,
    })
}

/// Reproduction record written next to the reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: String,
    pub schema_version: u32,
    pub code_version: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub seeds: Seeds,
    pub models: Vec<ModelProvenance>,
    pub config: ExperimentConfig,
    /// SHA-256 per artifact file name.
    pub artifacts: BTreeMap<String, String>,
}

fn fmt_flag(b: bool) -> String {
    b.to_string()
}

/// Runs one preset on already obtained models.
pub fn run_preset_with(preset: Preset, cfg: &ExperimentConfig, models: &BarsModels) -> Result<ReportBundle> {
    cfg.validate()?;
    let seeds = Seeds::derive(cfg.master_seed);
    let seed = seeds.for_preset(preset);
    let splits = BarsSplits::new(&cfg.dataset, &seeds)?;
    let study_on = |pool: BarsSet| BarsStudy::new(models.study_models(), pool, splits.test);
    let mut tables = Vec::new();
    let details = match preset {
        Preset::FailureMode => {
            let rows = failure_mode(&study_on(splits.pool)?, cfg, seed)?;
            let mut t = Table::new(
                "failure_mode",
                &[
                    "model",
                    "layer",
                    "concept",
                    "method",
                    "baseline",
                    "tcav_median",
                    "tcav_mean",
                    "null_median",
                    "cav_auc",
                    "cav_p_value",
                    "rank_p_value",
                    "rank_significant",
                    "welch_p_value",
                    "welch_significant",
                    "flagged",
                ],
            );
            for r in &rows {
                t.push(vec![
                    "F_o".into(),
                    r.layer.to_string(),
                    r.concept.name().into(),
                    r.method.name().into(),
                    r.baseline.clone(),
                    num(r.tcav_median),
                    num(r.tcav_mean),
                    num(r.null_median),
                    num(r.cav_auc),
                    num(r.cav_significance.p_value),
                    num(r.rank.p_value),
                    fmt_flag(r.rank.significant),
                    num(r.welch.p_value),
                    fmt_flag(r.welch.significant),
                    fmt_flag(r.flagged),
                ]);
            }
            tables.push(t);
            serde_json::to_value(&rows)?
        }
        Preset::LocalExamples => {
            let rows = local_examples(&study_on(splits.pool)?, cfg, seed)?;
            let mut t = Table::new(
                "local_examples",
                &[
                    "sample",
                    "orientation",
                    "color",
                    "concept",
                    "layer",
                    "ics_median",
                    "ci_low",
                    "ci_high",
                    "null_median",
                    "p_value",
                    "significant",
                ],
            );
            for r in &rows {
                t.push(vec![
                    r.sample.to_string(),
                    r.orientation.to_string(),
                    r.color.to_string(),
                    r.concept.name().into(),
                    r.layer.to_string(),
                    num(r.median),
                    num(r.ci_low),
                    num(r.ci_high),
                    num(r.null_median),
                    num(r.significance.p_value),
                    fmt_flag(r.significance.significant),
                ]);
            }
            tables.push(t);
            serde_json::to_value(&rows)?
        }
        Preset::McsTable => {
            let pool = BarsSet::new(cfg.dataset.params, derive_seed(seed, "mcs-images", 0), cfg.mcs.n_images)?;
            let rows = mcs_table(&study_on(pool)?, cfg, seed)?;
            let mut t = Table::new("mcs", &["concept", "layer", "method", "baseline", "median", "ci_low", "ci_high"]);
            for r in &rows {
                t.push(vec![
                    r.concept.clone(),
                    r.layer.to_string(),
                    r.method.name().into(),
                    r.baseline.clone(),
                    num(r.median),
                    num(r.ci_low),
                    num(r.ci_high),
                ]);
            }
            tables.push(t);
            serde_json::to_value(&rows)?
        }
        Preset::BaselineProbabilities => {
            let rows = baseline_probabilities(models, &splits, cfg, seed)?;
            let mut t = Table::new(
                "baseline_probabilities",
                &["model", "baseline", "layer", "p_vertical_mean", "p_vertical_sd", "n"],
            );
            for r in &rows {
                t.push(vec![
                    "F_o".into(),
                    r.baseline.clone(),
                    r.layer.to_string(),
                    num(r.mean),
                    num(r.sd),
                    r.n.to_string(),
                ]);
            }
            tables.push(t);
            serde_json::to_value(&rows)?
        }
        Preset::Influence => {
            let rows = influence(models, &splits, cfg)?;
            let mut t = Table::new("influence", &["model", "concept", "global", "max_local", "n"]);
            for r in &rows {
                t.push(vec![
                    r.model.clone(),
                    r.concept.name().into(),
                    num(r.global),
                    num(r.max_local),
                    r.local.len().to_string(),
                ]);
            }
            tables.push(t);
            serde_json::to_value(&rows)?
        }
        Preset::NdAblation => {
            let nd = nd_tables(&study_on(splits.pool)?, cfg, seed)?;
            let mut t = Table::new(
                "nd_ablation",
                &[
                    "concept",
                    "layer",
                    "ratio",
                    "n_per_side",
                    "augmented",
                    "n_train_per_side",
                    "median",
                    "ci_low",
                    "ci_high",
                ],
            );
            for table in &nd {
                for r in &table.rows {
                    t.push(vec![
                        cfg.nd.concept.name().into(),
                        cfg.nd.layer.to_string(),
                        num(r.ratio),
                        r.n_per_side.to_string(),
                        fmt_flag(r.augmented),
                        r.n_train_per_side.to_string(),
                        num(r.report.median),
                        num(r.report.ci_low),
                        num(r.report.ci_high),
                    ]);
                }
            }
            tables.push(t);
            serde_json::to_value(&nd)?
        }
    };
    Ok(ReportBundle {
        preset: preset.name().to_string(),
        schema_version: SCHEMA_VERSION,
        master_seed: cfg.master_seed,
        config_hash: cfg.hash(),
        tables,
        details,
    })
}

/// Result of [`run_preset`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub bundle: ReportBundle,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Obtains the models, runs the preset and writes CSV, JSON and the manifest
/// to `<output_dir>/<preset>/`.
pub fn run_preset(preset: Preset, cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let models = obtain_models(cfg)?;
    let bundle = run_preset_with(preset, cfg, &models)?;
    let dir = cfg.output_dir.join(preset.name());
    let files = write_run(&bundle, cfg, &models, &dir)?;
    Ok(RunOutput { bundle, dir, files })
}

/// Writes reports and the manifest of an existing bundle.
pub fn write_run(bundle: &ReportBundle, cfg: &ExperimentConfig, models: &BarsModels, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = emit_report(bundle, dir, ReportFormat::Csv)?;
    files.extend(emit_report(bundle, dir, ReportFormat::Json)?);
    let mut artifacts = BTreeMap::new();
    for f in &files {
        let name = f.file_name().expect("file").to_string_lossy().into_owned();
        artifacts.insert(name, hex::encode(Sha256::digest(std::fs::read(f)?)));
    }
    let manifest = Manifest {
        preset: bundle.preset.clone(),
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.master_seed,
        config_hash: cfg.hash(),
        seeds: Seeds::derive(cfg.master_seed),
        models: models.provenance.clone(),
        config: cfg.clone(),
        artifacts,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    files.push(path);
    Ok(files)
}

/// Checks the artifact hashes of a run directory against its manifest and
/// returns the manifest and the CSV tables.
pub fn verify_run(dir: &Path) -> Result<(Manifest, Vec<Table>)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut tables = Vec::new();
    for (name, hash) in &manifest.artifacts {
        let path = dir.join(name);
        let actual = hex::encode(Sha256::digest(std::fs::read(&path)?));
        if &actual != hash {
            return Err(Error::InvalidArgument(format!("{name} does not match its manifest hash")));
        }
        if name.ends_with(".csv") {
            tables.push(read_csv_table(&path)?);
        }
    }
    Ok((manifest, tables))
}

// ---------------------------------------------------------------------------
// process plumbing

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "ICSCOPE_THREADS";

/// Sizes the global worker pool from `ICSCOPE_THREADS`; unset means rayon's
/// default.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| config_err(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        return 3;
    }
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Missing(_) | Error::DimensionMismatch { .. } | Error::Json(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), cfg);
        assert_eq!(cfg.hash(), cfg.clone().hash());
    }

    #[test]
    fn overrides_follow_dot_paths() {
        let cfg = ExperimentConfig::default();
        let o = cfg
            .with_overrides(&[
                "mcs.k=7",
                "cav.fit.strength=0.01",
                "layers=[0,2]",
                "output_dir=elsewhere",
                "nd.ratios.1=5",
            ])
            .unwrap();
        assert_eq!(o.mcs.k, 7);
        assert_eq!(o.cav.fit.strength, 0.01);
        assert_eq!(o.layers, vec![0, 2]);
        assert_eq!(o.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(o.nd.ratios[1], 5.0);
        assert_ne!(o.hash(), cfg.hash());
        for bad in ["mcs.kk=3", "nope=1", "mcs.k", "nd.ratios.99=1"] {
            assert!(matches!(cfg.with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
        // a layer beyond the model depth is a config error
        assert!(matches!(cfg.with_overrides(&["layers=[3]"]), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_documents_load_as_config() {
        let cfg = ExperimentConfig::default().with_overrides(&["master_seed=5"]).unwrap();
        let doc = serde_json::json!({"schema_version": 1, "config": cfg});
        assert_eq!(ExperimentConfig::from_json_str(&doc.to_string()).unwrap(), cfg);
        assert!(matches!(ExperimentConfig::from_json_str("{\"bogus\": 1}"), Err(Error::Config(_))));
    }

    #[test]
    fn presets_parse() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!(matches!("fig-9".parse::<Preset>(), Err(Error::Config(_))));
        let seeds = Seeds::derive(1);
        let distinct: std::collections::BTreeSet<u64> = seeds.preset.values().copied().collect();
        assert_eq!(distinct.len(), Preset::ALL.len());
    }

    fn bundle() -> ReportBundle {
        let mut t = Table::new("demo", &["a", "b"]);
        t.push(vec!["1".into(), num(0.1 + 0.2)]);
        t.push(vec!["x,y".into(), num(-3e-12)]);
        ReportBundle {
            preset: "demo".into(),
            schema_version: SCHEMA_VERSION,
            master_seed: 9,
            config_hash: "abc".into(),
            tables: vec![t, Table::new("empty", &["c"])],
            details: serde_json::json!({"values": [0.30000000000000004, 1e-300]}),
        }
    }

    #[test]
    fn csv_reports_have_version_row_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        let files = emit_report(&b, dir.path(), ReportFormat::Csv).unwrap();
        assert_eq!(files.len(), 2);
        let text = std::fs::read_to_string(dir.path().join("demo.csv")).unwrap();
        assert!(text.starts_with("# schema_version=1 preset=demo master_seed=9 config_hash=abc\na,b\n"));
        assert_eq!(read_csv_table(&dir.path().join("demo.csv")).unwrap(), b.tables[0]);
        // empty table is header only
        let empty = std::fs::read_to_string(dir.path().join("empty.csv")).unwrap();
        assert_eq!(empty.lines().count(), 2);
    }

    #[test]
    fn json_report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        emit_report(&b, dir.path(), ReportFormat::Json).unwrap();
        let back: ReportBundle = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 1,
                batch: 2,
                loss: f64::NAN
            }),
            3
        );
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }
}
