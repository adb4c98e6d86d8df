use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};

use icscope::attribution::{self, AttributionRecord, BaselineContext, BaselineSpec, ForgettingStrength};
use icscope::barsdata::{self, BarsParams, BarsSample, BarsSet, Concept, LabelledImages};
use icscope::cav::{self, CavConfig, ConceptSet, Regularization};
use icscope::harness::{self, ExperimentConfig, Preset, Seeds};
use icscope::netcore::{Network, Samples};
use icscope::scores::{self, AttributionSettings, Level, ScoreDistribution, ScoreMethod, ScoreTest};
use icscope::Error;

#[derive(Parser)]
#[command(name = "icscope", version, about = "Concept attribution with integrated conceptual sensitivity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a BARS dataset as raw f32 tensors plus manifest.csv.
    GenerateData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train F_o or F_c on the configured BARS split.
    TrainModel {
        #[arg(long)]
        target: Concept,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit bootstrap and permuted CAVs on a model's activations.
    TrainCavs(TrainCavsArgs),
    /// Local CS and ICS for every sample of an exported dataset.
    Attribute(AttributeArgs),
    /// Global TCAV score of a CAV bundle against its permuted CAVs.
    Global(GlobalArgs),
    /// Bootstrapped model contrast scores.
    Mcs {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        concept: Option<Concept>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        method: Option<ScoreMethod>,
        #[arg(long)]
        baseline: Option<BaselineSpec>,
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// Counterfactual concept influence g_C and G_C.
    Influence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        concept: Concept,
        #[command(flatten)]
        samples: SampleArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MCS as a function of the n/d ratio.
    AblateNd {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        concept: Option<Concept>,
        /// Ratios to repeat with augmentation; empty disables it.
        #[arg(long, value_delimiter = ',')]
        augmented_ratios: Option<Vec<f64>>,
    },
    /// Run a named experiment preset.
    RunPreset {
        name: Preset,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Verify a run directory against its manifest and print its tables.
    Report {
        run: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print the default experiment config.
    DefaultConfig,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config JSON, or the manifest of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dot-path override, e.g. --set mcs.k=50 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> icscope::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut all = extra;
        if let Some(s) = self.seed {
            all.push(format!("master_seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            all.push(format!("output_dir={}", serde_json::Value::String(d.display().to_string())));
        }
        all.extend(self.overrides.iter().cloned());
        base.with_overrides(&all)
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Directory written by generate-data.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Generate this many samples instead.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

impl SampleArgs {
    fn load(&self) -> anyhow::Result<Vec<(u64, BarsSample)>> {
        match &self.samples {
            Some(dir) => Ok(barsdata::import(dir, &BarsParams::default())?),
            None => Ok(barsdata::generate(self.n, self.data_seed)?
                .into_iter()
                .enumerate()
                .map(|(i, s)| (i as u64, s))
                .collect()),
        }
    }
}

#[derive(Args)]
struct TrainCavsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    concept: Concept,
    #[arg(long = "B", default_value_t = 20)]
    b: usize,
    #[arg(long, default_value_t = 10)]
    n_perm: usize,
    /// l2 or elastic-net.
    #[arg(long, default_value = "l2")]
    reg: String,
    #[arg(long, default_value_t = 0.5)]
    l1_ratio: f64,
    #[arg(long, default_value_t = CavConfig::default().strength)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concept pool: exported dataset directory, else generated.
    #[command(flatten)]
    pool: SampleArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    n_tests: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cavs: PathBuf,
    #[arg(long, default_value = "zero_image")]
    baseline: BaselineSpec,
    /// Forgetting strength: a number or "reflection".
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long, default_value_t = attribution::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    samples: PathBuf,
    /// Reference images for the average and median baselines.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    class: usize,
    #[arg(long, default_value = "concept")]
    concept: String,
    /// Which non-permuted CAV of the bundle to use.
    #[arg(long, default_value_t = 0)]
    cav_index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GlobalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cavs: PathBuf,
    #[command(flatten)]
    samples: SampleArgs,
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Keep only true positives of this target concept.
    #[arg(long)]
    target: Option<Concept>,
    #[arg(long, default_value = "ics")]
    method: ScoreMethod,
    #[arg(long, default_value = "zero_image")]
    baseline: BaselineSpec,
    #[arg(long, default_value_t = attribution::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value = "rank")]
    test: ScoreTest,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    n_tests: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_net(path: &Path) -> anyhow::Result<Network<f64>> {
    Network::<f64>::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn batch(samples: &[BarsSample]) -> Array2<f64> {
    LabelledImages {
        samples,
        concept: Concept::Orientation,
    }
    .batch(&(0..samples.len()).collect::<Vec<_>>())
}

fn write_or_print(out: Option<&Path>, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn train_cavs(a: &TrainCavsArgs) -> anyhow::Result<()> {
    let net = load_net(&a.model)?;
    let regularization = match a.reg.as_str() {
        "l2" => Regularization::L2,
        "elastic-net" | "elastic_net" | "elasticnet" => Regularization::ElasticNet { l1_ratio: a.l1_ratio },
        other => return Err(Error::Config(format!("unknown regularization '{other}'")).into()),
    };
    let cfg = CavConfig {
        regularization,
        strength: a.strength,
        ..CavConfig::default()
    };
    let pool: Vec<BarsSample> = a.pool.load()?.into_iter().map(|(_, s)| s).collect();
    let acts = net.capture_batch(batch(&pool).view())?.0;
    let acts = acts
        .get(a.layer)
        .ok_or_else(|| Error::Config(format!("layer {} does not exist", a.layer)))?;
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..pool.len()).partition(|&i| pool[i].label(a.concept) == 1);
    let cs = ConceptSet::new(a.concept.name(), a.layer, acts.select(Axis(0), &pos), acts.select(Axis(0), &neg))?;
    let mut cavs = cav::bootstrap_cavs(&cs, a.b, &cfg, a.seed)?;
    let summary = if a.n_perm > 0 {
        let perm = cav::permuted_cavs(&cs, a.b, a.n_perm, &cfg, a.seed)?;
        let sig = cav::cav_significance(&cavs, &perm, a.alpha, a.n_tests)?;
        cavs.extend(perm);
        serde_json::to_value(sig)?
    } else {
        serde_json::Value::Null
    };
    fs::write(&a.out, cav::cavs_to_json(&cavs)?)?;
    let aucs: Vec<f64> = cavs.iter().filter(|c| !c.provenance.permuted).map(|c| c.heldout_auc).collect();
    write_or_print(
        None,
        &serde_json::json!({"cavs": cavs.len(), "median_auc": scores::median(&aucs), "significance": summary}),
    )
}

fn forgetting_strength(raw: &str) -> anyhow::Result<ForgettingStrength> {
    if raw == "reflection" {
        return Ok(ForgettingStrength::Reflection);
    }
    let l: f64 = raw
        .parse()
        .map_err(|_| Error::Config(format!("--lambda must be a number or 'reflection', got '{raw}'")))?;
    Ok(ForgettingStrength::Fixed(l))
}

fn attribute(a: &AttributeArgs) -> anyhow::Result<()> {
    let net = load_net(&a.model)?;
    let bundle: Vec<icscope::Cav> = cav::cavs_from_json(&fs::read_to_string(&a.cavs)?)?;
    let cav = bundle
        .iter()
        .filter(|c| !c.provenance.permuted)
        .nth(a.cav_index)
        .ok_or_else(|| Error::Config(format!("bundle has no real CAV with index {}", a.cav_index)))?;
    let mut spec = a.baseline.clone();
    if let Some(l) = &a.lambda {
        match spec {
            BaselineSpec::ConceptForgetting(_) => spec = BaselineSpec::ConceptForgetting(forgetting_strength(l)?),
            _ => bail!(Error::Config("--lambda only applies to the concept_forgetting baseline".into())),
        }
    }
    spec.validate()?;
    let samples = barsdata::import(&a.samples, &BarsParams::default())?;
    let images: Vec<BarsSample> = samples.iter().map(|(_, s)| s.clone()).collect();
    let reference = match &a.reference {
        Some(dir) => Some(batch(
            &barsdata::import(dir, &BarsParams::default())?
                .into_iter()
                .map(|(_, s)| s)
                .collect::<Vec<_>>(),
        )),
        None => None,
    };
    let layer = cav.layer;
    let acts = net.capture_batch(batch(&images).view())?.0.swap_remove(layer);
    let mut records = Vec::with_capacity(samples.len());
    for ((id, _), row) in samples.iter().zip(acts.rows()) {
        let act = icscope::ActivationVector::new(layer, row.to_owned());
        let ctx = BaselineContext {
            cav: Some(cav),
            reference: reference.as_ref().map(|r| r.view()),
        };
        let base = attribution::make_baseline(&spec, &net, layer, &act, ctx)?;
        records.push(AttributionRecord {
            sample_id: *id,
            concept: a.concept.clone(),
            layer,
            class: a.class,
            cs: attribution::conceptual_sensitivity(&net, a.class, layer, &act, cav)?,
            ics: attribution::ics(&net, a.class, layer, &act, &base, cav, a.steps)?,
            baseline: spec.tag().to_string(),
            steps: a.steps,
        });
    }
    attribution::write_attributions(fs::File::create(&a.out)?, &records)?;
    eprintln!("wrote {} rows to {}", 2 * records.len(), a.out.display());
    Ok(())
}

fn global(a: &GlobalArgs) -> anyhow::Result<()> {
    let net = load_net(&a.model)?;
    let bundle: Vec<icscope::Cav> = cav::cavs_from_json(&fs::read_to_string(&a.cavs)?)?;
    let (perm, real): (Vec<_>, Vec<_>) = bundle.into_iter().partition(|c| c.provenance.permuted);
    if real.is_empty() || perm.is_empty() {
        bail!(Error::Config(
            "the bundle needs real and permuted CAVs (train-cavs --n-perm >= 1)".into()
        ));
    }
    let layer = real[0].layer;
    let mut images: Vec<BarsSample> = a.samples.load()?.into_iter().map(|(_, s)| s).collect();
    let (acts, probs) = net.capture_batch(batch(&images).view())?;
    let mut acts = acts
        .into_iter()
        .nth(layer)
        .ok_or_else(|| Error::Config(format!("layer {layer} does not exist")))?;
    if let Some(target) = a.target {
        let keep: Vec<usize> = (0..images.len())
            .filter(|&i| {
                let pred = if probs[[i, 1]] > probs[[i, 0]] { 1 } else { 0 };
                images[i].label(target) == a.class && pred == a.class
            })
            .collect();
        if keep.is_empty() {
            bail!(Error::EmptyTruePositives {
                model: a.model.display().to_string(),
                class: a.class
            });
        }
        acts = acts.select(Axis(0), &keep);
        images = keep.iter().map(|&i| images[i].clone()).collect();
    }
    let settings = AttributionSettings {
        method: a.method,
        baseline: a.baseline.clone(),
        steps: a.steps,
    };
    let real_m = scores::attribution_matrix(&net, layer, a.class, acts.view(), &real, &settings, None)?;
    let null_m = scores::attribution_matrix(&net, layer, a.class, acts.view(), &perm, &settings, None)?;
    let mut dist = ScoreDistribution {
        values: scores::tcav_per_cav(&real_m, a.method)?,
        null_values: scores::tcav_per_cav(&null_m, a.method)?,
        level: Level::Global,
        p_value: None,
    };
    let sig = a.test.run(&dist, a.alpha, a.n_tests)?;
    dist.p_value = Some(sig.p_value);
    write_or_print(
        a.out.as_deref(),
        &serde_json::json!({
            "method": a.method,
            "baseline": settings.baseline_tag(),
            "layer": layer,
            "class": a.class,
            "n_samples": images.len(),
            "tcav_median": scores::median(&dist.values),
            "test": a.test.name(),
            "significance": sig,
            "distribution": dist,
        }),
    )
}

fn influence(model: &Path, concept: Concept, samples: &SampleArgs, out: Option<&Path>) -> anyhow::Result<()> {
    let net = load_net(model)?;
    let images: Vec<BarsSample> = samples.load()?.into_iter().map(|(_, s)| s).collect();
    let r = scores::concept_influence(&net, &images, concept)?;
    if out.is_none() {
        println!("G_{} = {}", r.concept, r.global);
    }
    if let Some(p) = out {
        write_or_print(Some(p), &serde_json::to_value(&r)?)?;
    }
    Ok(())
}

fn run(preset: Preset, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = harness::run_preset(preset, cfg)?;
    for t in &out.bundle.tables {
        print_table(t);
    }
    eprintln!("wrote {} files to {}", out.files.len(), out.dir.display());
    Ok(())
}

fn print_table(t: &harness::Table) {
    let widths: Vec<usize> = (0..t.columns.len())
        .map(|j| {
            t.rows
                .iter()
                .map(|r| r[j].len().min(24))
                .chain([t.columns[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| {
                let c = if c.len() > 24 { &c[..24] } else { c };
                format!("{c:<w$}")
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("[{}]", t.name);
    println!("{}", line(&t.columns));
    for r in &t.rows {
        println!("{}", line(r));
    }
}

fn json_list(items: serde_json::Value) -> String {
    items.to_string()
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { n, seed, out } => {
            let set = BarsSet::new(BarsParams::default(), seed, n)?;
            if n == 0 {
                bail!(Error::Config("--n must be >= 1".into()));
            }
            let samples: Vec<BarsSample> = set.samples().collect();
            let count = barsdata::export(&samples, &out)?;
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Command::TrainModel { target, config, out } => {
            let cfg = config.load(Vec::new())?;
            let seeds = Seeds::derive(cfg.master_seed);
            let splits = harness::BarsSplits::new(&cfg.dataset, &seeds)?;
            let (net, report) = harness::train_bars_model(cfg.models.spec(target), target, &splits, &seeds)?;
            net.save(&out)?;
            write_or_print(None, &serde_json::to_value(&report)?)?;
        }
        Command::TrainCavs(a) => train_cavs(&a)?,
        Command::Attribute(a) => attribute(&a)?,
        Command::Global(a) => global(&a)?,
        Command::Mcs {
            config,
            concept,
            layer,
            method,
            baseline,
            k,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = concept {
                extra.push(format!("concepts={}", json_list(serde_json::json!([c]))));
            }
            if let Some(l) = layer {
                extra.push(format!("layers=[{l}]"));
            }
            if let Some(m) = method {
                extra.push(format!("methods={}", json_list(serde_json::json!([m]))));
            }
            if let Some(b) = baseline {
                extra.push(format!("mcs.baselines={}", json_list(serde_json::json!([b]))));
            }
            if let Some(k) = k {
                extra.push(format!("mcs.k={k}"));
            }
            run(Preset::McsTable, &config.load(extra)?)?;
        }
        Command::Influence {
            model,
            concept,
            samples,
            out,
        } => influence(&model, concept, &samples, out.as_deref())?,
        Command::AblateNd {
            config,
            ratios,
            layer,
            concept,
            augmented_ratios,
        } => {
            let mut extra = Vec::new();
            if let Some(r) = ratios {
                extra.push(format!("nd.ratios={}", json_list(serde_json::json!(r))));
            }
            if let Some(r) = augmented_ratios {
                extra.push(format!("nd.augmented_ratios={}", json_list(serde_json::json!(r))));
            }
            if let Some(l) = layer {
                extra.push(format!("nd.layer={l}"));
            }
            if let Some(c) = concept {
                extra.push(format!("nd.concept=\"{}\"", c.name()));
            }
            run(Preset::NdAblation, &config.load(extra)?)?;
        }
        Command::RunPreset { name, config } => run(name, &config.load(Vec::new())?)?,
        Command::Report { run, json } => {
            let (manifest, tables) = harness::verify_run(&run)?;
            if json {
                write_or_print(None, &serde_json::json!({"manifest": manifest, "tables": tables}))?;
            } else {
                println!(
                    "preset {} | seed {} | config {} | version {}",
                    manifest.preset, manifest.master_seed, manifest.config_hash, manifest.code_version
                );
                for t in &tables {
                    print_table(t);
                }
            }
        }
        Command::DefaultConfig => write_or_print(None, &serde_json::to_value(ExperimentConfig::default())?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match harness::configure_threads()
        .map_err(anyhow::Error::from)
        .and_then(|_| dispatch(cli))
    {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(1, harness::exit_code)
        }
    };
    ExitCode::from(code as u8)
}
