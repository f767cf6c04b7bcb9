//! `jacmorph` command-line front end.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jacmorph::image::BlendConfig;
use jacmorph::jacobian::{evaluate_cohort, jacobian_integral_change, jacobian_map, read_cases_csv};
use jacmorph::metaimage::{self, ElementType};
use jacmorph::phantom::{make_cohort_from, make_sphere_phantom, PhantomSpec};
use jacmorph::pipeline::{export_cases, param_sweep, run_pipeline, write_sweep_csv, CohortSettings, PipelineConfig};
use jacmorph::radiomics::{extract_all, read_features_csv, write_features_csv, DEFAULT_BINS};
use jacmorph::registration::{register, Channel, Engine, RegistrationConfig, RegistrationMasks};
use jacmorph::stats::{cross_validate, read_labels_csv, univariate, write_univariate_csv, CaseTable, CvConfig};

#[derive(Parser)]
#[command(name = "jacmorph", version, about = "Jacobian-map volume change and radiomic response prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sphere phantoms with known shrinkage.
    Phantom(PhantomArgs),
    /// Blend a CT and a PET volume into one grayscale image.
    Blend(BlendArgs),
    /// Register a follow-up image to its baseline.
    Register(RegisterArgs),
    /// Jacobian map and volume change of a deformation field.
    Jacobian(JacobianArgs),
    /// 56 first-order and texture features of a Jacobian map.
    Features(FeaturesArgs),
    /// Per-feature AUC and rank-sum p-value.
    Univariate(UnivariateArgs),
    /// Repeated cross-validation of the RF-LASSO predictor.
    Predict(PredictArgs),
    /// Cohort statistics from per-case estimates.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline from a JSON config.
    Run(RunArgs),
    /// Mesh-spacing / step-size grid over the cohort.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Write a single uniform case with this linear scale instead of a cohort.
    #[arg(long)]
    shrink: Option<f64>,
    #[arg(long, default_value_t = 20)]
    n_cases: usize,
    #[arg(long, default_value_t = 10.0)]
    change_min: f64,
    #[arg(long, default_value_t = 80.0)]
    change_max: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    #[arg(long, default_value_t = 20.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

#[derive(Args)]
struct BlendArgs {
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    pet: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON blend configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long, default_value = "bsd")]
    engine: Engine,
    #[arg(long, default_value = "blend")]
    channel: Channel,
    /// JSON registration configuration (overrides the channel defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fixed_mask: Option<PathBuf>,
    #[arg(long)]
    moving_mask: Option<PathBuf>,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_inverse: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct JacobianArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out_jmap: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    jmap: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "case")]
    case_id: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args)]
struct UnivariateArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON cross-validation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// CSV with case_id, est_change_pct, gt_change_pct, dsc.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    out_json: PathBuf,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides io.output_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.15,0.2,0.25")]
    gammas: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let settings = CohortSettings {
        n_cases: a.n_cases,
        change_range: (a.change_min, a.change_max),
        seed: a.seed,
        grid_size: a.grid,
        spacing: a.spacing,
        radius: a.radius,
        noise_sd: a.noise,
    };
    let base = settings.base_spec()?;
    let cases = match a.shrink {
        Some(s) => vec![("case_000".to_string(), make_sphere_phantom(&PhantomSpec { shrink_factor: s, seed: a.seed, ..base })?)],
        None => make_cohort_from(&base, a.n_cases, settings.change_range, a.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("case_{i:03}"), c))
            .collect(),
    };
    export_cases(&a.out_dir, &cases)?;
    println!("wrote {} case(s) to {}", cases.len(), a.out_dir.display());
    Ok(())
}

fn blend(a: BlendArgs) -> Result<()> {
    let mut cfg: BlendConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BlendConfig::default(),
    };
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    let ct = metaimage::read_image(&a.ct)?;
    let pet = metaimage::read_image(&a.pet)?;
    metaimage::write_image(&a.out, &cfg.apply(&ct, &pet)?, ElementType::Float)?;
    Ok(())
}

fn register_cmd(a: RegisterArgs) -> Result<()> {
    let cfg: RegistrationConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RegistrationConfig::for_channel(a.channel),
    };
    let fixed = metaimage::read_image(&a.fixed).context("stage load")?;
    let moving = metaimage::read_image(&a.moving).context("stage load")?;
    let fixed_mask = a.fixed_mask.as_ref().map(metaimage::read_mask).transpose().context("stage load")?;
    let moving_mask = a.moving_mask.as_ref().map(metaimage::read_mask).transpose().context("stage load")?;
    let masks = RegistrationMasks { fixed: fixed_mask.as_ref(), moving: moving_mask.as_ref() };
    let res = register(&fixed, &moving, a.engine, &cfg, masks).context("stage register")?;
    metaimage::write_field(&a.out_field, &res.forward_field)?;
    if let Some(p) = &a.out_inverse {
        metaimage::write_field(p, &res.inverse_field)?;
    }
    if let Some(p) = &a.trace {
        res.write_trace(create(p)?)?;
    }
    println!(
        "{}: MI {:.4} -> {:.4}, min J {:.4}, {} iterations{}",
        a.engine.name(),
        res.initial_mi,
        res.final_mi,
        res.min_jacobian,
        res.cost_trace.len(),
        if res.converged { "" } else { " (iteration budget exhausted)" }
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct JacobianReport {
    change_pct: f64,
    mean_jacobian: f64,
    min_jacobian: f64,
    max_jacobian: f64,
    n_voxels: usize,
}

fn jacobian_cmd(a: JacobianArgs) -> Result<()> {
    let field = metaimage::read_field(&a.field)?;
    let mask = metaimage::read_mask(&a.mask)?;
    let jmap = jacobian_map(&field);
    let change_pct = jacobian_integral_change(&jmap, &mask).context("stage jacobian")?;
    let inside: Vec<f64> = jmap.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&j, _)| j).collect();
    let report = JacobianReport {
        change_pct,
        mean_jacobian: 1.0 - change_pct / 100.0,
        min_jacobian: inside.iter().copied().fold(f64::INFINITY, f64::min),
        max_jacobian: inside.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n_voxels: inside.len(),
    };
    if let Some(p) = &a.out_jmap {
        metaimage::write_image(p, &jmap, ElementType::Float)?;
    }
    match &a.report {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn features_cmd(a: FeaturesArgs) -> Result<()> {
    let jmap = metaimage::read_image(&a.jmap)?;
    let mask = metaimage::read_mask(&a.mask)?;
    let fv = extract_all(&jmap, &mask, a.bins).context("stage features")?;
    if fv.degenerate {
        eprintln!("warning: degenerate ROI texture (constant map or too few voxel pairs)");
    }
    write_features_csv(create(&a.out)?, &[(a.case_id, fv)])?;
    Ok(())
}

fn load_table(features: &Path, labels: &Path) -> Result<CaseTable> {
    let (ids, names, rows) = read_features_csv(File::open(features).with_context(|| format!("opening {}", features.display()))?)?;
    let labels = read_labels_csv(File::open(labels).with_context(|| format!("opening {}", labels.display()))?)?;
    Ok(CaseTable::join(ids, names, rows, &labels)?)
}

fn univariate_cmd(a: UnivariateArgs) -> Result<()> {
    let table = load_table(&a.features, &a.labels)?;
    write_univariate_csv(create(&a.out)?, &univariate(&table).context("stage univariate")?)?;
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let table = load_table(&a.features, &a.labels)?;
    let mut cfg: CvConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CvConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let report = cross_validate(&table, &cfg).context("stage predict")?;
    write_json(&a.out_report, &report)?;
    if let Some(p) = &a.curve {
        report.write_curve_csv(create(p)?)?;
    }
    println!(
        "accuracy {:.3} +/- {:.3}, sensitivity {:.3}, specificity {:.3}, AUC {:.3}",
        report.accuracy.mean, report.accuracy.sd, report.sensitivity.mean, report.specificity.mean, report.auc.mean
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let cases = read_cases_csv(File::open(&a.cases).with_context(|| format!("opening {}", a.cases.display()))?)?;
    let report = evaluate_cohort(&cases).context("stage evaluate")?;
    write_json(&a.out_json, &report)?;
    if let Some(p) = &a.out_csv {
        report.write_summary_csv(create(p)?)?;
    }
    Ok(())
}

fn pipeline_config(config: Option<&PathBuf>, out_dir: Option<PathBuf>) -> Result<PipelineConfig> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = out_dir {
        cfg.io.output_dir = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let cfg = pipeline_config(a.config.as_ref(), a.out_dir)?;
    let run = run_pipeline(&cfg, a.jobs)?;
    if let Some(e) = &run.evaluation {
        let r = e.pearson_r.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into());
        println!("r {r}, mean |diff| {:.2} pts, DSC {:.3} +/- {:.3}", e.mean_abs_diff_pct, e.dsc_mean, e.dsc_sd);
    }
    if let Some(p) = &run.prediction {
        println!("CV accuracy {:.3} +/- {:.3}", p.accuracy.mean, p.accuracy.sd);
    }
    for s in &run.manifest.skipped {
        println!("skipped {s}");
    }
    println!("outputs in {}", run.output_dir.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = pipeline_config(a.config.as_ref(), a.out_dir)?;
    let rows = param_sweep(&cfg, &a.sigmas, &a.gammas, a.jobs)?;
    write_sweep_csv(std::io::stdout().lock(), &rows)?;
    if rows.iter().all(|r| r.error.is_some()) {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Blend(a) => blend(a),
        Command::Register(a) => register_cmd(a),
        Command::Jacobian(a) => jacobian_cmd(a),
        Command::Features(a) => features_cmd(a),
        Command::Univariate(a) => univariate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
