//! End-to-end runs: cases -> registration -> Jacobian -> features ->
//! evaluation and prediction, plus the mesh/step parameter sweep.
//!
//! Every output is a function of the configuration alone. Case work runs on
//! a dedicated thread pool whose size never reaches the artifacts, and each
//! case writes only its own files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{BlendConfig, Geometry, Image3D, Mask3D};
use crate::jacobian::{evaluate_case, jacobian_map, summarize_cohort, CaseEvaluation, EvaluationReport};
use crate::metaimage::{self, ElementType};
use crate::phantom::{cohort_specs, make_sphere_phantom, PhantomCase, PhantomSpec};
use crate::radiomics::{extract_all, write_features_csv, FeatureVector, DEFAULT_BINS};
use crate::registration::{register, Channel, Engine, RegistrationConfig, RegistrationMasks};
use crate::stats::{cross_validate, univariate, write_univariate_csv, CaseTable, CvConfig, CvReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfigs {
    pub blend: RegistrationConfig,
    pub pet: RegistrationConfig,
    pub ct: RegistrationConfig,
}

impl Default for ChannelConfigs {
    fn default() -> Self {
        ChannelConfigs {
            blend: RegistrationConfig::for_channel(Channel::Blend),
            pet: RegistrationConfig::for_channel(Channel::Pet),
            ct: RegistrationConfig::for_channel(Channel::Ct),
        }
    }
}

impl ChannelConfigs {
    pub fn get(&self, channel: Channel) -> &RegistrationConfig {
        match channel {
            Channel::Blend => &self.blend,
            Channel::Pet => &self.pet,
            Channel::Ct => &self.ct,
        }
    }

    pub fn get_mut(&mut self, channel: Channel) -> &mut RegistrationConfig {
        match channel {
            Channel::Blend => &mut self.blend,
            Channel::Pet => &mut self.pet,
            Channel::Ct => &mut self.ct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSettings {
    pub engine: Engine,
    pub channel: Channel,
    pub channels: ChannelConfigs,
    /// Baseline CT voxels above this HU value form the rigidity mask of the
    /// pre-alignment pass. Needs CT input; `None` skips the pass.
    pub rigidity_hu: Option<f64>,
}

impl Default for RegistrationSettings {
    fn default() -> Self {
        RegistrationSettings {
            engine: Engine::Bsd,
            channel: Channel::Blend,
            channels: ChannelConfigs::default(),
            rigidity_hu: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiomicsSettings {
    pub n_bins: usize,
}

impl Default for RadiomicsSettings {
    fn default() -> Self {
        RadiomicsSettings { n_bins: DEFAULT_BINS }
    }
}

/// Synthetic sphere cohort used when no input directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSettings {
    pub n_cases: usize,
    /// Range of true volume change (percent shrinkage).
    pub change_range: (f64, f64),
    pub seed: u64,
    pub grid_size: usize,
    pub spacing: f64,
    pub radius: f64,
    pub noise_sd: f64,
}

impl Default for CohortSettings {
    fn default() -> Self {
        CohortSettings {
            n_cases: 20,
            change_range: (10.0, 80.0),
            seed: 42,
            grid_size: 64,
            spacing: 2.0,
            radius: 20.0,
            noise_sd: 0.02,
        }
    }
}

impl CohortSettings {
    pub fn base_spec(&self) -> Result<PhantomSpec> {
        let grid = Geometry::cube(self.grid_size, self.spacing)?;
        let mid = (self.grid_size as f64 - 1.0) * self.spacing / 2.0;
        Ok(PhantomSpec {
            grid,
            center: [mid; 3],
            baseline_radius: self.radius,
            noise_sd: self.noise_sd,
            ..PhantomSpec::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSettings {
    /// Directory of case folders; `None` generates the phantom cohort.
    pub input_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Write per-case images, fields and Jacobian maps.
    pub write_volumes: bool,
}

impl Default for IoSettings {
    fn default() -> Self {
        IoSettings {
            input_dir: None,
            output_dir: PathBuf::from("jacmorph-run"),
            write_volumes: true,
        }
    }
}

/// Complete run configuration; `{}` gives the default phantom study.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub blend: BlendConfig,
    pub registration: RegistrationSettings,
    pub radiomics: RadiomicsSettings,
    pub predict: CvConfig,
    pub cohort: CohortSettings,
    pub io: IoSettings,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.blend.validate()?;
        for ch in [Channel::Blend, Channel::Pet, Channel::Ct] {
            self.registration.channels.get(ch).validate()?;
        }
        self.predict.validate()?;
        if self.radiomics.n_bins < 2 {
            return Err(Error::Config("radiomics.n_bins must be >= 2".into()));
        }
        match &self.io.input_dir {
            Some(dir) if !dir.is_dir() => Err(Error::Config(format!("input_dir {} does not exist", dir.display()))),
            Some(_) => Ok(()),
            None => {
                self.cohort.base_spec()?.validate()?;
                if self.cohort.n_cases < 2 {
                    return Err(Error::Config("cohort.n_cases must be >= 2".into()));
                }
                Ok(())
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn active_registration(&self) -> RegistrationConfig {
        self.registration.channels.get(self.registration.channel).clone()
    }
}

/// Where a case comes from; loading happens inside the worker.
#[derive(Clone, Debug)]
enum CaseSource {
    Phantom(Box<PhantomSpec>),
    Directory(PathBuf),
}

#[derive(Clone, Debug)]
struct CaseRef {
    id: String,
    source: CaseSource,
}

struct CaseInput {
    fixed: Image3D,
    moving: Image3D,
    fixed_mask: Mask3D,
    moving_mask: Mask3D,
    rigidity: Option<Mask3D>,
    gt_change_pct: Option<f64>,
    label: Option<bool>,
}

/// Per-case result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub est_change_pct: f64,
    pub gt_change_pct: Option<f64>,
    pub dsc: f64,
    pub min_jacobian: f64,
    pub initial_mi: f64,
    pub final_mi: f64,
    pub converged: bool,
    pub label: Option<bool>,
}

fn case_refs(cfg: &PipelineConfig) -> Result<Vec<CaseRef>> {
    match &cfg.io.input_dir {
        None => {
            let c = &cfg.cohort;
            let specs = cohort_specs(&c.base_spec()?, c.n_cases, c.change_range, c.seed)?;
            Ok(specs
                .into_iter()
                .enumerate()
                .map(|(i, s)| CaseRef { id: format!("case_{i:03}"), source: CaseSource::Phantom(Box::new(s)) })
                .collect())
        }
        Some(dir) => {
            let mut ids: Vec<String> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().to_str().map(str::to_string))
                .collect();
            ids.sort();
            if ids.is_empty() {
                return Err(Error::Input(format!("no case folders in {}", dir.display())));
            }
            Ok(ids.into_iter().map(|id| CaseRef { source: CaseSource::Directory(dir.join(&id)), id }).collect())
        }
    }
}

/// `case_id,value` rows from an optional CSV at the input root.
fn read_keyed(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() >= 2 {
            out.push((rec[0].to_string(), rec[1].trim().to_string()));
        }
    }
    Ok(out)
}

fn load_channel(dir: &Path, when: &str, cfg: &PipelineConfig) -> Result<(Image3D, Option<Image3D>)> {
    let single = dir.join(format!("{when}.mha"));
    let ct_path = dir.join(format!("{when}_ct.mha"));
    let pet_path = dir.join(format!("{when}_pet.mha"));
    let ct = ct_path.exists().then(|| metaimage::read_image(&ct_path)).transpose()?;
    if single.exists() {
        return Ok((metaimage::read_image(&single)?, ct));
    }
    let img = match cfg.registration.channel {
        Channel::Ct => cfg.blend.normalize_ct(ct.as_ref().ok_or_else(|| Error::Input(format!("{} missing", ct_path.display())))?)?,
        Channel::Pet => {
            let pet = metaimage::read_image(&pet_path)?;
            let target = *ct.as_ref().map(|c| c.geometry()).unwrap_or(pet.geometry());
            cfg.blend.normalize_pet(&pet, &target)?
        }
        Channel::Blend => {
            let ct = ct.as_ref().ok_or_else(|| Error::Input(format!("{} missing", ct_path.display())))?;
            cfg.blend.apply(ct, &metaimage::read_image(&pet_path)?)?
        }
    };
    Ok((img, ct))
}

fn load_case(r: &CaseRef, cfg: &PipelineConfig) -> Result<CaseInput> {
    match &r.source {
        CaseSource::Phantom(spec) => {
            let case = make_sphere_phantom(spec)?;
            let label = case.label();
            Ok(CaseInput {
                fixed: case.baseline_img,
                moving: case.followup_img,
                fixed_mask: case.baseline_mask,
                moving_mask: case.followup_mask,
                rigidity: None,
                gt_change_pct: Some(case.true_change_pct),
                label: Some(label),
            })
        }
        CaseSource::Directory(dir) => {
            let (fixed, fixed_ct) = load_channel(dir, "baseline", cfg)?;
            let (moving, _) = load_channel(dir, "followup", cfg)?;
            let root = dir.parent().unwrap_or(dir);
            let lookup = |file: &str| -> Result<Option<String>> {
                Ok(read_keyed(&root.join(file))?.into_iter().find(|(k, _)| k == &r.id).map(|(_, v)| v))
            };
            let gt_change_pct = lookup("truth.csv")?
                .map(|v| v.parse::<f64>().map_err(|_| Error::Input(format!("truth.csv: bad value {v:?}"))))
                .transpose()?;
            let label = match lookup("labels.csv")?.as_deref() {
                None => None,
                Some("1" | "true" | "True" | "responder") => Some(true),
                Some("0" | "false" | "False" | "non-responder") => Some(false),
                Some(v) => return Err(Error::Input(format!("labels.csv: bad label {v:?}"))),
            };
            let rigidity = match (cfg.registration.rigidity_hu, fixed_ct) {
                (Some(hu), Some(ct)) => Some(Mask3D::threshold(&ct, hu)),
                _ => None,
            };
            Ok(CaseInput {
                fixed,
                moving,
                fixed_mask: metaimage::read_mask(dir.join("baseline_mask.mha"))?,
                moving_mask: metaimage::read_mask(dir.join("followup_mask.mha"))?,
                rigidity,
                gt_change_pct,
                label,
            })
        }
    }
}

struct CaseProduct {
    outcome: CaseOutcome,
    features: Option<FeatureVector>,
}

fn process_case(r: &CaseRef, cfg: &PipelineConfig, reg: &RegistrationConfig, out: Option<&Path>) -> Result<CaseProduct> {
    let id = Some(r.id.as_str());
    let input = load_case(r, cfg).map_err(|e| e.at_stage("load", id))?;
    let mut reg = reg.clone();
    reg.rigidity_mask = input.rigidity.clone();
    let masks = RegistrationMasks { fixed: Some(&input.fixed_mask), moving: Some(&input.moving_mask) };
    let res = register(&input.fixed, &input.moving, cfg.registration.engine, &reg, masks).map_err(|e| e.at_stage("register", id))?;
    let (est, dsc) = evaluate_case(&res.forward_field, &input.fixed_mask, &input.moving_mask).map_err(|e| e.at_stage("jacobian", id))?;
    let outcome = CaseOutcome {
        case_id: r.id.clone(),
        est_change_pct: est,
        gt_change_pct: input.gt_change_pct,
        dsc,
        min_jacobian: res.min_jacobian,
        initial_mi: res.initial_mi,
        final_mi: res.final_mi,
        converged: res.converged,
        label: input.label,
    };
    let Some(out) = out else {
        return Ok(CaseProduct { outcome, features: None });
    };
    let jmap = jacobian_map(&res.forward_field);
    let features = extract_all(&jmap, &input.fixed_mask, cfg.radiomics.n_bins).map_err(|e| e.at_stage("features", id))?;
    let write = || -> Result<()> {
        let dir = out.join("cases").join(&r.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let trace = fs::File::create(dir.join("trace.csv")).map_err(|e| Error::io(dir.join("trace.csv"), e))?;
        res.write_trace(trace)?;
        if cfg.io.write_volumes {
            metaimage::write_image(dir.join("baseline.mha"), &input.fixed, ElementType::Float)?;
            metaimage::write_image(dir.join("followup.mha"), &input.moving, ElementType::Float)?;
            metaimage::write_mask(dir.join("baseline_mask.mha"), &input.fixed_mask)?;
            metaimage::write_field(dir.join("forward.mha"), &res.forward_field)?;
            metaimage::write_field(dir.join("inverse.mha"), &res.inverse_field)?;
            metaimage::write_image(dir.join("jacobian.mha"), &jmap, ElementType::Float)?;
        }
        Ok(())
    };
    write().map_err(|e| e.at_stage("write", id))?;
    Ok(CaseProduct { outcome, features: Some(features) })
}

fn run_cases(
    refs: &[CaseRef],
    cfg: &PipelineConfig,
    reg: &RegistrationConfig,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<CaseProduct>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| refs.par_iter().map(|r| process_case(r, cfg, reg, out)).collect())
}

fn evaluation_of(outcomes: &[CaseOutcome]) -> Result<Option<EvaluationReport>> {
    if outcomes.len() < 3 || outcomes.iter().any(|o| o.gt_change_pct.is_none()) {
        return Ok(None);
    }
    let cases: Vec<CaseEvaluation> = outcomes
        .iter()
        .map(|o| CaseEvaluation {
            case_id: o.case_id.clone(),
            est_change_pct: o.est_change_pct,
            gt_change_pct: o.gt_change_pct.unwrap_or_default(),
            dsc: o.dsc,
        })
        .collect();
    summarize_cohort(&cases).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Run record; contains no clock or host information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub n_cases: usize,
    /// Stages that did not run, with the reason.
    pub skipped: Vec<String>,
    pub files: Vec<ManifestFile>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub output_dir: PathBuf,
    pub outcomes: Vec<CaseOutcome>,
    pub evaluation: Option<EvaluationReport>,
    pub prediction: Option<CvReport>,
    pub manifest: Manifest,
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_outcomes_csv(path: &Path, outcomes: &[CaseOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["case_id", "est_change_pct", "gt_change_pct", "dsc", "min_jacobian", "initial_mi", "final_mi", "converged", "label"])?;
    for o in outcomes {
        w.write_record([
            o.case_id.clone(),
            format!("{:.6}", o.est_change_pct),
            o.gt_change_pct.map(|g| format!("{g:.6}")).unwrap_or_default(),
            format!("{:.6}", o.dsc),
            format!("{:.6}", o.min_jacobian),
            format!("{:.6}", o.initial_mi),
            format!("{:.6}", o.final_mi),
            o.converged.to_string(),
            o.label.map(|l| u8::from(l).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<ManifestFile>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()) != Some("manifest.json") {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(&p);
            out.push(ManifestFile {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
    }
    Ok(())
}

/// Runs every stage for every case and writes the run directory:
///
/// - `config.json`, `cases.csv`, `features.csv`, `cases/<id>/...`
/// - `evaluation.json`, `evaluation_cases.csv`, `evaluation_summary.csv`
///   when ground truth is known
/// - `labels.csv`, `univariate.csv`, `prediction.json`, `curve.csv` when
///   both label classes are present
/// - `manifest.json` with the config hash and per-file SHA-256
///
/// `jobs` bounds the number of cases processed at once.
pub fn run_pipeline(cfg: &PipelineConfig, jobs: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let out = cfg.io.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let refs = case_refs(cfg).map_err(|e| e.at_stage("load", None))?;
    let products = run_cases(&refs, cfg, &cfg.active_registration(), Some(&out), jobs)?;
    let outcomes: Vec<CaseOutcome> = products.iter().map(|p| p.outcome.clone()).collect();
    write_outcomes_csv(&out.join("cases.csv"), &outcomes)?;
    let rows: Vec<(String, FeatureVector)> = products
        .iter()
        .filter_map(|p| p.features.clone().map(|f| (p.outcome.case_id.clone(), f)))
        .collect();
    write_features_csv(create(&out.join("features.csv"))?, &rows)?;

    let mut skipped = Vec::new();
    let evaluation = evaluation_of(&outcomes).map_err(|e| e.at_stage("evaluate", None))?;
    match &evaluation {
        Some(report) => {
            write_json(&out.join("evaluation.json"), report)?;
            report.write_cases_csv(create(&out.join("evaluation_cases.csv"))?)?;
            report.write_summary_csv(create(&out.join("evaluation_summary.csv"))?)?;
        }
        None => skipped.push("evaluate: ground truth unavailable for some cases".to_string()),
    }

    let labels: Option<Vec<bool>> = outcomes.iter().map(|o| o.label).collect();
    let prediction = match labels {
        None => {
            skipped.push("predict: labels unavailable for some cases".to_string());
            None
        }
        Some(y) => {
            let pos = y.iter().filter(|&&l| l).count();
            if pos < 2 || y.len() - pos < 2 {
                skipped.push(format!("predict: need >= 2 cases per class, have {pos} positive of {}", y.len()));
                None
            } else {
                let mut lw = csv::Writer::from_writer(create(&out.join("labels.csv"))?);
                lw.write_record(["case_id", "label"])?;
                for (o, l) in outcomes.iter().zip(&y) {
                    lw.write_record([o.case_id.clone(), u8::from(*l).to_string()])?;
                }
                lw.flush().map_err(|e| Error::io(out.join("labels.csv"), e))?;
                let table = CaseTable::new(
                    rows.iter().map(|(id, _)| id.clone()).collect(),
                    FeatureVector::names(),
                    rows.iter().map(|(_, f)| f.values.clone()).collect(),
                    y,
                )
                .map_err(|e| e.at_stage("predict", None))?;
                let uni = univariate(&table).map_err(|e| e.at_stage("univariate", None))?;
                write_univariate_csv(create(&out.join("univariate.csv"))?, &uni)?;
                let report = cross_validate(&table, &cfg.predict).map_err(|e| e.at_stage("predict", None))?;
                write_json(&out.join("prediction.json"), &report)?;
                report.write_curve_csv(create(&out.join("curve.csv"))?)?;
                Some(report)
            }
        }
    };

    let mut files = Vec::new();
    collect_files(&out, &out, &mut files)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        n_cases: outcomes.len(),
        skipped,
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunOutput { output_dir: out, outcomes, evaluation, prediction, manifest })
}

/// Writes phantom cases in the input layout [`run_pipeline`] reads:
/// `<id>/{baseline,followup,baseline_mask,followup_mask,true_field}.mha`
/// plus `truth.csv` and `labels.csv` at the root.
pub fn export_cases(dir: &Path, cases: &[(String, PhantomCase)]) -> Result<()> {
    let mut truth = csv::Writer::from_writer(create_all(dir, "truth.csv")?);
    let mut labels = csv::Writer::from_writer(create(&dir.join("labels.csv"))?);
    truth.write_record(["case_id", "gt_change_pct"])?;
    labels.write_record(["case_id", "label"])?;
    for (id, case) in cases {
        let d = dir.join(id);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        metaimage::write_image(d.join("baseline.mha"), &case.baseline_img, ElementType::Float)?;
        metaimage::write_image(d.join("followup.mha"), &case.followup_img, ElementType::Float)?;
        metaimage::write_mask(d.join("baseline_mask.mha"), &case.baseline_mask)?;
        metaimage::write_mask(d.join("followup_mask.mha"), &case.followup_mask)?;
        metaimage::write_field(d.join("true_field.mha"), &case.true_field)?;
        truth.write_record([id.clone(), format!("{:.6}", case.true_change_pct)])?;
        labels.write_record([id.clone(), u8::from(case.label()).to_string()])?;
    }
    truth.flush().map_err(|e| Error::io(dir.join("truth.csv"), e))?;
    labels.flush().map_err(|e| Error::io(dir.join("labels.csv"), e))
}

fn create_all(dir: &Path, file: &str) -> Result<fs::File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    create(&dir.join(file))
}

/// One cell of the mesh-spacing / step-size grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub gamma: f64,
    pub dsc_mean: Option<f64>,
    pub pearson_r: Option<f64>,
    pub mean_abs_diff_pct: Option<f64>,
    pub error: Option<String>,
    pub best: bool,
}

/// Index of the best successful cell: highest mean DSC, then highest r
/// (a missing r ranks lowest); earlier cells win exact ties.
pub fn best_cell(rows: &[SweepRow]) -> Option<usize> {
    let key = |r: &SweepRow| (r.dsc_mean.unwrap_or(f64::NEG_INFINITY), r.pearson_r.unwrap_or(f64::NEG_INFINITY));
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.error.is_some() || r.dsc_mean.is_none() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (d, c) = key(r);
                let (bd, bc) = key(&rows[b]);
                d > bd || (d == bd && c > bc)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sigma_mm", "gamma", "dsc_mean", "pearson_r", "mean_abs_diff_pct", "best", "error"])?;
    for r in rows {
        out.write_record([
            format!("{}", r.sigma),
            format!("{}", r.gamma),
            opt(r.dsc_mean),
            opt(r.pearson_r),
            opt(r.mean_abs_diff_pct),
            r.best.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("sweep csv", e))
}

/// Registers and evaluates the cohort once per `(sigma, gamma)` cell with
/// the active channel's mesh spacing and step size replaced. A failing
/// cell is recorded and the sweep moves on. Writes `sweep.csv` into the
/// output directory.
pub fn param_sweep(cfg: &PipelineConfig, sigmas: &[f64], gammas: &[f64], jobs: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if sigmas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let refs = case_refs(cfg).map_err(|e| e.at_stage("load", None))?;
    let mut rows = Vec::with_capacity(sigmas.len() * gammas.len());
    for &sigma in sigmas {
        for &gamma in gammas {
            let mut reg = cfg.active_registration();
            reg.mesh_spacing = sigma;
            reg.step_size = gamma;
            let cell = reg
                .validate()
                .and_then(|_| run_cases(&refs, cfg, &reg, None, jobs))
                .and_then(|p| evaluation_of(&p.into_iter().map(|c| c.outcome).collect::<Vec<_>>()));
            rows.push(match cell {
                Ok(Some(rep)) => SweepRow {
                    sigma,
                    gamma,
                    dsc_mean: Some(rep.dsc_mean),
                    pearson_r: rep.pearson_r,
                    mean_abs_diff_pct: Some(rep.mean_abs_diff_pct),
                    error: None,
                    best: false,
                },
                Ok(None) => SweepRow {
                    sigma,
                    gamma,
                    dsc_mean: None,
                    pearson_r: None,
                    mean_abs_diff_pct: None,
                    error: Some("no ground truth to evaluate".into()),
                    best: false,
                },
                Err(e) => SweepRow { sigma, gamma, dsc_mean: None, pearson_r: None, mean_abs_diff_pct: None, error: Some(e.to_string()), best: false },
            });
        }
    }
    if let Some(b) = best_cell(&rows) {
        rows[b].best = true;
    }
    let out = &cfg.io.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_sweep_csv(create(&out.join("sweep.csv"))?, &rows)?;
    Ok(rows)
}
