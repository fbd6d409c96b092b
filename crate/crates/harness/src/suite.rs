//! Suite orchestration: model acquisition, attack tasks, derived analyses
//! and defenses, with per-task manifests so interrupted runs resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use licw_core::analysis::{eci, final_cdmr, ldmr_cdmr, local_maps, measure, perf_variation, spatial_kurtosis, DoSet, RdReport};
use licw_core::attacks::{arda, gaussian_control, srda, AttackConfig, AttackResult};
use licw_core::diffcore::Tensor;
use licw_core::models::{load_checkpoint, save_checkpoint, CompressionModel, Family};
use licw_core::optim::{adversarial_finetune, online_update, train_rd, AdversarialConfig, DirectionSampler, LrSchedule, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SuiteConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::image_io::{decode_raw, encode_raw, load_image, ImageRecord};
use crate::report;
use crate::synth::synthetic_dataset;

/// Environment variable overriding the configured worker count.
pub const WORKERS_ENV: &str = "LICW_WORKERS";
/// RMS of the Gaussian noise used for benign magnification calibration.
pub const CALIBRATION_NOISE_RMS: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Submodel {
    pub family: Family,
    pub lambda_index: usize,
    pub model: CompressionModel,
}

impl Submodel {
    pub fn tag(&self) -> String {
        format!("{}_l{}", self.family, self.lambda_index)
    }
}

/// One rate-distortion comparison, flattened for CSV/JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub image: String,
    pub family: String,
    pub lambda_index: usize,
    pub lambda: f64,
    pub gamma_r: f64,
    pub gamma_d: f64,
    pub rate: f64,
    pub rate_adv: f64,
    pub distortion: f64,
    pub distortion_adv: f64,
    pub delta_rate: f64,
    pub delta_distortion: f64,
    pub psnr: f64,
    pub psnr_adv: f64,
}

impl ReportRow {
    pub fn from_report(r: &RdReport, lambda: f64) -> Self {
        Self {
            method: r.method.clone(),
            image: r.image_id.clone(),
            family: r.family.to_string(),
            lambda_index: r.lambda_index,
            lambda,
            gamma_r: r.direction.0,
            gamma_d: r.direction.1,
            rate: r.rate,
            rate_adv: r.rate_adv,
            distortion: r.distortion,
            distortion_adv: r.distortion_adv,
            delta_rate: r.delta_rate,
            delta_distortion: r.delta_distortion,
            psnr: r.psnr,
            psnr_adv: r.psnr_adv,
        }
    }

    pub fn direction(&self) -> [f64; 2] {
        [self.gamma_r, self.gamma_d]
    }

    /// `delta_rate + lambda * delta_distortion`.
    pub fn damage(&self) -> f64 {
        self.delta_rate + self.lambda * self.delta_distortion
    }
}

/// Feasibility bookkeeping of one emitted adversarial example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub task: String,
    pub method: String,
    /// Largest per-image RMS of `x_a - x`.
    pub max_rms: f64,
    pub min_pixel: f32,
    pub max_pixel: f32,
    pub surface_steps: usize,
    pub iterations: usize,
    pub first_surface_iteration: Option<usize>,
    /// The step size switched exactly at surface step `T / 2`.
    pub lr_drop_ok: bool,
    pub unstable: bool,
    pub capped: bool,
    pub ratio_clamped: bool,
    pub rate_map_kurtosis: Option<f64>,
    pub distortion_map_kurtosis: Option<f64>,
}

/// Per-attack record written next to the adversarial image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub task: String,
    pub method: String,
    /// Submodel tags attacked together.
    pub targets: Vec<String>,
    pub gamma_r: f64,
    pub gamma_d: f64,
    pub epsilon: f64,
    pub surface_steps: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    pub tau: f64,
    /// Seed of the same-RMS noise control (single-model attacks only).
    pub control_seed: Option<u64>,
    /// First computed loss of every target, the reference of the ARDA weights.
    pub loss_init: Vec<f64>,
    pub loss_trace: PathBuf,
    pub output: PathBuf,
}

fn trace_csv(res: &AttackResult) -> String {
    let mut s = String::from("iteration,surface_step,lr,loss,projected,delta_rms,weights\n");
    for (k, st) in res.steps.iter().enumerate() {
        let w: Vec<String> = res.weights_trace.get(k).map(|w| w.iter().map(|v| v.to_string()).collect()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            st.iteration,
            st.surface_step.map(|v| v.to_string()).unwrap_or_default(),
            st.lr,
            st.loss,
            st.projected,
            st.delta_rms,
            w.join(";")
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EciRow {
    pub image: String,
    pub family: String,
    pub lambda_index: usize,
    pub gamma_r: f64,
    pub gamma_d: f64,
    pub interventions: String,
    pub delta_mean: Option<f64>,
    pub scale: Option<f64>,
    pub bitrate_z: Option<f64>,
    pub bitrate_y: f64,
    pub total: f64,
    pub benign_total: f64,
    pub adversarial_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmrRow {
    pub image: String,
    pub family: String,
    pub lambda_index: usize,
    pub kind: String,
    pub layer: String,
    pub interval: f64,
    pub ldmr: f64,
    pub cdmr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdmrRow {
    pub image: String,
    pub family: String,
    pub lambda_index: usize,
    pub kind: String,
    pub final_cdmr: f64,
    /// Whether the per-layer profile was defined (no vanished distance).
    pub profile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub image: String,
    pub family: String,
    pub lambda_index: usize,
    pub gamma_r: f64,
    pub gamma_d: f64,
    pub iteration: usize,
    pub loss: f64,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub family: String,
    pub lambda_index: usize,
    pub lambda: f64,
    pub kind: String,
    pub steps: usize,
    pub seconds: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TaskOutput {
    Attack { reports: Vec<ReportRow>, stats: AttackStats },
    Eci { rows: Vec<EciRow> },
    Ldmr { rows: Vec<LdmrRow>, finals: Vec<CdmrRow> },
    Online { report: ReportRow, trajectory: Vec<TrajectoryRow> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub status: String,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn completed(&self, id: &str) -> bool {
        self.entries.get(id).is_some_and(|e| e.status == "ok")
    }
}

/// Everything a suite produced.
#[derive(Debug, Clone, Default)]
pub struct SuiteBundle {
    pub name: String,
    pub images: Vec<String>,
    pub reports: Vec<ReportRow>,
    pub attacks: Vec<AttackStats>,
    pub eci: Vec<EciRow>,
    pub ldmr: Vec<LdmrRow>,
    pub cdmr: Vec<CdmrRow>,
    pub trajectories: Vec<TrajectoryRow>,
    pub training: Vec<TrainingRecord>,
    pub failures: Vec<(String, String)>,
    /// Tasks taken from an earlier run's manifest.
    pub resumed: usize,
    pub computed: usize,
    pub ldmr_requested: bool,
}

impl SuiteBundle {
    pub fn reports_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.reports.iter().filter(move |r| r.method == method)
    }
}

/// 64-bit FNV-1a, used to derive stable per-task seeds.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn sanitize_id(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' }).collect()
}

fn dir_tag(d: [f64; 2]) -> String {
    format!("r{}_d{}", d[0], d[1])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn worker_count(cfg: &SuiteConfig) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn load_images(paths: &[PathBuf], synthetic: Option<&crate::synth::SyntheticSpec>) -> Result<Vec<ImageRecord>> {
    let mut out = paths.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    if let Some(s) = synthetic {
        out.extend(synthetic_dataset(s)?);
    }
    Ok(out)
}

fn checkpoint_path(cfg: &SuiteConfig, family: Family, index: usize, suffix: &str) -> PathBuf {
    cfg.checkpoint_dir.join(format!("{family}_l{index}{suffix}.licm"))
}

fn model_seed(cfg: &SuiteConfig, family: Family, index: usize) -> u64 {
    cfg.seed.wrapping_mul(1000).wrapping_add(family.tag() as u64 * 100 + index as u64)
}

fn check_loaded(model: &CompressionModel, family: Family, lambda: f64, path: &Path) -> Result<()> {
    if model.family() != family || model.lambda() != lambda {
        return Err(HarnessError::Config(format!(
            "checkpoint {} holds {} at lambda {}, expected {family} at {lambda}",
            path.display(),
            model.family(),
            model.lambda()
        )));
    }
    Ok(())
}

/// Loads the checkpoint or trains and saves it.
fn acquire_model(cfg: &SuiteConfig, family: Family, index: usize, train: &[Tensor]) -> Result<(CompressionModel, TrainingRecord)> {
    let lambda = cfg.lambdas[index];
    let path = checkpoint_path(cfg, family, index, "");
    let meta = path.with_extension("json");
    if path.exists() {
        let model = load_checkpoint(&path)?;
        check_loaded(&model, family, lambda, &path)?;
        let record = if meta.exists() { read_json(&meta)? } else { TrainingRecord {
            family: family.to_string(),
            lambda_index: index,
            lambda,
            kind: "rd".into(),
            steps: 0,
            seconds: 0.0,
            final_loss: f64::NAN,
        } };
        return Ok((model, record));
    }
    let t = &cfg.training;
    if !t.enabled {
        return Err(HarnessError::Config(format!("checkpoint {} is missing and training is disabled", path.display())));
    }
    let mut model = CompressionModel::new(family, lambda, model_seed(cfg, family, index))?;
    let tc = TrainConfig {
        lambda,
        steps: t.steps,
        crop: t.crop,
        batch: t.batch,
        lr: LrSchedule::last_tenth(t.lr, t.lr_decayed, t.steps),
        seed: model_seed(cfg, family, index) ^ 0x5eed,
    };
    let start = Instant::now();
    let trace = train_rd(&mut model, train, &tc)?;
    let seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_err(&cfg.checkpoint_dir))?;
    save_checkpoint(&model, &path)?;
    let record = TrainingRecord {
        family: family.to_string(),
        lambda_index: index,
        lambda,
        kind: "rd".into(),
        steps: t.steps,
        seconds,
        final_loss: trace.window_mean(t.steps.saturating_sub(50), 50).unwrap_or(f64::NAN),
    };
    write_json(&meta, &record)?;
    let log = cfg.output_dir.join("training");
    fs::create_dir_all(&log).map_err(io_err(&log))?;
    let csv = log.join(format!("{family}_l{index}.csv"));
    fs::write(&csv, trace.to_csv()).map_err(io_err(&csv))?;
    Ok((model, record))
}

fn acquire_defended(cfg: &SuiteConfig, base: &Submodel, train: &[Tensor]) -> Result<(Submodel, TrainingRecord)> {
    let at = cfg.adversarial_training.as_ref().expect("adversarial training configured");
    let path = checkpoint_path(cfg, base.family, base.lambda_index, &format!("_at{}", at.iters));
    let meta = path.with_extension("json");
    let lambda = cfg.lambdas[base.lambda_index];
    let sub = |model| Submodel { family: base.family, lambda_index: base.lambda_index, model };
    if path.exists() {
        let model = load_checkpoint(&path)?;
        check_loaded(&model, base.family, lambda, &path)?;
        return Ok((sub(model), read_json(&meta)?));
    }
    let acfg = AdversarialConfig {
        iters: at.iters,
        lr: LrSchedule::last_tenth(at.lr, at.lr_decayed, at.iters),
        batch: at.batch,
        crop: at.crop,
        sampler: DirectionSampler::default(),
        attack: AttackConfig { surface_steps: at.surface_steps, ..cfg.attack([1.0, 0.0]) },
        seed: model_seed(cfg, base.family, base.lambda_index) ^ 0xa7,
    };
    let start = Instant::now();
    let (model, trace) = adversarial_finetune(&base.model, train, &acfg)?;
    let seconds = start.elapsed().as_secs_f64();
    save_checkpoint(&model, &path)?;
    let record = TrainingRecord {
        family: base.family.to_string(),
        lambda_index: base.lambda_index,
        lambda,
        kind: "adversarial".into(),
        steps: at.iters,
        seconds,
        final_loss: trace.window_mean(at.iters.saturating_sub(50), 50).unwrap_or(f64::NAN),
    };
    write_json(&meta, &record)?;
    let log = cfg.output_dir.join("training");
    fs::create_dir_all(&log).map_err(io_err(&log))?;
    let csv = log.join(format!("{}_l{}_at.csv", base.family, base.lambda_index));
    fs::write(&csv, trace.to_csv()).map_err(io_err(&csv))?;
    Ok((sub(model), record))
}

struct Runner {
    tasks_dir: PathBuf,
    manifest_path: PathBuf,
    manifest: Mutex<Manifest>,
    resumed: Mutex<usize>,
    computed: Mutex<usize>,
}

impl Runner {
    fn record(&self, id: &str, entry: ManifestEntry) -> Result<()> {
        let mut m = self.manifest.lock().expect("manifest lock");
        m.entries.insert(id.to_string(), entry);
        write_json(&self.manifest_path, &*m)
    }

    fn output_path(&self, id: &str) -> PathBuf {
        self.tasks_dir.join(format!("{id}.json"))
    }

    fn adversarial_path(&self, id: &str) -> PathBuf {
        self.tasks_dir.join(format!("{id}.lict"))
    }

    /// Writes the adversarial image, its loss trace and its manifest.
    fn save_attack(&self, manifest: AttackManifest, res: &AttackResult) -> Result<()> {
        fs::write(&manifest.output, encode_raw(&res.x_a)).map_err(io_err(&manifest.output))?;
        fs::write(&manifest.loss_trace, trace_csv(res)).map_err(io_err(&manifest.loss_trace))?;
        write_json(&self.tasks_dir.join(format!("{}.attack.json", manifest.task)), &manifest)
    }

    fn attack_manifest(&self, id: &str, method: &str, targets: Vec<String>, cfg: &AttackConfig, control_seed: Option<u64>, res: &AttackResult) -> AttackManifest {
        AttackManifest {
            task: id.to_string(),
            method: method.to_string(),
            targets,
            gamma_r: cfg.gamma_r,
            gamma_d: cfg.gamma_d,
            epsilon: cfg.epsilon,
            surface_steps: cfg.surface_steps,
            lr: cfg.lr,
            lr_decayed: cfg.lr_decayed,
            tau: cfg.tau,
            control_seed,
            loss_init: res.loss_init.clone(),
            loss_trace: self.tasks_dir.join(format!("{id}.trace.csv")),
            output: self.adversarial_path(id),
        }
    }

    fn run_one(&self, id: &str, work: impl FnOnce() -> Result<TaskOutput>) -> std::result::Result<TaskOutput, String> {
        let out_path = self.output_path(id);
        let done = self.manifest.lock().expect("manifest lock").completed(id);
        if done && out_path.exists() {
            if let Ok(out) = read_json::<TaskOutput>(&out_path) {
                *self.resumed.lock().expect("counter") += 1;
                return Ok(out);
            }
        }
        let result = work().and_then(|out| write_json(&out_path, &out).map(|_| out));
        *self.computed.lock().expect("counter") += 1;
        let entry = match &result {
            Ok(_) => ManifestEntry { status: "ok".into(), error: None },
            Err(e) => ManifestEntry { status: "failed".into(), error: Some(e.to_string()) },
        };
        if let Err(e) = self.record(id, entry) {
            return Err(e.to_string());
        }
        result.map_err(|e| e.to_string())
    }

    fn load_adversarial(&self, id: &str) -> Result<Tensor> {
        let path = self.adversarial_path(id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        decode_raw(&bytes, &path)
    }
}

fn attack_stats(id: &str, method: &str, x: &Tensor, res: &AttackResult, cfg: &AttackConfig) -> Result<AttackStats> {
    let (n, _, _, _) = x.dims4()?;
    let per = x.numel() / n;
    let mut max_rms = 0.0f64;
    for b in 0..n {
        let s: f64 = (0..per).map(|i| (res.x_a.data()[b * per + i] as f64 - x.data()[b * per + i] as f64).powi(2)).sum();
        max_rms = max_rms.max((s / per as f64).sqrt());
    }
    let half = cfg.surface_steps / 2;
    let lr_drop_ok = res.steps.iter().all(|s| match s.surface_step {
        Some(k) if k >= half => s.lr == cfg.lr_decayed,
        _ => s.lr == cfg.lr,
    });
    Ok(AttackStats {
        task: id.to_string(),
        method: method.to_string(),
        max_rms,
        min_pixel: res.x_a.data().iter().cloned().fold(f32::INFINITY, f32::min),
        max_pixel: res.x_a.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        surface_steps: res.surface_steps,
        iterations: res.iterations,
        first_surface_iteration: res.first_surface_iteration,
        lr_drop_ok,
        unstable: res.unstable,
        capped: res.capped,
        ratio_clamped: res.ratio_clamped,
        rate_map_kurtosis: None,
        distortion_map_kurtosis: None,
    })
}

#[derive(Clone)]
enum Task {
    Srda { image: usize, sub: usize, dir: [f64; 2] },
    Arda { image: usize, family: Family, dir: [f64; 2] },
    DefendedSrda { image: usize, sub: usize, dir: [f64; 2] },
    Eci { image: usize, sub: usize, dir: [f64; 2] },
    Ldmr { image: usize, sub: usize },
    Online { image: usize, sub: usize, dir: [f64; 2] },
}

struct Context<'a> {
    cfg: &'a SuiteConfig,
    images: &'a [ImageRecord],
    subs: &'a [Submodel],
    defended: &'a [Submodel],
    runner: &'a Runner,
}

impl Context<'_> {
    fn image_id(&self, i: usize) -> String {
        sanitize_id(&self.images[i].id())
    }

    fn srda_id(&self, image: usize, sub: usize, dir: [f64; 2]) -> String {
        format!("srda_{}_{}_{}", self.image_id(image), self.subs[sub].tag(), dir_tag(dir))
    }

    fn id(&self, t: &Task) -> String {
        match *t {
            Task::Srda { image, sub, dir } => self.srda_id(image, sub, dir),
            Task::Arda { image, family, dir } => format!("arda_{}_{family}_{}", self.image_id(image), dir_tag(dir)),
            Task::DefendedSrda { image, sub, dir } => {
                format!("atsrda_{}_{}_{}", self.image_id(image), self.defended[sub].tag(), dir_tag(dir))
            }
            Task::Eci { image, sub, dir } => format!("eci_{}_{}_{}", self.image_id(image), self.subs[sub].tag(), dir_tag(dir)),
            Task::Ldmr { image, sub } => format!("ldmr_{}_{}", self.image_id(image), self.subs[sub].tag()),
            Task::Online { image, sub, dir } => format!("online_{}_{}_{}", self.image_id(image), self.subs[sub].tag(), dir_tag(dir)),
        }
    }

    fn row(&self, r: RdReport, sub: &Submodel, image: usize, dir: [f64; 2], method: &str) -> ReportRow {
        let r = r.with_ids(sub.lambda_index, (dir[0], dir[1]), &self.image_id(image), method);
        ReportRow::from_report(&r, self.cfg.lambdas[sub.lambda_index])
    }

    fn run(&self, t: &Task) -> Result<TaskOutput> {
        let id = self.id(t);
        match *t {
            Task::Srda { image, sub, dir } | Task::DefendedSrda { image, sub, dir } => {
                let defended = matches!(t, Task::DefendedSrda { .. });
                let s = if defended { &self.defended[sub] } else { &self.subs[sub] };
                let method = if defended { "SRDA/AT" } else { "SRDA" };
                let x = &self.images[image].pixels;
                let acfg = self.cfg.attack(dir);
                let res = srda(&s.model, x, &acfg)?;
                let mut stats = attack_stats(&id, method, x, &res, &acfg)?;
                let mut reports = vec![self.row(perf_variation(&s.model, x, &res.x_a)?, s, image, dir, method)];
                let rms = stats.max_rms;
                let control_seed = self.cfg.seed ^ stable_hash(&id);
                let noise = gaussian_control(x, rms, control_seed);
                let control = if defended { "noise/AT" } else { "noise" };
                reports.push(self.row(perf_variation(&s.model, x, &noise)?, s, image, dir, control));
                if self.cfg.local_maps && !defended && (dir == [1.0, 0.0] || dir == [0.0, 1.0]) {
                    let maps = local_maps(&s.model, x, &res.x_a)?;
                    stats.rate_map_kurtosis = Some(spatial_kurtosis(&maps.rate));
                    stats.distortion_map_kurtosis = Some(spatial_kurtosis(&maps.distortion));
                    report::write_maps(&self.cfg.output_dir.join("maps"), &id, &maps)?;
                }
                let manifest = self.runner.attack_manifest(&id, method, vec![s.tag()], &acfg, Some(control_seed), &res);
                self.runner.save_attack(manifest, &res)?;
                Ok(TaskOutput::Attack { reports, stats })
            }
            Task::Arda { image, family, dir } => {
                let members: Vec<&Submodel> = self.subs.iter().filter(|s| s.family == family).collect();
                let models: Vec<CompressionModel> = members.iter().map(|s| s.model.clone()).collect();
                let x = &self.images[image].pixels;
                let acfg = self.cfg.attack(dir);
                let res = arda(&models, x, &acfg)?;
                let stats = attack_stats(&id, "ARDA", x, &res, &acfg)?;
                let reports = members
                    .iter()
                    .map(|s| Ok(self.row(perf_variation(&s.model, x, &res.x_a)?, s, image, dir, "ARDA")))
                    .collect::<Result<Vec<_>>>()?;
                let targets = members.iter().map(|s| s.tag()).collect();
                let manifest = self.runner.attack_manifest(&id, "ARDA", targets, &acfg, None, &res);
                self.runner.save_attack(manifest, &res)?;
                Ok(TaskOutput::Attack { reports, stats })
            }
            Task::Eci { image, sub, dir } => {
                let s = &self.subs[sub];
                let x = &self.images[image].pixels;
                let x_a = self.runner.load_adversarial(&self.srda_id(image, sub, dir))?;
                let benign_total = measure(&s.model, x)?.bpp();
                let adversarial_total = measure(&s.model, &x_a)?.bpp();
                let mut sets = vec![DoSet::NONE];
                sets.extend(DoSet::singles(s.family));
                sets.push(DoSet::all_for(s.family));
                let rows = sets
                    .into_iter()
                    .map(|d| {
                        let r = eci(&s.model, x, &x_a, d)?;
                        Ok(EciRow {
                            image: self.image_id(image),
                            family: s.family.to_string(),
                            lambda_index: s.lambda_index,
                            gamma_r: dir[0],
                            gamma_d: dir[1],
                            interventions: d.to_string(),
                            delta_mean: r.delta_mean,
                            scale: r.scale,
                            bitrate_z: r.bitrate_z,
                            bitrate_y: r.bitrate_y,
                            total: r.total,
                            benign_total,
                            adversarial_total,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TaskOutput::Eci { rows })
            }
            Task::Ldmr { image, sub } => {
                let s = &self.subs[sub];
                let x = &self.images[image].pixels;
                let mut pairs: Vec<(String, Tensor)> = Vec::new();
                if self.images.len() > 1 {
                    let other = &self.images[(image + 1) % self.images.len()].pixels;
                    if other.shape() == x.shape() {
                        pairs.push(("benign".into(), other.clone()));
                    }
                }
                let seed = self.cfg.seed ^ stable_hash(&id);
                pairs.push(("noise".into(), gaussian_control(x, CALIBRATION_NOISE_RMS, seed)));
                let attack_dir = [0.0, 1.0];
                if self.cfg.directions.contains(&attack_dir) {
                    let x_a = self.runner.load_adversarial(&self.srda_id(image, sub, attack_dir))?;
                    let r = x_a.zip_map(x, |a, b| a - b)?.rms();
                    pairs.push(("attack".into(), x_a));
                    pairs.push(("attack_noise".into(), gaussian_control(x, r, seed.wrapping_add(1))));
                }
                let mut rows = Vec::new();
                let mut finals = Vec::new();
                for (kind, other) in pairs {
                    let (final_value, profile) = match ldmr_cdmr(&s.model, x, &other) {
                        Ok(p) => {
                            for (k, layer) in p.layers.iter().enumerate() {
                                rows.push(LdmrRow {
                                    image: self.image_id(image),
                                    family: s.family.to_string(),
                                    lambda_index: s.lambda_index,
                                    kind: kind.clone(),
                                    layer: layer.name.clone(),
                                    interval: p.interval[k],
                                    ldmr: p.ldmr[k],
                                    cdmr: p.cdmr[k],
                                });
                            }
                            (p.final_cdmr(), true)
                        }
                        Err(licw_core::Error::ZeroDistance { .. }) => (final_cdmr(&s.model, x, &other)?, false),
                        Err(e) => return Err(e.into()),
                    };
                    finals.push(CdmrRow {
                        image: self.image_id(image),
                        family: s.family.to_string(),
                        lambda_index: s.lambda_index,
                        kind,
                        final_cdmr: final_value,
                        profile,
                    });
                }
                Ok(TaskOutput::Ldmr { rows, finals })
            }
            Task::Online { image, sub, dir } => {
                let s = &self.subs[sub];
                let on = self.cfg.online.as_ref().expect("online configured");
                let x = &self.images[image].pixels;
                let x_a = self.runner.load_adversarial(&self.srda_id(image, sub, dir))?;
                let res = online_update(&s.model, &x_a, s.model.lambda(), on.iters, on.lr)?;
                let report = self.row(perf_variation(&s.model, x, &res.x_u)?, s, image, dir, "SRDA+online");
                let trajectory = res
                    .loss_trace
                    .iter()
                    .zip(&res.best_trace)
                    .enumerate()
                    .map(|(k, (l, b))| TrajectoryRow {
                        image: self.image_id(image),
                        family: s.family.to_string(),
                        lambda_index: s.lambda_index,
                        gamma_r: dir[0],
                        gamma_d: dir[1],
                        iteration: k,
                        loss: *l,
                        best: *b,
                    })
                    .collect();
                Ok(TaskOutput::Online { report, trajectory })
            }
        }
    }
}

fn run_phase(ctx: &Context<'_>, pool: &rayon::ThreadPool, tasks: &[Task], bundle: &mut SuiteBundle) {
    let results: Vec<(String, std::result::Result<TaskOutput, String>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let id = ctx.id(t);
                let out = ctx.runner.run_one(&id, || ctx.run(t));
                (id, out)
            })
            .collect()
    });
    for (id, out) in results {
        match out {
            Ok(TaskOutput::Attack { reports, stats }) => {
                bundle.reports.extend(reports);
                bundle.attacks.push(stats);
            }
            Ok(TaskOutput::Eci { rows }) => bundle.eci.extend(rows),
            Ok(TaskOutput::Ldmr { rows, finals }) => {
                bundle.ldmr.extend(rows);
                bundle.cdmr.extend(finals);
            }
            Ok(TaskOutput::Online { report, trajectory }) => {
                bundle.reports.push(report);
                bundle.trajectories.extend(trajectory);
            }
            Err(e) => bundle.failures.push((id, e)),
        }
    }
}

/// Runs every task of the suite and writes all reports under
/// `cfg.output_dir`. Failed tasks are listed in the bundle and manifest;
/// the rest of the suite still runs.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteBundle> {
    cfg.validate()?;
    let families = cfg.families()?;
    let out = &cfg.output_dir;
    let tasks_dir = out.join("tasks");
    fs::create_dir_all(&tasks_dir).map_err(io_err(&tasks_dir))?;
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_err(&cfg.checkpoint_dir))?;
    write_json(&out.join("config.json"), cfg)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(cfg))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;

    let images = load_images(&cfg.images, cfg.synthetic.as_ref())?;
    let train_images: Vec<Tensor> = if cfg.training.enabled {
        load_images(&cfg.training.images, cfg.training.synthetic.as_ref())?.into_iter().map(|r| r.pixels).collect()
    } else {
        Vec::new()
    };

    let grid: Vec<(Family, usize)> = families.iter().flat_map(|&f| (0..cfg.lambdas.len()).map(move |i| (f, i))).collect();
    let acquired: Vec<Result<(CompressionModel, TrainingRecord)>> =
        pool.install(|| grid.par_iter().map(|&(f, i)| acquire_model(cfg, f, i, &train_images)).collect());
    let mut bundle = SuiteBundle { name: cfg.name.clone(), ldmr_requested: cfg.ldmr, ..Default::default() };
    let mut subs = Vec::new();
    for (&(family, lambda_index), a) in grid.iter().zip(acquired) {
        let (model, record) = a?;
        bundle.training.push(record);
        subs.push(Submodel { family, lambda_index, model });
    }

    let mut defended = Vec::new();
    if let Some(at) = &cfg.adversarial_training {
        let targets: Vec<&Submodel> = subs
            .iter()
            .filter(|s| at.lambda_indices.as_ref().is_none_or(|v| v.contains(&s.lambda_index)))
            .collect();
        let acquired: Vec<Result<(Submodel, TrainingRecord)>> =
            pool.install(|| targets.par_iter().map(|s| acquire_defended(cfg, s, &train_images)).collect());
        for a in acquired {
            let (s, record) = a?;
            bundle.training.push(record);
            defended.push(s);
        }
    }

    let manifest_path = out.join("manifest.json");
    let runner = Runner {
        tasks_dir,
        manifest: Mutex::new(Manifest::load(&manifest_path)?),
        manifest_path,
        resumed: Mutex::new(0),
        computed: Mutex::new(0),
    };
    let ctx = Context { cfg, images: &images, subs: &subs, defended: &defended, runner: &runner };
    bundle.images = (0..images.len()).map(|i| ctx.image_id(i)).collect();

    let mut attacks = Vec::new();
    for image in 0..images.len() {
        for sub in 0..subs.len() {
            for &dir in &cfg.directions {
                attacks.push(Task::Srda { image, sub, dir });
            }
        }
        if cfg.arda {
            for &family in &families {
                for &dir in &cfg.directions {
                    attacks.push(Task::Arda { image, family, dir });
                }
            }
        }
        for sub in 0..defended.len() {
            for &dir in &cfg.directions {
                attacks.push(Task::DefendedSrda { image, sub, dir });
            }
        }
    }
    run_phase(&ctx, &pool, &attacks, &mut bundle);

    let failed_srda: Vec<String> = bundle.failures.iter().map(|f| f.0.clone()).collect();
    let mut derived = Vec::new();
    for image in 0..images.len() {
        for (sub, s) in subs.iter().enumerate() {
            for &dir in &cfg.eci_directions {
                if s.family.has_hyper() && cfg.directions.contains(&dir) {
                    derived.push(Task::Eci { image, sub, dir });
                }
            }
            if cfg.ldmr {
                derived.push(Task::Ldmr { image, sub });
            }
            if let Some(on) = &cfg.online {
                for &dir in &on.directions {
                    if cfg.directions.contains(&dir) {
                        derived.push(Task::Online { image, sub, dir });
                    }
                }
            }
        }
    }
    let (ready, blocked): (Vec<Task>, Vec<Task>) = derived.into_iter().partition(|t| match *t {
        Task::Eci { image, sub, dir } | Task::Online { image, sub, dir } => !failed_srda.contains(&ctx.srda_id(image, sub, dir)),
        Task::Ldmr { image, sub } => !failed_srda.contains(&ctx.srda_id(image, sub, [0.0, 1.0])),
        _ => true,
    });
    for t in &blocked {
        let id = ctx.id(t);
        let msg = "the attack it depends on failed".to_string();
        runner.record(&id, ManifestEntry { status: "failed".into(), error: Some(msg.clone()) })?;
        bundle.failures.push((id, msg));
    }
    run_phase(&ctx, &pool, &ready, &mut bundle);

    bundle.resumed = *runner.resumed.lock().expect("counter");
    bundle.computed = *runner.computed.lock().expect("counter");
    report::write_bundle(out, &bundle)?;
    Ok(bundle)
}
