//! Command implementations behind the `trajlab` binary.
//!
//! Every command is a function of its arguments and input files; rerunning
//! with identical inputs rewrites identical datasets, checkpoints, reports
//! and tables. Manifests additionally carry wall-clock timings.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::loss::{steering_angle_deg, LossVariant};
use crate::metrics::{MetricOptions, MetricsReport};
use crate::raster::{build_stack, drivable_mask, ppm_file_name, write_mask_ppm, write_ppm, LayerSpec};
use crate::scenegen::{generate_dataset, read_dataset, write_dataset, FamilyWeights, Lane, Polygon, Sample, SceneFamily};
use crate::train::{config_hash, evaluate_prepared, prepare, split_by_hash, train, Prepared};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTOGRAM_BIN_DEG: f64 = 10.0;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples = read_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::format(path, "dataset has no samples"));
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub path: PathBuf,
    pub count: usize,
    pub per_family: BTreeMap<String, usize>,
    /// `(bin lower edge in degrees, count)` of the final steering angle, non-empty bins only.
    pub angle_histogram: Vec<(f64, usize)>,
}

impl GenSummary {
    /// Lower edge of the fullest histogram bin.
    pub fn mode_bin(&self) -> f64 {
        self.angle_histogram
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
            .map_or(0.0, |b| b.0)
    }
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "wrote {} samples to {}", self.count, self.path.display())?;
        for (family, n) in &self.per_family {
            writeln!(f, "  {family:<12} {n}")?;
        }
        writeln!(f, "final steering angle (deg):")?;
        let widest = self.angle_histogram.iter().map(|b| b.1).max().unwrap_or(1).max(1);
        for (lo, n) in &self.angle_histogram {
            let bar = "#".repeat((40 * n).div_ceil(widest));
            writeln!(f, "  [{:>5.0}, {:>5.0}) {n:>6} {bar}", lo, lo + HISTOGRAM_BIN_DEG)?;
        }
        Ok(())
    }
}

pub fn angle_histogram(samples: &[Sample]) -> Vec<(f64, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for s in samples {
        let a = steering_angle_deg(&s.gt.points).unwrap_or(0.0);
        *bins.entry((a / HISTOGRAM_BIN_DEG).floor() as i64).or_default() += 1;
    }
    bins.into_iter()
        .map(|(b, n)| (b as f64 * HISTOGRAM_BIN_DEG, n))
        .collect()
}

pub fn family_weights(families: &[SceneFamily]) -> FamilyWeights {
    let mut w = FamilyWeights {
        straight: 0.0,
        curve: 0.0,
        t_junction: 0.0,
        four_way: 0.0,
    };
    for &f in families {
        *w.get_mut(f) = 1.0;
    }
    w
}

pub fn gen_data(
    cfg: &ExperimentConfig,
    count: usize,
    seed: u64,
    families: Option<&[SceneFamily]>,
    path: &Path,
) -> Result<GenSummary> {
    let mut params = cfg.data.clone();
    if let Some(fs) = families {
        if fs.is_empty() {
            return Err(Error::Argument("empty family list".into()));
        }
        params.family_weights = family_weights(fs);
    }
    let samples = generate_dataset(seed, count, &params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_dataset(path, &samples)?;
    let mut per_family = BTreeMap::new();
    for s in &samples {
        *per_family.entry(s.family.name().to_string()).or_insert(0) += 1;
    }
    Ok(GenSummary {
        path: path.to_path_buf(),
        count: samples.len(),
        per_family,
        angle_histogram: angle_histogram(&samples),
    })
}

/// Writes every configured layer and the drivable mask of the selected
/// samples as PPM images. Returns the written paths.
pub fn rasterize(
    cfg: &ExperimentConfig,
    data: &Path,
    ids: &[String],
    limit: Option<usize>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.raster.validate()?;
    let samples = select(load_samples(data)?, ids, limit)?;
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for s in &samples {
        let stack = build_stack(&s.scene, &cfg.layers, &cfg.raster)?;
        for (spec, grid) in &stack.layers {
            let p = out_dir.join(ppm_file_name(&s.sample_id, spec));
            write_ppm(&p, grid)?;
            written.push(p);
        }
        let p = out_dir.join(format!("{}_mask.ppm", s.sample_id));
        write_mask_ppm(&p, &drivable_mask(&s.scene, &cfg.raster)?)?;
        written.push(p);
    }
    Ok(written)
}

fn select<T: HasId>(items: Vec<T>, ids: &[String], limit: Option<usize>) -> Result<Vec<T>> {
    let mut out: Vec<T> = if ids.is_empty() {
        items
    } else {
        let mut by_id: BTreeMap<String, T> = items.into_iter().map(|s| (s.id().to_string(), s)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .ok_or_else(|| Error::Argument(format!("no sample with id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    if let Some(n) = limit {
        out.truncate(n);
    }
    Ok(out)
}

trait HasId {
    fn id(&self) -> &str;
}

impl HasId for Sample {
    fn id(&self) -> &str {
        &self.sample_id
    }
}

impl HasId for Prepared {
    fn id(&self) -> &str {
        &self.sample_id
    }
}

/// Which samples a run is scored on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalSubset {
    /// Every sample of `eval_dataset`.
    All,
    /// The hash-split validation share of `eval_dataset`.
    Validation { fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub eval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub config_hash: String,
    pub dataset: PathBuf,
    pub dataset_hash: String,
    pub eval_dataset: PathBuf,
    pub eval_subset: EvalSubset,
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub report: MetricsReport,
    pub timings: Timings,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")
    }

    pub fn checkpoint_path(&self, manifest: &Path) -> PathBuf {
        manifest.parent().unwrap_or(Path::new(".")).join(&self.checkpoint)
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn eval_samples(all: Vec<Prepared>, subset: &EvalSubset) -> Vec<Prepared> {
    match subset {
        EvalSubset::All => all,
        EvalSubset::Validation { fraction } => split_by_hash(all, *fraction, |p| p.sample_id.as_str()).1,
    }
}

/// Outcome of one training run written to `out_dir`.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

/// Trains on `data` (minus the validation share unless `val_data` is given),
/// scores the best checkpoint on the validation samples and writes
/// `best.ckpt`, `last.ckpt`, the logs, `report.json`, `report.csv` and
/// `manifest.json` into `out_dir`.
pub fn train_run(cfg: &ExperimentConfig, data: &Path, val_data: Option<&Path>, out_dir: &Path, label: &str) -> Result<TrainRun> {
    cfg.validate()?;
    let setup = cfg.setup()?;
    let samples = load_samples(data)?;
    check_horizon(&samples, setup.arch.horizon, data)?;
    let all = prepare(&samples, &setup.raster, &setup.layers)?;
    let (train_set, val_set, eval_dataset, eval_subset) = match val_data {
        Some(v) => {
            let vs = load_samples(v)?;
            check_horizon(&vs, setup.arch.horizon, v)?;
            let val = prepare(&vs, &setup.raster, &setup.layers)?;
            (all, val, absolute(v), EvalSubset::All)
        }
        None if cfg.train.validation_fraction > 0.0 => {
            let (t, v) = split_by_hash(all, cfg.train.validation_fraction, |p| p.sample_id.as_str());
            let subset = EvalSubset::Validation {
                fraction: cfg.train.validation_fraction,
            };
            (t, v, absolute(data), subset)
        }
        None => (all, Vec::new(), absolute(data), EvalSubset::All),
    };
    if train_set.is_empty() {
        return Err(Error::Argument("the validation split left no training samples".into()));
    }
    let start = Instant::now();
    let outcome = train(&setup, &cfg.train, &train_set, &val_set)?;
    let train_s = start.elapsed().as_secs_f64();

    create_dir(out_dir)?;
    outcome.best.save(&out_dir.join(BEST_CHECKPOINT))?;
    outcome.last.save(&out_dir.join("last.ckpt"))?;
    write_file(&out_dir.join("epochs.csv"), outcome.epoch_csv())?;
    write_file(&out_dir.join("steps.csv"), outcome.step_csv())?;
    write_file(&out_dir.join("penalties.csv"), outcome.penalty_csv())?;

    let start = Instant::now();
    let scored = if val_set.is_empty() { &train_set } else { &val_set };
    let (report, _) = evaluate_prepared(&outcome.best, scored, &cfg.k_list, &cfg.metrics)?;
    let eval_s = start.elapsed().as_secs_f64();
    write_report(out_dir, label, &report)?;

    let manifest = RunManifest {
        label: label.to_string(),
        config_hash: config_hash(&cfg.train, &setup),
        dataset: absolute(data),
        dataset_hash: file_hash(data)?,
        eval_dataset,
        eval_subset: if val_set.is_empty() { EvalSubset::All } else { eval_subset },
        checkpoint: PathBuf::from(BEST_CHECKPOINT),
        report,
        timings: Timings { train_s, eval_s },
        config: cfg.clone(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    Ok(TrainRun { manifest, manifest_path })
}

fn check_horizon(samples: &[Sample], horizon: usize, path: &Path) -> Result<()> {
    match samples.iter().find(|s| s.gt.len() != horizon) {
        Some(s) => Err(Error::Config(format!(
            "{}: sample {} has {} ground-truth points, the config implies {}",
            path.display(),
            s.sample_id,
            s.gt.len(),
            horizon
        ))),
        None => Ok(()),
    }
}

fn write_report(out_dir: &Path, label: &str, report: &MetricsReport) -> Result<()> {
    write_file(&out_dir.join("report.json"), report.to_json() + "\n")?;
    write_file(
        &out_dir.join("report.csv"),
        format!("label,{}\n{},{}\n", report.csv_header(), label, report.csv_row()),
    )
}

/// Re-scores the checkpoint recorded in a manifest on the manifest's evaluation samples.
pub fn eval_manifest(manifest_path: &Path, out_dir: Option<&Path>) -> Result<MetricsReport> {
    let m = RunManifest::load(manifest_path)?;
    let ck = Checkpoint::load(&m.checkpoint_path(manifest_path))?;
    let samples = load_samples(&m.eval_dataset)?;
    let report = eval_checkpoint_on(&ck, samples, &m.eval_subset, &m.config.k_list, &m.config.metrics)?;
    if let Some(dir) = out_dir {
        write_report(dir, &m.label, &report)?;
    }
    Ok(report)
}

pub fn eval_checkpoint(
    checkpoint: &Path,
    data: &Path,
    k_list: &[usize],
    opts: &MetricOptions,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let report = eval_checkpoint_on(&ck, load_samples(data)?, &EvalSubset::All, k_list, opts)?;
    if let Some(dir) = out_dir {
        write_report(dir, "eval", &report)?;
    }
    Ok(report)
}

fn eval_checkpoint_on(
    ck: &Checkpoint,
    samples: Vec<Sample>,
    subset: &EvalSubset,
    k_list: &[usize],
    opts: &MetricOptions,
) -> Result<MetricsReport> {
    let arch = &ck.params.arch;
    if ck.layers.len() != arch.backbones || ck.raster.size_px != arch.raster_size {
        return Err(Error::Config("checkpoint raster setup does not match its architecture".into()));
    }
    check_horizon(&samples, arch.horizon, Path::new("evaluation data"))?;
    let data = eval_samples(prepare(&samples, &ck.raster, &ck.layers)?, subset);
    if data.is_empty() {
        return Err(Error::Argument("no evaluation samples".into()));
    }
    Ok(evaluate_prepared(ck, &data, k_list, opts)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Loss,
    Layers,
}

impl Study {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Study::Loss),
            "layers" | "layer" => Ok(Study::Layers),
            other => Err(Error::Argument(format!("unknown study {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Study::Loss => "loss",
            Study::Layers => "layers",
        }
    }
}

/// One grid cell of an ablation study.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub slug: String,
    pub config: ExperimentConfig,
}

/// Cells in table order. The loss study crosses {angle-scaled, MTP} with
/// {12, 3} modes; the layer study drops each of layers 1–3 in turn and
/// finally uses all four.
pub fn ablation_grid(base: &ExperimentConfig, study: Study) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    match study {
        Study::Loss => {
            for modes in [12, 3] {
                for loss in [LossVariant::AngleScaled, LossVariant::Mtp] {
                    let mut config = base.clone();
                    config.model.modes = modes;
                    config.train.loss = loss;
                    let slug = match loss {
                        LossVariant::AngleScaled => format!("angle_scaled_{modes}"),
                        LossVariant::Mtp => format!("mtp_{modes}"),
                    };
                    cells.push(AblationCell {
                        label: format!("{} {modes} modes", loss.label()),
                        slug,
                        config,
                    });
                }
            }
        }
        Study::Layers => {
            for subset in [&[2, 3, 4][..], &[1, 2, 4], &[1, 2, 3], &[1, 2, 3, 4]] {
                let mut config = base.clone();
                config.layers = LayerSpec::from_codebook(subset)?;
                let names: Vec<String> = subset.iter().map(|i| i.to_string()).collect();
                cells.push(AblationCell {
                    label: names.join(", "),
                    slug: format!("layers_{}", names.join("")),
                    config,
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub result: std::result::Result<MetricsReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub study: Study,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_err()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("label,{},status\n", self.columns.join(","));
        for r in &self.rows {
            match &r.result {
                Ok(rep) => out.push_str(&format!("{},{},ok\n", csv_field(&r.label), rep.csv_row())),
                Err(_) => {
                    let blanks = vec![""; self.columns.len()].join(",");
                    out.push_str(&format!("{},{blanks},failed\n", csv_field(&r.label)));
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([self.header_label().len()])
            .max()
            .unwrap_or(0);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(8)).collect();
        let mut out = format!("{:<label_w$}", self.header_label());
        for (c, w) in self.columns.iter().zip(&col_w) {
            out.push_str(&format!(" | {c:>w$}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w));
        for w in &col_w {
            out.push_str(&format!("-+-{}", "-".repeat(*w)));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<label_w$}", r.label));
            match &r.result {
                Ok(rep) => {
                    for (v, w) in rep.values().iter().zip(&col_w) {
                        out.push_str(&format!(" | {v:>w$.4}"));
                    }
                }
                Err(e) => out.push_str(&format!(" | failed: {e}")),
            }
            out.push('\n');
        }
        out
    }

    fn header_label(&self) -> &'static str {
        match self.study {
            Study::Loss => "Loss",
            Study::Layers => "Layers",
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn report_columns(k_list: &[usize]) -> Vec<String> {
    MetricsReport {
        min_ade: BTreeMap::new(),
        min_fde: BTreeMap::new(),
        miss_rate_2m: BTreeMap::new(),
        off_road_rate: 0.0,
        sample_count: 0,
        k_list: k_list.to_vec(),
    }
    .columns()
}

/// Runs every cell of `study` with the same seed, writing each cell's run
/// into `out_dir/<study>/<cell>/` and the table to
/// `out_dir/<study>_table.{txt,csv}`. Failed cells are kept as failed rows.
pub fn ablate(base: &ExperimentConfig, study: Study, data: &Path, out_dir: &Path) -> Result<AblationTable> {
    base.validate()?;
    let cells = ablation_grid(base, study)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let dir = out_dir.join(study.name()).join(&cell.slug);
        let result = train_run(&cell.config, data, None, &dir, &cell.label)
            .map(|r| r.manifest.report)
            .map_err(|e| e.to_string());
        rows.push(AblationRow {
            label: cell.label.clone(),
            result,
        });
    }
    let table = AblationTable {
        study,
        columns: report_columns(&base.k_list),
        rows,
    };
    write_file(&out_dir.join(format!("{}_table.txt", study.name())), table.to_text())?;
    write_file(&out_dir.join(format!("{}_table.csv", study.name())), table.to_csv())?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSample {
    pub run: String,
    pub sample_id: String,
    pub family: SceneFamily,
    pub ground_truth: Vec<Vec2>,
    pub trajectories: Vec<Vec<Vec2>>,
    pub confidences: Vec<f64>,
    pub drivable_outline: Vec<Polygon>,
    pub lanes: Vec<Lane>,
}

/// Writes `<out>/<run>/<sample_id>.json` with predictions, ground truth and
/// map outlines for each selected sample, plus `<out>/<run>/loss_curve.csv`
/// when the run directory has an epoch log.
pub fn plot_data(manifests: &[PathBuf], ids: &[String], limit: Option<usize>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if manifests.is_empty() {
        return Err(Error::Argument("no manifests given".into()));
    }
    let mut written = Vec::new();
    for (i, mpath) in manifests.iter().enumerate() {
        let m = RunManifest::load(mpath)?;
        let ck = Checkpoint::load(&m.checkpoint_path(mpath))?;
        let run = format!("run{i}_{}", slugify(&m.label));
        let run_dir = out_dir.join(&run);
        create_dir(&run_dir)?;
        let samples = load_samples(&m.eval_dataset)?;
        let pool: Vec<Sample> = match &m.eval_subset {
            EvalSubset::All => samples,
            EvalSubset::Validation { fraction } => split_by_hash(samples, *fraction, |s| s.sample_id.as_str()).1,
        };
        let chosen = select(pool, ids, limit.or(Some(8)).filter(|_| ids.is_empty()))?;
        let prepared = prepare(&chosen, &ck.raster, &ck.layers)?;
        for (s, p) in chosen.iter().zip(&prepared) {
            let pred = crate::train::predict(&ck.params, p)?;
            let rec = PlotSample {
                run: m.label.clone(),
                sample_id: s.sample_id.clone(),
                family: s.family,
                ground_truth: s.gt.points.clone(),
                trajectories: pred.trajectories,
                confidences: pred.confidences,
                drivable_outline: s.scene.drivable.clone(),
                lanes: s.scene.lanes.clone(),
            };
            let path = run_dir.join(format!("{}.json", s.sample_id));
            write_file(&path, serde_json::to_string(&rec).expect("plot record serializes") + "\n")?;
            written.push(path);
        }
        let epochs = mpath.parent().unwrap_or(Path::new(".")).join("epochs.csv");
        if epochs.exists() {
            let curve = run_dir.join("loss_curve.csv");
            fs::copy(&epochs, &curve).map_err(|e| Error::io(&curve, e))?;
            written.push(curve);
        }
    }
    Ok(written)
}

fn slugify(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}
