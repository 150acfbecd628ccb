//! Run orchestration: resolved configs, per-seed run directories, metrics
//! files, checkpoints, boundary panels and the cross-seed summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use adr_core::adr::{
    train, AdrConfig, Head, ModelBundle, TrainMetricsRecord, TrainRun, TrainVariant,
};
use adr_core::checkpoint::{load_checkpoint, save_checkpoint};
use adr_core::datasets::{make_gaussian_mixture, make_two_moons, rotate, LabeledSet2D, MoonsConfig};
use adr_core::ganssl::{generate_samples, train_gan_ssl, GanConfig, GanRun};
use adr_core::{Error, Rng, Tensor};

use crate::raster::{classify_grid, data_bounds, render, BoundaryGrid};

/// Split tag for dataset generation, distinct from the training streams.
const TAG_DATA: u64 = 100;
const TAG_SAMPLES: u64 = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadChoice {
    C,
    CPrime,
}

impl From<HeadChoice> for Head {
    fn from(h: HeadChoice) -> Head {
        match h {
            HeadChoice::C => Head::C,
            HeadChoice::CPrime => Head::CPrime,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub resolution: usize,
    /// Padding fraction added around the data bounding box.
    pub padding: f64,
    /// Which head the panels are rendered from.
    pub head: HeadChoice,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            resolution: 256,
            padding: 0.2,
            head: HeadChoice::CPrime,
        }
    }
}

/// Fully resolved configuration of one adaptation run; `config.json` holds
/// exactly this and reproduces the run byte-for-byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptRunConfig {
    pub variant: TrainVariant,
    pub moons: MoonsConfig,
    pub train: AdrConfig,
    pub boundary: BoundaryConfig,
}

impl AdaptRunConfig {
    pub fn with_seed(&self, seed: u64) -> AdaptRunConfig {
        let mut cfg = self.clone();
        cfg.moons.seed = seed;
        cfg.train.seed = seed;
        cfg
    }
}

/// Fully resolved configuration of one GAN run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanRunConfig {
    pub gan: GanConfig,
    /// Labeled points per class in the held-out test draw.
    pub test_per_class: usize,
    /// How many generated samples to dump as CSV at the end.
    pub sample_dump: usize,
}

impl GanRunConfig {
    pub fn with_seed(&self, seed: u64) -> GanRunConfig {
        let mut cfg = self.clone();
        cfg.gan.seed = seed;
        cfg
    }
}

/// Source and rotated-target pair for an adaptation config.
pub fn moons_pair(cfg: &MoonsConfig) -> adr_core::Result<(LabeledSet2D, LabeledSet2D)> {
    let mut rng = Rng::new(cfg.seed).split(TAG_DATA);
    let source = make_two_moons(cfg.n_per_domain, cfg.noise_std, &mut rng)?;
    let target = rotate(&source, cfg.rotation_degrees);
    Ok((source, target))
}

/// Labeled/unlabeled/test triple for a GAN config.
pub fn mixture_triple(
    cfg: &GanRunConfig,
) -> adr_core::Result<(LabeledSet2D, Tensor, LabeledSet2D)> {
    let mut rng = Rng::new(cfg.gan.seed).split(TAG_DATA);
    let (labeled, unlabeled) = make_gaussian_mixture(
        cfg.gan.n_classes,
        cfg.gan.n_labeled_per_class,
        cfg.gan.n_unlabeled,
        cfg.gan.separation,
        cfg.gan.mixture_noise,
        &mut rng,
    )?;
    let (test, _) = make_gaussian_mixture(
        cfg.gan.n_classes,
        cfg.test_per_class,
        1,
        cfg.gan.separation,
        cfg.gan.mixture_noise,
        &mut rng.split(1),
    )?;
    Ok((labeled, unlabeled, test))
}

pub fn write_metrics_ndjson(
    path: impl AsRef<Path>,
    records: &[TrainMetricsRecord],
) -> adr_core::Result<()> {
    let mut out = Vec::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::contract(format!("metrics serialization: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> adr_core::Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("json serialization: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes the six boundary panels: one per unit of the head's last hidden
/// layer plus the combined panel.
pub fn write_boundary_panels(
    dir: &Path,
    bundle: &ModelBundle,
    cfg: &BoundaryConfig,
    source: &LabeledSet2D,
    target: &LabeledSet2D,
) -> adr_core::Result<BoundaryGrid> {
    let head: Head = cfg.head.into();
    let bounds = data_bounds(&[source, target], cfg.padding);
    let res = cfg.resolution;
    let combined = classify_grid(bundle, head, bounds, res, res, None)?;
    render(&combined, source, target).write_ppm(dir.join("boundary_all.ppm"))?;
    let head_model = match head {
        Head::C => &bundle.c,
        Head::CPrime => &bundle.c_prime,
    };
    let width = head_model
        .spec
        .last_hidden_width()
        .ok_or_else(|| Error::contract("boundary head needs a hidden layer"))?;
    for unit in 0..width {
        let grid = classify_grid(bundle, head, bounds, res, res, Some(unit))?;
        render(&grid, source, target).write_ppm(dir.join(format!("boundary_neuron_{unit}.ppm")))?;
    }
    Ok(combined)
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptSeedSummary {
    pub seed: u64,
    pub outer_iteration: usize,
    #[serde(rename = "acc_C_target")]
    pub acc_c_target: f64,
    #[serde(rename = "acc_Cprime_target")]
    pub acc_c_prime_target: f64,
    #[serde(rename = "acc_C_source")]
    pub acc_c_source: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptSummary {
    pub variant: TrainVariant,
    pub seeds: Vec<u64>,
    pub runs: Vec<AdaptSeedSummary>,
    #[serde(rename = "median_acc_C_target")]
    pub median_acc_c_target: f64,
    #[serde(rename = "median_acc_Cprime_target")]
    pub median_acc_c_prime_target: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs one adaptation seed and writes its artifacts into `dir`.
pub fn run_adapt_seed(dir: &Path, cfg: &AdaptRunConfig) -> adr_core::Result<TrainRun> {
    std::fs::create_dir_all(dir)?;
    write_json(dir.join("config.json"), cfg)?;
    let (source, target) = moons_pair(&cfg.moons)?;
    let run = train(&cfg.train, &source, &target, cfg.variant)?;
    write_metrics_ndjson(dir.join("metrics.ndjson"), &run.metrics)?;
    save_checkpoint(
        dir.join("model.ckpt"),
        &[
            ("g", &run.bundle.g.params, &run.bundle.g.bn),
            ("c", &run.bundle.c.params, &run.bundle.c.bn),
            ("cprime", &run.bundle.c_prime.params, &run.bundle.c_prime.bn),
        ],
    )?;
    write_boundary_panels(dir, &run.bundle, &cfg.boundary, &source, &target)?;
    Ok(run)
}

/// Runs an adaptation sweep over `seeds`; returns the summary written to
/// `out/summary.json`.
pub fn run_adapt_sweep(
    out: &Path,
    base: &AdaptRunConfig,
    seeds: &[u64],
    dump_data: bool,
) -> adr_core::Result<AdaptSummary> {
    std::fs::create_dir_all(out)?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = base.with_seed(seed);
        let dir = out.join(format!("seed-{seed}"));
        let run = run_adapt_seed(&dir, &cfg)?;
        if dump_data {
            let (source, target) = moons_pair(&cfg.moons)?;
            adr_core::datasets::save_csv(
                dir.join("data.csv"),
                &[("source", &source), ("target", &target)],
            )?;
        }
        let last = run.metrics.last().expect("at least the initial record");
        runs.push(AdaptSeedSummary {
            seed,
            outer_iteration: last.outer_iteration,
            acc_c_target: last.acc_c_target,
            acc_c_prime_target: last.acc_c_prime_target,
            acc_c_source: last.acc_c_source,
        });
    }
    let summary = AdaptSummary {
        variant: base.variant,
        seeds: seeds.to_vec(),
        median_acc_c_target: median(&runs.iter().map(|r| r.acc_c_target).collect::<Vec<_>>()),
        median_acc_c_prime_target: median(
            &runs.iter().map(|r| r.acc_c_prime_target).collect::<Vec<_>>(),
        ),
        runs,
    };
    write_json(out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct GanSeedSummary {
    pub seed: u64,
    pub iteration: usize,
    pub test_accuracy: f64,
    pub feature_matching: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GanSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<GanSeedSummary>,
    pub median_test_accuracy: f64,
}

/// Runs one GAN seed and writes its artifacts into `dir`.
pub fn run_gan_seed(dir: &Path, cfg: &GanRunConfig) -> adr_core::Result<GanRun> {
    std::fs::create_dir_all(dir)?;
    write_json(dir.join("config.json"), cfg)?;
    let (labeled, unlabeled, test) = mixture_triple(cfg)?;
    let run = train_gan_ssl(&cfg.gan, &labeled, &unlabeled, &test)?;
    let mut out = Vec::new();
    for record in &run.metrics {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::contract(format!("metrics serialization: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    std::fs::write(dir.join("metrics.ndjson"), out)?;
    save_checkpoint(
        dir.join("model.ckpt"),
        &[
            ("generator", &run.bundle.generator.params, &run.bundle.generator.bn),
            ("critic", &run.bundle.critic.params, &run.bundle.critic.bn),
        ],
    )?;
    if cfg.sample_dump > 0 {
        let samples = generate_samples(
            &run.bundle,
            cfg.sample_dump,
            &mut Rng::new(cfg.gan.seed).split(TAG_SAMPLES),
        )?;
        let mut csv = String::from("x,y\n");
        for i in 0..samples.rows() {
            csv.push_str(&format!("{},{}\n", samples.get2(i, 0), samples.get2(i, 1)));
        }
        std::fs::write(dir.join("samples.csv"), csv)?;
    }
    Ok(run)
}

pub fn run_gan_sweep(
    out: &Path,
    base: &GanRunConfig,
    seeds: &[u64],
) -> adr_core::Result<GanSummary> {
    std::fs::create_dir_all(out)?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = base.with_seed(seed);
        let dir = out.join(format!("seed-{seed}"));
        let run = run_gan_seed(&dir, &cfg)?;
        let last = run.metrics.last().expect("at least the initial record");
        runs.push(GanSeedSummary {
            seed,
            iteration: last.iteration,
            test_accuracy: last.test_accuracy,
            feature_matching: last.feature_matching,
        });
    }
    let summary = GanSummary {
        seeds: seeds.to_vec(),
        median_test_accuracy: median(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()),
        runs,
    };
    write_json(out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Rebuilds a trained bundle from a run directory's config and checkpoint.
pub fn load_adapt_bundle(dir: &Path) -> adr_core::Result<(AdaptRunConfig, ModelBundle)> {
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    let cfg: AdaptRunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::contract(format!("bad config.json: {e}")))?;
    let sections = load_checkpoint(dir.join("model.ckpt"))?;
    let mut bundle = ModelBundle::init(&cfg.train, &mut Rng::new(cfg.train.seed))?;
    for section in sections {
        let model = match section.name.as_str() {
            "g" => &mut bundle.g,
            "c" => &mut bundle.c,
            "cprime" => &mut bundle.c_prime,
            other => {
                return Err(Error::contract(format!("unknown checkpoint section {other:?}")));
            }
        };
        for (name, tensor) in section.params.iter() {
            model.params.set(name, tensor.clone())?;
        }
        model.bn = section.bn;
    }
    Ok((cfg, bundle))
}

/// Re-renders the boundary panels of a finished run directory.
pub fn render_boundary_dir(
    dir: &Path,
    resolution: Option<usize>,
    head: Option<HeadChoice>,
) -> adr_core::Result<()> {
    let (mut cfg, bundle) = load_adapt_bundle(dir)?;
    if let Some(res) = resolution {
        cfg.boundary.resolution = res;
    }
    if let Some(h) = head {
        cfg.boundary.head = h;
    }
    let (source, target) = moons_pair(&cfg.moons)?;
    write_boundary_panels(dir, &bundle, &cfg.boundary, &source, &target)?;
    Ok(())
}

pub fn seeds_arg(list: &str) -> Result<Vec<u64>, String> {
    let seeds: Result<Vec<u64>, _> = list
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect();
    match seeds {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(format!("bad seed list {list:?}; expected e.g. 0,1,2")),
    }
}

impl std::fmt::Display for AdaptSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:?}: median target accuracy C'={:.4} C={:.4}",
            self.variant, self.median_acc_c_prime_target, self.median_acc_c_target
        )?;
        for run in &self.runs {
            writeln!(
                f,
                "  seed {:>3}: acc_Cprime_target={:.4} acc_C_target={:.4} acc_C_source={:.4}",
                run.seed, run.acc_c_prime_target, run.acc_c_target, run.acc_c_source
            )?;
        }
        Ok(())
    }
}

impl std::fmt::Display for GanSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gan-ssl: median test accuracy {:.4}", self.median_test_accuracy)?;
        for run in &self.runs {
            writeln!(
                f,
                "  seed {:>3}: test_accuracy={:.4} feature_matching={:.4}",
                run.seed, run.test_accuracy, run.feature_matching
            )?;
        }
        Ok(())
    }
}
