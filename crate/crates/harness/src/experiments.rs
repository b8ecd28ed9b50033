//! Experiment orchestration: data and model setup, per-image work units run
//! on a worker pool, and the result files.
//!
//! Every unit derives its seeds from the config seed and its own grid
//! coordinates, so results do not depend on the worker count or on
//! scheduling; rows are sorted before they are written.

use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use scaleadv::attack_blackbox::{attack, BlackboxOracle, HsjConfig, SamplingMode};
use scaleadv::attack_scaling::{craft, residual, ScalingAttackConfig};
use scaleadv::attack_whitebox::{cw_joint, pgd_joint, pipeline_forward, CwConfig, Defense, PgdConfig, Pipeline};
use scaleadv::classifier::{adv_train, train, AdversarialTraining, Model, TrainConfig};
use scaleadv::defenses::{apply_prevention, detect_score, DetectionKind, DetectionSpec, DistortionMetric, PreventionKind, PreventionSpec};
use scaleadv::io::{load_idx, save_ppm};
use scaleadv::scaling::{identify_mask, scale};
use scaleadv::{hr_corpus, synth_dataset, Dataset, Image, RngState, ScalerKind, ScalerSpec, Shape};

use crate::config::{DatasetSource, DefenseChoice, ExperimentConfig, ExperimentKind, WhiteboxAttack};
use crate::error::{Error, Result};
use crate::predict::{hr_correct, quantize_boundary};
use crate::remote::{remote_classify, transfer_outcome, TOKEN_ENV};
use crate::results::{read_rows, sort_rows, summarize, write_rows, write_summary, ResultRow, SummaryRow, CALIBRATION_MODE};
use crate::svg::render_summary;

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Per-unit wall times; kept apart so `rows.csv` stays reproducible.
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.bin";

#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub figures: Vec<PathBuf>,
}

/// Seed for one work unit from the base seed and its grid coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x5DEE_CE66_D1CE_4E5B;
    for &p in parts {
        // splitmix64 finalizer over the running state
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Images and model shared by all units of a run.
pub struct Setup {
    pub model: Model,
    /// Held-out benign HR images: detector calibration and start pools.
    pub calibration: Vec<(Image, usize)>,
    /// Evaluation pool of HR images.
    pub test: Vec<(Image, usize)>,
}

fn test_pool(cfg: &ExperimentConfig) -> usize {
    (cfg.images * 3).max(50)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let needed = cfg.train_size + cfg.calibration + test_pool(cfg);
    match &cfg.dataset {
        DatasetSource::Synth => Ok(synth_dataset(&mut RngState::new(cfg.seed).split(0), needed, cfg.lr_side, cfg.classes)?),
        DatasetSource::Idx { images, labels } => {
            let ds = load_idx(images, labels)?;
            if ds.len() < cfg.train_size + cfg.calibration + cfg.images {
                return Err(Error::Invalid(format!("IDX dataset has {} samples, need at least {}", ds.len(), cfg.train_size + cfg.calibration + cfg.images)));
            }
            Ok(ds)
        }
    }
}

pub fn obtain_model(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<Model> {
    let shape = train_set.shape().ok_or(scaleadv::Error::EmptyCorpus)?;
    if let Some(path) = cfg.model.as_ref().filter(|p| p.exists()) {
        let model = Model::load(path)?;
        shape.ensure_eq(model.input_shape())?;
        if model.class_count() != train_set.class_count() {
            return Err(Error::Invalid(format!("model at {} has {} classes, dataset has {}", path.display(), model.class_count(), train_set.class_count())));
        }
        return Ok(model);
    }
    let init = Model::init(cfg.seed, shape, train_set.class_count())?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        seed: cfg.seed,
        adversarial: cfg.adv_epsilon.map(|epsilon| AdversarialTraining { epsilon, pgd_steps: cfg.adv_steps }),
        ..TrainConfig::default()
    };
    let model = if tc.adversarial.is_some() { adv_train(&init, train_set, &tc)? } else { train(&init, train_set, &tc)? };
    if let Some(path) = &cfg.model {
        model.save(path)?;
    }
    Ok(model)
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let ds = load_dataset(cfg)?;
        let (train_set, rest) = ds.split_at(cfg.train_size);
        let (calib, test) = rest.split_at(cfg.calibration);
        let model = obtain_model(cfg, &train_set)?;
        let rng = RngState::new(cfg.seed);
        Ok(Self {
            model,
            calibration: hr_corpus(&calib, cfg.beta, &mut rng.split(1))?,
            test: hr_corpus(&test, cfg.beta, &mut rng.split(2))?,
        })
    }

    pub fn lr_hw(&self) -> (usize, usize) {
        let s = self.model.input_shape();
        (s.height, s.width)
    }
}

pub fn scaler_spec(kind: ScalerKind, lr_hw: (usize, usize), beta: usize) -> Result<ScalerSpec> {
    Ok(ScalerSpec::with_ratio(kind, lr_hw, beta)?)
}

pub fn defense_spec(choice: DefenseChoice, scaler: &ScalerSpec) -> Result<Option<PreventionSpec>> {
    let kind = match choice {
        DefenseChoice::None => return Ok(None),
        DefenseChoice::Median => PreventionKind::Median,
        DefenseChoice::Randomized => PreventionKind::Randomized,
    };
    Ok(Some(PreventionSpec::for_scaler(kind, scaler)?))
}

pub fn build_pipeline(choice: DefenseChoice, scaler: &ScalerSpec, model: &Model) -> Result<Pipeline> {
    let defense = match defense_spec(choice, scaler)? {
        None => Defense::None,
        Some(s) => Defense::Prevention(s),
    };
    Ok(Pipeline::new(defense, scaler.clone(), model.clone())?)
}

/// Indices of the first `n` test images the pipeline classifies correctly.
pub fn select_correct(pipe: &Pipeline, test: &[(Image, usize)], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n);
    for (i, (img, y)) in test.iter().enumerate() {
        if out.len() == n {
            break;
        }
        if hr_correct(pipe, img, *y, &mut RngState::new(derive_seed(seed, &[0xC0, i as u64])))? {
            out.push(i);
        }
    }
    Ok(out)
}

struct Detectors {
    unscaling: DetectionSpec,
    minfilter: DetectionSpec,
    spectrum: DetectionSpec,
}

impl Detectors {
    fn new(scaler: &ScalerSpec) -> Result<Self> {
        let d = |k| DetectionSpec::new(k, DistortionMetric::Mse, scaler.clone());
        Ok(Self { unscaling: d(DetectionKind::Unscaling)?, minfilter: d(DetectionKind::MinFilter)?, spectrum: d(DetectionKind::Spectrum)? })
    }

    fn score(&self, row: &mut ResultRow, img: &Image) -> Result<()> {
        row.unscaling = Some(detect_score(&self.unscaling, img)?);
        row.minfilter = Some(detect_score(&self.minfilter, img)?);
        row.spectrum = Some(detect_score(&self.spectrum, img)?);
        Ok(())
    }
}

type Unit<'a> = Box<dyn Fn() -> Result<Vec<ResultRow>> + Send + Sync + 'a>;

struct Done {
    name: String,
    rows: Result<Vec<ResultRow>>,
    wall: Duration,
}

fn run_pool(units: Vec<(String, Unit<'_>)>, workers: usize) -> Vec<Done> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Done>>> = units.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, units.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, unit)) = units.get(i) else { break };
                let t0 = Instant::now();
                let rows = unit();
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(Done { name: name.clone(), rows, wall: t0.elapsed() });
            });
        }
    });
    slots.into_iter().filter_map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner())).collect()
}

/// Runs the configured experiment and writes all result files to `cfg.out`.
/// Partial results are flushed even when some units fail.
pub fn run(cfg: &ExperimentConfig) -> Result<Outputs> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    if cfg.experiment == ExperimentKind::Report {
        return report(&cfg.out);
    }

    let setup = Setup::new(cfg)?;
    let scaler_kind = if cfg.experiment == ExperimentKind::Robust { ScalerKind::Area } else { cfg.scaler };
    let scaler = scaler_spec(scaler_kind, setup.lr_hw(), cfg.beta)?;
    let mut units: Vec<(String, Unit<'_>)> = Vec::new();
    let mut post: Vec<Post> = Vec::new();

    match cfg.experiment {
        ExperimentKind::Train => train_units(cfg, &setup, &scaler, &mut units)?,
        ExperimentKind::ScaleAttack => scale_attack_units(cfg, &setup, &scaler, &mut units)?,
        ExperimentKind::Whitebox | ExperimentKind::Robust => whitebox_units(cfg, &setup, &scaler, &mut units, &mut post)?,
        ExperimentKind::Blackbox => blackbox_units(cfg, &setup, &scaler, false, &mut units)?,
        ExperimentKind::Detect => {
            blackbox_units(cfg, &setup, &scaler, true, &mut units)?;
            scale_attack_units(cfg, &setup, &scaler, &mut units)?;
        }
        ExperimentKind::RemoteEval => remote_units(cfg, &setup, &scaler, &mut units)?,
        ExperimentKind::Report => unreachable!(),
    }

    let done = run_pool(units, cfg.worker_count());
    let mut rows = Vec::new();
    let mut timings = csv::Writer::from_path(cfg.out.join(TIMINGS_FILE))?;
    timings.write_record(["unit", "wall_ms"])?;
    let mut failures = Vec::new();
    for d in done {
        timings.write_record([d.name.as_str(), &d.wall.as_millis().to_string()])?;
        match d.rows {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(format!("{}: {e}", d.name)),
        }
    }
    timings.flush()?;
    for p in &post {
        p(&mut rows);
    }
    // dedup calibration rows emitted by several unit families
    sort_rows(&mut rows);
    rows.dedup_by(|a, b| a.mode == CALIBRATION_MODE && a == b);

    if cfg.experiment == ExperimentKind::Train {
        setup.model.save(cfg.out.join(MODEL_FILE))?;
    }
    let masks = cfg.out.join("masks");
    std::fs::create_dir_all(&masks)?;
    save_ppm(&identify_mask(&scaler).to_image(), masks.join(format!("{}_b{}.ppm", scaler.kind().name(), cfg.beta)))?;

    write_rows(&cfg.out.join(ROWS_FILE), &rows)?;
    let outputs = report(&cfg.out)?;
    if let Some(first) = failures.first() {
        return Err(Error::Incomplete { failed: failures.len(), first: first.clone() });
    }
    Ok(outputs)
}

/// Recomputes `summary.csv` and the figures from `rows.csv` in `dir`.
pub fn report(dir: &Path) -> Result<Outputs> {
    let rows = read_rows(&dir.join(ROWS_FILE))?;
    let summary = summarize(&rows);
    write_summary(&dir.join(SUMMARY_FILE), &summary)?;
    let figures = render_summary(&summary, dir)?;
    Ok(Outputs { dir: dir.to_path_buf(), rows, summary, figures })
}

fn experiment_name(cfg: &ExperimentConfig) -> &'static str {
    cfg.experiment.name()
}

fn train_units<'a>(cfg: &'a ExperimentConfig, setup: &'a Setup, scaler: &'a ScalerSpec, units: &mut Vec<(String, Unit<'a>)>) -> Result<()> {
    for &d in &cfg.defenses {
        let pipe = build_pipeline(d, scaler, &setup.model)?;
        for i in 0..cfg.images.min(setup.test.len()) {
            let pipe = pipe.clone();
            units.push((
                format!("train/{d}/{i}"),
                Box::new(move || {
                    let (img, y) = &setup.test[i];
                    let mut row = ResultRow::new(experiment_name(cfg), d.name(), scaler.kind().name(), cfg.beta, "clean", "-", 0.0, i, *y);
                    row.correct = Some(hr_correct(&pipe, img, *y, &mut RngState::new(derive_seed(cfg.seed, &[0x7A, i as u64])))?);
                    Ok(vec![row])
                }),
            ));
        }
    }
    Ok(())
}

fn calibration_units<'a>(cfg: &'a ExperimentConfig, setup: &'a Setup, scaler: &'a ScalerSpec, d: DefenseChoice, units: &mut Vec<(String, Unit<'a>)>) -> Result<()> {
    let det = Detectors::new(scaler)?;
    units.push((
        format!("calibration/{d}"),
        Box::new(move || {
            let mut rows = Vec::new();
            for (i, (img, y)) in setup.calibration.iter().enumerate() {
                let mut row = ResultRow::new(experiment_name(cfg), d.name(), scaler.kind().name(), cfg.beta, CALIBRATION_MODE, "-", 0.0, i, *y);
                det.score(&mut row, img)?;
                rows.push(row);
            }
            Ok(rows)
        }),
    ));
    Ok(())
}

/// Index of the next test image after `i` with a different label.
fn target_for(test: &[(Image, usize)], i: usize) -> usize {
    (1..test.len()).map(|k| (i + k) % test.len()).find(|&j| test[j].1 != test[i].1).unwrap_or(i)
}

fn scale_attack_units<'a>(cfg: &'a ExperimentConfig, setup: &'a Setup, scaler: &'a ScalerSpec, units: &mut Vec<(String, Unit<'a>)>) -> Result<()> {
    for &d in &cfg.defenses {
        calibration_units(cfg, setup, scaler, d, units)?;
        let prevention = defense_spec(d, scaler)?;
        for i in 0..cfg.images.min(setup.test.len()) {
            let det = Detectors::new(scaler)?;
            let prevention = prevention.clone();
            units.push((
                format!("scale-attack/{d}/{i}"),
                Box::new(move || {
                    let (source, y) = &setup.test[i];
                    let target = scale(scaler, &setup.test[target_for(&setup.test, i)].0)?;
                    let acfg = ScalingAttackConfig { seed: derive_seed(cfg.seed, &[0x5C, i as u64]), ..ScalingAttackConfig::default() };
                    let r = craft(scaler, source, &target, &acfg)?;
                    let mut row = ResultRow::new(experiment_name(cfg), d.name(), scaler.kind().name(), cfg.beta, "scaling", "-", 0.0, i, *y);
                    row.scaled_l2 = Some(r.scaled_l2);
                    row.success = Some(r.success);
                    row.quantized_success = Some(residual(scaler, &quantize_boundary(&r.image), &target)? <= acfg.epsilon);
                    row.queries = Some(r.queries);
                    // does the defended pipeline still see the source?
                    let defended = match &prevention {
                        None => r.image.clone(),
                        Some(p) => apply_prevention(p, &r.image, &mut RngState::new(derive_seed(cfg.seed, &[0x5D, i as u64])))?,
                    };
                    let seen = scale(scaler, &defended)?;
                    row.correct = Some(seen.mse(&scale(scaler, source)?)? < seen.mse(&target)?);
                    Detectors::score(&det, &mut row, &r.image)?;
                    Ok(vec![row])
                }),
            ));
        }
    }
    Ok(())
}

type Post = Box<dyn Fn(&mut Vec<ResultRow>)>;

fn whitebox_units<'a>(
    cfg: &'a ExperimentConfig,
    setup: &'a Setup,
    scaler: &'a ScalerSpec,
    units: &mut Vec<(String, Unit<'a>)>,
    post: &mut Vec<Post>,
) -> Result<()> {
    let exp = experiment_name(cfg);
    let lr_pipe = Pipeline::lr(setup.model.clone())?;
    // images every evaluated pipeline gets right, so vanilla and joint rows
    // cover the same set
    let mut chosen: Vec<usize> = (0..setup.test.len()).collect();
    for &d in &cfg.defenses {
        let pipe = build_pipeline(d, scaler, &setup.model)?;
        chosen = select_correct(&pipe, &setup.test, setup.test.len(), cfg.seed)?.into_iter().filter(|i| chosen.contains(i)).collect();
    }
    chosen.truncate(cfg.images);
    let (grid, param, tag): (&[f64], &str, &str) = match cfg.attack {
        WhiteboxAttack::Pgd => (&cfg.eps_grid, "epsilon", "pgd"),
        WhiteboxAttack::Cw => (&cfg.kappa_grid, "kappa", "cw"),
    };
    let beta = cfg.beta as f64;
    let vanilla_mode = format!("vanilla-{tag}");
    let joint_mode = format!("joint-{tag}");

    // the vanilla attack sees only the LR image, whatever the defense
    for (g, &value) in grid.iter().enumerate() {
        for &i in &chosen {
            let lr_pipe = lr_pipe.clone();
            let mode = vanilla_mode.clone();
            units.push((
                format!("{exp}/{mode}/{value}/{i}"),
                Box::new(move || {
                    let (img, y) = &setup.test[i];
                    let lr = scale(scaler, img)?;
                    let seed = derive_seed(cfg.seed, &[0xA0, g as u64, i as u64]);
                    let r = match cfg.attack {
                        WhiteboxAttack::Pgd => pgd_joint(&lr_pipe, &lr, *y, &PgdConfig { steps: cfg.pgd_steps, ..PgdConfig::new(value, seed) })?,
                        WhiteboxAttack::Cw => cw_joint(&lr_pipe, &lr, *y, &cw_config(cfg, value, seed))?,
                    };
                    let mut row = ResultRow::new(exp, "-", scaler.kind().name(), cfg.beta, &mode, param, value, i, *y);
                    row.scaled_l2 = Some(r.scaled_l2);
                    row.success = Some(r.success);
                    row.correct = Some(!r.success);
                    row.quantized_success = Some(setup.model.predict(&quantize_boundary(&r.image))? != *y);
                    row.queries = Some(r.queries);
                    Ok(vec![row])
                }),
            ));
        }
    }
    let defenses = cfg.defenses.clone();
    post.push(Box::new(move |rows: &mut Vec<ResultRow>| {
        let vanilla: Vec<ResultRow> = rows.iter().filter(|r| r.defense == "-").cloned().collect();
        rows.retain(|r| r.defense != "-");
        for d in &defenses {
            rows.extend(vanilla.iter().cloned().map(|mut r| {
                r.defense = d.name().into();
                r
            }));
        }
    }));

    for &d in &cfg.defenses {
        let pipe = build_pipeline(d, scaler, &setup.model)?;
        for (g, &value) in grid.iter().enumerate() {
            for &i in &chosen {
                let pipe = pipe.clone();
                let mode = joint_mode.clone();
                units.push((
                    format!("{exp}/{d}/{mode}/{value}/{i}"),
                    Box::new(move || {
                        let (img, y) = &setup.test[i];
                        let seed = derive_seed(cfg.seed, &[0xB0, g as u64, i as u64]);
                        let r = match cfg.attack {
                            WhiteboxAttack::Pgd => pgd_joint(&pipe, img, *y, &PgdConfig { steps: cfg.pgd_steps, ..PgdConfig::new(value * beta, seed) })?,
                            WhiteboxAttack::Cw => cw_joint(&pipe, img, *y, &cw_config(cfg, value, seed))?,
                        };
                        let mut row = ResultRow::new(exp, d.name(), scaler.kind().name(), cfg.beta, &mode, param, value, i, *y);
                        row.scaled_l2 = Some(r.scaled_l2);
                        row.success = Some(r.success);
                        row.correct = Some(!r.success);
                        let q = quantize_boundary(&r.image);
                        row.quantized_success = Some(!hr_correct(&pipe, &q, *y, &mut RngState::new(derive_seed(seed, &[1])))?);
                        row.queries = Some(r.queries);
                        Ok(vec![row])
                    }),
                ));
            }
        }
    }
    Ok(())
}

fn cw_config(cfg: &ExperimentConfig, kappa: f64, seed: u64) -> CwConfig {
    CwConfig { binary_search_steps: cfg.cw_binary_steps, max_iterations: cfg.cw_iterations, ..CwConfig::new(kappa, seed) }
}

/// Black-box rows. With `detect_only`, only the LR-subspace modes run, at the
/// largest budget.
fn blackbox_units<'a>(cfg: &'a ExperimentConfig, setup: &'a Setup, scaler: &'a ScalerSpec, detect_only: bool, units: &mut Vec<(String, Unit<'a>)>) -> Result<()> {
    let exp = experiment_name(cfg);
    let mut budgets = cfg.budget_grid.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = *budgets.last().expect("validated nonempty");
    if detect_only {
        budgets = vec![max_budget];
    }
    for &d in &cfg.defenses {
        if d == DefenseChoice::Randomized {
            return Err(Error::Invalid("the black-box attack does not target randomized filtering".into()));
        }
        calibration_units(cfg, setup, scaler, d, units)?;
        let pipe = build_pipeline(d, scaler, &setup.model)?;
        let prevention = defense_spec(d, scaler)?;
        let chosen = select_correct(&pipe, &setup.test, cfg.images, cfg.seed)?;
        let modes: Vec<SamplingMode> = cfg.modes_for(d).into_iter().filter(|m| !detect_only || *m != SamplingMode::HrNaive).collect();
        for &i in &chosen {
            let det = Detectors::new(scaler)?;
            units.push((
                format!("{exp}/{d}/benign/{i}"),
                Box::new(move || {
                    let (img, y) = &setup.test[i];
                    let mut row = ResultRow::new(exp, d.name(), scaler.kind().name(), cfg.beta, "benign", "-", 0.0, i, *y);
                    det.score(&mut row, img)?;
                    Ok(vec![row])
                }),
            ));
        }
        for (m, &mode) in modes.iter().enumerate() {
            for &i in &chosen {
                let pipe = pipe.clone();
                let prevention = prevention.clone();
                let budgets = budgets.clone();
                let det = Detectors::new(scaler)?;
                units.push((
                    format!("{exp}/{d}/{mode}/{i}"),
                    Box::new(move || {
                        let (source, y) = &setup.test[i];
                        let seed = derive_seed(cfg.seed, &[0xBB, m as u64, i as u64]);
                        let counted = Cell::new(0usize);
                        let mut rng = RngState::new(derive_seed(seed, &[2]));
                        let mut oracle = BlackboxOracle::new(*y, |x: &Image| {
                            counted.set(counted.get() + 1);
                            Ok(pipeline_forward(&pipe, x, &mut rng)?.1.label)
                        });
                        let starts: Vec<Image> = setup.calibration.iter().filter(|(_, l)| l != y).map(|(img, _)| img.clone()).collect();
                        let outcome = attack(&mut oracle, scaler, prevention.as_ref(), source, &starts, &HsjConfig::new(max_budget, mode, seed));
                        let reported = oracle.queries();
                        drop(oracle);
                        if reported != counted.get() {
                            return Err(Error::Accounting { reported, counted: counted.get() });
                        }
                        let outcome = match outcome {
                            Ok(o) => {
                                if o.result.queries != counted.get() {
                                    return Err(Error::Accounting { reported: o.result.queries, counted: counted.get() });
                                }
                                Some(o)
                            }
                            Err(scaleadv::Error::NoAdversarialInit(_)) => None,
                            Err(e) => return Err(e.into()),
                        };
                        let mut rows = Vec::new();
                        for &b in &budgets {
                            let mut row = ResultRow::new(exp, d.name(), scaler.kind().name(), cfg.beta, &mode.to_string(), "budget", b as f64, i, *y);
                            match &outcome {
                                None => {
                                    row.success = Some(false);
                                    row.queries = Some(counted.get().min(b));
                                }
                                Some(o) => {
                                    let best = o.best_at(b);
                                    row.success = Some(best.is_finite());
                                    row.scaled_l2 = best.is_finite().then_some(best);
                                    row.queries = Some(o.result.queries.min(b));
                                    if b == max_budget {
                                        row.queries = Some(o.result.queries);
                                        let q = quantize_boundary(&o.result.image);
                                        let label = pipeline_forward(&pipe, &q, &mut RngState::new(derive_seed(seed, &[3])))?.1.label;
                                        row.quantized_success = Some(label != *y);
                                        det.score(&mut row, &o.result.image)?;
                                    }
                                }
                            }
                            rows.push(row);
                        }
                        Ok(rows)
                    }),
                ));
            }
        }
    }
    Ok(())
}

fn remote_units<'a>(cfg: &'a ExperimentConfig, setup: &'a Setup, scaler: &'a ScalerSpec, units: &mut Vec<(String, Unit<'a>)>) -> Result<()> {
    let token = std::env::var(TOKEN_ENV).map_err(|_| Error::Invalid(format!("{TOKEN_ENV} is not set")))?;
    if cfg.remote.url.is_none() {
        return Err(Error::Invalid("remote_url is not configured".into()));
    }
    let exp = experiment_name(cfg);
    let pipe = build_pipeline(DefenseChoice::None, scaler, &setup.model)?;
    let lr_pipe = Pipeline::lr(setup.model.clone())?;
    let chosen = select_correct(&pipe, &setup.test, cfg.images, cfg.seed)?;
    for (g, &kappa) in cfg.kappa_grid.iter().enumerate() {
        for &i in &chosen {
            let (pipe, lr_pipe, token) = (pipe.clone(), lr_pipe.clone(), token.clone());
            units.push((
                format!("{exp}/{kappa}/{i}"),
                Box::new(move || {
                    let (img, y) = &setup.test[i];
                    let seed = derive_seed(cfg.seed, &[0xCC, g as u64, i as u64]);
                    let lr = scale(scaler, img)?;
                    let mut rows = Vec::new();
                    let cases = [
                        ("vanilla-cw", lr.clone(), cw_joint(&lr_pipe, &lr, *y, &cw_config(cfg, kappa, seed))?),
                        ("joint-cw", img.clone(), cw_joint(&pipe, img, *y, &cw_config(cfg, kappa, seed))?),
                    ];
                    for (mode, benign, r) in cases {
                        let before = remote_classify(&cfg.remote, &token, &quantize_boundary(&benign))?;
                        let after = remote_classify(&cfg.remote, &token, &quantize_boundary(&r.image))?;
                        let Some(o) = transfer_outcome(&cfg.remote, &before, &after) else { continue };
                        if !o.eligible {
                            continue;
                        }
                        let mut row = ResultRow::new(exp, "none", scaler.kind().name(), cfg.beta, mode, "kappa", kappa, i, *y);
                        row.scaled_l2 = Some(r.scaled_l2);
                        row.success = Some(o.success);
                        row.quantized_success = Some(o.success);
                        row.queries = Some(2);
                        rows.push(row);
                    }
                    Ok(rows)
                }),
            ));
        }
    }
    Ok(())
}

/// Shape of the LR inputs a config produces (for callers building pipelines).
pub fn lr_shape(cfg: &ExperimentConfig) -> Shape {
    Shape::new(cfg.lr_side, cfg.lr_side, 1)
}
