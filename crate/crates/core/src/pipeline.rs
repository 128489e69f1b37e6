//! End-to-end stages behind the `duge` command. Every stage reads its inputs
//! from and writes its artifacts to one output root:
//!
//! ```text
//! dataset/            train.duge, val.duge, manifest.json
//! source/             model.duge, manifest.json
//! classifier/         classifier.duge, manifest.json
//! unlearn/<name>/     step<δ>.duge, report.json
//! eval/<name>/        accuracy.csv, eval.json
//! report/             report.md, erosion.csv, accuracy_<name>.csv, grids/*.pgm
//! ```
//!
//! Each stage directory also holds the resolved `config.toml` and a `run.json`
//! with wall time and stage seeds. Everything except `run.json` is a pure
//! function of the config.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::condition::Condition;
use crate::config::ExperimentConfig;
use crate::diffusion::{train_denoiser, DenoiserModel};
use crate::duge::{run_decremental, DecrementalPlan, DecrementalReport, Method};
use crate::error::{CoreError, Result};
use crate::evalkit::{sample_conditions, train_classifier, AccuracyMatrix, Classifier, ErosionRecord, Evaluator};
use crate::glyph::{to_model_space, GlyphDataset, CLASS_NAMES, SIDE};
use duge_tensor::{ParamStore, Tensor};

/// Environment variable that overrides the default output root.
pub const OUT_ENV: &str = "DUGE_OUT";
pub const DEFAULT_OUT: &str = "out";
/// Version stamped into every manifest and report.
pub const FORMAT_VERSION: u32 = 1;

/// Output root: explicit flag, then config, then `$DUGE_OUT`, then `out`.
pub fn resolve_output(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Evaluation results of one unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub name: String,
    pub method: Method,
    pub plan: DecrementalPlan,
    pub n: usize,
    pub erosion_conditions: Vec<Condition>,
    pub accuracy: AccuracyMatrix,
    pub erosion: Vec<ErosionRecord>,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    pub quiet: bool,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, command: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CoreError::MissingArtifact {
            path: path.to_path_buf(),
            command,
        },
        _ => CoreError::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_store(path: &Path, command: &'static str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(CoreError::MissingArtifact {
            path: path.to_path_buf(),
            command,
        });
    }
    Ok(ParamStore::load(path)?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

/// Binary PGM of `images` (`[N, 16, 16]`, pixels in `[0,1]`) tiled `cols` per
/// row with a one-pixel grey separator.
pub fn pgm_grid(images: &Tensor, cols: usize) -> Vec<u8> {
    let n = images.shape()[0];
    let cols = cols.max(1);
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * (SIDE + 1) + 1, rows * (SIDE + 1) + 1);
    let mut px = vec![128u8; w * h];
    for (i, img) in images.data().chunks(SIDE * SIDE).enumerate() {
        let (ox, oy) = ((i % cols) * (SIDE + 1) + 1, (i / cols) * (SIDE + 1) + 1);
        for y in 0..SIDE {
            for x in 0..SIDE {
                px[(oy + y) * w + ox + x] = (img[y * SIDE + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            root: root.into(),
            quiet: false,
        })
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[duge] {msg}");
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("unlearn").join(name)
    }

    /// Creates `dir` and writes the resolved config (without the output root).
    fn prepare(&self, dir: &Path, config: &ExperimentConfig) -> Result<()> {
        create_dir(dir)?;
        let mut c = config.clone();
        c.output = None;
        write_bytes(&dir.join("config.toml"), c.to_toml()?.as_bytes())
    }

    fn run_log(&self, dir: &Path, command: &str, stage: &str, started: Instant, extra: Value) -> Result<()> {
        let mut log = json!({
            "command": command,
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "stage_seed": self.config.stage_seed(stage),
            "wall_seconds": started.elapsed().as_secs_f64(),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut log, extra) {
            m.extend(e);
        }
        write_json(&dir.join("run.json"), &log)
    }

    fn dataset_identity(&self) -> Value {
        json!({ "seed": self.config.seed, "dataset": self.config.dataset })
    }

    /// Synthesizes the train and validation glyph sets.
    pub fn dataset(&self, force: bool) -> Result<()> {
        let started = Instant::now();
        let dir = self.stage_dir("dataset");
        let occupied = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied && !force {
            // Regenerating an identical dataset is allowed; anything else is refused.
            let same = read_json::<Value>(&dir.join("manifest.json"), "dataset")
                .map(|m| m.get("identity") == Some(&self.dataset_identity()))
                .unwrap_or(false);
            if !same {
                return Err(CoreError::NonEmptyOutput(dir));
            }
        }
        self.prepare(&dir, &self.config)?;
        let cfg = &self.config.dataset;
        let rng = self.config.stage_rng("dataset");
        let train = GlyphDataset::generate(cfg, cfg.per_class, &rng.split_named("train"))?;
        let val = GlyphDataset::generate(cfg, cfg.val_per_class, &rng.split_named("val"))?;
        let (ts, vs) = (train.to_store()?, val.to_store()?);
        ts.save(dir.join("train.duge"))?;
        vs.save(dir.join("val.duge"))?;
        let manifest = json!({
            "format_version": FORMAT_VERSION,
            "identity": self.dataset_identity(),
            "stage_seed": self.config.stage_seed("dataset"),
            "num_classes": cfg.num_classes,
            "class_names": &CLASS_NAMES[..cfg.num_classes],
            "train_images": train.len(),
            "val_images": val.len(),
            "train_digest": ts.digest(),
            "val_digest": vs.digest(),
        });
        write_json(&dir.join("manifest.json"), &manifest)?;
        self.run_log(&dir, "dataset", "dataset", started, json!({}))?;
        self.progress(&format!(
            "dataset: {} train / {} val images in {}",
            train.len(),
            val.len(),
            dir.display()
        ));
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<(GlyphDataset, GlyphDataset)> {
        let dir = self.stage_dir("dataset");
        let k = self.config.dataset.num_classes;
        let train = GlyphDataset::from_store(&load_store(&dir.join("train.duge"), "dataset")?, k)?;
        let val = GlyphDataset::from_store(&load_store(&dir.join("val.duge"), "dataset")?, k)?;
        Ok((train, val))
    }

    /// Trains the source model θ^0.
    pub fn train(&self) -> Result<()> {
        let started = Instant::now();
        let (train, _) = self.load_dataset()?;
        let dir = self.stage_dir("source");
        self.prepare(&dir, &self.config)?;
        let rng = self.config.stage_rng("source");
        let mut model = DenoiserModel::new(self.config.model.clone(), &mut rng.split_named("init"))?;
        let x0 = to_model_space(&train.images);
        let conds: Vec<Condition> = train.labels.iter().map(|&l| Condition::from_label(l)).collect();
        self.progress(&format!(
            "train: {} steps on {} images ({} parameters)",
            self.config.train.steps,
            train.len(),
            model.params.numel()
        ));
        let losses = train_denoiser(
            &mut model,
            &x0,
            &conds,
            &self.config.schedule.build()?,
            &self.config.train,
            &mut rng.split_named("batches"),
        )?;
        model.params.round_to_f32();
        model.params.save(dir.join("model.duge"))?;
        write_json(
            &dir.join("manifest.json"),
            &json!({
                "format_version": FORMAT_VERSION,
                "digest": model.params.digest(),
                "parameters": model.params.numel(),
                "model": self.config.model,
            }),
        )?;
        // Loss curve as means over windows of 100 steps.
        let curve: Vec<f64> = losses
            .chunks(100)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        self.run_log(&dir, "train", "source", started, json!({ "loss_curve_per_100": curve }))?;
        self.progress(&format!(
            "train: final window loss {:.4}",
            curve.last().copied().unwrap_or(f64::NAN)
        ));
        Ok(())
    }

    pub fn load_source(&self) -> Result<DenoiserModel> {
        let store = load_store(&self.stage_dir("source").join("model.duge"), "train")?;
        DenoiserModel::from_params(self.config.model.clone(), store)
    }

    /// Trains and validates the evaluation classifier.
    pub fn classifier(&self) -> Result<()> {
        let started = Instant::now();
        let (train, val) = self.load_dataset()?;
        let dir = self.stage_dir("classifier");
        self.prepare(&dir, &self.config)?;
        let mut rng = self.config.stage_rng("classifier");
        let (mut clf, _) = train_classifier(&train, &val, &self.config.classifier, &mut rng)?;
        clf.params.round_to_f32();
        let acc = clf.accuracy(&val)?;
        if acc < self.config.classifier.floor {
            return Err(CoreError::ClassifierFloor {
                accuracy: acc,
                floor: self.config.classifier.floor,
            });
        }
        clf.params.save(dir.join("classifier.duge"))?;
        write_json(
            &dir.join("manifest.json"),
            &json!({
                "format_version": FORMAT_VERSION,
                "digest": clf.params.digest(),
                "val_accuracy": acc,
            }),
        )?;
        self.run_log(&dir, "classifier", "classifier", started, json!({ "val_accuracy": acc }))?;
        self.progress(&format!("classifier: {acc:.2}% validation accuracy"));
        Ok(())
    }

    pub fn load_classifier(&self) -> Result<Classifier> {
        let store = load_store(&self.stage_dir("classifier").join("classifier.duge"), "classifier")?;
        Classifier::from_params(self.config.dataset.num_classes, store)
    }

    /// Runs one decremental plan with `method` and stores θ^1..θ^Δ under
    /// `unlearn/<name>`. Returns the report; an aborted run is an error after
    /// its partial report is written.
    pub fn unlearn(
        &self,
        method: Method,
        plan: Option<DecrementalPlan>,
        name: Option<&str>,
    ) -> Result<DecrementalReport> {
        let started = Instant::now();
        let mut config = self.config.clone();
        if let Some(p) = plan {
            config.plan = p;
        }
        config.validate()?;
        let name = name.map(str::to_owned).unwrap_or_else(|| method.to_string());
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CoreError::Config(format!("invalid run name `{name}`")));
        }
        let source = self.load_source()?;
        let dir = self.run_dir(&name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        }
        self.prepare(&dir, &config)?;
        self.progress(&format!(
            "unlearn[{name}]: {method}, concepts {:?}",
            config.plan.concepts.iter().map(|c| c.id()).collect::<Vec<_>>()
        ));
        let run = run_decremental(
            &source,
            &config.plan,
            method,
            &config.schedule.build()?,
            &config.sampler,
            None,
            &self.config.stage_rng("unlearn"),
            |step, model| {
                model.params.save(dir.join(format!("step{step}.duge")))?;
                self.progress(&format!("unlearn[{name}]: step {step} done"));
                Ok(())
            },
        )?;
        write_json(&dir.join("report.json"), &run.report)?;
        self.run_log(
            &dir,
            "unlearn",
            "unlearn",
            started,
            json!({ "name": name, "method": method, "aborted": run.report.aborted }),
        )?;
        if let Some(reason) = &run.report.aborted {
            return Err(CoreError::Aborted(reason.clone()));
        }
        Ok(run.report)
    }

    /// Names of the runs stored under `unlearn/`, sorted.
    pub fn runs(&self) -> Result<Vec<String>> {
        let dir = self.root.join("unlearn");
        let Ok(entries) = std::fs::read_dir(&dir) else {
            return Ok(Vec::new());
        };
        let mut names = Vec::new();
        for e in entries {
            let e = e.map_err(|e| CoreError::io(&dir, e))?;
            if e.path().join("report.json").exists() {
                names.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }

    fn load_run(&self, name: &str) -> Result<(DecrementalReport, Vec<DenoiserModel>)> {
        let dir = self.run_dir(name);
        let report: DecrementalReport = read_json(&dir.join("report.json"), "unlearn")?;
        let mut models = Vec::with_capacity(report.checkpoints.len());
        for (i, digest) in report.checkpoints.iter().enumerate() {
            let store = load_store(&dir.join(format!("step{}.duge", i + 1)), "unlearn")?;
            if &store.digest() != digest {
                return Err(CoreError::Precondition(format!(
                    "checkpoint step{} of run `{name}` does not match its report; rerun `duge unlearn`",
                    i + 1
                )));
            }
            models.push(DenoiserModel::from_params(self.config.model.clone(), store)?);
        }
        Ok((report, models))
    }

    /// Accuracy matrices and erosion records for the named runs (all runs when
    /// empty). Runs sharing a decremental set share one evaluator, so the
    /// source baseline is generated once and every run sees the same seeds.
    pub fn eval(&self, names: &[String]) -> Result<Vec<EvalReport>> {
        let started = Instant::now();
        let names = if names.is_empty() { self.runs()? } else { names.to_vec() };
        if names.is_empty() {
            return Err(CoreError::MissingArtifact {
                path: self.root.join("unlearn"),
                command: "unlearn",
            });
        }
        let source = self.load_source()?;
        let classifier = self.load_classifier()?;
        let schedule = self.config.schedule.build()?;
        let k = self.config.dataset.num_classes;
        let classes: Vec<Condition> = (1..=k as u32).map(Condition::class).collect();
        let mut evaluators: Vec<(Vec<Condition>, Evaluator)> = Vec::new();
        let mut out = Vec::with_capacity(names.len());
        for name in &names {
            let (report, models) = self.load_run(name)?;
            let mut key = report.plan.concepts.clone();
            key.sort();
            let pos = match evaluators.iter().position(|(c, _)| *c == key) {
                Some(p) => p,
                None => {
                    self.progress("eval: generating source baseline");
                    let ev = Evaluator::new(
                        &source,
                        classifier.clone(),
                        classes.clone(),
                        &report.plan.retained(k),
                        &report.plan.concepts,
                        self.config.eval.n,
                        schedule.clone(),
                        self.config.sampler.clone(),
                        &self.config.stage_rng("eval"),
                    )?;
                    evaluators.push((key, ev));
                    evaluators.len() - 1
                }
            };
            let ev = &evaluators[pos].1;
            let mut accuracy = ev.matrix();
            let mut erosion = Vec::with_capacity(models.len());
            for (i, m) in models.iter().enumerate() {
                accuracy.push(ev.accuracy(m)?)?;
                erosion.push(ev.erosion(m, i + 1)?);
                self.progress(&format!("eval[{name}]: step {} scored", i + 1));
            }
            let er = EvalReport {
                format_version: FORMAT_VERSION,
                name: name.clone(),
                method: report.method,
                plan: report.plan.clone(),
                n: self.config.eval.n,
                erosion_conditions: ev.erosion_conditions().to_vec(),
                accuracy,
                erosion,
            };
            let dir = self.stage_dir("eval").join(name);
            self.prepare(&dir, &self.config)?;
            write_bytes(&dir.join("accuracy.csv"), er.accuracy.to_csv().as_bytes())?;
            write_json(&dir.join("eval.json"), &er)?;
            out.push(er);
        }
        let dir = self.stage_dir("eval");
        self.run_log(&dir, "eval", "eval", started, json!({ "runs": names }))?;
        Ok(out)
    }

    /// Collates every evaluated run into tables and sample grids.
    pub fn report(&self) -> Result<()> {
        let started = Instant::now();
        let names = self.runs()?;
        let mut evals = Vec::new();
        for name in &names {
            let path = self.stage_dir("eval").join(name).join("eval.json");
            if path.exists() {
                evals.push(read_json::<EvalReport>(&path, "eval")?);
            }
        }
        if evals.is_empty() {
            return Err(CoreError::MissingArtifact {
                path: self.stage_dir("eval"),
                command: "eval",
            });
        }
        let dir = self.stage_dir("report");
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        }
        self.prepare(&dir, &self.config)?;
        for e in &evals {
            write_bytes(
                &dir.join(format!("accuracy_{}.csv", e.name)),
                e.accuracy.to_csv().as_bytes(),
            )?;
        }
        write_bytes(&dir.join("erosion.csv"), erosion_csv(&evals).as_bytes())?;
        write_bytes(&dir.join("report.md"), self.markdown(&evals).as_bytes())?;
        self.grids(&dir.join("grids"), &names)?;
        self.run_log(&dir, "report", "report", started, json!({ "runs": names }))?;
        self.progress(&format!("report: written to {}", dir.display()));
        Ok(())
    }

    fn grids(&self, dir: &Path, names: &[String]) -> Result<()> {
        create_dir(dir)?;
        let per = self.config.eval.grid_per_class;
        if per == 0 {
            return Ok(());
        }
        let k = self.config.dataset.num_classes as u32;
        let conds: Vec<Condition> = (1..=k).map(Condition::class).collect();
        let schedule = self.config.schedule.build()?;
        let root = self.config.stage_rng("report");
        let grid = |model: &DenoiserModel, path: PathBuf| -> Result<()> {
            let imgs = sample_conditions(model, &conds, per, &schedule, &self.config.sampler, &root)?;
            write_bytes(&path, &pgm_grid(&imgs, per))
        };
        grid(&self.load_source()?, dir.join("source.pgm"))?;
        for name in names {
            let (_, models) = self.load_run(name)?;
            for (i, m) in models.iter().enumerate() {
                grid(m, dir.join(format!("{name}_step{}.pgm", i + 1)))?;
            }
        }
        Ok(())
    }

    fn markdown(&self, evals: &[EvalReport]) -> String {
        let k = self.config.dataset.num_classes;
        let mut s = String::from("# Decremental unlearning report\n\n");
        s += &format!("Config hash: `{}`\n\n", self.config.hash());
        s += "Classes: ";
        s += &(1..=k)
            .map(|c| format!("{c} = {}", CLASS_NAMES[c - 1]))
            .collect::<Vec<_>>()
            .join(", ");
        s += "\n\n## Class-wise accuracy (%)\n\n";
        s += "Row 0 is the source model; row δ follows the δ-th removal.\n";
        for e in evals {
            s += &format!(
                "\n### {} ({}), concepts {}\n\n| step |",
                e.name,
                e.method,
                e.plan.concepts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" → ")
            );
            for c in &e.accuracy.classes {
                s += &format!(" {c} |");
            }
            s += "\n|---|";
            s += &"---|".repeat(e.accuracy.classes.len());
            s += "\n";
            for (i, row) in e.accuracy.rows.iter().enumerate() {
                s += &format!("| {i} |");
                for v in row {
                    s += &format!(" {v:.2} |");
                }
                s += "\n";
            }
        }
        s += "\n## Generalization erosion against the source model\n\n";
        s += "FID-analog and KID-analog on the evaluation classifier's 32-dim \
              features, over conditions outside each decremental set, with \
              matched sampling seeds. Only orderings are meaningful; magnitudes \
              are not comparable to Inception-based scores.\n\n| step |";
        for e in evals {
            s += &format!(" {} FID | {} KID |", e.name, e.name);
        }
        s += "\n|---|";
        s += &"---|---|".repeat(evals.len());
        s += "\n";
        for step in 1..=max_steps(evals) {
            s += &format!("| {step} |");
            for e in evals {
                match e.erosion.iter().find(|r| r.step == step) {
                    Some(r) => s += &format!(" {:.4} | {:.6} |", r.fid, r.kid),
                    None => s += " - | - |",
                }
            }
            s += "\n";
        }
        s
    }

    /// Every stage in order: dataset, source, classifier, DUGE and naive
    /// runs of the configured plan, evaluation and report.
    pub fn run_all(&self, force: bool) -> Result<()> {
        let started = Instant::now();
        let mut stages = Vec::new();
        let mut timed = |label: &str, f: &dyn Fn() -> Result<()>| -> Result<()> {
            let t = Instant::now();
            f()?;
            stages.push(json!({ "stage": label, "wall_seconds": t.elapsed().as_secs_f64() }));
            Ok(())
        };
        timed("dataset", &|| self.dataset(force))?;
        timed("train", &|| self.train())?;
        timed("classifier", &|| self.classifier())?;
        timed("unlearn-duge", &|| self.unlearn(Method::Duge, None, None).map(|_| ()))?;
        timed("unlearn-naive", &|| self.unlearn(Method::Naive, None, None).map(|_| ()))?;
        let names = vec![Method::Duge.to_string(), Method::Naive.to_string()];
        timed("eval", &|| self.eval(&names).map(|_| ()))?;
        timed("report", &|| self.report())?;
        write_json(
            &self.root.join("run.json"),
            &json!({
                "command": "run",
                "config_hash": self.config.hash(),
                "seed": self.config.seed,
                "wall_seconds": started.elapsed().as_secs_f64(),
                "stages": stages,
            }),
        )
    }
}

fn max_steps(evals: &[EvalReport]) -> usize {
    evals
        .iter()
        .flat_map(|e| e.erosion.iter().map(|r| r.step))
        .max()
        .unwrap_or(0)
}

/// Side-by-side FID/KID per step: `step,<run>_fid,<run>_kid,...`.
pub fn erosion_csv(evals: &[EvalReport]) -> String {
    let mut s = String::from("step");
    for e in evals {
        s += &format!(",{0}_fid,{0}_kid", e.name);
    }
    s.push('\n');
    for step in 1..=max_steps(evals) {
        s += &step.to_string();
        for e in evals {
            match e.erosion.iter().find(|r| r.step == step) {
                Some(r) => s += &format!(",{:.6},{:.8}", r.fid, r.kid),
                None => s += ",,",
            }
        }
        s.push('\n');
    }
    s
}
