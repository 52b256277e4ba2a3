//! Ablation plans, their execution and the report tables built from a run
//! directory.
//!
//! Every arm/seed pair owns `<out>/<arm>/seed<k>/` holding the resolved
//! config, checkpoint, loss trace and a `metrics.txt` summary (or a `FAILED`
//! note). Reports are rebuilt from those files alone, so re-running the
//! report over the same directory reproduces it byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};

use crate::binio::write_atomic;
use crate::config::{apply_entry, parse_entries, render_config, Entry};
use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::models::ModelCheckpoint;
use crate::pipeline::{evaluate, generate_pseudo_labels, train_stage1, train_stage2, RunMetrics, TrainConfig};

/// Environment variable capping how many runs execute concurrently.
pub const THREADS_ENV: &str = "MEMREG_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub enum ArmStage {
    One,
    /// Stage-II fine-tuning from the Stage-I checkpoint of `parent`.
    Two { parent: String },
}

/// A named configuration delta over the plan's base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub stage: ArmStage,
    pub overrides: Vec<(String, String)>,
}

impl Arm {
    fn stage1(name: &str, overrides: &[(&str, &str)]) -> Arm {
        Arm {
            name: name.to_string(),
            stage: ArmStage::One,
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn stage2(name: &str, parent: &str, overrides: &[(&str, &str)]) -> Arm {
        Arm {
            stage: ArmStage::Two {
                parent: parent.to_string(),
            },
            ..Arm::stage1(name, overrides)
        }
    }

    /// Name of a lambda-sweep arm.
    pub fn sweep_name(lambda: f64) -> String {
        format!("lambda_{lambda}")
    }

    pub fn resolve(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        for (i, (k, v)) in self.overrides.iter().enumerate() {
            let e = Entry {
                line: i + 1,
                key: k.clone(),
                value: v.clone(),
            };
            if !apply_entry(&mut c, &e)? {
                return Err(Error::Config(format!("arm {}: unknown key `{k}`", self.name)));
            }
        }
        c.validate()
            .map_err(|e| Error::Config(format!("arm {}: {e}", self.name)))?;
        Ok(c)
    }
}

const NO_ADV: [(&str, &str); 2] = [("adv_primary_weight", "0"), ("adv_aux_weight", "0")];

/// Arms of the default plan: the Stage-I loss ablation, the Stage-II
/// ablation and one Stage-I arm per `lambda_mr_sweep` value.
pub fn default_arms(base: &TrainConfig) -> Vec<Arm> {
    let mut arms = vec![
        Arm::stage1("source_only", &[NO_ADV[0], NO_ADV[1], ("lambda_mr", "0")]),
        Arm::stage1("adv_only", &[("lambda_mr", "0")]),
        Arm::stage1("mr_only", &NO_ADV),
        Arm::stage1("full_stage1", &[]),
        Arm::stage2("pseudo_only", "full_stage1", &[("lambda_mr", "0")]),
        Arm::stage2("full_stage2", "full_stage1", &[]),
    ];
    for &l in &base.lambda_mr_sweep {
        let v = l.to_string();
        arms.push(Arm::stage1(&Arm::sweep_name(l), &[("lambda_mr", v.as_str())]));
    }
    arms
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub base: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    pub fn default_plan(base: TrainConfig, seeds: Vec<u64>) -> Self {
        ExperimentPlan {
            arms: default_arms(&base),
            base,
            seeds,
        }
    }

    /// Plan file: base config keys plus
    ///
    /// - `seeds = 0,1,2`
    /// - `arms = source_only,full_stage1` restricts the default arms (Stage-II
    ///   arms pull in their parents)
    /// - `arm.<name> = key=value; key=value` adds a custom arm; the pseudo-keys
    ///   `stage=2` and `parent=<arm>` make it a Stage-II arm.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = TrainConfig::default();
        let mut seeds = vec![0, 1, 2];
        let mut only: Option<(Entry, Vec<String>)> = None;
        let mut custom = Vec::new();
        for e in parse_entries(text)? {
            if apply_entry(&mut base, &e)? {
                continue;
            }
            match e.key.as_str() {
                "seeds" => {
                    seeds = e
                        .value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| e.error(format!("bad seed `{}`", s.trim()))))
                        .collect::<Result<_>>()?
                }
                "arms" => {
                    let names = e.value.split(',').map(|s| s.trim().to_string()).collect();
                    only = Some((e, names));
                }
                k if k.starts_with("arm.") => custom.push(parse_custom_arm(&e)?),
                _ => return Err(e.error("unknown key")),
            }
        }
        base.validate()?;
        let mut arms = default_arms(&base);
        if let Some((e, names)) = only {
            for n in &names {
                if !arms.iter().any(|a| &a.name == n) {
                    return Err(e.error(format!("unknown arm `{n}`")));
                }
            }
            let mut keep: Vec<String> = names.clone();
            for a in &arms {
                if let (true, ArmStage::Two { parent }) = (names.contains(&a.name), &a.stage) {
                    keep.push(parent.clone());
                }
            }
            arms.retain(|a| keep.contains(&a.name));
        }
        arms.extend(custom);
        let plan = ExperimentPlan { base, arms, seeds };
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan has no seeds".into()));
        }
        for (i, a) in self.arms.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(['/', '\\', ',']) {
                return Err(Error::Config(format!("invalid arm name `{}`", a.name)));
            }
            if self.arms[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("duplicate arm `{}`", a.name)));
            }
            a.resolve(&self.base)?;
            if let ArmStage::Two { parent } = &a.stage {
                match self.arms.iter().find(|b| &b.name == parent) {
                    Some(p) if p.stage == ArmStage::One => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "arm `{}` needs a Stage-I parent `{parent}`",
                            a.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

fn parse_custom_arm(e: &Entry) -> Result<Arm> {
    let name = e.key["arm.".len()..].to_string();
    let mut stage2 = false;
    let mut parent = None;
    let mut overrides = Vec::new();
    for part in e.value.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| e.error(format!("override `{part}` lacks `=`")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "stage" => match v {
                "1" => stage2 = false,
                "2" => stage2 = true,
                _ => return Err(e.error(format!("stage must be 1 or 2, got `{v}`"))),
            },
            "parent" => parent = Some(v.to_string()),
            _ => overrides.push((k.to_string(), v.to_string())),
        }
    }
    let stage = match (stage2, parent) {
        (false, None) => ArmStage::One,
        (true, Some(parent)) => ArmStage::Two { parent },
        (true, None) => return Err(e.error("Stage-II arm needs `parent=<arm>`")),
        (false, Some(_)) => return Err(e.error("`parent` only applies to `stage=2` arms")),
    };
    Ok(Arm { name, stage, overrides })
}

/// Summary of one arm/seed run as persisted in `metrics.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub fused_miou: f64,
    pub aux_miou: f64,
    pub primary_miou: f64,
    pub disagreement_rate: f64,
    pub per_class_iou: Vec<f64>,
    pub best_iter: usize,
    /// Validation disagreement at the last training iteration, before
    /// early-stop selection.
    pub last_disagreement_rate: f64,
    pub lambda_mr: f64,
    pub seconds: f64,
}

impl RunSummary {
    fn from_metrics(m: &RunMetrics, trace: &RunMetrics, lambda_mr: f64, seconds: f64) -> Self {
        RunSummary {
            fused_miou: m.fused_miou,
            aux_miou: m.aux_miou,
            primary_miou: m.primary_miou,
            disagreement_rate: m.disagreement_rate,
            per_class_iou: m.per_class_iou.clone(),
            best_iter: trace.best_iter,
            last_disagreement_rate: trace.last.map_or(f64::NAN, |l| l.disagreement_rate),
            lambda_mr,
            seconds,
        }
    }

    fn to_text(&self) -> String {
        let iou: Vec<String> = self.per_class_iou.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "fused_miou={:.6}\naux_miou={:.6}\nprimary_miou={:.6}\ndisagreement_rate={:.6}\n\
             per_class_iou={}\nbest_iter={}\nlast_disagreement_rate={:.6}\nlambda_mr={}\nseconds={:.1}\n",
            self.fused_miou,
            self.aux_miou,
            self.primary_miou,
            self.disagreement_rate,
            iou.join(","),
            self.best_iter,
            self.last_disagreement_rate,
            self.lambda_mr,
            self.seconds
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let get = |k: &str| -> Result<&Entry> {
            entries
                .iter()
                .find(|e| e.key == k)
                .ok_or_else(|| Error::Config(format!("metrics file lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            let e = get(k)?;
            e.value.parse().map_err(|_| e.error("not a number"))
        };
        let iou_entry = get("per_class_iou")?;
        let per_class_iou = iou_entry
            .value
            .split(',')
            .map(|v| v.parse().map_err(|_| iou_entry.error("not a number")))
            .collect::<Result<_>>()?;
        Ok(RunSummary {
            fused_miou: num("fused_miou")?,
            aux_miou: num("aux_miou")?,
            primary_miou: num("primary_miou")?,
            disagreement_rate: num("disagreement_rate")?,
            per_class_iou,
            best_iter: num("best_iter")? as usize,
            last_disagreement_rate: num("last_disagreement_rate")?,
            lambda_mr: num("lambda_mr")?,
            seconds: num("seconds")?,
        })
    }
}

pub const METRICS_FILE: &str = "metrics.txt";
pub const FAILED_FILE: &str = "FAILED";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const PLAN_FILE: &str = "plan.txt";

pub fn run_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join(arm).join(format!("seed{seed}"))
}

fn write_run(dir: &Path, config: &TrainConfig, ck: &ModelCheckpoint, m: &RunMetrics, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(CONFIG_FILE), render_config(config).as_bytes())?;
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    m.write_trace(&dir.join(TRACE_FILE))?;
    let _ = fs::remove_file(dir.join(FAILED_FILE));
    write_atomic(&dir.join(METRICS_FILE), summary.to_text().as_bytes())
}

fn write_failure(dir: &Path, err: &Error) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_file(dir.join(METRICS_FILE));
    write_atomic(&dir.join(FAILED_FILE), format!("{err}\n").as_bytes())
}

struct Job {
    arm: usize,
    seed: u64,
    config: TrainConfig,
}

type Outcome = std::result::Result<(ModelCheckpoint, RunMetrics, RunSummary), String>;

fn run_job(plan: &ExperimentPlan, job: &Job, parents: &HashMap<(String, u64), ModelCheckpoint>) -> Result<(ModelCheckpoint, RunMetrics, RunSummary)> {
    let arm = &plan.arms[job.arm];
    let c = &job.config;
    let start = Instant::now();
    let (ck, trace) = match &arm.stage {
        ArmStage::One => train_stage1(c, &c.source_spec(), &c.target_spec())?,
        ArmStage::Two { parent } => {
            let stage1 = parents
                .get(&(parent.clone(), job.seed))
                .ok_or_else(|| Error::State(format!("parent arm `{parent}` did not complete for seed {}", job.seed)))?;
            let pseudo = generate_pseudo_labels(stage1, &c.target_spec(), c.train_pool)?;
            train_stage2(c, stage1, &pseudo)?
        }
    };
    let eval = evaluate(&ck, &c.eval_spec(), c.eval_count)?;
    let summary = RunSummary::from_metrics(&eval, &trace, c.loss_weights.lambda_mr, start.elapsed().as_secs_f64());
    Ok((ck, trace, summary))
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

/// Runs `jobs` on up to `MEMREG_THREADS` threads. Jobs sharing a cache key
/// (same stage, parent and resolved config) run once.
fn run_jobs(
    plan: &ExperimentPlan,
    jobs: &[Job],
    parents: &HashMap<(String, u64), ModelCheckpoint>,
) -> Vec<Outcome> {
    let key = |j: &Job| format!("{:?}\n{}", plan.arms[j.arm].stage, render_config(&j.config));
    let mut unique: Vec<usize> = Vec::new();
    let mut alias: Vec<usize> = Vec::with_capacity(jobs.len());
    for (i, j) in jobs.iter().enumerate() {
        match unique.iter().position(|&u| key(&jobs[u]) == key(j)) {
            Some(p) => alias.push(p),
            None => {
                alias.push(unique.len());
                unique.push(i);
            }
        }
    }
    let results: Vec<Mutex<Option<Outcome>>> = unique.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..worker_count(unique.len()) {
            s.spawn(|| loop {
                let slot = {
                    let mut n = next.lock().expect("queue lock");
                    let slot = *n;
                    *n += 1;
                    slot
                };
                let Some(&ji) = unique.get(slot) else { break };
                let job = &jobs[ji];
                info!("running {} seed {}", plan.arms[job.arm].name, job.seed);
                let out = run_job(plan, job, parents).map_err(|e| e.to_string());
                if let Err(e) = &out {
                    warn!("{} seed {} failed: {e}", plan.arms[job.arm].name, job.seed);
                }
                *results[slot].lock().expect("result lock") = Some(out);
            });
        }
    });
    let results: Vec<Outcome> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("every job ran"))
        .collect();
    alias.into_iter().map(|a| results[a].clone()).collect()
}

/// Executes every arm for every seed under `out`, then emits the report.
/// Failed runs are recorded as such and do not stop the plan.
pub fn ablate(plan: &ExperimentPlan, out: &Path) -> Result<ReportTable> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(PLAN_FILE), plan_text(plan).as_bytes())?;
    let mut parents: HashMap<(String, u64), ModelCheckpoint> = HashMap::new();
    for stage_two in [false, true] {
        let mut jobs = Vec::new();
        for (ai, arm) in plan.arms.iter().enumerate() {
            if matches!(arm.stage, ArmStage::Two { .. }) != stage_two {
                continue;
            }
            for &seed in &plan.seeds {
                let mut config = arm.resolve(&plan.base)?;
                config.seed = seed;
                jobs.push(Job { arm: ai, seed, config });
            }
        }
        let outcomes = run_jobs(plan, &jobs, &parents);
        for (job, outcome) in jobs.iter().zip(outcomes) {
            let arm = &plan.arms[job.arm];
            let dir = run_dir(out, &arm.name, job.seed);
            match outcome {
                Ok((ck, m, summary)) => {
                    write_run(&dir, &job.config, &ck, &m, &summary)?;
                    parents.insert((arm.name.clone(), job.seed), ck);
                }
                Err(msg) => write_failure(&dir, &Error::State(msg))?,
            }
        }
    }
    emit_report(out)
}

/// Arm list and seeds of a plan, persisted so `report` can rebuild tables
/// without the original plan file.
fn plan_text(plan: &ExperimentPlan) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = plan.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds={}", seeds.join(","));
    for a in &plan.arms {
        let _ = writeln!(s, "arm={}", a.name);
    }
    s
}

fn read_plan_text(out: &Path) -> Result<(Vec<String>, Vec<u64>)> {
    let path = out.join(PLAN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut arms = Vec::new();
    let mut seeds = Vec::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some(("seeds", v)) => {
                seeds = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed `{s}` in {}", path.display()))))
                    .collect::<Result<_>>()?
            }
            Some(("arm", v)) => arms.push(v.to_string()),
            _ => return Err(Error::Config(format!("unexpected line `{line}` in {}", path.display()))),
        }
    }
    Ok((arms, seeds))
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowStatus {
    Ok(RunSummary),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    pub status: RowStatus,
}

/// Mean over the completed seeds of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmMean {
    pub arm: String,
    pub completed: usize,
    pub fused_miou: f64,
    pub aux_miou: f64,
    pub primary_miou: f64,
    pub disagreement_rate: f64,
    pub per_class_iou: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    pub means: Vec<ArmMean>,
}

impl ReportTable {
    pub fn summary(&self, arm: &str, seed: u64) -> Option<&RunSummary> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed).and_then(|r| match &r.status {
            RowStatus::Ok(s) => Some(s),
            RowStatus::Failed(_) => None,
        })
    }

    pub fn mean(&self, arm: &str) -> Option<&ArmMean> {
        self.means.iter().find(|m| m.arm == arm && m.completed > 0)
    }

    /// `(lambda, mean fused mIoU)` of the sweep arms, ordered by lambda.
    pub fn lambda_series(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .means
            .iter()
            .filter(|m| m.completed > 0)
            .filter_map(|m| {
                let l: f64 = m.arm.strip_prefix("lambda_")?.parse().ok()?;
                Some((l, m.fused_miou))
            })
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    pub const CSV_FILE: &'static str = "report.csv";
    pub const TEXT_FILE: &'static str = "report.txt";
    pub const LAMBDA_FILE: &'static str = "lambda_series.csv";

    fn csv_header() -> String {
        let mut h = String::from("arm,seed,status,fused_miou,aux_miou,primary_miou,disagreement_rate");
        for name in CLASS_NAMES {
            let _ = write!(h, ",iou_{name}");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::csv_header();
        s.push('\n');
        let nums = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        let blanks = ",".repeat(3 + CLASS_NAMES.len());
        for r in &self.rows {
            match &r.status {
                RowStatus::Ok(m) => {
                    let mut v = vec![m.fused_miou, m.aux_miou, m.primary_miou, m.disagreement_rate];
                    v.extend(&m.per_class_iou);
                    let _ = writeln!(s, "{},{},ok,{}", r.arm, r.seed, nums(&v));
                }
                RowStatus::Failed(_) => {
                    let _ = writeln!(s, "{},{},FAILED,{blanks}", r.arm, r.seed);
                }
            }
        }
        for m in &self.means {
            if m.completed == 0 {
                let _ = writeln!(s, "{},mean,FAILED,{blanks}", m.arm);
                continue;
            }
            let mut v = vec![m.fused_miou, m.aux_miou, m.primary_miou, m.disagreement_rate];
            v.extend(&m.per_class_iou);
            let _ = writeln!(s, "{},mean,ok,{}", m.arm, nums(&v));
        }
        s
    }

    pub fn lambda_csv(&self) -> String {
        let mut s = String::from("lambda_mr,mean_fused_miou\n");
        for (l, v) in self.lambda_series() {
            let _ = writeln!(s, "{l},{v:.6}");
        }
        s
    }
}

/// Renders the report CSV as an aligned table with mIoU values in percent.
pub fn render_text(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let Some(header) = rows.first() else {
        return String::new();
    };
    let cells: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, c)| match (i, j, c.parse::<f64>()) {
                    (0, _, _) | (_, 0..=2, _) => c.to_string(),
                    (_, 6, Ok(v)) => format!("{v:.4}"),
                    (_, _, Ok(v)) => format!("{:.2}", v * 100.0),
                    _ => c.to_string(),
                })
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| cells.iter().map(|r| r.get(j).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in cells.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, w))| if j < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

/// Collects the runs recorded under `out` into a table.
pub fn collect_report(out: &Path) -> Result<ReportTable> {
    let (arms, seeds) = read_plan_text(out)?;
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for arm in &arms {
        let mut done: Vec<RunSummary> = Vec::new();
        for &seed in &seeds {
            let dir = run_dir(out, arm, seed);
            let status = match fs::read_to_string(dir.join(METRICS_FILE)) {
                Ok(text) => match RunSummary::from_text(&text) {
                    Ok(s) => {
                        done.push(s.clone());
                        RowStatus::Ok(s)
                    }
                    Err(e) => RowStatus::Failed(format!("unreadable metrics: {e}")),
                },
                Err(_) => RowStatus::Failed(
                    fs::read_to_string(dir.join(FAILED_FILE)).unwrap_or_else(|_| "missing run".to_string()),
                ),
            };
            rows.push(ReportRow {
                arm: arm.clone(),
                seed,
                status,
            });
        }
        let n = done.len() as f64;
        let avg = |f: &dyn Fn(&RunSummary) -> f64| done.iter().map(f).sum::<f64>() / n;
        let classes = done.first().map_or(0, |d| d.per_class_iou.len());
        means.push(ArmMean {
            arm: arm.clone(),
            completed: done.len(),
            fused_miou: avg(&|s| s.fused_miou),
            aux_miou: avg(&|s| s.aux_miou),
            primary_miou: avg(&|s| s.primary_miou),
            disagreement_rate: avg(&|s| s.disagreement_rate),
            per_class_iou: (0..classes).map(|c| avg(&|s| s.per_class_iou[c])).collect(),
        });
    }
    Ok(ReportTable { rows, means })
}

/// Writes `report.csv`, the text rendering derived from it, and the lambda
/// series. Deterministic in the contents of `out`.
pub fn emit_report(out: &Path) -> Result<ReportTable> {
    let table = collect_report(out)?;
    let csv = table.to_csv();
    write_atomic(&out.join(ReportTable::CSV_FILE), csv.as_bytes())?;
    write_atomic(&out.join(ReportTable::TEXT_FILE), render_text(&csv).as_bytes())?;
    write_atomic(&out.join(ReportTable::LAMBDA_FILE), table.lambda_csv().as_bytes())?;
    Ok(table)
}

/// Mean fused mIoU per arm, keyed by arm name.
pub fn fused_means(table: &ReportTable) -> BTreeMap<String, f64> {
    table
        .means
        .iter()
        .filter(|m| m.completed > 0)
        .map(|m| (m.arm.clone(), m.fused_miou))
        .collect()
}

#[cfg(test)]
mod tests;
