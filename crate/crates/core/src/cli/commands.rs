// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand bodies. Each writes only under its own run directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, SaeSource, TaskSource};
use crate::agent::{AgentParams, SelectionMode};
use crate::diagnostics::{
    attach_labels, brute_force_flipping_features, categorize_outcomes, count_invalid_outputs, critic_trajectory_stats,
    evaluate_episodes, find_branch_points, impact_scores, measure_overhead, pair_with_baseline, run_baseline, sweep,
    write_overhead_csv, write_records_jsonl, write_sweep_csv, BaselineKind, EvalReport, SweepSpec, TraceSummary,
};
use crate::error::{Error, Result};
use crate::ppo::{baseline_traces, calibrate_for_run, eval_set, train, Chooser, Env, RewardSpec, TrainSetup};
use crate::rng::substream;
use crate::sae::{FeatureLabels, SaeParams};
use crate::steering::{afm_init, Coefficient, MaskSeed};
use crate::toylm::{
    generate, make_planted_task, read_dataset, residual_norm_profile, write_dataset, GenerateOptions, Identity, Sample,
    TaskInfo, ToyLmParams,
};

/// State shared by one command invocation.
pub struct Ctx {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub dir: PathBuf,
    pub hash: u64,
    /// Filled by commands that resolve a coefficient, for the manifest.
    pub coefficient: Option<f64>,
    pub calibration_mode: Option<String>,
}

pub struct Task {
    pub lm: ToyLmParams,
    pub sae: SaeParams,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    pub answers: Vec<usize>,
    pub horizon: usize,
    pub info: Option<TaskInfo>,
    pub labels: Option<FeatureLabels>,
}

pub fn load_task(cfg: &RunConfig) -> Result<Task> {
    let labels = cfg.task.labels.as_deref().map(FeatureLabels::load).transpose()?;
    let mut task = match cfg.task.source {
        TaskSource::Planted => {
            let p = make_planted_task(&cfg.planted_spec())?;
            Task {
                answers: p.info.answers.clone(),
                horizon: p.info.horizon,
                lm: p.lm,
                sae: p.sae,
                train: p.train,
                heldout: p.heldout,
                info: Some(p.info),
                labels,
            }
        }
        TaskSource::Files => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated");
            let sae_path = cfg.sae.path.clone().expect("validated");
            Task {
                lm: ToyLmParams::load(&path(&cfg.task.model))?,
                sae: SaeParams::load(&sae_path)?,
                train: read_dataset(&path(&cfg.task.train))?,
                heldout: read_dataset(&path(&cfg.task.heldout))?,
                answers: cfg.task.answers.clone(),
                horizon: cfg.task.horizon,
                info: None,
                labels,
            }
        }
    };
    if cfg.sae.source == SaeSource::File && cfg.task.source == TaskSource::Planted {
        task.sae = SaeParams::load(cfg.sae.path.as_deref().expect("validated"))?;
    }
    for s in task.train.iter().chain(&task.heldout) {
        if !task.answers.contains(&s.answer) {
            return Err(Error::Invalid(format!("sample answer {} is not in the answer set", s.answer)));
        }
    }
    Ok(task)
}

/// Resolved coefficient and AFM seed for a run.
pub struct Steering {
    pub coefficient: f64,
    pub mask_seed: Option<MaskSeed>,
}

pub fn prepare(ctx: &mut Ctx, task: &Task) -> Result<Steering> {
    let s = &ctx.cfg.steering;
    let (coefficient, traces) = match s.coefficient {
        Coefficient::Calibrated => {
            let (c, t) = calibrate_for_run(&task.lm, &task.sae, &task.train, &s.layers, s.calibration_mode, task.horizon)?;
            (c.coefficient, t)
        }
        Coefficient::Fixed(c) => (c, baseline_traces(&task.lm, &task.train, &s.layers, task.horizon)?),
    };
    let deepest = *s.layers.iter().max().expect("validated nonempty");
    let mask_seed = if s.afm {
        Some(afm_init(&traces, deepest, &task.sae, s.afm_seed_size)?)
    } else {
        None
    };
    ctx.coefficient = Some(coefficient);
    ctx.calibration_mode = Some(match s.coefficient {
        Coefficient::Fixed(_) => "fixed".to_string(),
        Coefficient::Calibrated => s.calibration_mode.to_string(),
    });
    Ok(Steering {
        coefficient,
        mask_seed,
    })
}

fn env<'a>(cfg: &RunConfig, task: &'a Task, steering: &'a Steering) -> Env<'a> {
    Env {
        lm: &task.lm,
        sae: &task.sae,
        layers: cfg.steering.layers.clone(),
        coefficient: steering.coefficient,
        horizon: task.horizon,
        steer_prompt: cfg.steering.steer_prompt,
        mask_seed: steering.mask_seed.as_ref(),
        allowed_tokens: None,
    }
}

fn reward(task: &Task) -> Result<RewardSpec> {
    RewardSpec::new(task.answers.clone())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ResultRow {
    sample_id: usize,
    final_token: usize,
    answer: usize,
    correct: bool,
    valid: bool,
}

/// `report.json` (summary), `results.csv` and `interventions.jsonl`.
fn write_report(dir: &Path, report: &EvalReport, labels: Option<&FeatureLabels>) -> Result<()> {
    write_json(&dir.join("report.json"), &report.summary())?;
    let rows: Vec<ResultRow> = report
        .results
        .iter()
        .map(|r| ResultRow {
            sample_id: r.sample_id,
            final_token: r.final_token,
            answer: r.answer,
            correct: r.correct,
            valid: r.valid,
        })
        .collect();
    write_csv(&dir.join("results.csv"), &rows)?;
    let mut records = report.records.clone();
    if let Some(l) = labels {
        attach_labels(&mut records, l);
    }
    write_records_jsonl(&dir.join("interventions.jsonl"), &records)
}

fn load_agent(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<AgentParams> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.root.join("train").join("checkpoints").join("best.crla"));
    let (agent, hash) = AgentParams::load(&path)?;
    if hash != ctx.hash {
        log::warn!(
            "{} was trained under config {hash:016x}, current config is {:016x}",
            path.display(),
            ctx.hash
        );
    }
    Ok(agent)
}

pub fn plant(ctx: &mut Ctx) -> Result<()> {
    if ctx.cfg.task.source != TaskSource::Planted {
        return Err(Error::Invalid("plant needs task.source = \"planted\"".into()));
    }
    let p = make_planted_task(&ctx.cfg.planted_spec())?;
    p.lm.save(&ctx.dir.join("model.crlm"))?;
    p.sae.save(&ctx.dir.join("sae.crls"))?;
    write_dataset(&ctx.dir.join("train.jsonl"), &p.train)?;
    write_dataset(&ctx.dir.join("heldout.jsonl"), &p.heldout)?;
    write_json(&ctx.dir.join("task.json"), &p.info)?;
    ctx.coefficient = Some(p.info.coefficient);
    ctx.calibration_mode = Some("activation".into());
    log::info!(
        "planted task: flip coverage {:.3} / {:.3}, baseline accuracy {:.3} / {:.3}, c = {:.4}",
        p.info.train_coverage,
        p.info.heldout_coverage,
        p.info.train_baseline_accuracy,
        p.info.heldout_baseline_accuracy,
        p.info.coefficient
    );
    Ok(())
}

pub fn calibrate(ctx: &mut Ctx) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let s = &ctx.cfg.steering;
    let (c, _) = calibrate_for_run(&task.lm, &task.sae, &task.train, &s.layers, s.calibration_mode, task.horizon)?;
    ctx.coefficient = Some(c.coefficient);
    ctx.calibration_mode = Some(c.mode.to_string());
    write_json(
        &ctx.dir.join("calibration.json"),
        &serde_json::json!({
            "coefficient": c.coefficient,
            "mode": c.mode,
            "steps": c.steps,
            "layer": s.layers.iter().max(),
            "selector": "most-active",
        }),
    )
}

#[derive(Serialize)]
struct TrainSummary {
    coefficient: f64,
    baseline_accuracy: f64,
    final_accuracy: f64,
    best_accuracy: f64,
    best_step: usize,
}

pub fn train_cmd(ctx: &mut Ctx) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let steering = prepare(ctx, &task)?;
    let cfg = &ctx.cfg;
    let shared = cfg.mode == super::config::Mode::CrlLayer;
    let agent = AgentParams::init(task.sae.d(), task.sae.d_dict(), shared, &mut substream(cfg.seed, "init"))?;
    let setup = TrainSetup {
        env: env(cfg, &task, &steering),
        train: &task.train,
        heldout: &task.heldout,
        reward: reward(&task)?,
        config: cfg.ppo_config(),
        recalibrate_every: cfg.steering.recalibrate_every,
        calibration_mode: cfg.steering.calibration_mode,
        out_dir: Some(&ctx.dir),
        config_hash: ctx.hash,
    };
    let out = train(setup, agent)?;
    write_csv(&ctx.dir.join("metrics.csv"), &out.history)?;
    write_json(&ctx.dir.join("baseline.json"), &out.baseline.summary())?;
    write_json(&ctx.dir.join("final_eval.json"), &out.final_eval.summary())?;
    write_json(&ctx.dir.join("best_eval.json"), &out.best_eval.summary())?;
    ctx.coefficient = Some(out.coefficient);
    write_json(
        &ctx.dir.join("summary.json"),
        &TrainSummary {
            coefficient: out.coefficient,
            baseline_accuracy: out.baseline.accuracy,
            final_accuracy: out.final_eval.accuracy,
            best_accuracy: out.best_eval.accuracy,
            best_step: out.best_step,
        },
    )
}

pub fn eval(ctx: &mut Ctx, checkpoint: Option<&Path>) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let agent = load_agent(ctx, checkpoint)?;
    let steering = prepare(ctx, &task)?;
    let e = env(&ctx.cfg, &task, &steering);
    let samples = eval_set(&task.heldout, ctx.cfg.ppo.eval_samples);
    let r = reward(&task)?;
    let chooser = Chooser::Policy {
        agent: &agent,
        mode: SelectionMode::Greedy,
    };
    let (mut report, _) = evaluate_episodes(&e, &samples, chooser, &r, ctx.cfg.seed, "crl")?;
    let (base, _) = evaluate_episodes(&e, &samples, Chooser::Unsteered, &r, ctx.cfg.seed, "none")?;
    pair_with_baseline(&mut report.records, &base)?;
    write_report(&ctx.dir, &report, task.labels.as_ref())
}

pub fn baseline(ctx: &mut Ctx, kind: BaselineKind, no_afm: bool) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let steering = prepare(ctx, &task)?;
    let mut e = env(&ctx.cfg, &task, &steering);
    if no_afm {
        e.mask_seed = None;
    }
    let samples = eval_set(&task.heldout, ctx.cfg.ppo.eval_samples);
    let report = run_baseline(kind, &e, &samples, &reward(&task)?, ctx.cfg.seed)?;
    write_report(&ctx.dir, &report, task.labels.as_ref())
}

#[derive(Serialize)]
struct OracleRow {
    split: &'static str,
    sample_id: usize,
    answer: usize,
    baseline_token: usize,
    n_flipping: usize,
    /// Space-separated feature indices.
    flipping: String,
}

pub fn oracle(ctx: &mut Ctx) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let steering = prepare(ctx, &task)?;
    let layer = *ctx.cfg.steering.layers.iter().max().expect("validated");
    let opts = GenerateOptions::tokens(task.horizon);
    let mut rows = Vec::new();
    let mut coverage = serde_json::Map::new();
    for (split, samples) in [("train", &task.train), ("heldout", &task.heldout)] {
        let mut covered = 0usize;
        for (i, s) in samples.iter().enumerate() {
            let flips = brute_force_flipping_features(&task.lm, &task.sae, s, layer, steering.coefficient, task.horizon)?;
            let base = generate(&task.lm, &s.prompt, &[], &mut Identity, &opts)?;
            covered += usize::from(!flips.is_empty());
            rows.push(OracleRow {
                split,
                sample_id: i,
                answer: s.answer,
                baseline_token: base.final_token(),
                n_flipping: flips.len(),
                flipping: flips.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            });
        }
        coverage.insert(format!("{split}_coverage"), (covered as f64 / samples.len() as f64).into());
    }
    coverage.insert("coefficient".into(), steering.coefficient.into());
    coverage.insert("layer".into(), layer.into());
    write_csv(&ctx.dir.join("oracle.csv"), &rows)?;
    write_json(&ctx.dir.join("oracle.json"), &coverage)
}

pub fn sweep_cmd(ctx: &mut Ctx, layers: &[usize], coefficients: &[f64]) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let layers = if layers.is_empty() { ctx.cfg.steering.layers.clone() } else { layers.to_vec() };
    let spec = SweepSpec {
        lm: &task.lm,
        sae: &task.sae,
        train: &task.train,
        heldout: &task.heldout,
        reward: reward(&task)?,
        horizon: task.horizon,
        afm: ctx.cfg.steering.afm,
        afm_seed_size: ctx.cfg.steering.afm_seed_size,
        steer_prompt: ctx.cfg.steering.steer_prompt,
        ppo: ctx.cfg.ppo_config(),
        seed: ctx.cfg.seed,
    };
    let cells = sweep(&spec, &layers, coefficients)?;
    write_sweep_csv(&ctx.dir.join("sweep.csv"), &cells)
}

#[derive(Serialize)]
struct FeatureRow {
    feature: usize,
    n: usize,
    share: f64,
    corrected: usize,
    misguided: usize,
    impact: f64,
    label: String,
}

#[derive(Serialize)]
struct CategoryRow {
    sample_id: usize,
    category: &'static str,
}

#[derive(Serialize)]
struct CriticRow {
    sample_id: usize,
    category: &'static str,
    final_value: f64,
    slope: Option<f64>,
    intercept: Option<f64>,
}

#[derive(Serialize)]
struct BranchRow {
    pair: usize,
    divergence_step: usize,
    features_a: String,
    features_b: String,
    token_a: Option<usize>,
    token_b: Option<usize>,
    correct_a: bool,
    correct_b: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Analysis {
    Branches,
    Critic,
    Features,
    Invalid,
}

pub fn analyze(ctx: &mut Ctx, what: Analysis, checkpoint: Option<&Path>) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let agent = load_agent(ctx, checkpoint)?;
    let steering = prepare(ctx, &task)?;
    let e = env(&ctx.cfg, &task, &steering);
    let samples = eval_set(&task.heldout, ctx.cfg.ppo.eval_samples);
    let r = reward(&task)?;
    let seed = ctx.cfg.seed;
    let greedy = Chooser::Policy {
        agent: &agent,
        mode: SelectionMode::Greedy,
    };
    let (steered, episodes) = evaluate_episodes(&e, &samples, greedy, &r, seed, "crl")?;
    let (base, _) = evaluate_episodes(&e, &samples, Chooser::Unsteered, &r, seed, "none")?;
    let categories = categorize_outcomes(&base.results, &steered.results)?;
    match what {
        Analysis::Features => {
            let mut records = steered.records.clone();
            if let Some(l) = &task.labels {
                attach_labels(&mut records, l);
            }
            let rows: Vec<FeatureRow> = impact_scores(&records, &categories)?
                .into_iter()
                .map(|s| FeatureRow {
                    feature: s.feature,
                    n: s.n,
                    share: s.share,
                    corrected: s.corrected,
                    misguided: s.misguided,
                    impact: s.impact,
                    label: s.label.unwrap_or_default(),
                })
                .collect();
            write_csv(&ctx.dir.join("features.csv"), &rows)?;
            let cats: Vec<CategoryRow> = categories
                .iter()
                .enumerate()
                .map(|(i, c)| CategoryRow {
                    sample_id: i,
                    category: c.as_str(),
                })
                .collect();
            write_csv(&ctx.dir.join("categories.csv"), &cats)?;
            write_records_jsonl(&ctx.dir.join("interventions.jsonl"), &records)
        }
        Analysis::Critic => {
            let layer = e.deepest_layer();
            let report = critic_trajectory_stats(&episodes, &categories, &agent, layer)?;
            let rows: Vec<CriticRow> = report
                .trajectories
                .iter()
                .map(|t| CriticRow {
                    sample_id: t.sample_id,
                    category: t.category.as_str(),
                    final_value: t.final_value,
                    slope: t.slope,
                    intercept: t.intercept,
                })
                .collect();
            write_csv(&ctx.dir.join("critic.csv"), &rows)?;
            write_json(
                &ctx.dir.join("critic_summary.json"),
                &serde_json::json!({ "summaries": report.summaries, "gaps": report.gaps }),
            )
        }
        Analysis::Branches => {
            let sampled = Chooser::Policy {
                agent: &agent,
                mode: SelectionMode::Sampled,
            };
            let (_, other) = evaluate_episodes(&e, &samples, sampled, &r, seed, "sampled")?;
            let pairs: Vec<(TraceSummary, TraceSummary)> = episodes
                .iter()
                .zip(&other)
                .zip(&samples)
                .map(|((a, b), s)| (TraceSummary::from_episode(a, s.answer), TraceSummary::from_episode(b, s.answer)))
                .collect();
            let branches = find_branch_points(&pairs)?;
            let join = |f: &Option<Vec<usize>>| {
                f.as_ref()
                    .map(|v| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default()
            };
            let rows: Vec<BranchRow> = branches
                .iter()
                .map(|b| BranchRow {
                    pair: b.pair,
                    divergence_step: b.divergence_step,
                    features_a: join(&b.features[0]),
                    features_b: join(&b.features[1]),
                    token_a: b.tokens[0],
                    token_b: b.tokens[1],
                    correct_a: b.correct[0],
                    correct_b: b.correct[1],
                })
                .collect();
            write_csv(&ctx.dir.join("branches.csv"), &rows)
        }
        Analysis::Invalid => write_json(
            &ctx.dir.join("invalid.json"),
            &serde_json::json!({
                "steered": count_invalid_outputs(&steered.results, &task.answers),
                "baseline": count_invalid_outputs(&base.results, &task.answers),
            }),
        ),
    }
}

#[derive(Serialize)]
struct NormRow {
    layer: usize,
    mean_norm: f64,
}

pub fn norms(ctx: &mut Ctx) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let rows: Vec<NormRow> = residual_norm_profile(&task.lm, &task.train)?
        .into_iter()
        .enumerate()
        .map(|(i, n)| NormRow {
            layer: i + 1,
            mean_norm: n,
        })
        .collect();
    write_csv(&ctx.dir.join("norms.csv"), &rows)
}

pub fn overhead(ctx: &mut Ctx, checkpoint: Option<&Path>) -> Result<()> {
    let task = load_task(&ctx.cfg)?;
    let agent = match checkpoint {
        Some(p) => Some(load_agent(ctx, Some(p))?),
        None => None,
    };
    let steering = prepare(ctx, &task)?;
    let e = env(&ctx.cfg, &task, &steering);
    let chooser = match &agent {
        Some(a) => Chooser::Policy {
            agent: a,
            mode: SelectionMode::Greedy,
        },
        None => Chooser::MostActive,
    };
    let samples = eval_set(&task.heldout, ctx.cfg.ppo.eval_samples);
    let o = measure_overhead(&e, &samples, chooser, &reward(&task)?, ctx.cfg.seed)?;
    write_overhead_csv(&ctx.dir.join("overhead.csv"), &o)
}
