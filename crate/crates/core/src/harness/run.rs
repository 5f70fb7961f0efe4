use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::budget::{hit_ratio, BudgetState};
use crate::compat::{topk_overlap, TokenId};
use crate::error::{Error, Result};
use crate::io::{append_metrics, append_metrics_jsonl, read_metrics, write_traces, MetricsRow, NUM_BANDS};
use crate::reliability::{process_rollout, ReliabilityProfile};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sim::{build_drift_pair, kl_divergence, sample_rollout, train_step, ScoredRollout, DriftScenario, TabularPolicy};
use crate::trace::{RewardTensor, RolloutTrace};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_JSONL_FILE: &str = "metrics.jsonl";
pub const PROFILE_FILE: &str = "profile.jsonl";
pub const TRACES_FILE: &str = "traces_final.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub scenario: DriftScenario,
    pub seed: u64,
    pub steps: usize,
    pub tokens_generated: u64,
    pub tokens_scored: u64,
    /// Mean reverse KL on the held-out prefixes before training.
    pub initial_kl: f64,
    pub final_kl: f64,
    /// Final reverse KL per fixed position band (same bands as the metrics file).
    pub final_kl_by_band: [f64; NUM_BANDS],
    pub metrics_path: PathBuf,
    pub profile_path: PathBuf,
    pub traces_path: PathBuf,
}

impl RunSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// One line of `profile.jsonl`: mean applied loss weight per response position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDump {
    pub step: u64,
    pub mean_weight: Vec<f64>,
}

pub fn load_config(run_dir: &Path) -> Result<ExperimentConfig> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::validation("json", e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn band_width(max_length: usize) -> usize {
    max_length.div_ceil(NUM_BANDS).max(1)
}

/// Per-step keep targets for the random-pruning controls.
fn pruning_targets(cfg: &ExperimentConfig) -> Result<Option<Vec<usize>>> {
    let Some(reference) = cfg.reference_run.as_deref() else {
        return Ok(None);
    };
    if !matches!(cfg.mode, Mode::RandomPruneTokens | Mode::RandomPruneMass) {
        return Ok(None);
    }
    let ref_cfg = load_config(reference)?;
    let rows = read_metrics(&reference.join(METRICS_FILE))?;
    if rows.len() < cfg.steps {
        return Err(Error::config(format!(
            "reference run {} has {} steps, need {}",
            reference.display(),
            rows.len(),
            cfg.steps
        )));
    }
    let full_weight = 1.0 + if ref_cfg.reliability.enabled { ref_cfg.reliability.w_base } else { 0.0 };
    Ok(Some(
        rows.iter()
            .take(cfg.steps)
            .map(|r| match cfg.mode {
                Mode::RandomPruneMass => (r.weight_mass / full_weight).round() as usize,
                _ => r.tokens_scored as usize,
            })
            .collect(),
    ))
}

fn sample_prompt(cfg: &ExperimentConfig, stream: Stream, indices: &[u64]) -> Vec<TokenId> {
    let mut rng = stream_rng(cfg.seed, stream, indices);
    (0..cfg.scenario.prompt_length)
        .map(|_| rng.gen_range(0..cfg.scenario.vocab_size) as TokenId)
        .collect()
}

fn sample_batch(
    cfg: &ExperimentConfig,
    (student, teacher): (&TabularPolicy, &TabularPolicy),
    stream: Stream,
    step: u64,
    length: usize,
    prompts: usize,
    per_prompt: usize,
) -> Result<Vec<RolloutTrace>> {
    let prompt_list: Vec<Vec<TokenId>> = (0..prompts as u64)
        .map(|p| sample_prompt(cfg, stream, &[step, p]))
        .collect();
    (0..prompts * per_prompt)
        .into_par_iter()
        .map(|i| {
            let (p, r) = (i / per_prompt, i % per_prompt);
            let seed = derive_seed(cfg.seed, stream, &[step, p as u64, r as u64, 1]);
            sample_rollout(student, teacher, &prompt_list[p], length, cfg.scenario.k, seed)
        })
        .collect()
}

/// Mean reverse KL over every position of the held-out sequences, overall and per band.
fn held_out_kl(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    eval_set: &[RolloutTrace],
    max_length: usize,
) -> Result<(f64, [f64; NUM_BANDS])> {
    let width = band_width(max_length);
    let mut sums = [0.0; NUM_BANDS];
    let mut counts = [0usize; NUM_BANDS];
    for trace in eval_set {
        let mut prefix = trace.prompt.clone();
        for (t, record) in trace.records.iter().enumerate() {
            let kl = kl_divergence(&student.next_dist(&prefix)?, &teacher.next_dist(&prefix)?);
            let b = (t / width).min(NUM_BANDS - 1);
            sums[b] += kl;
            counts[b] += 1;
            prefix.push(record.sampled_token);
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("held-out set has no positions".into()));
    }
    let mean = sums.iter().sum::<f64>() / total as f64;
    let mut by_band = [0.0; NUM_BANDS];
    for b in 0..NUM_BANDS {
        if counts[b] > 0 {
            by_band[b] = sums[b] / counts[b] as f64;
        }
    }
    Ok((mean, by_band))
}

struct StepOutcome {
    scaled: Vec<RewardTensor>,
    weights: Vec<Vec<f64>>,
}

/// Applied per-position weights and rewards for one batch under the run's mode.
fn apply_mode(
    cfg: &ExperimentConfig,
    step: u64,
    traces: &[RolloutTrace],
    processed: Vec<(ReliabilityProfile, RewardTensor)>,
    keep_target: Option<usize>,
) -> Result<StepOutcome> {
    let unit = |t: &RolloutTrace| -> Vec<f64> {
        t.records.iter().map(|r| if r.valid { 1.0 } else { 0.0 }).collect()
    };
    let mut weights = Vec::with_capacity(traces.len());
    let mut scaled = Vec::with_capacity(traces.len());
    match cfg.mode {
        Mode::PruneOpd if cfg.reliability.enabled => {
            for (profile, rewards) in processed {
                weights.push(profile.loss_weight);
                scaled.push(rewards);
            }
        }
        Mode::RandomPruneTokens | Mode::RandomPruneMass => {
            let slots: Vec<(usize, usize)> = traces
                .iter()
                .enumerate()
                .flat_map(|(b, t)| {
                    t.records
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.valid)
                        .map(move |(pos, _)| (b, pos))
                })
                .collect();
            let keep = keep_target.unwrap_or(slots.len()).min(slots.len());
            let mut rng = stream_rng(cfg.seed, Stream::Pruning, &[step]);
            let mut w: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; t.len()]).collect();
            for i in index::sample(&mut rng, slots.len(), keep) {
                let (b, pos) = slots[i];
                w[b][pos] = 1.0;
            }
            for (t, wt) in traces.iter().zip(&w) {
                scaled.push(crate::reliability::scale_rewards(&t.rewards, wt)?);
            }
            weights = w;
        }
        _ => {
            for t in traces {
                weights.push(unit(t));
                scaled.push(t.rewards.clone());
            }
        }
    }
    Ok(StepOutcome { scaled, weights })
}

/// Runs one experiment end to end, writing its files under `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let metrics_path = out.join(METRICS_FILE);
    let jsonl_path = out.join(METRICS_JSONL_FILE);
    let profile_path = out.join(PROFILE_FILE);
    let traces_path = out.join(TRACES_FILE);
    for stale in [&metrics_path, &jsonl_path] {
        match fs::remove_file(stale) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
                return Err(Error::io(format!("removing {}", stale.display()), e))
            }
            _ => {}
        }
    }
    write_json(cfg, &out.join(CONFIG_FILE))?;

    let targets = pruning_targets(cfg)?;
    let scenario = &cfg.scenario;
    let (mut student, teacher) = build_drift_pair(scenario)?;
    let eval_set = sample_batch(cfg, (&student, &teacher), Stream::Eval, 0, scenario.max_length, cfg.eval_rollouts, 1)?;
    let (initial_kl, _) = held_out_kl(&student, &teacher, &eval_set, scenario.max_length)?;

    let mut budget = BudgetState::init(&cfg.budget)?;
    let adaptive = cfg.mode == Mode::PruneOpd && !cfg.budget.frozen;
    let width = band_width(scenario.max_length);
    let profile_file =
        File::create(&profile_path).map_err(|e| Error::io(format!("creating {}", profile_path.display()), e))?;
    let mut profile_out = BufWriter::new(profile_file);
    let (mut tokens_generated, mut tokens_scored) = (0u64, 0u64);

    for step in 0..cfg.steps {
        let m_current = match cfg.mode {
            Mode::PruneOpd => budget.m_current,
            Mode::FixedTruncate => cfg.truncate_len(),
            _ => scenario.max_length,
        };
        let length = m_current.min(scenario.max_length);
        let traces = sample_batch(
            cfg,
            (&student, &teacher),
            Stream::Rollout,
            step as u64,
            length,
            cfg.batch_size,
            cfg.rollouts_per_prompt,
        )?;
        let processed: Vec<(ReliabilityProfile, RewardTensor)> = traces
            .par_iter()
            .map(|t| process_rollout(t, &cfg.compat, &cfg.reliability))
            .collect::<Result<_>>()?;
        let effective: Vec<usize> = processed.iter().map(|(p, _)| p.effective_length).collect();
        let h = hit_ratio(&effective, m_current, cfg.budget.margin)?;

        let (mut overlap_sum, mut valid_positions) = (0.0, 0usize);
        for t in &traces {
            for r in t.records.iter().filter(|r| r.valid) {
                overlap_sum += topk_overlap(&r.student, &r.teacher, cfg.compat.k)?;
                valid_positions += 1;
            }
        }

        let keep = targets.as_ref().map(|t| t[step]);
        let StepOutcome { scaled, weights } = apply_mode(cfg, step as u64, &traces, processed, keep)?;

        let generated: u64 = traces.iter().map(|t| t.valid_count() as u64).sum();
        let scored: u64 = weights.iter().flatten().filter(|&&w| w > 0.0).count() as u64;
        let weight_mass: f64 = weights.iter().flatten().sum();
        let mut band_sum = [0.0; NUM_BANDS];
        let mut band_n = [0usize; NUM_BANDS];
        let mut pos_sum = vec![0.0; length];
        let mut pos_n = vec![0usize; length];
        for (t, w) in traces.iter().zip(&weights) {
            for (pos, (r, &wt)) in t.records.iter().zip(w).enumerate() {
                if r.valid {
                    let b = (pos / width).min(NUM_BANDS - 1);
                    band_sum[b] += wt;
                    band_n[b] += 1;
                    pos_sum[pos] += wt;
                    pos_n[pos] += 1;
                }
            }
        }
        let mut by_band = [0.0; NUM_BANDS];
        for b in 0..NUM_BANDS {
            if band_n[b] > 0 {
                by_band[b] = band_sum[b] / band_n[b] as f64;
            }
        }
        let row = MetricsRow {
            step_index: step as u64,
            mean_overlap: if valid_positions > 0 { overlap_sum / valid_positions as f64 } else { 0.0 },
            mean_effective_length: effective.iter().sum::<usize>() as f64 / effective.len() as f64,
            m_current,
            hit_ratio: h,
            tokens_generated: generated,
            tokens_scored: scored,
            weight_mass,
            mean_loss_weight_by_band: by_band,
        };
        append_metrics(&row, &metrics_path)?;
        if cfg.metrics_jsonl {
            append_metrics_jsonl(&row, &jsonl_path)?;
        }
        if step % cfg.profile_stride == 0 || step + 1 == cfg.steps {
            let dump = ProfileDump {
                step: step as u64,
                mean_weight: pos_sum
                    .iter()
                    .zip(&pos_n)
                    .filter(|(_, &n)| n > 0)
                    .map(|(s, &n)| s / n as f64)
                    .collect(),
            };
            let line = serde_json::to_string(&dump).map_err(|e| Error::validation("profile", e.to_string()))?;
            writeln!(profile_out, "{line}")
                .map_err(|e| Error::io(format!("writing {}", profile_path.display()), e))?;
        }
        tokens_generated += generated;
        tokens_scored += scored;

        let batch: Vec<ScoredRollout<'_>> = traces
            .iter()
            .zip(&scaled)
            .map(|(trace, rewards)| ScoredRollout { trace, rewards })
            .collect();
        train_step(&mut student, &batch, cfg.learning_rate)?;

        if adaptive {
            budget = budget.step(h, &cfg.budget)?;
        }
        if step + 1 == cfg.steps {
            write_traces(&traces, &traces_path)?;
        }
        log::debug!(
            "step {step}: M={m_current} h={h:.3} E={:.1} scored={scored}",
            row.mean_effective_length
        );
    }
    profile_out
        .flush()
        .map_err(|e| Error::io(format!("writing {}", profile_path.display()), e))?;

    let (final_kl, final_kl_by_band) = held_out_kl(&student, &teacher, &eval_set, scenario.max_length)?;
    let summary = RunSummary {
        mode: cfg.mode,
        scenario: scenario.clone(),
        seed: cfg.seed,
        steps: cfg.steps,
        tokens_generated,
        tokens_scored,
        initial_kl,
        final_kl,
        final_kl_by_band,
        metrics_path,
        profile_path,
        traces_path,
    };
    write_json(&summary, &out.join(SUMMARY_FILE))?;
    log::info!(
        "{:?}: final KL {final_kl:.5} (initial {initial_kl:.5}), tokens scored {tokens_scored}",
        cfg.mode
    );
    Ok(summary)
}
