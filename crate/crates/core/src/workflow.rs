//! The pipeline behind the command-line driver: transition-matrix archive,
//! training, evaluation, sweeping baseline, tree extraction and report. Every
//! step reads its inputs from and writes its outputs to the run directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::agent::dqn::{evaluate, evaluate_policy, Checkpoint, Evaluation, Trainer};
use crate::agent::mlp::Mlp;
use crate::analysis::{
    extract_decision_tree, pulses_to_reach, read_success_curve, success_curve, terminal_histogram,
    write_histogram, write_success_curve, write_svg_plot, write_training_curve, write_tree_dot, DecisionTree,
    TerminalHistogram,
};
use crate::archive::{sha256, TransitionArchive, VERSION as ARCHIVE_VERSION};
use crate::config::{Preset, RunConfig};
use crate::env::{write_episode_log, Environment, Sweeping};
use crate::error::{Error, Result};
use crate::levels::{load_level_table, LevelTable, PopulationState};
use crate::presets::{desk_merge_rule, desk_model, h3o_levels, h3o_rabi, toy_actions, toy_library, TOY_INITIAL};
use crate::propagator::compile_library;
use crate::pulses::{build_pulse_library, load_rabi_table, MergeRule, PulseLibrary, Sideband};
use crate::thermal::{bbr_rates, load_einstein_table, EinsteinTable};

pub const ARCHIVE_FILE: &str = "transitions.qtm";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.json";
pub const TRAINING_CURVE_FILE: &str = "training_curve.csv";
pub const TREE_DOT_FILE: &str = "tree.dot";
pub const TREE_SUMMARY_FILE: &str = "tree.json";
pub const REPORT_FILE: &str = "report.md";
/// Greedy network and sweeping-policy output prefixes.
pub const RL: &str = "rl";
pub const SWEEPING: &str = "sweeping";

/// Largest column-sum deviation an archive may carry.
pub const ARCHIVE_AUDIT_TOLERANCE: f64 = 1e-6;

/// Level structure and pulse library of a configured run.
#[derive(Debug, Clone)]
pub struct Model {
    /// None for the toy, whose matrices are hand-built.
    pub table: Option<LevelTable>,
    pub library: PulseLibrary,
    pub einstein: Option<EinsteinTable>,
}

pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let trap = cfg.trap();
    let einstein_from = |table: &LevelTable| -> Result<Option<EinsteinTable>> {
        cfg.paths
            .einstein
            .as_deref()
            .map(|p| load_einstein_table(p, table, b','))
            .transpose()
    };
    match cfg.preset {
        Preset::CahDesk => {
            let m = desk_model(&cfg.j_values(), &trap, &desk_merge_rule())?;
            let einstein = match einstein_from(&m.table)? {
                Some(e) => e,
                None => m.einstein,
            };
            Ok(Model {
                table: Some(m.table),
                library: m.library,
                einstein: Some(einstein),
            })
        }
        Preset::H3o | Preset::Synthetic => {
            if cfg.is_toy() {
                return Ok(Model {
                    table: None,
                    library: toy_library(),
                    einstein: None,
                });
            }
            let (table, rabi) = match (&cfg.paths.levels, &cfg.paths.rabi) {
                (Some(l), Some(r)) => {
                    let table = load_level_table(l, b',')?;
                    let rabi = load_rabi_table(r, &table, b',')?;
                    (table, rabi)
                }
                (None, Some(r)) => {
                    let table = h3o_levels()?;
                    let rabi = load_rabi_table(r, &table, b',')?;
                    (table, rabi)
                }
                _ => {
                    let table = h3o_levels()?;
                    let rabi = h3o_rabi(&table)?;
                    (table, rabi)
                }
            };
            let library = build_pulse_library(&table, &rabi, &trap, &MergeRule::default(), Sideband::Blue)?;
            let einstein = einstein_from(&table)?;
            Ok(Model {
                table: Some(table),
                library,
                einstein,
            })
        }
    }
}

/// Hash of everything the transition matrices depend on.
pub fn input_hash(cfg: &RunConfig, model: &Model) -> Result<[u8; 32]> {
    let table = model.table.as_ref().map(|t| t.to_json()).transpose()?.unwrap_or_default();
    let library = model.library.to_json()?;
    let settings = if cfg.is_toy() {
        String::new()
    } else {
        serde_json::to_string(&cfg.propagation).map_err(|e| Error::data(e.to_string()))?
    };
    Ok(sha256(&[
        &ARCHIVE_VERSION.to_le_bytes(),
        cfg.preset.name().as_bytes(),
        table.as_bytes(),
        library.as_bytes(),
        settings.as_bytes(),
    ]))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Render with `render` into memory, then write atomically.
fn write_with<F>(path: &Path, render: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    render(&mut buf)?;
    write_atomic(path, &buf)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub archive: PathBuf,
    pub cache_hit: bool,
    pub input_hash: String,
    pub n_states: usize,
    pub n_pulses: usize,
    pub max_column_error: f64,
}

pub fn cmd_build_tm(cfg: &RunConfig) -> Result<BuildReport> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let hash = input_hash(cfg, &model)?;
    let path = cfg.out.join(ARCHIVE_FILE);
    let report = |archive: &TransitionArchive, cache_hit| BuildReport {
        archive: path.clone(),
        cache_hit,
        input_hash: hex::encode(hash),
        n_states: archive.n_states(),
        n_pulses: archive.pairs.len(),
        max_column_error: archive.pairs.iter().map(|p| p.column_sum_error()).fold(0.0, f64::max),
    };
    if TransitionArchive::peek_input_hash(&path) == Some(hash) {
        let archive = TransitionArchive::read(&path)?;
        archive.audit(ARCHIVE_AUDIT_TOLERANCE)?;
        info!("{} is up to date", path.display());
        return Ok(report(&archive, true));
    }
    let pairs = match &model.table {
        None => toy_actions(),
        Some(table) => {
            info!(
                "compiling {} pulses over {} states",
                model.library.len(),
                table.len()
            );
            compile_library(&model.library, table, &cfg.propagation)?
        }
    };
    let archive = TransitionArchive {
        input_hash: hash,
        library: model.library.clone(),
        pairs,
    };
    archive.audit(ARCHIVE_AUDIT_TOLERANCE)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    archive.write(&path)?;
    if let Some(table) = &model.table {
        write_atomic(&cfg.out.join("levels.json"), table.to_json()?.as_bytes())?;
    }
    info!("wrote {}", path.display());
    Ok(report(&archive, false))
}

/// Environment over the archived matrices; fails if the archive is missing
/// or was built from different inputs.
pub fn load_environment(cfg: &RunConfig) -> Result<(Environment, Model)> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let path = cfg.out.join(ARCHIVE_FILE);
    if !path.is_file() {
        return Err(Error::data(format!(
            "no transition archive at {}; run `build-tm` with this config first",
            path.display()
        )));
    }
    let archive = TransitionArchive::read(&path)?;
    if archive.input_hash != input_hash(cfg, &model)? {
        return Err(Error::data(format!(
            "{} was built from different inputs; rerun `build-tm`",
            path.display()
        )));
    }
    archive.audit(ARCHIVE_AUDIT_TOLERANCE)?;
    let env = match &model.table {
        None => Environment::new(
            cfg.env.clone(),
            PopulationState::new(TOY_INITIAL.to_vec())?,
            archive.pairs,
            archive.library.pulses.iter().map(|p| p.duration_s).collect(),
            None,
        )?,
        Some(table) => {
            let bbr = if cfg.env.bbr_enabled {
                let einstein = model
                    .einstein
                    .as_ref()
                    .ok_or_else(|| Error::config("BBR is enabled but no Einstein table is configured"))?;
                Some(bbr_rates(einstein, table, cfg.env.bbr_temperature_k)?)
            } else {
                None
            };
            Environment::from_library(cfg.env.clone(), table, &archive.library, archive.pairs, bbr.as_ref())?
        }
    };
    Ok((env, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: usize,
    pub resumed_from: Option<usize>,
    pub final_moving_average: f64,
    pub checkpoint: PathBuf,
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

/// Train to `dqn.n_training` episodes; with `resume`, continue from the last
/// scheduled checkpoint when there is one.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    let (env, _) = load_environment(cfg)?;
    let dir = cfg.out.join(CHECKPOINT_DIR);
    let latest = dir.join(LATEST_CHECKPOINT);
    let (mut trainer, resumed_from) = if resume && latest.is_file() {
        let c = read_checkpoint(&latest)?;
        if c.config != cfg.dqn {
            return Err(Error::config(
                "the checkpoint was trained with different [dqn] settings; start afresh without --resume",
            ));
        }
        let t = Trainer::from_checkpoint(c)?;
        info!("resuming from episode {}", t.episode);
        let e = t.episode;
        (t, Some(e))
    } else {
        (Trainer::new(cfg.dqn.clone(), env.n_states(), env.n_actions(), cfg.seed)?, None)
    };
    trainer.train(&env, |t| {
        let json = t.checkpoint().to_json()?;
        write_atomic(&dir.join(format!("episode_{:07}.json", t.episode)), json.as_bytes())?;
        write_atomic(&latest, json.as_bytes())?;
        info!("checkpoint at episode {}", t.episode);
        Ok(())
    })?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    write_atomic(&checkpoint, trainer.checkpoint().to_json()?.as_bytes())?;
    let window = cfg.evaluation.curve_window;
    write_with(&cfg.out.join(TRAINING_CURVE_FILE), |w| {
        write_training_curve(&trainer.curve, window, w)
    })?;
    Ok(TrainReport {
        episodes: trainer.episode,
        resumed_from,
        final_moving_average: trainer.curve.moving_average(window).last().copied().unwrap_or(0.0),
        checkpoint,
    })
}

pub fn load_network(cfg: &RunConfig) -> Result<Mlp> {
    let path = cfg.out.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(Error::data(format!(
            "no trained network at {}; run `train` with this config first",
            path.display()
        )));
    }
    read_checkpoint(&path)?.network()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub episodes: usize,
    pub mean_length: f64,
    pub std_error: f64,
    pub finished_fraction: f64,
    /// Pulses after which 90 % of episodes have finished.
    pub pulses_to_90: Option<usize>,
    pub histogram: TerminalHistogram,
}

fn write_policy_outputs(
    cfg: &RunConfig,
    prefix: &str,
    eval: &Evaluation,
    env: &Environment,
    model: &Model,
) -> Result<PolicySummary> {
    let curve = success_curve(&eval.records, env.config.max_steps)?;
    let histogram = terminal_histogram(&eval.records, env.n_states(), env.n_actions())?;
    let out = |name: &str| cfg.out.join(format!("{prefix}_{name}"));
    write_with(&out("episodes.csv"), |w| write_episode_log(&eval.records, w))?;
    write_with(&out("success.csv"), |w| write_success_curve(&curve, w))?;
    write_with(&out("histogram.csv"), |w| write_histogram(&histogram, model.table.as_ref(), w))?;
    let summary = PolicySummary {
        policy: prefix.to_string(),
        episodes: eval.records.len(),
        mean_length: eval.mean_length(),
        std_error: eval.std_error(),
        finished_fraction: eval.finished_fraction(),
        pulses_to_90: pulses_to_reach(&curve, 0.9),
        histogram,
    };
    write_json(&out("summary.json"), &summary)?;
    Ok(summary)
}

/// Greedy roll-outs of the trained network.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PolicySummary> {
    let (env, model) = load_environment(cfg)?;
    let mlp = load_network(cfg)?;
    let eval = evaluate(&mlp, &env, cfg.evaluation.n_episodes, cfg.seed)?;
    write_policy_outputs(cfg, RL, &eval, &env, &model)
}

/// Roll-outs of the fixed-order sweeping policy.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<PolicySummary> {
    let (env, model) = load_environment(cfg)?;
    let sweep = Sweeping {
        n_actions: env.n_actions(),
    };
    let eval = evaluate_policy(&sweep, &env, cfg.evaluation.n_episodes, cfg.seed, false)?;
    write_policy_outputs(cfg, SWEEPING, &eval, &env, &model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub nodes: usize,
    pub leaf_mass: f64,
    pub pruned_mass: f64,
    pub unexpanded_mass: f64,
    pub expected_depth: f64,
    pub max_depth: usize,
}

pub fn cmd_tree(cfg: &RunConfig) -> Result<(DecisionTree, TreeSummary)> {
    let (env, model) = load_environment(cfg)?;
    let mlp = load_network(cfg)?;
    let ev = &cfg.evaluation;
    let tree = extract_decision_tree(&mlp, &env, ev.prune_probability, ev.tree_depth)?;
    write_with(&cfg.out.join(TREE_DOT_FILE), |w| write_tree_dot(&tree, model.table.as_ref(), w))?;
    let summary = TreeSummary {
        nodes: tree.nodes.len(),
        leaf_mass: tree.leaf_mass(),
        pruned_mass: tree.pruned_mass,
        unexpanded_mass: tree.unexpanded_mass,
        expected_depth: tree.expected_depth(),
        max_depth: tree.max_depth,
    };
    write_json(&cfg.out.join(TREE_SUMMARY_FILE), &summary)?;
    Ok((tree, summary))
}

fn read_training_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(format!("{}: malformed row", path.display())))
        };
        out.push((field(0)?, field(3)?));
    }
    Ok(out)
}

/// Markdown summary comparing whichever of the greedy and sweeping
/// evaluations exist, with SVG success and training curves.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let mut summaries = Vec::new();
    let mut curves = Vec::new();
    for prefix in [RL, SWEEPING] {
        let path = cfg.out.join(format!("{prefix}_summary.json"));
        if !path.is_file() {
            continue;
        }
        let s: PolicySummary = read_json(&path)?;
        let curve_path = cfg.out.join(format!("{prefix}_success.csv"));
        let file = std::fs::File::open(&curve_path).map_err(|e| Error::io(&curve_path, e))?;
        let curve = read_success_curve(file)?;
        curves.push((prefix, curve.iter().map(|&(k, f)| (k as f64, f)).collect::<Vec<_>>()));
        summaries.push(s);
    }
    if summaries.is_empty() {
        return Err(Error::data("nothing to report; run `evaluate` and/or `baseline` first"));
    }
    let table = if cfg.is_toy() {
        None
    } else {
        let path = cfg.out.join("levels.json");
        match std::fs::read_to_string(&path) {
            Ok(text) => Some(LevelTable::from_json(&text)?),
            Err(_) => None,
        }
    };

    let mut md = String::new();
    md.push_str(&format!("# State preparation report ({})\n\n", cfg.preset.name()));
    md.push_str("| policy | episodes | mean pulses | std. error | finished | pulses to 90 % |\n");
    md.push_str("|---|---:|---:|---:|---:|---:|\n");
    for s in &summaries {
        md.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} | {:.4} | {} |\n",
            s.policy,
            s.episodes,
            s.mean_length,
            s.std_error,
            s.finished_fraction,
            s.pulses_to_90.map(|k| k.to_string()).unwrap_or_else(|| "-".into())
        ));
    }
    if let [a, b] = &summaries[..] {
        md.push_str(&format!(
            "\nMean pulse count, greedy network vs sweeping: {:.3} vs {:.3} (difference {:+.3}).\n",
            a.mean_length,
            b.mean_length,
            a.mean_length - b.mean_length
        ));
    }
    if cfg.preset == Preset::CahDesk && cfg.j_values() == [1, 2] {
        md.push_str("\nPublished CaH+ J = 1, 2 reference means: 8.3 (learned) vs 9.7 (sweeping).\n");
    }
    for s in &summaries {
        md.push_str(&format!("\n## Final states, {}\n\n| state | count |\n|---|---:|\n", s.policy));
        for (i, &c) in s.histogram.by_state.iter().enumerate() {
            if c > 0 {
                let label = table.as_ref().map(|t| t.label(i).key()).unwrap_or_else(|| i.to_string());
                md.push_str(&format!("| {label} | {c} |\n"));
            }
        }
    }

    let series: Vec<(&str, Vec<(f64, f64)>)> = curves.iter().map(|(n, c)| (*n, c.clone())).collect();
    write_with(&cfg.out.join("success.svg"), |w| {
        write_svg_plot(&series, "pulses", "fraction prepared", w)
    })?;
    md.push_str("\n![success curves](success.svg)\n");
    let training = cfg.out.join(TRAINING_CURVE_FILE);
    if training.is_file() {
        let avg = read_training_curve(&training)?;
        write_with(&cfg.out.join("training.svg"), |w| {
            write_svg_plot(&[("moving average", avg)], "episode", "pulses per episode", w)
        })?;
        md.push_str("![training curve](training.svg)\n");
    }
    write_atomic(&cfg.out.join(REPORT_FILE), md.as_bytes())?;
    Ok(md)
}
