use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sip_reward::analysis::{
    accuracy_by_ability, align_results, density_report, perturb_instance, robustness_study, stage_audit_aggregate,
    DensityReport, Distractor, ScoredResult, Segmentation, StageAuditRecord,
};
use sip_reward::dataset::{load_dataset, write_dataset, DatasetFormat, Instance};
use sip_reward::grpo::{synthetic_dataset, train_toy as run_training, Checkpoint, TrainError};
use sip_reward::judge::{JudgeClient, JudgeRequest, SipStage};
use sip_reward::pairs::{build_pairs as pair_segments, parse_segments, write_pairs, Priority};
use sip_reward::provenance::Provenance;
use sip_reward::rewards::{total_reward_masked, LengthTerm, RewardBreakdown, RewardInputs};
use sip_reward::trajectory::{compute_stats, parse_trajectory_any, ParsedTrajectory, WhitespaceTokenizer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{self, json_line, read_jsonl, write_error};
use crate::{AuditArgs, DensityArgs, EvalArgs, Format, PairsArgs, PerturbArgs, RobustnessArgs, ScoreArgs, SegmentationChoice, TrainArgs};

/// One model output to score or evaluate.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub instance_id: String,
    pub output: String,
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    instance_id: String,
    length_tokens: Option<usize>,
    repetition_ratio: Option<f64>,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

#[derive(Debug, Default, Serialize)]
struct ScoreSummary {
    count: usize,
    mean_r_fmt: Option<f64>,
    mean_r_out: Option<f64>,
    mean_r_struct: Option<f64>,
    mean_r_content: Option<f64>,
    mean_r_rep: Option<f64>,
    mean_r_win: Option<f64>,
    mean_r_len: Option<f64>,
    mean_r_total: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ScoreSummary {
    fn of(rows: &[ScoreRow]) -> Self {
        let b = || rows.iter().map(|r| &r.breakdown);
        Self {
            count: rows.len(),
            mean_r_fmt: mean(b().map(|x| x.r_fmt)),
            mean_r_out: mean(b().map(|x| x.r_out)),
            mean_r_struct: mean(b().map(|x| x.r_struct)),
            mean_r_content: mean(b().map(|x| x.r_content)),
            mean_r_rep: mean(b().filter_map(|x| x.r_rep)),
            mean_r_win: mean(b().filter_map(|x| x.r_win)),
            mean_r_len: mean(b().filter_map(|x| x.r_len)),
            mean_r_total: mean(b().map(|x| x.r_total)),
        }
    }
}

fn index_dataset(dataset: &[Instance]) -> HashMap<&str, &Instance> {
    dataset.iter().map(|i| (i.id.as_str(), i)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a Instance>, id: &str, source: &Path) -> Result<&'a Instance, CliError> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| CliError::Data(format!("{}: unknown instance {id:?}", source.display())))
}

fn score_one(
    cfg: &RunConfig,
    judge: Option<&JudgeClient>,
    inst: &Instance,
    record: &TrajectoryRecord,
    step: u64,
) -> Result<ScoreRow, CliError> {
    let parsed = parse_trajectory_any(&record.output);
    let stats = if parsed.well_formed {
        compute_stats(&parsed, &WhitespaceTokenizer, cfg.rewards.ngram_order).ok()
    } else {
        None
    };
    let mask = cfg.rewards.mask;
    let (mut r_struct, mut r_content) = (0.0, 0.0);
    if let (Some(judge), Some(thinking), true) = (judge, parsed.thinking.as_deref(), parsed.well_formed) {
        let req = JudgeRequest { instance: inst, thinking, reference: None };
        if mask.structure {
            r_struct = judge.structural_score(&req)?.score;
        }
        if mask.content {
            r_content = judge.content_score(&req)?.score;
        }
    }
    let inputs = RewardInputs {
        format_ok: parsed.well_formed,
        correct: parsed.answer_label == Some(inst.answer),
        r_struct,
        r_content,
        length: stats.as_ref().map(LengthTerm::from).unwrap_or(LengthTerm::Disabled),
    };
    let breakdown = total_reward_masked(&inputs, step, &cfg.rewards.curriculum, &cfg.rewards.length, mask)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(ScoreRow {
        instance_id: record.instance_id.clone(),
        length_tokens: stats.as_ref().map(|s| s.length_tokens),
        repetition_ratio: stats.as_ref().map(|s| s.repetition_ratio),
        breakdown,
    })
}

/// One reward breakdown per trajectory, then a `{"summary": ...}` line.
pub fn score(cfg: &RunConfig, args: &ScoreArgs, out: Option<&Path>) -> Result<(), CliError> {
    if args.step > cfg.rewards.curriculum.total_steps {
        return Err(CliError::Usage(format!(
            "--step {} is past curriculum.total_steps {}",
            args.step, cfg.rewards.curriculum.total_steps
        )));
    }
    let dataset = load_dataset(&args.dataset, DatasetFormat::Jsonl)?;
    let records: Vec<TrajectoryRecord> = read_jsonl(&args.trajectories)?;
    let index = index_dataset(&dataset);
    let instances = records
        .iter()
        .map(|r| lookup(&index, &r.instance_id, &args.trajectories))
        .collect::<Result<Vec<_>, _>>()?;
    let needs_judge = cfg.rewards.mask.structure || cfg.rewards.mask.content;
    let judge = if needs_judge && !records.is_empty() { Some(cfg.require_judge()?) } else { None };

    let rows = records
        .par_iter()
        .zip(instances.par_iter())
        .map(|(r, inst)| score_one(cfg, judge.as_ref(), inst, r, args.step))
        .collect::<Result<Vec<_>, _>>()?;

    let prov = output::provenance("score", cfg, &[&args.dataset, &args.trajectories])?;
    let mut w = output::open(out)?;
    output::header(&mut w, &prov, Format::Jsonl)?;
    for row in &rows {
        json_line(&mut w, row)?;
    }
    json_line(&mut w, &serde_json::json!({ "summary": ScoreSummary::of(&rows) }))?;
    output::finish(w)
}

fn load_trajectories(
    path: &Path,
    index: &HashMap<&str, &Instance>,
) -> Result<BTreeMap<String, ParsedTrajectory>, CliError> {
    let records: Vec<TrajectoryRecord> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in records {
        lookup(index, &r.instance_id, path)?;
        if out.contains_key(&r.instance_id) {
            return Err(CliError::Data(format!("{}: duplicate trajectory for {:?}", path.display(), r.instance_id)));
        }
        out.insert(r.instance_id, parse_trajectory_any(&r.output));
    }
    Ok(out)
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    ability: &'a str,
    correct: usize,
    total: usize,
    accuracy: f64,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset, DatasetFormat::Jsonl)?;
    let index = index_dataset(&dataset);
    let trajectories = load_trajectories(&args.trajectories, &index)?;
    let report = accuracy_by_ability(&dataset, &trajectories);
    if !report.missing.is_empty() {
        log::warn!("{} instance(s) have no trajectory and count as wrong", report.missing.len());
    }
    let mut rows: Vec<AccuracyRow> = report
        .per_ability
        .iter()
        .map(|(ability, a)| AccuracyRow { ability, correct: a.correct, total: a.total, accuracy: a.accuracy })
        .collect();
    rows.push(AccuracyRow {
        ability: "overall",
        correct: report.overall.correct,
        total: report.overall.total,
        accuracy: report.overall.accuracy,
    });

    let prov = output::provenance("eval", cfg, &[&args.dataset, &args.trajectories])?;
    let mut w = output::open(out)?;
    output::header(&mut w, &prov, args.format)?;
    match args.format {
        Format::Jsonl => rows.iter().try_for_each(|r| json_line(&mut w, r))?,
        Format::Table => {
            writeln!(w, "{:<26} {:>8} {:>8} {:>9}", "ability", "correct", "total", "accuracy").map_err(write_error)?;
            for r in &rows {
                writeln!(w, "{:<26} {:>8} {:>8} {:>9.4}", r.ability, r.correct, r.total, r.accuracy).map_err(write_error)?;
            }
        }
        Format::Csv => {
            writeln!(w, "ability,correct,total,accuracy").map_err(write_error)?;
            for r in &rows {
                writeln!(w, "{},{},{},{}", r.ability, r.correct, r.total, r.accuracy).map_err(write_error)?;
            }
        }
    }
    output::finish(w)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    provenance: Provenance,
    checkpoint: Checkpoint,
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut checkpoint = match serde_json::from_str::<CheckpointFile>(&text) {
        Ok(file) => file.checkpoint,
        Err(_) => serde_json::from_str::<Checkpoint>(&text)
            .map_err(|e| CliError::Data(format!("{}: not a checkpoint: {e}", path.display())))?,
    };
    checkpoint.policy.reindex();
    Ok(checkpoint)
}

fn write_checkpoint(path: &Path, prov: &Provenance, checkpoint: &Checkpoint) -> Result<(), CliError> {
    let file = CheckpointFile { provenance: prov.clone(), checkpoint: checkpoint.clone() };
    let text = serde_json::to_string(&file).map_err(|e| CliError::Data(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text + "\n")
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| CliError::io(path, e))
}

/// Writes `metrics.jsonl` and `checkpoint.json` into the `--out` directory.
pub fn train_toy(cfg: &RunConfig, args: &TrainArgs, out: Option<&Path>) -> Result<(), CliError> {
    let dir = out.ok_or_else(|| CliError::Usage("train-toy needs --out <directory>".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut setup = cfg.train_setup();
    if let Some(steps) = args.steps {
        setup.grpo.total_steps = steps;
    }
    let dataset = match &args.dataset {
        Some(path) => load_dataset(path, DatasetFormat::Jsonl)?,
        None => synthetic_dataset(cfg.train.synthetic_instances, cfg.train.synthetic_options, cfg.seed),
    };
    let resume = args.resume.as_deref().map(read_checkpoint).transpose()?;
    let judge = if setup.mask.structure || setup.mask.content { Some(cfg.require_judge()?) } else { None };

    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(args.dataset.as_deref());
    inputs.extend(args.resume.as_deref());
    let mut run_cfg = cfg.clone();
    run_cfg.train.grpo = setup.grpo.clone();
    let prov = output::provenance("train-toy", &run_cfg, &inputs)?;

    let metrics_path = dir.join("metrics.jsonl");
    let checkpoint_path: PathBuf = dir.join("checkpoint.json");
    let mut w = output::open(Some(&metrics_path))?;
    output::header(&mut w, &prov, Format::Jsonl)?;
    let every = cfg.train.checkpoint_every;
    let mut failure: Option<CliError> = None;
    let result = run_training(&dataset, &setup, judge.as_ref(), resume, &mut |m, ckpt| {
        if failure.is_some() {
            return;
        }
        let mut step_result = json_line(&mut w, m);
        if step_result.is_ok() && every > 0 && ckpt.step % every == 0 {
            step_result = write_checkpoint(&checkpoint_path, &prov, ckpt);
        }
        failure = step_result.err();
    });
    output::finish(w)?;
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(report) => {
            write_checkpoint(&checkpoint_path, &prov, &report.checkpoint)?;
            log::info!("finished at step {} with train accuracy {:.3}", report.checkpoint.step, report.train_accuracy);
            Ok(())
        }
        Err(TrainError::Judge { source, checkpoint, .. }) => {
            write_checkpoint(&checkpoint_path, &prov, &checkpoint)?;
            Err(CliError::Backend(format!(
                "judge failure at step {}: {source}; resume with --resume {}",
                checkpoint.step,
                checkpoint_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn build_pairs(cfg: &RunConfig, args: &PairsArgs, out: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.segments).map_err(|e| CliError::io(&args.segments, e))?;
    let segments = parse_segments(&text)?;
    let pairs = pair_segments(&segments, &cfg.pairs);
    for p in Priority::ALL {
        log::info!("{p:?}: {} pair(s)", pairs.iter().filter(|x| x.priority == p).count());
    }
    let prov = output::provenance("build-pairs", cfg, &[&args.segments])?;
    let mut w = output::open(out)?;
    write_pairs(&mut w, &pairs, Some(&prov)).map_err(write_error)?;
    output::finish(w)
}

pub fn density(cfg: &RunConfig, args: &DensityArgs, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset, DatasetFormat::Jsonl)?;
    let index = index_dataset(&dataset);
    let judge = match args.segmentation {
        SegmentationChoice::Judge => Some(cfg.require_judge()?),
        SegmentationChoice::Quartile => None,
    };
    let segmentation = match &judge {
        Some(j) => Segmentation::Judge(j),
        None => Segmentation::Quartile,
    };
    let mut reports = Vec::new();
    for path in &args.trajectories {
        let trajectories = load_trajectories(path, &index)?;
        let items: Vec<(&Instance, &ParsedTrajectory)> =
            trajectories.iter().map(|(id, t)| (index[id.as_str()], t)).collect();
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        reports.push(density_report(label, &items, segmentation)?);
    }
    let mut inputs: Vec<&Path> = vec![&args.dataset];
    inputs.extend(args.trajectories.iter().map(PathBuf::as_path));
    let prov = output::provenance("analyze density", cfg, &inputs)?;
    let mut w = output::open(out)?;
    output::header(&mut w, &prov, args.format)?;
    match args.format {
        Format::Jsonl => reports.iter().try_for_each(|r| json_line(&mut w, r))?,
        Format::Table => w.write_all(DensityReport::table(&reports).as_bytes()).map_err(write_error)?,
        Format::Csv => w.write_all(DensityReport::csv(&reports).as_bytes()).map_err(write_error)?,
    }
    output::finish(w)
}

pub fn audit(cfg: &RunConfig, args: &AuditArgs, out: Option<&Path>) -> Result<(), CliError> {
    let records: Vec<StageAuditRecord> = read_jsonl(&args.records)?;
    let summary = stage_audit_aggregate(&records)?;
    let prov = output::provenance("analyze audit", cfg, &[&args.records])?;
    let mut w = output::open(out)?;
    output::header(&mut w, &prov, args.format)?;
    match args.format {
        Format::Jsonl => json_line(&mut w, &summary)?,
        Format::Table | Format::Csv => {
            let csv = args.format == Format::Csv;
            let row = |w: &mut output::Sink, name: &str, value: f64| {
                if csv {
                    writeln!(w, "{name},{value}")
                } else {
                    writeln!(w, "{name:<24} {value:>8.4}")
                }
            };
            if csv {
                writeln!(w, "metric,value").map_err(write_error)?;
            }
            for (stage, acc) in SipStage::ALL.iter().zip(summary.stage_accuracy) {
                row(&mut w, &format!("{}_accuracy", stage.as_str()), acc).map_err(write_error)?;
            }
            row(&mut w, "final_accuracy", summary.final_accuracy).map_err(write_error)?;
            row(&mut w, "reversal_rate", summary.reversal_rate).map_err(write_error)?;
            row(&mut w, "encode_interpret_drop", summary.encode_interpret_drop).map_err(write_error)?;
        }
    }
    output::finish(w)
}

pub fn robustness(cfg: &RunConfig, args: &RobustnessArgs, out: Option<&Path>) -> Result<(), CliError> {
    let original: Vec<ScoredResult> = read_jsonl(&args.original)?;
    let perturbed: Vec<ScoredResult> = read_jsonl(&args.perturbed)?;
    let study = robustness_study(&align_results(&original, &perturbed)?)?;
    let prov = output::provenance("analyze robustness", cfg, &[&args.original, &args.perturbed])?;
    let mut w = output::open(out)?;
    output::header(&mut w, &prov, args.format)?;
    let aggregates = [
        ("original_accuracy", Some(study.original_accuracy)),
        ("perturbed_accuracy", Some(study.perturbed_accuracy)),
        ("accuracy_retention", study.accuracy_retention),
        ("mean_length_drift", Some(study.mean_length_drift)),
        ("mean_length_drift_pct", Some(study.mean_length_drift_pct)),
    ];
    match args.format {
        Format::Jsonl => {
            study.rows.iter().try_for_each(|r| json_line(&mut w, r))?;
            let summary: serde_json::Map<String, serde_json::Value> =
                aggregates.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect();
            json_line(&mut w, &serde_json::json!({ "summary": summary }))?;
        }
        Format::Table => {
            for (k, v) in aggregates {
                let shown = v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
                writeln!(w, "{k:<24} {shown:>10}").map_err(write_error)?;
            }
        }
        Format::Csv => {
            writeln!(w, "metric,value").map_err(write_error)?;
            for (k, v) in aggregates {
                writeln!(w, "{k},{}", v.map_or(String::new(), |x| x.to_string())).map_err(write_error)?;
            }
        }
    }
    output::finish(w)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DistractorRecord {
    instance_id: String,
    distractors: Vec<Distractor>,
}

/// Writes a perturbed copy of every instance named in the distractor file.
pub fn perturb(cfg: &RunConfig, args: &PerturbArgs, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset, DatasetFormat::Jsonl)?;
    let index = index_dataset(&dataset);
    let records: Vec<DistractorRecord> = read_jsonl(&args.distractors)?;
    let perturbed = records
        .iter()
        .map(|r| Ok(perturb_instance(lookup(&index, &r.instance_id, &args.distractors)?, &r.distractors)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let prov = output::provenance("perturb", cfg, &[&args.dataset, &args.distractors])?;
    let mut w = output::open(out)?;
    write_dataset(&mut w, &perturbed, Some(&prov)).map_err(write_error)?;
    output::finish(w)
}
