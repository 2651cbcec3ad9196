//! Complete runs: task construction, SFT, alignment, frequency sweeps,
//! ablation studies and aggregate reports, each persisted as a run directory.
//!
//! A run directory holds `config.toml`, `gold.json`, `prompts.json`,
//! `references.jsonl`, one checkpoint (`sft.ckpt` or `final.ckpt`) and
//! `manifest.json`; alignment runs add `prefs.jsonl`, `metrics.jsonl` and
//! `result.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::eval::{
    aggregate_report, head_to_head, head_to_head_with_seeds, win_rate_vs_reference, StratifiedSample, WinRateReport,
};
use crate::model::{PolicySnapshot, TokenSeq};
use crate::oracle::{build_reference_texts, build_sft_corpus, GoldReward, PromptSet, ReferenceSet};
use crate::rng::derive_seed;
use crate::store::{
    file_digest, read_json, read_jsonl, write_aggregate_csv, write_json, write_results_csv, AggregateRow, Checkpoint,
    ExperimentConfig, JsonlWriter, RunManifest, RunResult,
};
use crate::trainer::{
    run_alignment, run_sft, AlignmentInputs, AlignmentOutcome, EpochStats, EvalPlan, MetricRecord, RefMode, TrainConfig,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const GOLD_FILE: &str = "gold.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const REFERENCES_FILE: &str = "references.jsonl";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const SFT_HISTORY_FILE: &str = "sft_history.json";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const PREFS_FILE: &str = "prefs.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESULT_FILE: &str = "result.json";

/// The golden reference trains this many times longer than the arms it anchors.
pub const GOLDEN_STEP_FACTOR: usize = 2;

/// The EMA coefficients of the EMA ablation.
pub const EMA_TAUS: [f64; 6] = [0.0, 1e-4, 5e-3, 1e-3, 5e-2, 1e-2];

/// Everything alignment needs from the SFT stage.
#[derive(Debug, Clone)]
pub struct SftArtifacts {
    pub gr: GoldReward,
    pub prompts: PromptSet,
    pub sft: PolicySnapshot,
    pub references: ReferenceSet,
    pub history: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRecord {
    x: TokenSeq,
    y: TokenSeq,
}

/// Builds the oracle and prompt splits, fits SFT and draws reference texts.
pub fn run_sft_stage(cfg: &ExperimentConfig) -> Result<SftArtifacts> {
    cfg.validate()?;
    let dims = cfg.model;
    let seeds = cfg.seeds();
    let o = &cfg.oracle;
    let gr = GoldReward::random(&dims, seeds.reward, o.length_penalty, o.target_len, o.prompt_bonus)?;
    let p = &cfg.prompts;
    let prompts = PromptSet::generate(
        &dims,
        p.prompt_len,
        [p.sft, cfg.align_prompt_count(), p.eval],
        seeds.prompts,
    )?;
    let corpus = build_sft_corpus(&gr, &dims, &prompts, p.sft_responses, seeds.corpus);
    info!(
        "sft: {} demonstrations over {} prompts",
        corpus.len(),
        prompts.sft.len()
    );
    let out = run_sft(dims, &cfg.sft, &corpus, seeds.sft)?;
    info!(
        "sft: held-out perplexity {:.3} -> {:.3} (epoch {})",
        out.init_perplexity, out.history[out.best_epoch].holdout_perplexity, out.best_epoch
    );
    let references = build_reference_texts(&out.snapshot, &prompts.eval, seeds.references);
    Ok(SftArtifacts {
        gr,
        prompts,
        sft: out.snapshot,
        references,
        history: out.history,
    })
}

fn write_task_files(dir: &Path, art: &SftArtifacts) -> Result<()> {
    write_json(&dir.join(GOLD_FILE), &art.gr)?;
    write_json(&dir.join(PROMPTS_FILE), &art.prompts)?;
    let mut w = JsonlWriter::create(&dir.join(REFERENCES_FILE))?;
    for (x, y) in art.references.iter() {
        w.append(&ReferenceRecord {
            x: x.clone(),
            y: y.clone(),
        })?;
    }
    w.finish()
}

/// Writes an SFT run directory.
pub fn write_sft_dir(dir: &Path, cfg: &ExperimentConfig, art: &SftArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_task_files(dir, art)?;
    write_json(&dir.join(SFT_HISTORY_FILE), &art.history)?;
    Checkpoint::base_only(art.sft.base().clone(), "sft")
        .with_provenance("task", &cfg.task)
        .with_provenance("seed", cfg.seed)
        .with_provenance("config_digest", cfg.digest())
        .save(&dir.join(SFT_CKPT))?;
    RunManifest::build(dir, run_id_of(dir), cfg)?.write(dir)
}

/// Loads the oracle, prompts and reference texts stored in `dir`.
pub fn load_task_files(dir: &Path) -> Result<(GoldReward, PromptSet, ReferenceSet)> {
    let gr: GoldReward = read_json(&dir.join(GOLD_FILE))?;
    let prompts: PromptSet = read_json(&dir.join(PROMPTS_FILE))?;
    let refs = read_jsonl::<ReferenceRecord>(&dir.join(REFERENCES_FILE))?;
    if refs.truncated {
        return Err(Error::format(dir.join(REFERENCES_FILE), "truncated reference file"));
    }
    let references = ReferenceSet::from_pairs(refs.records.into_iter().map(|r| (r.x, r.y)));
    Ok((gr, prompts, references))
}

/// Reloads SFT artifacts from the directory holding an SFT checkpoint.
pub fn load_sft_artifacts(ckpt: &Path) -> Result<SftArtifacts> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let sft = Checkpoint::load(ckpt)?.snapshot();
    let (gr, prompts, references) = load_task_files(dir)?;
    gr.validate(&sft.base().dims)?;
    let history = read_json(&dir.join(SFT_HISTORY_FILE)).unwrap_or_default();
    Ok(SftArtifacts {
        gr,
        prompts,
        sft,
        references,
        history,
    })
}

/// Loads the golden reference named in the config. A missing or unreadable
/// checkpoint is a configuration error.
pub fn load_golden(cfg: &ExperimentConfig) -> Result<Option<PolicySnapshot>> {
    if cfg.train.ref_mode != RefMode::StaticGolden {
        return Ok(None);
    }
    let path = cfg.train.golden.as_ref().ok_or_else(|| {
        Error::config(
            "train.golden",
            "reference mode static_golden requires a golden checkpoint",
        )
    })?;
    if !path.is_file() {
        return Err(Error::config(
            "train.golden",
            format!("checkpoint {} does not exist", path.display()),
        ));
    }
    Ok(Some(Checkpoint::load(path)?.snapshot()))
}

/// Short label for the training recipe; the annotation frequency is reported
/// separately.
pub fn method_label(tc: &TrainConfig) -> String {
    let reference = match tc.ref_mode {
        RefMode::Behavior => "bpo",
        RefMode::StaticSft => "sftref",
        RefMode::StaticGolden => "goldref",
        RefMode::Ema => "ema",
    };
    let mut s = format!("{reference}-{}-E{}", tc.loss, tc.ensemble);
    if tc.ref_mode == RefMode::Ema {
        s.push_str(&format!("-tau{}", tc.ema_tau));
    }
    s
}

fn run_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

#[derive(Debug)]
pub struct AlignRun {
    pub dir: PathBuf,
    pub result: RunResult,
    pub outcome: AlignmentOutcome,
    /// SHA-256 of `metrics.jsonl`.
    pub metrics_digest: String,
}

/// Runs alignment on top of `sft` and writes a self-contained run directory.
pub fn run_align_stage(
    cfg: &ExperimentConfig,
    sft: &SftArtifacts,
    golden: Option<&PolicySnapshot>,
    dir: &Path,
) -> Result<AlignRun> {
    cfg.validate()?;
    let tc = cfg.train_config();
    if tc.ref_mode == RefMode::StaticGolden && golden.is_none() {
        return Err(Error::config("train.golden", "no golden checkpoint loaded"));
    }
    if sft.prompts.align.len() < tc.pairs_per_phase {
        return Err(Error::config(
            "prompts.align",
            "the SFT stage generated too few align prompts for this run",
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_task_files(dir, sft)?;

    let seeds = cfg.seeds();
    let inputs = AlignmentInputs {
        sft: &sft.sft,
        prompts: &sft.prompts.align,
        gr: &sft.gr,
        golden,
        eval: Some(EvalPlan {
            prompts: &sft.prompts.eval,
            references: &sft.references,
            temperature: cfg.eval.temperature,
            seed: seeds.eval,
        }),
    };
    let metrics_path = dir.join(METRICS_FILE);
    let mut sink = JsonlWriter::<MetricRecord>::create(&metrics_path)?;
    let outcome = run_alignment(&tc, &inputs, &mut sink)?;
    sink.finish()?;

    let mut prefs = JsonlWriter::create(&dir.join(PREFS_FILE))?;
    for p in &outcome.pairs {
        prefs.append(p)?;
    }
    prefs.finish()?;
    Checkpoint::from_policy(&outcome.policy, "final")
        .with_provenance("task", &cfg.task)
        .with_provenance("seed", cfg.seed)
        .with_provenance("config_digest", cfg.digest())
        .with_provenance("method", method_label(&tc))
        .save(&dir.join(FINAL_CKPT))?;
    let run_id = run_id_of(dir);
    let result = RunResult {
        run_id: run_id.clone(),
        task: cfg.task.clone(),
        seed: cfg.seed,
        method: method_label(&tc),
        freq: tc.freq,
        win_rate: outcome
            .final_win_rate
            .expect("alignment always evaluates its final policy"),
        steps: tc.steps,
        ensemble: tc.ensemble,
        ema_tau: tc.ema_tau,
    };
    write_json(&dir.join(RESULT_FILE), &result)?;
    RunManifest::build(dir, run_id, cfg)?.write(dir)?;
    info!("{}: win rate vs reference {:.4}", dir.display(), result.win_rate);
    Ok(AlignRun {
        dir: dir.to_path_buf(),
        result,
        metrics_digest: file_digest(&metrics_path)?,
        outcome,
    })
}

/// One configuration per `(F, seed)`, all validated before anything runs.
pub fn plan_sweep(
    cfg: &ExperimentConfig,
    freqs: &[usize],
    seeds: &[u64],
) -> Result<Vec<(usize, u64, ExperimentConfig)>> {
    if freqs.is_empty() {
        return Err(Error::config("freqs", "at least one frequency is required"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let mut plan = Vec::with_capacity(freqs.len() * seeds.len());
    for &f in freqs {
        for &s in seeds {
            let mut c = cfg.clone();
            c.seed = s;
            c.train.freq = f;
            c.train.pairs_per_phase = None;
            c.validate()?;
            plan.push((f, s, c));
        }
    }
    Ok(plan)
}

/// Runs SFT once per seed, then every `(F, seed)` alignment run, and writes
/// `results.csv` in `(F, seed)` order.
pub fn run_sweep(cfg: &ExperimentConfig, freqs: &[usize], seeds: &[u64], out: &Path) -> Result<Vec<RunResult>> {
    let plan = plan_sweep(cfg, freqs, seeds)?;
    let sft = sft_per_seed(cfg, seeds, out)?;
    let mut runs: Vec<RunResult> = plan
        .par_iter()
        .map(|(f, s, c)| run_align_stage(c, &sft[s], None, &out.join(format!("F{f}-s{s}"))).map(|r| r.result))
        .collect::<Result<_>>()?;
    runs.sort_by_key(|r| {
        let fi = freqs.iter().position(|&f| f == r.freq).unwrap_or(usize::MAX);
        let si = seeds.iter().position(|&s| s == r.seed).unwrap_or(usize::MAX);
        (fi, si)
    });
    write_results_csv(&out.join("results.csv"), &runs)?;
    Ok(runs)
}

fn sft_per_seed(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<BTreeMap<u64, SftArtifacts>> {
    let mut unique: Vec<u64> = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    unique
        .par_iter()
        .map(|&s| {
            let c = ExperimentConfig { seed: s, ..cfg.clone() };
            let art = run_sft_stage(&c)?;
            write_sft_dir(&out.join(format!("sft-s{s}")), &c, &art)?;
            Ok((s, art))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    /// Behavior, SFT and golden references, on-policy.
    Ref,
    /// One adapter against the default ensemble.
    Lora,
    /// Single-adapter runs across EMA coefficients.
    Ema,
}

impl std::str::FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ref" => Ok(Study::Ref),
            "lora" => Ok(Study::Lora),
            "ema" => Ok(Study::Ema),
            other => Err(format!("unknown study `{other}` (expected ref, lora or ema)")),
        }
    }
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Ref => "ref",
            Study::Lora => "lora",
            Study::Ema => "ema",
        }
    }
}

/// The on-policy configuration every ablation arm starts from, with
/// periodic evaluation switched on.
fn on_policy(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.freq = c.train.steps;
    c.train.pairs_per_phase = None;
    if c.train.eval_interval == 0 {
        c.train.eval_interval = (c.train.steps / 10).max(1);
    }
    c
}

/// The arms of a study as `(name, config)`. The golden arm of the ref study
/// points at `golden`, which the caller trains first.
pub fn ablation_arms(cfg: &ExperimentConfig, study: Study, golden: Option<&Path>) -> Vec<(String, ExperimentConfig)> {
    let base = on_policy(cfg);
    let arm = |name: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name, c)
    };
    match study {
        Study::Ref => vec![
            arm("bpo".into(), &|c| c.train.ref_mode = RefMode::Behavior),
            arm("sftref".into(), &|c| c.train.ref_mode = RefMode::StaticSft),
            arm("goldref".into(), &|c| {
                c.train.ref_mode = RefMode::StaticGolden;
                c.train.golden = golden.map(Path::to_path_buf);
            }),
        ],
        Study::Lora => [1, 5]
            .into_iter()
            .map(|e| arm(format!("E{e}"), &|c| c.train.ensemble = e))
            .collect(),
        Study::Ema => EMA_TAUS
            .into_iter()
            .map(|tau| {
                arm(format!("tau{tau}"), &|c| {
                    c.train.ensemble = 1;
                    c.train.ref_mode = RefMode::Ema;
                    c.train.ema_tau = tau;
                })
            })
            .collect(),
    }
}

/// The configuration of the long on-policy BPO run that becomes the golden
/// reference. The step size shrinks by the same factor the horizon grows.
pub fn golden_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = on_policy(cfg);
    c.train.steps *= GOLDEN_STEP_FACTOR;
    c.train.lr /= GOLDEN_STEP_FACTOR as f64;
    c.train.freq = c.train.steps;
    c.train.n_total = None;
    c.train.ref_mode = RefMode::Behavior;
    c.train.golden = None;
    c.train.eval_interval = 0;
    c.prompts.align = Some(cfg.align_prompt_count());
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub seed: u64,
    pub t: usize,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seed: u64,
    pub final_win_rate: f64,
    /// Lowest win rate strictly between the first and last evaluation.
    pub min_mid_win_rate: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub curves: Vec<CurvePoint>,
    pub summary: Vec<ArmSummary>,
    /// Per-step mean losses by `(arm, seed)`.
    pub losses: BTreeMap<(String, u64), Vec<f64>>,
}

/// Runs every arm of `study` for each seed under `out/<study>/` and writes
/// `curves.csv` and `summary.csv` there.
pub fn run_ablation(cfg: &ExperimentConfig, study: Study, seeds: &[u64], out: &Path) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let root = out.join(study.name());
    for (_, c) in ablation_arms(cfg, study, Some(Path::new("golden.ckpt"))) {
        c.validate()?;
    }
    golden_config(cfg).validate()?;
    let sft = sft_per_seed(cfg, seeds, &root)?;

    let mut goldens: BTreeMap<u64, PathBuf> = BTreeMap::new();
    if study == Study::Ref {
        let made: Vec<(u64, PathBuf)> = seeds
            .par_iter()
            .map(|&s| {
                let mut gc = golden_config(cfg);
                gc.seed = s;
                let dir = root.join(format!("golden-s{s}"));
                run_align_stage(&gc, &sft[&s], None, &dir)?;
                Ok((s, dir.join(FINAL_CKPT)))
            })
            .collect::<Result<_>>()?;
        goldens.extend(made);
    }

    let jobs: Vec<(String, u64, ExperimentConfig)> = seeds
        .iter()
        .flat_map(|&s| {
            ablation_arms(cfg, study, goldens.get(&s).map(PathBuf::as_path))
                .into_iter()
                .map(move |(name, mut c)| {
                    c.seed = s;
                    (name, s, c)
                })
        })
        .collect();
    let runs: Vec<(String, u64, AlignRun)> = jobs
        .par_iter()
        .map(|(name, s, c)| {
            let golden = load_golden(c)?;
            let run = run_align_stage(c, &sft[s], golden.as_ref(), &root.join(format!("{name}-s{s}")))?;
            Ok((name.clone(), *s, run))
        })
        .collect::<Result<_>>()?;

    let mut curves = Vec::new();
    let mut summary = Vec::new();
    let mut losses = BTreeMap::new();
    for (arm, seed, run) in &runs {
        let log = read_jsonl::<MetricRecord>(&run.dir.join(METRICS_FILE))?.records;
        let evals: Vec<(usize, f64)> = log
            .iter()
            .filter_map(MetricRecord::as_eval)
            .map(|e| (e.t, e.win_rate_vs_ref))
            .collect();
        curves.extend(evals.iter().map(|&(t, w)| CurvePoint {
            arm: arm.clone(),
            seed: *seed,
            t,
            win_rate: w,
        }));
        let mid = if evals.len() > 2 {
            &evals[1..evals.len() - 1]
        } else {
            &evals[..]
        };
        summary.push(ArmSummary {
            arm: arm.clone(),
            seed: *seed,
            final_win_rate: run.result.win_rate,
            min_mid_win_rate: mid.iter().map(|e| e.1).fold(f64::INFINITY, f64::min),
        });
        losses.insert(
            (arm.clone(), *seed),
            log.iter()
                .filter_map(MetricRecord::as_step)
                .map(|s| s.loss_mean)
                .collect(),
        );
    }
    write_csv(&root.join("curves.csv"), &curves)?;
    write_csv(&root.join("summary.csv"), &summary)?;
    Ok(AblationOutcome {
        curves,
        summary,
        losses,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    crate::store::write_atomic(path, &bytes)
}

/// Every `result.json` under `runs`, in path order.
pub fn collect_results(runs: &Path) -> Result<Vec<RunResult>> {
    if !runs.is_dir() {
        return Err(Error::config("runs", format!("{} is not a directory", runs.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(runs).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::format(runs, e.to_string()))?;
        if entry.file_type().is_file() && entry.file_name() == RESULT_FILE {
            out.push(read_json(entry.path())?);
        }
    }
    Ok(out)
}

/// Pools results by `(method, F)`, stratifies by task, and bootstraps each group.
pub fn aggregate_results(results: &[RunResult], n_resamples: usize, level: f64, seed: u64) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize), StratifiedSample> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.method.clone(), r.freq))
            .or_default()
            .push(r.task.clone(), r.win_rate);
    }
    groups
        .iter()
        .flat_map(|((method, f), sample)| {
            let rep = aggregate_report(sample, n_resamples, level, derive_seed(seed, &format!("{method}/F{f}")));
            AggregateRow::from_report(method, *f, &rep)
        })
        .collect()
}

/// Scans `runs` and writes the aggregate CSV to `out`.
pub fn run_report(runs: &Path, out: &Path, n_resamples: usize, level: f64) -> Result<Vec<AggregateRow>> {
    let results = collect_results(runs)?;
    if results.is_empty() {
        return Err(Error::config(
            "runs",
            format!("no {RESULT_FILE} found under {}", runs.display()),
        ));
    }
    let rows = aggregate_results(&results, n_resamples, level, 0);
    write_aggregate_csv(out, &rows)?;
    Ok(rows)
}

/// Win rate of a checkpoint against the reference texts stored in `refs_dir`.
pub fn eval_vs_references(policy: &Path, refs_dir: &Path, temperature: f64, seed: u64) -> Result<WinRateReport> {
    let snap = Checkpoint::load(policy)?.snapshot();
    let (gr, prompts, references) = load_task_files(refs_dir)?;
    gr.validate(&snap.base().dims)?;
    Ok(win_rate_vs_reference(
        &snap,
        &prompts.eval,
        &references,
        &gr,
        temperature,
        derive_seed(seed, "eval"),
    ))
}

/// Head-to-head win rate of `policy` over `opponent` on the eval prompts and
/// oracle stored next to `policy`. With `shared_transcript` both sides draw
/// from the same per-prompt streams.
pub fn eval_head_to_head(
    policy: &Path,
    opponent: &Path,
    temperature: f64,
    seed: u64,
    shared_transcript: bool,
) -> Result<WinRateReport> {
    let a = Checkpoint::load(policy)?.snapshot();
    let b = Checkpoint::load(opponent)?.snapshot();
    let (gr, prompts, _) = load_task_files(policy.parent().unwrap_or(Path::new(".")))?;
    gr.validate(&a.base().dims)?;
    if a.base().dims != b.base().dims {
        return Err(Error::config("opponent", "checkpoints have different model dimensions"));
    }
    Ok(if shared_transcript {
        let s = derive_seed(seed, "h2h");
        head_to_head_with_seeds(&a, &b, &prompts.eval, &gr, temperature, s, s)
    } else {
        head_to_head(&a, &b, &prompts.eval, &gr, temperature, seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::RunManifest;

    /// A configuration small enough for unit tests.
    pub(crate) fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.prompts.sft = 40;
        c.prompts.eval = 60;
        c.sft.epochs = 2;
        c.train.steps = 6;
        c.train.freq = 6;
        c.train.batch_size = 4;
        c.train.ensemble = 2;
        c
    }

    #[test]
    fn sft_dir_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let art = run_sft_stage(&cfg).unwrap();
        write_sft_dir(dir.path(), &cfg, &art).unwrap();
        let back = load_sft_artifacts(&dir.path().join(SFT_CKPT)).unwrap();
        assert_eq!(back.gr, art.gr);
        assert_eq!(back.prompts, art.prompts);
        assert_eq!(back.references, art.references);
        assert_eq!(back.sft.logits(&[16; 8]), art.sft.logits(&[16; 8]));
        RunManifest::load(dir.path()).unwrap().verify(dir.path()).unwrap();
    }

    #[test]
    fn align_dir_is_complete_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let art = run_sft_stage(&cfg).unwrap();
        let a = run_align_stage(&cfg, &art, None, &dir.path().join("a")).unwrap();
        let b = run_align_stage(&cfg, &art, None, &dir.path().join("b")).unwrap();
        assert_eq!(a.metrics_digest, b.metrics_digest);
        assert_eq!(a.result.win_rate, b.result.win_rate);
        let m = RunManifest::load(&a.dir).unwrap();
        m.verify(&a.dir).unwrap();
        for f in [
            CONFIG_FILE,
            GOLD_FILE,
            PROMPTS_FILE,
            REFERENCES_FILE,
            FINAL_CKPT,
            PREFS_FILE,
            METRICS_FILE,
            RESULT_FILE,
        ] {
            assert!(m.entry(f).is_some(), "{f}");
        }
        // The directory alone suffices to re-run evaluation.
        let rep = eval_vs_references(&a.dir.join(FINAL_CKPT), &a.dir, 1.0, 0).unwrap();
        assert_eq!(rep.n_prompts, 60);
        let snaps = read_jsonl::<MetricRecord>(&a.dir.join(METRICS_FILE)).unwrap().records;
        assert_eq!(
            snaps
                .iter()
                .filter_map(MetricRecord::as_step)
                .filter(|s| s.snapshot_event)
                .count(),
            6
        );
    }

    #[test]
    fn sweep_validates_every_frequency_first() {
        let dir = tempfile::tempdir().unwrap();
        let e = run_sweep(&tiny(), &[1, 4], &[0], dir.path()).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "train.freq"));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn sweep_writes_one_row_per_run() {
        let dir = tempfile::tempdir().unwrap();
        let runs = run_sweep(&tiny(), &[1, 3], &[0, 1], dir.path()).unwrap();
        let keys: Vec<(usize, u64)> = runs.iter().map(|r| (r.freq, r.seed)).collect();
        assert_eq!(keys, [(1, 0), (1, 1), (3, 0), (3, 1)]);
        let csv = crate::store::read_results_csv(&dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.len(), 4);

        let out = dir.path().join("agg.csv");
        let rows = run_report(dir.path(), &out, 200, 0.95).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        let first = std::fs::read(&out).unwrap();
        run_report(dir.path(), &out, 200, 0.95).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), first);
    }

    #[test]
    fn report_of_empty_directory_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = run_report(dir.path(), &dir.path().join("x.csv"), 10, 0.95).unwrap_err();
        assert_eq!(e.kind(), "config");
    }

    #[test]
    fn aggregate_groups_by_method_and_frequency() {
        let mk = |task: &str, seed, method: &str, f, w| RunResult {
            run_id: format!("{task}-{seed}"),
            task: task.into(),
            seed,
            method: method.into(),
            freq: f,
            win_rate: w,
            steps: 1,
            ensemble: 5,
            ema_tau: 0.0,
        };
        let mut rs = Vec::new();
        for (i, task) in ["a", "b", "c"].into_iter().enumerate() {
            for s in 0..3 {
                rs.push(mk(task, s, "m", 2, 0.5 + 0.01 * (i as f64 + s as f64)));
                rs.push(mk(task, s, "k", 1, 0.4));
            }
        }
        let rows = aggregate_results(&rs, 500, 0.95, 0);
        assert_eq!(rows.len(), 6);
        for r in rows.iter().filter(|r| r.method == "k") {
            assert_eq!((r.estimate, r.ci_low, r.ci_high), (0.4, 0.4, 0.4));
            assert_eq!(r.n_runs, 9);
        }
    }

    #[test]
    fn ema_zero_matches_static_sft_on_policy() {
        let cfg = tiny();
        let art = run_sft_stage(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let arms = ablation_arms(&cfg, Study::Ema, None);
        let (_, ema0) = arms.iter().find(|(n, _)| n == "tau0").unwrap();
        let mut sft_ref = ema0.clone();
        sft_ref.train.ref_mode = RefMode::StaticSft;
        let a = run_align_stage(ema0, &art, None, &dir.path().join("a")).unwrap();
        let b = run_align_stage(&sft_ref, &art, None, &dir.path().join("b")).unwrap();
        let losses = |d: &Path| -> Vec<Vec<f64>> {
            read_jsonl::<MetricRecord>(&d.join(METRICS_FILE))
                .unwrap()
                .records
                .iter()
                .filter_map(MetricRecord::as_step)
                .map(|s| s.loss_per_member.clone())
                .collect()
        };
        assert_eq!(losses(&a.dir), losses(&b.dir));
    }

    #[test]
    fn golden_arm_requires_checkpoint_on_disk() {
        let mut cfg = tiny();
        cfg.train.ref_mode = RefMode::StaticGolden;
        cfg.train.golden = Some("/nonexistent/final.ckpt".into());
        let e = load_golden(&cfg).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "train.golden"));
    }
}
