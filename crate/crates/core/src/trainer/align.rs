//! The alignment loop: annotation-frequency scheduling, behavior snapshots,
//! reference resolution and per-member adapter updates.

use std::collections::VecDeque;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam};
use super::config::{RefMode, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::win_rate_vs_reference;
use crate::losses::{DapLoss, LogProbQuad};
use crate::model::{
    init_ensemble, seq_logprob, seq_logprob_grad, snapshot, AdapterSet, DenseGrads, Policy, PolicySnapshot, TokenSeq,
    Weights,
};
use crate::oracle::{collect_pair, GoldReward, PreferencePair, ReferenceSet};
use crate::rng;

/// Fraction of extra align prompts a phase needs to absorb discarded prompts.
pub const PROMPT_HEADROOM: f64 = 0.25;

/// A preference pair tagged with its unique annotation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub id: u64,
    #[serde(flatten)]
    pub pair: PreferencePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub phase: usize,
    pub loss_mean: f64,
    pub loss_per_member: Vec<f64>,
    pub ref_mode: RefMode,
    pub snapshot_event: bool,
    pub pairs_annotated: usize,
    pub pairs_consumed: usize,
    /// `|D|` after this step's batch was removed.
    pub pending: usize,
    pub batch_ids: Vec<u64>,
    /// Adapter gradient norms before clipping.
    pub grad_norm_per_member: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed steps.
    pub t: usize,
    pub win_rate_vs_ref: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

impl MetricRecord {
    pub fn as_step(&self) -> Option<&StepRecord> {
        match self {
            MetricRecord::Step(s) => Some(s),
            MetricRecord::Eval(_) => None,
        }
    }

    pub fn as_eval(&self) -> Option<&EvalRecord> {
        match self {
            MetricRecord::Eval(e) => Some(e),
            MetricRecord::Step(_) => None,
        }
    }
}

/// Receives metrics as they are produced.
pub trait MetricsSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Periodic win-rate evaluation against frozen reference texts.
#[derive(Debug, Clone, Copy)]
pub struct EvalPlan<'a> {
    pub prompts: &'a [TokenSeq],
    pub references: &'a ReferenceSet,
    pub temperature: f64,
    pub seed: u64,
}

pub struct AlignmentInputs<'a> {
    /// Frozen SFT policy; its base is shared by every member.
    pub sft: &'a PolicySnapshot,
    /// The align prompt split.
    pub prompts: &'a [TokenSeq],
    pub gr: &'a GoldReward,
    /// Required when the reference mode is `static_golden`.
    pub golden: Option<&'a PolicySnapshot>,
    pub eval: Option<EvalPlan<'a>>,
}

/// Internal state of a run between steps.
pub struct TrainState {
    pub step: usize,
    pub policy: Policy,
    pub behavior: PolicySnapshot,
    pub sft: PolicySnapshot,
    pub golden: Option<PolicySnapshot>,
    pub pending: VecDeque<AnnotatedPair>,
    pub ema: Vec<AdapterSet>,
    pub optimizers: Vec<Adam>,
    pub annotated: usize,
    pub consumed: usize,
}

/// The policy (or policies) supplying reference log-probabilities for a step.
#[derive(Debug, Clone)]
pub enum ReferencePolicy {
    /// One snapshot for every member.
    Shared(PolicySnapshot),
    /// Member `i` is anchored to its own entry.
    PerMember(Vec<PolicySnapshot>),
}

impl ReferencePolicy {
    pub fn for_member(&self, i: usize) -> &PolicySnapshot {
        match self {
            ReferencePolicy::Shared(s) => s,
            ReferencePolicy::PerMember(v) => &v[i],
        }
    }
}

/// Picks `π_ref` for the current step. Under EMA each member's shadow adapters
/// are materialized on the shared base.
pub fn resolve_reference(state: &TrainState, mode: RefMode) -> Result<ReferencePolicy> {
    Ok(match mode {
        RefMode::Behavior => ReferencePolicy::Shared(state.behavior.clone()),
        RefMode::StaticSft => ReferencePolicy::Shared(state.sft.clone()),
        RefMode::StaticGolden => ReferencePolicy::Shared(
            state
                .golden
                .clone()
                .ok_or_else(|| Error::config("train.golden", "no golden checkpoint loaded"))?,
        ),
        RefMode::Ema => ReferencePolicy::PerMember(
            state
                .ema
                .iter()
                .enumerate()
                .map(|(i, s)| PolicySnapshot::from_adapter_set(state.policy.base.clone(), s, format!("ema[{i}]")))
                .collect(),
        ),
    })
}

/// `θ′ ← τ·θ + (1 − τ)·θ′` over all adapter entries.
pub fn ema_update(shadow: &mut AdapterSet, theta: &AdapterSet, tau: f64) {
    for (s, t) in shadow.tensors_mut().into_iter().zip(theta.tensors()) {
        assert_eq!(s.len(), t.len(), "shadow and parameter shapes differ");
        for (a, &b) in s.iter_mut().zip(t) {
            *a = tau * b + (1.0 - tau) * *a;
        }
    }
}

/// What the observer sees after each step.
#[derive(Debug, Clone)]
pub struct StepTrace<'a> {
    pub t: usize,
    pub batch: &'a [AnnotatedPair],
    pub reference: &'a ReferencePolicy,
    /// `quads[i][k]` is member `i`'s quad on batch pair `k`.
    pub quads: &'a [Vec<LogProbQuad>],
}

#[derive(Debug)]
pub struct AlignmentOutcome {
    pub policy: Policy,
    /// The merged ensemble after the last step.
    pub snapshot: PolicySnapshot,
    pub pairs: Vec<AnnotatedPair>,
    /// Steps at which the behavior policy was re-snapshotted.
    pub snapshot_steps: Vec<usize>,
    pub final_win_rate: Option<f64>,
}

/// Runs alignment from a freshly initialized ensemble.
pub fn run_alignment(
    cfg: &TrainConfig,
    inputs: &AlignmentInputs<'_>,
    sink: &mut dyn MetricsSink,
) -> Result<AlignmentOutcome> {
    cfg.validate()?;
    let base = inputs.sft.base().clone();
    let ens = init_ensemble(&base.dims, cfg.ensemble, cfg.lora_rank, cfg.lora_alpha, cfg.model_seed)?;
    run_alignment_with(cfg, Policy::new(base, ens)?, inputs, sink, None)
}

/// Runs alignment from the given initial ensemble.
pub fn run_alignment_with(
    cfg: &TrainConfig,
    initial: Policy,
    inputs: &AlignmentInputs<'_>,
    sink: &mut dyn MetricsSink,
    mut observer: Option<&mut dyn FnMut(&StepTrace<'_>)>,
) -> Result<AlignmentOutcome> {
    cfg.validate()?;
    if initial.ensemble.len() != cfg.ensemble {
        return Err(Error::config(
            "train.ensemble",
            format!(
                "initial ensemble has {} members, config says {}",
                initial.ensemble.len(),
                cfg.ensemble
            ),
        ));
    }
    if cfg.ref_mode == RefMode::StaticGolden && inputs.golden.is_none() {
        return Err(Error::config(
            "train.golden",
            "reference mode static_golden requires a golden checkpoint",
        ));
    }
    let needed = (cfg.pairs_per_phase as f64 * (1.0 + PROMPT_HEADROOM)).ceil() as usize;
    if inputs.prompts.len() < needed {
        return Err(Error::config(
            "prompts.align",
            format!(
                "{} align prompts cannot supply M = {} pairs per phase (need at least {needed})",
                inputs.prompts.len(),
                cfg.pairs_per_phase
            ),
        ));
    }
    let loss = DapLoss::new(cfg.loss, cfg.beta)?;

    let shapes: Vec<usize> = initial.ensemble.members[0].tensors().iter().map(|t| t.len()).collect();
    let mut state = TrainState {
        step: 0,
        behavior: inputs.sft.clone(),
        sft: inputs.sft.clone(),
        golden: inputs.golden.cloned(),
        pending: VecDeque::new(),
        ema: initial.ensemble.members.clone(),
        optimizers: (0..cfg.ensemble)
            .map(|_| Adam::new(cfg.lr, shapes.iter().copied()))
            .collect(),
        policy: initial,
        annotated: 0,
        consumed: 0,
    };
    let k = cfg.interval();
    let b = cfg.batch_size;
    let mut all_pairs = Vec::with_capacity(cfg.n_total);
    let mut snapshot_steps = Vec::with_capacity(cfg.freq);
    let mut final_win_rate = None;

    let evaluate = |policy: &Policy, t: usize, sink: &mut dyn MetricsSink| -> Result<Option<f64>> {
        let Some(plan) = inputs.eval else { return Ok(None) };
        let snap = snapshot(policy, format!("eval@{t}"));
        let rep = win_rate_vs_reference(
            &snap,
            plan.prompts,
            plan.references,
            inputs.gr,
            plan.temperature,
            plan.seed,
        );
        info!("t={t} win_rate_vs_ref={:.4}", rep.win_rate);
        sink.record(&MetricRecord::Eval(EvalRecord {
            t,
            win_rate_vs_ref: rep.win_rate,
        }))?;
        Ok(Some(rep.win_rate))
    };
    if cfg.eval_interval > 0 {
        evaluate(&state.policy, 0, sink)?;
    }

    for t in 0..cfg.steps {
        state.step = t;
        let phase = t / k;
        let snapshot_event = t % k == 0;
        if snapshot_event {
            state.behavior = snapshot(&state.policy, format!("behavior@{t}"));
            snapshot_steps.push(t);
            let fresh = collect_phase(cfg, &state.behavior, inputs, phase, state.annotated as u64)?;
            state.annotated += fresh.len();
            debug!("phase {phase}: annotated {} pairs at t={t}", fresh.len());
            all_pairs.extend(fresh.iter().cloned());
            state.pending.extend(fresh);
        }
        if state.pending.len() < b {
            return Err(Error::Underflow {
                step: t,
                needed: b,
                available: state.pending.len(),
            });
        }
        let batch: Vec<AnnotatedPair> = state.pending.drain(..b).collect();
        state.consumed += b;

        let reference = resolve_reference(&state, cfg.ref_mode)?;
        let shared_ref: Option<Vec<(f64, f64)>> = match &reference {
            ReferencePolicy::Shared(r) => Some(reference_logprobs(r, &batch)),
            ReferencePolicy::PerMember(_) => None,
        };

        let base = state.policy.base.clone();
        let results: Vec<Result<(f64, f64, Vec<LogProbQuad>)>> = state
            .policy
            .ensemble
            .members
            .par_iter_mut()
            .zip(state.optimizers.par_iter_mut())
            .enumerate()
            .map(|(i, (member, opt))| {
                let own_ref;
                let refs = match &shared_ref {
                    Some(r) => r,
                    None => {
                        own_ref = reference_logprobs(reference.for_member(i), &batch);
                        &own_ref
                    }
                };
                let (w_h, w_out) = member.effective(&base);
                let w = Weights::with_projections(&base, &w_h, &w_out);
                let mut dense = DenseGrads::projections(&base.dims);
                let mut loss_sum = 0.0;
                let mut quads = Vec::with_capacity(batch.len());
                for (ap, &(ref_w, ref_l)) in batch.iter().zip(refs) {
                    let p = &ap.pair;
                    let q = LogProbQuad::new(
                        seq_logprob(&w, &p.x, &p.y_w),
                        seq_logprob(&w, &p.x, &p.y_l),
                        ref_w,
                        ref_l,
                    );
                    let v = loss.evaluate(&q);
                    if !v.loss.is_finite() {
                        return Err(Error::Numerical(format!("non-finite loss at step {t}, member {i}")));
                    }
                    loss_sum += v.loss;
                    let scale = 1.0 / b as f64;
                    if v.grad[0] != 0.0 {
                        seq_logprob_grad(&w, &p.x, &p.y_w, v.grad[0] * scale, &mut dense);
                    }
                    if v.grad[1] != 0.0 {
                        seq_logprob_grad(&w, &p.x, &p.y_l, v.grad[1] * scale, &mut dense);
                    }
                    quads.push(q);
                }
                let mut grads = member.backprop(&dense);
                let norm = clip_global_norm(grads.tensors_mut(), cfg.clip_norm);
                if !norm.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at step {t}, member {i}")));
                }
                opt.step(member.tensors_mut(), grads.tensors());
                if !member.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite adapter weights after step {t}, member {i}"
                    )));
                }
                Ok((loss_sum / b as f64, norm, quads))
            })
            .collect();

        let mut loss_per_member = Vec::with_capacity(cfg.ensemble);
        let mut grad_norm_per_member = Vec::with_capacity(cfg.ensemble);
        let mut quads = Vec::with_capacity(cfg.ensemble);
        for r in results {
            let (l, n, q) = r?;
            loss_per_member.push(l);
            grad_norm_per_member.push(n);
            quads.push(q);
        }
        for (shadow, theta) in state.ema.iter_mut().zip(&state.policy.ensemble.members) {
            ema_update(shadow, theta, cfg.ema_tau);
        }
        if let Some(obs) = observer.as_mut() {
            obs(&StepTrace {
                t,
                batch: &batch,
                reference: &reference,
                quads: &quads,
            });
        }
        let loss_mean = loss_per_member.iter().sum::<f64>() / cfg.ensemble as f64;
        sink.record(&MetricRecord::Step(StepRecord {
            t,
            phase,
            loss_mean,
            loss_per_member,
            ref_mode: cfg.ref_mode,
            snapshot_event,
            pairs_annotated: state.annotated,
            pairs_consumed: state.consumed,
            pending: state.pending.len(),
            batch_ids: batch.iter().map(|p| p.id).collect(),
            grad_norm_per_member,
        }))?;

        let done = t + 1;
        if done == cfg.steps || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            final_win_rate = evaluate(&state.policy, done, sink)?.or(final_win_rate);
        }
    }

    let snapshot = snapshot(&state.policy, "aligned");
    Ok(AlignmentOutcome {
        policy: state.policy,
        snapshot,
        pairs: all_pairs,
        snapshot_steps,
        final_win_rate,
    })
}

fn reference_logprobs(r: &PolicySnapshot, batch: &[AnnotatedPair]) -> Vec<(f64, f64)> {
    batch
        .par_iter()
        .map(|ap| (r.logprob(&ap.pair.x, &ap.pair.y_w), r.logprob(&ap.pair.x, &ap.pair.y_l)))
        .collect()
}

/// Annotates `M` pairs from the behavior snapshot, drawing prompts without
/// replacement in a seeded order and skipping prompts that yield no pair.
/// The phase's pairs are then shuffled into consumption order.
fn collect_phase(
    cfg: &TrainConfig,
    behavior: &PolicySnapshot,
    inputs: &AlignmentInputs<'_>,
    phase: usize,
    first_id: u64,
) -> Result<Vec<AnnotatedPair>> {
    let m = cfg.pairs_per_phase;
    let mut order: Vec<usize> = (0..inputs.prompts.len()).collect();
    order.shuffle(&mut rng::stream(cfg.data_seed, "prompt-order", phase as u64));
    let sample_seed = rng::derive_seed(cfg.data_seed, &format!("collect-{phase}"));
    let label_seed = rng::derive_seed(cfg.annotation_seed, &format!("label-{phase}"));

    let mut pairs = Vec::with_capacity(m);
    let mut cursor = 0;
    while pairs.len() < m {
        if cursor == order.len() {
            return Err(Error::PromptsExhausted {
                phase,
                collected: pairs.len(),
                wanted: m,
            });
        }
        let want = m - pairs.len();
        let chunk = &order[cursor..(cursor + want).min(order.len())];
        cursor += chunk.len();
        let got: Vec<Option<PreferencePair>> = chunk
            .par_iter()
            .map(|&j| {
                collect_pair(
                    behavior,
                    inputs.gr,
                    &inputs.prompts[j],
                    cfg.annotation,
                    cfg.temperature,
                    phase,
                    &mut rng::stream(sample_seed, "pair", j as u64),
                    &mut rng::stream(label_seed, "label", j as u64),
                )
                .ok()
            })
            .collect();
        pairs.extend(got.into_iter().flatten());
    }
    pairs.shuffle(&mut rng::stream(cfg.data_seed, "batch-order", phase as u64));
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(i, pair)| AnnotatedPair {
            id: first_id + i as u64,
            pair,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::model::{init_base, ModelDims};
    use crate::oracle::{build_reference_texts, PromptSet};
    use std::sync::Arc;

    struct Fixture {
        dims: ModelDims,
        sft: PolicySnapshot,
        gr: GoldReward,
        prompts: PromptSet,
        refs: ReferenceSet,
    }

    fn fixture() -> Fixture {
        let dims = ModelDims::default();
        let base = Arc::new(init_base(dims, 3).unwrap());
        let sft = PolicySnapshot::from_base(base, "sft");
        let gr = GoldReward::random(&dims, 5, 0.1, 8, 0.5).unwrap();
        let prompts = PromptSet::generate(&dims, 4, [0, 80, 10], 6).unwrap();
        let refs = build_reference_texts(&sft, &prompts.eval, 7);
        Fixture {
            dims,
            sft,
            gr,
            prompts,
            refs,
        }
    }

    fn inputs(fx: &Fixture) -> AlignmentInputs<'_> {
        AlignmentInputs {
            sft: &fx.sft,
            prompts: &fx.prompts.align,
            gr: &fx.gr,
            golden: None,
            eval: None,
        }
    }

    fn small(t: usize, f: usize) -> TrainConfig {
        let mut c = TrainConfig::new(t, f, 4);
        c.ensemble = 2;
        c
    }

    fn steps(log: &[MetricRecord]) -> Vec<&StepRecord> {
        log.iter().filter_map(MetricRecord::as_step).collect()
    }

    #[test]
    fn ema_update_examples() {
        let dims = ModelDims::default();
        let mut r = rng::stream(0, "t", 0);
        let mut theta = AdapterSet::init(&dims, 4, 8.0, &mut r);
        for t in theta.tensors_mut() {
            t.fill(1.0);
        }
        let mut shadow = theta.zeros_like();
        ema_update(&mut shadow, &theta, 0.1);
        assert!(shadow.tensors().iter().all(|t| t.iter().all(|&v| v == 0.1)));
        let before = shadow.clone();
        ema_update(&mut shadow, &theta, 0.0);
        assert_eq!(shadow, before);
        ema_update(&mut shadow, &theta, 1.0);
        assert_eq!(shadow, theta);
    }

    #[test]
    fn scheduler_snapshots_and_conserves_pairs() {
        let fx = fixture();
        for f in [1, 2, 3, 6] {
            let cfg = small(6, f);
            let mut log = Vec::new();
            let out = run_alignment(&cfg, &inputs(&fx), &mut log).unwrap();
            let k = cfg.interval();
            let want: Vec<usize> = (0..f).map(|i| i * k).collect();
            assert_eq!(out.snapshot_steps, want);
            let st = steps(&log);
            let events: Vec<usize> = st.iter().filter(|s| s.snapshot_event).map(|s| s.t).collect();
            assert_eq!(events, want);
            assert_eq!(out.pairs.len(), cfg.n_total);
            let last = st.last().unwrap();
            assert_eq!((last.pairs_annotated, last.pairs_consumed, last.pending), (24, 24, 0));
            for s in &st {
                assert_eq!(s.pending, s.pairs_annotated - s.pairs_consumed);
            }
            let mut ids: Vec<u64> = st.iter().flat_map(|s| s.batch_ids.iter().copied()).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), cfg.n_total);
        }
    }

    #[test]
    fn deterministic_metrics() {
        let fx = fixture();
        let cfg = small(4, 2);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        run_alignment(&cfg, &inputs(&fx), &mut a).unwrap();
        run_alignment(&cfg, &inputs(&fx), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offline_behavior_matches_static_sft() {
        let fx = fixture();
        let mut cfg = small(4, 1);
        let mut a = Vec::new();
        run_alignment(&cfg, &inputs(&fx), &mut a).unwrap();
        cfg.ref_mode = RefMode::StaticSft;
        let mut b = Vec::new();
        run_alignment(&cfg, &inputs(&fx), &mut b).unwrap();
        let la: Vec<_> = steps(&a).iter().map(|s| s.loss_per_member.clone()).collect();
        let lb: Vec<_> = steps(&b).iter().map(|s| s.loss_per_member.clone()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn ema_extremes() {
        let fx = fixture();
        for loss in LossKind::ALL {
            let mut cfg = small(4, 2);
            cfg.loss = loss;
            cfg.ref_mode = RefMode::Ema;
            cfg.ema_tau = 1.0;
            let identity = DapLoss::new(loss, cfg.beta).unwrap().identity_value();
            let mut log = Vec::new();
            let mut obs = |tr: &StepTrace<'_>| {
                for q in tr.quads.iter().flatten() {
                    assert_eq!(q.policy_chosen, q.ref_chosen);
                    assert_eq!(q.policy_rejected, q.ref_rejected);
                }
            };
            run_alignment_with(
                &cfg,
                Policy::new(fx.sft.base().clone(), init_ensemble(&fx.dims, 2, 4, 8.0, 0).unwrap()).unwrap(),
                &inputs(&fx),
                &mut log,
                Some(&mut obs),
            )
            .unwrap();
            for s in steps(&log) {
                assert!(
                    s.loss_per_member.iter().all(|&l| l == identity),
                    "{loss}: {:?}",
                    s.loss_per_member
                );
            }
        }

        let mut cfg = small(4, 2);
        cfg.ref_mode = RefMode::Ema;
        cfg.ema_tau = 0.0;
        let mut obs = |tr: &StepTrace<'_>| {
            for (k, ap) in tr.batch.iter().enumerate() {
                let want = (
                    fx.sft.logprob(&ap.pair.x, &ap.pair.y_w),
                    fx.sft.logprob(&ap.pair.x, &ap.pair.y_l),
                );
                for i in 0..2 {
                    let q = tr.quads[i][k];
                    assert_eq!((q.ref_chosen, q.ref_rejected), want);
                }
            }
        };
        let mut log = Vec::new();
        run_alignment_with(
            &cfg,
            Policy::new(fx.sft.base().clone(), init_ensemble(&fx.dims, 2, 4, 8.0, 0).unwrap()).unwrap(),
            &inputs(&fx),
            &mut log,
            Some(&mut obs),
        )
        .unwrap();
    }

    #[test]
    fn member_permutation_permutes_adapters() {
        let fx = fixture();
        let mut cfg = small(4, 1);
        cfg.ensemble = 3;
        let ens = init_ensemble(&fx.dims, 3, 4, 8.0, 11).unwrap();
        let mut perm = ens.clone();
        perm.members.swap(0, 2);
        let a = run_alignment_with(
            &cfg,
            Policy::new(fx.sft.base().clone(), ens).unwrap(),
            &inputs(&fx),
            &mut Vec::new(),
            None,
        )
        .unwrap();
        let b = run_alignment_with(
            &cfg,
            Policy::new(fx.sft.base().clone(), perm).unwrap(),
            &inputs(&fx),
            &mut Vec::new(),
            None,
        )
        .unwrap();
        let (am, bm) = (&a.policy.ensemble.members, &b.policy.ensemble.members);
        assert_eq!(am[0], bm[2]);
        assert_eq!(am[1], bm[1]);
        assert_eq!(am[2], bm[0]);
        assert_ne!(am[0], am[2]);
    }

    #[test]
    fn evals_at_start_interval_and_end() {
        let fx = fixture();
        let mut cfg = small(6, 3);
        cfg.eval_interval = 4;
        let mut inp = inputs(&fx);
        inp.eval = Some(EvalPlan {
            prompts: &fx.prompts.eval,
            references: &fx.refs,
            temperature: 1.0,
            seed: 9,
        });
        let mut log = Vec::new();
        let out = run_alignment(&cfg, &inp, &mut log).unwrap();
        let ts: Vec<usize> = log.iter().filter_map(MetricRecord::as_eval).map(|e| e.t).collect();
        assert_eq!(ts, [0, 4, 6]);
        assert_eq!(
            out.final_win_rate,
            log.last().and_then(MetricRecord::as_eval).map(|e| e.win_rate_vs_ref)
        );
    }

    #[test]
    fn startup_errors() {
        let fx = fixture();
        let mut cfg = small(4, 2);
        cfg.ref_mode = RefMode::StaticGolden;
        cfg.golden = Some("missing.ckpt".into());
        let e = run_alignment(&cfg, &inputs(&fx), &mut Vec::new()).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "train.golden"));

        let cfg = TrainConfig::new(100, 1, 4);
        let e = run_alignment(&cfg, &inputs(&fx), &mut Vec::new()).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "prompts.align"));
    }

    #[test]
    fn golden_reference_is_used() {
        let fx = fixture();
        let golden = PolicySnapshot::from_base(Arc::new(init_base(fx.dims, 99).unwrap()), "golden");
        let mut cfg = small(2, 1);
        cfg.ref_mode = RefMode::StaticGolden;
        cfg.golden = Some("g.ckpt".into());
        let mut inp = inputs(&fx);
        inp.golden = Some(&golden);
        let mut obs = |tr: &StepTrace<'_>| {
            assert_eq!(tr.reference.for_member(0).label(), "golden");
            let ap = &tr.batch[0];
            assert_eq!(tr.quads[1][0].ref_chosen, golden.logprob(&ap.pair.x, &ap.pair.y_w));
        };
        let policy = Policy::new(fx.sft.base().clone(), init_ensemble(&fx.dims, 2, 4, 8.0, 0).unwrap()).unwrap();
        run_alignment_with(&cfg, policy, &inp, &mut Vec::new(), Some(&mut obs)).unwrap();
    }

    #[test]
    fn training_moves_toward_preferred() {
        let fx = fixture();
        let mut cfg = small(16, 1);
        cfg.lr = 5e-2;
        let mut log = Vec::new();
        let out = run_alignment(&cfg, &inputs(&fx), &mut log).unwrap();
        let st = steps(&log);
        assert!((st[0].loss_mean - std::f64::consts::LN_2).abs() < 1e-12);
        // The trained policy separates chosen from rejected on its training pairs.
        let mean_margin = out
            .pairs
            .iter()
            .map(|ap| {
                let p = &ap.pair;
                let lr = |y: &TokenSeq| out.snapshot.logprob(&p.x, y) - fx.sft.logprob(&p.x, y);
                lr(&p.y_w) - lr(&p.y_l)
            })
            .sum::<f64>()
            / out.pairs.len() as f64;
        assert!(mean_margin > 0.0, "{mean_margin}");
    }
}
