//! Closed-loop rollouts in the live simulator and SR / GC / PSR / PGC.

use crate::error::{Error, Result};
use crate::model::{ModelInput, UnitTransformer, START};
use crate::par;
use crate::segmentation::EdhInstance;
use crate::training::argmax;
use crate::world::{self, Action, ActionKind, FailReason, ObjectClass, ObjectId, Observation, Pose, WorldConfig, WorldState};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyAction {
    pub kind: ActionKind,
    pub class: Option<ObjectClass>,
    /// Exact instance, when the policy knows it; otherwise the resolver
    /// picks the nearest visible instance of `class`.
    pub instance: Option<ObjectId>,
}

pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<PolicyAction>;
}

/// Greedy unmasked policy over a trained model. Memory threads across the
/// whole rollout.
pub struct ModelPolicy<'a> {
    model: &'a UnitTransformer,
    dialogue: Vec<u32>,
    prev_action: u32,
    state: Vec<f64>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a UnitTransformer, instance: &EdhInstance) -> Result<Self> {
        Ok(Self {
            model,
            dialogue: model
                .vocab
                .encode_dialogue(&instance.dialogue_history, model.config.max_dialogue)?,
            prev_action: START,
            state: model.initial_state(),
        })
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<PolicyAction> {
        let input = ModelInput::new(self.dialogue.clone(), self.prev_action, obs.detections.clone());
        let out = self.model.predict(&input, &self.state)?;
        let kind = ActionKind::ALL[argmax(&out.action_logits)];
        self.prev_action = self.model.vocab.action_id(kind);
        self.state = out.new_state;
        Ok(PolicyAction {
            kind,
            class: kind
                .is_interaction()
                .then(|| ObjectClass::ALL[argmax(&out.object_logits)]),
            instance: None,
        })
    }
}

/// Replays an instance's future actions with their exact targets.
pub struct ReplayPolicy {
    actions: Vec<Action>,
    classes: Vec<Option<ObjectClass>>,
    next: usize,
}

impl ReplayPolicy {
    pub fn new(instance: &EdhInstance) -> Self {
        let actions: Vec<Action> = instance.future_actions.iter().map(|s| s.action).collect();
        let classes = actions
            .iter()
            .map(|a| a.target.and_then(|t| instance.initial_state.object(t)).map(|o| o.class))
            .collect();
        Self {
            actions,
            classes,
            next: 0,
        }
    }
}

impl Policy for ReplayPolicy {
    fn act(&mut self, _obs: &Observation) -> Result<PolicyAction> {
        let i = self.next;
        self.next += 1;
        Ok(match self.actions.get(i) {
            Some(a) => PolicyAction {
                kind: a.kind,
                class: self.classes[i],
                instance: a.target,
            },
            None => PolicyAction {
                kind: ActionKind::Stop,
                class: None,
                instance: None,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub pose: Pose,
    pub action: Action,
    pub ok: bool,
    pub reason: Option<FailReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub instance_id: String,
    pub steps: Vec<TrajectoryStep>,
    pub final_state: WorldState,
    pub reference_len: usize,
    pub agent_len: usize,
    pub goal_mask: Vec<bool>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cap_factor: usize,
    pub min_cap: usize,
    pub world: WorldConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cap_factor: 2,
            min_cap: 100,
            world: WorldConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn cap(&self, reference_len: usize) -> usize {
        (self.cap_factor * reference_len).max(self.min_cap)
    }
}

/// Nearest visible instance of `class` by grid distance, then lower id.
pub fn resolve_target(obs: &Observation, class: ObjectClass, state: &WorldState) -> Option<ObjectId> {
    let me = obs.pose.cell();
    obs.detections
        .iter()
        .filter(|d| d.label == class)
        .filter_map(|d| {
            let cell = state.object(d.instance_id)?.cell?;
            Some(((cell.0 - me.0).abs() + (cell.1 - me.1).abs(), d.instance_id))
        })
        .min()
        .map(|(_, id)| id)
}

pub fn rollout(policy: &mut dyn Policy, instance: &EdhInstance, cfg: &EvalConfig) -> Result<RolloutRecord> {
    let reference_len = instance.future_actions.len();
    let cap = cfg.cap(reference_len);
    let mut state = instance.initial_state.clone();
    let mut steps = Vec::new();
    let mut truncated = true;
    while steps.len() < cap {
        let obs = world::observe(&state, &cfg.world);
        let pa = policy.act(&obs)?;
        let pose = state.agent;
        if pa.kind == ActionKind::Stop {
            steps.push(TrajectoryStep {
                pose,
                action: Action::STOP,
                ok: true,
                reason: None,
            });
            truncated = false;
            break;
        }
        let target = if pa.kind.is_interaction() {
            pa.instance
                .or_else(|| pa.class.and_then(|c| resolve_target(&obs, c, &state)))
        } else {
            None
        };
        let action = Action {
            kind: pa.kind,
            target,
        };
        let (ok, reason) = if pa.kind.is_interaction() && target.is_none() {
            (false, Some(FailReason::NotVisible))
        } else {
            let (next, r) = world::step(&state, &action, &cfg.world);
            state = next;
            (r.ok, r.reason)
        };
        steps.push(TrajectoryStep {
            pose,
            action,
            ok,
            reason,
        });
    }
    let goal_mask = world::check_goals(&state, &instance.goals)?;
    Ok(RolloutRecord {
        instance_id: instance.instance_id.clone(),
        agent_len: steps.len(),
        steps,
        final_state: state,
        reference_len,
        goal_mask,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sr: f64,
    pub gc: f64,
    pub psr: f64,
    pub pgc: f64,
}

/// `w = L* / max(L*, L̂)`; both lengths zero gives weight 1.
pub fn path_weight(reference_len: usize, agent_len: usize) -> f64 {
    let denom = reference_len.max(agent_len);
    if denom == 0 {
        1.0
    } else {
        reference_len as f64 / denom as f64
    }
}

pub fn metrics(record: &RolloutRecord) -> Result<Metrics> {
    if record.goal_mask.is_empty() {
        return Err(Error::Config(format!(
            "instance {} has no goal conditions",
            record.instance_id
        )));
    }
    let satisfied = record.goal_mask.iter().filter(|&&b| b).count();
    let gc = satisfied as f64 / record.goal_mask.len() as f64;
    let sr = if satisfied == record.goal_mask.len() { 1.0 } else { 0.0 };
    let w = path_weight(record.reference_len, record.agent_len);
    Ok(Metrics {
        sr,
        gc,
        psr: sr * w,
        pgc: gc * w,
    })
}

pub fn cell(main: f64, weighted: f64) -> String {
    format!("{main:.1}({weighted:.1})")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub instances: usize,
    /// Means over instances, scaled by 100.
    pub sr: f64,
    pub gc: f64,
    pub psr: f64,
    pub pgc: f64,
    pub per_instance: Vec<(String, Metrics)>,
}

impl SplitReport {
    pub fn from_records(split: &str, records: &[RolloutRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("evaluation split has no instances"));
        }
        let mut per_instance = Vec::with_capacity(records.len());
        for r in records {
            per_instance.push((r.instance_id.clone(), metrics(r)?));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| per_instance.iter().map(|(_, m)| f(m)).sum::<f64>() / n * 100.0;
        Ok(Self {
            split: split.to_string(),
            instances: records.len(),
            sr: mean(|m| m.sr),
            gc: mean(|m| m.gc),
            psr: mean(|m| m.psr),
            pgc: mean(|m| m.pgc),
            per_instance,
        })
    }

    pub fn sr_cell(&self) -> String {
        cell(self.sr, self.psr)
    }

    pub fn gc_cell(&self) -> String {
        cell(self.gc, self.pgc)
    }
}

/// Splits as column groups, "SR(PSR)  GC(PGC)" under each.
pub fn format_table(reports: &[SplitReport]) -> String {
    let w = 13;
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "");
    for r in reports {
        let _ = write!(out, " | {:^width$}", r.split, width = 2 * w + 1);
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "metric");
    for _ in reports {
        let _ = write!(out, " | {:>w$} {:>w$}", "SR(PSR)", "GC(PGC)");
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "model");
    for r in reports {
        let _ = write!(out, " | {:>w$} {:>w$}", r.sr_cell(), r.gc_cell());
    }
    out.push('\n');
    out
}

pub fn reports_csv(reports: &[SplitReport]) -> String {
    let mut out = String::from("split,instances,sr,psr,gc,pgc\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.split, r.instances, r.sr, r.psr, r.gc, r.pgc
        );
    }
    out
}

/// One JSON object per line: instance id plus its per-step trajectory.
pub fn trajectories_jsonl(records: &[RolloutRecord]) -> Result<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        instance_id: &'a str,
        truncated: bool,
        steps: &'a [TrajectoryStep],
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&Line {
            instance_id: &r.instance_id,
            truncated: r.truncated,
            steps: &r.steps,
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Instances with at least one goal condition; others cannot be scored.
pub fn scorable(instances: &[EdhInstance]) -> Vec<EdhInstance> {
    instances.iter().filter(|e| !e.goals.is_empty()).cloned().collect()
}

/// Model rollouts over `instances`, in parallel when enabled; results keep
/// input order.
pub fn rollout_model(model: &UnitTransformer, instances: &[EdhInstance], cfg: &EvalConfig) -> Result<Vec<RolloutRecord>> {
    par::map(instances, |e| {
        let mut p = ModelPolicy::new(model, e)?;
        rollout(&mut p, e, cfg)
    })
    .into_iter()
    .collect()
}

pub fn rollout_model_sequential(
    model: &UnitTransformer,
    instances: &[EdhInstance],
    cfg: &EvalConfig,
) -> Result<Vec<RolloutRecord>> {
    par::map_sequential(instances, |e| {
        let mut p = ModelPolicy::new(model, e)?;
        rollout(&mut p, e, cfg)
    })
    .into_iter()
    .collect()
}

pub fn evaluate_split(model: &UnitTransformer, split: &str, instances: &[EdhInstance], cfg: &EvalConfig) -> Result<(SplitReport, Vec<RolloutRecord>)> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation split has no instances"));
    }
    let records = rollout_model(model, instances, cfg)?;
    Ok((SplitReport::from_records(split, &records)?, records))
}
