//! Hybrid student/teacher forcing over unit instances, the global state
//! matrix, and epoch orchestration.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInput, TapeOutput, UnitTransformer, START};
use crate::nn::{Gradients, Tape, Tensor, Var};
use crate::offline_env::{env_lookup, PanoramaStore, StoreCache};
use crate::par;
use crate::pathing::{derive_gt_action, DistanceField};
use crate::scenegen::mix_seed;
use crate::segmentation::{UnitId, UnitInstance};
use crate::world::{self, Action, ActionKind, ObjectClass, Observation, Pose};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex, RwLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Student stage up to the step budget, then teacher stage.
    Hybrid,
    /// Teacher stage only, from the unit's start pose.
    TeacherOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitRolloutConfig {
    pub student_extra_steps: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub nav_mask_in_student: bool,
    pub student_loss_weight: f64,
    pub mode: TrainMode,
    /// Units per optimizer step; each unit of a batch runs on its own
    /// replica of the same parameters.
    pub jobs: usize,
}

impl Default for UnitRolloutConfig {
    fn default() -> Self {
        Self {
            student_extra_steps: 5,
            lr: 1e-3,
            epochs: 30,
            seed: 19980417,
            nav_mask_in_student: true,
            student_loss_weight: 1.0,
            mode: TrainMode::Hybrid,
            jobs: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Global state matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub state: Vec<f64>,
    pub action: u32,
}

/// Per-unit initial (state, action) entries. Reads and writes are atomic
/// per entry; the last write wins.
#[derive(Debug, Default)]
pub struct GlobalStateMatrix {
    entries: RwLock<HashMap<UnitId, MatrixEntry>>,
    writes: Mutex<HashMap<UnitId, usize>>,
}

impl GlobalStateMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &UnitId) -> Option<MatrixEntry> {
        self.entries.read().unwrap().get(id).cloned()
    }

    /// The stored entry, or `([CLS] embedding, [Start])`.
    pub fn read_or_default(&self, id: &UnitId, model: &UnitTransformer) -> MatrixEntry {
        self.get(id).unwrap_or_else(|| MatrixEntry {
            state: model.initial_state(),
            action: START,
        })
    }

    pub fn write(&self, id: &UnitId, entry: MatrixEntry) {
        self.entries.write().unwrap().insert(id.clone(), entry);
        *self.writes.lock().unwrap().entry(id.clone()).or_insert(0) += 1;
    }

    pub fn write_count(&self, id: &UnitId) -> usize {
        self.writes.lock().unwrap().get(id).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Single step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Student,
    Teacher,
}

/// Offline environment handle that counts lookups.
#[derive(Debug)]
pub struct CountingEnv<'a> {
    store: &'a PanoramaStore,
    reads: Cell<usize>,
}

impl<'a> CountingEnv<'a> {
    pub fn new(store: &'a PanoramaStore) -> Self {
        Self {
            store,
            reads: Cell::new(0),
        }
    }

    pub fn lookup(&self, pose: &Pose) -> Result<&'a Observation> {
        self.reads.set(self.reads.get() + 1);
        env_lookup(self.store, pose)
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

/// Previous action, memory state on the tape, and current pose.
#[derive(Debug, Clone, Copy)]
pub struct Carry {
    pub prev_action: u32,
    pub state: Var,
    pub pose: Pose,
}

/// What one step is fed. The teacher feed carries its observation as data
/// and has no access to any environment.
pub enum Feed<'a, 'e> {
    Teacher {
        obs: &'a Observation,
        target: Action,
        next_pose: Pose,
    },
    Student {
        env: &'a CountingEnv<'e>,
        field: &'a DistanceField,
        terminal: Action,
        nav_mask: bool,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub out: TapeOutput,
    pub carry: Carry,
    pub action_loss: Var,
    pub object_loss: Option<Var>,
    pub gt: Action,
    pub taken: ActionKind,
    pub moved: bool,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Best navigation action under `logits`.
pub fn masked_nav_argmax(logits: &[f64]) -> ActionKind {
    *ActionKind::NAVIGATION
        .iter()
        .max_by(|a, b| logits[a.index()].total_cmp(&logits[b.index()]).then(b.index().cmp(&a.index())))
        .unwrap()
}

fn target_class(unit: &UnitInstance, action: Action) -> Option<ObjectClass> {
    action
        .target
        .and_then(|t| unit.initial_state.object(t))
        .map(|o| o.class)
}

pub fn single_step(
    model: &UnitTransformer,
    tape: &mut Tape,
    unit: &UnitInstance,
    dialogue: &[u32],
    feed: Feed<'_, '_>,
    carry: Carry,
) -> Result<StepOutcome> {
    match feed {
        Feed::Teacher {
            obs,
            target,
            next_pose,
        } => {
            let input = ModelInput::new(dialogue.to_vec(), carry.prev_action, obs.detections.clone());
            let out = model.forward(tape, &input, carry.state)?;
            let action_loss = tape.cross_entropy(out.action_logits, &[target.kind.index()])?;
            let object_loss = match target_class(unit, target) {
                Some(class) if target.kind.is_interaction() => {
                    Some(tape.cross_entropy(out.object_logits, &[class.index()])?)
                }
                _ => None,
            };
            Ok(StepOutcome {
                out,
                carry: Carry {
                    prev_action: model.vocab.action_id(target.kind),
                    state: out.new_state,
                    pose: next_pose,
                },
                action_loss,
                object_loss,
                gt: target,
                taken: target.kind,
                moved: next_pose != carry.pose,
            })
        }
        Feed::Student {
            env,
            field,
            terminal,
            nav_mask,
        } => {
            let obs = env.lookup(&carry.pose)?;
            let input = ModelInput::new(dialogue.to_vec(), carry.prev_action, obs.detections.clone());
            let out = model.forward(tape, &input, carry.state)?;
            let path = field.path_from(carry.pose)?;
            let gt = derive_gt_action(carry.pose, &path, terminal)?;
            let action_loss = tape.cross_entropy(out.action_logits, &[gt.kind.index()])?;
            let logits = &tape.value(out.action_logits).data;
            let taken = if nav_mask {
                masked_nav_argmax(logits)
            } else {
                ActionKind::ALL[argmax(logits)]
            };
            let next = if taken.is_navigation() {
                world::nav_step(&unit.initial_state.grid, carry.pose, taken).unwrap_or(carry.pose)
            } else {
                carry.pose
            };
            Ok(StepOutcome {
                out,
                carry: Carry {
                    prev_action: model.vocab.action_id(taken),
                    state: out.new_state,
                    pose: next,
                },
                action_loss,
                object_loss: None,
                gt,
                taken,
                moved: next != carry.pose,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Unit training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub pose: Pose,
    pub gt: ActionKind,
    pub taken: ActionKind,
    pub action_loss: f64,
    pub object_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTrace {
    pub unit_id: UnitId,
    pub steps: Vec<StepRecord>,
    pub steps_student: usize,
    pub steps_teacher: usize,
    pub gt_path_len: usize,
    pub budget: usize,
    pub reached_target: bool,
    pub total_loss: f64,
    /// Environment lookups made by student steps.
    pub env_reads_student: usize,
    /// Environment lookups made by teacher steps; zero by construction.
    pub env_reads_teacher: usize,
    /// Lookups used to render the teacher demonstration before the stage.
    pub env_reads_demo: usize,
    /// Student steps after which the object configuration differed from
    /// the frozen unit state.
    pub student_object_changes: usize,
    pub object_loss_terms: usize,
    pub started_from_matrix: bool,
    pub final_action: ActionKind,
    pub final_state: Vec<f64>,
}

/// Supervision for the teacher stage: observations along a planned path
/// followed by the unit's terminal action.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub frames: Vec<(Observation, Action, Pose)>,
}

pub fn prepare_demonstration(
    unit: &UnitInstance,
    env: &CountingEnv<'_>,
    field: &DistanceField,
    from: Pose,
) -> Result<Demonstration> {
    let path = field.path_from(from)?;
    let mut frames = Vec::with_capacity(path.poses.len());
    for (i, pose) in path.poses.iter().enumerate() {
        let obs = env.lookup(pose)?.clone();
        let (target, next) = match path.actions.get(i) {
            Some(&a) => (Action::nav(a), path.poses[i + 1]),
            None => (unit.terminal(), *pose),
        };
        frames.push((obs, target, next));
    }
    Ok(Demonstration { frames })
}

/// Distance fields toward unit targets, shared across epochs.
#[derive(Debug, Default)]
pub struct FieldCache {
    fields: Mutex<HashMap<UnitId, Arc<DistanceField>>>,
}

impl FieldCache {
    pub fn get(&self, unit: &UnitInstance) -> Result<Arc<DistanceField>> {
        if let Some(f) = self.fields.lock().unwrap().get(&unit.unit_id) {
            return Ok(f.clone());
        }
        let f = Arc::new(DistanceField::toward(&unit.initial_state.grid, unit.target_pose)?);
        self.fields
            .lock()
            .unwrap()
            .insert(unit.unit_id.clone(), f.clone());
        Ok(f)
    }
}

/// Runs both stages of one unit and returns the trace and gradients
/// without touching parameters. Writes the detached final carry into the
/// matrix at the next unit.
pub fn unit_gradients(
    model: &UnitTransformer,
    unit: &UnitInstance,
    store: &PanoramaStore,
    matrix: &GlobalStateMatrix,
    field: &DistanceField,
    cfg: &UnitRolloutConfig,
) -> Result<(UnitTrace, Gradients)> {
    if store.unit_id != unit.unit_id {
        return Err(Error::Config(format!(
            "store for {} used with unit {}",
            store.unit_id, unit.unit_id
        )));
    }
    let mut tape = Tape::new();
    let dialogue = model.vocab.encode_dialogue(&unit.dialogue, model.config.max_dialogue)?;
    let entry = matrix.get(&unit.unit_id);
    let started_from_matrix = entry.is_some();
    let (prev_action, state) = match entry {
        Some(e) => (e.action, tape.constant(Tensor::row(e.state))),
        None => (START, model.initial_state_var(&mut tape)?),
    };
    let mut carry = Carry {
        prev_action,
        state,
        pose: unit.start_pose(),
    };
    let gt_path_len = unit.navigation().len();
    let budget = gt_path_len + cfg.student_extra_steps;
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    let mut last_logits = None;
    let student_env = CountingEnv::new(store);
    let mut student_object_changes = 0;
    let mut steps_student = 0;

    if cfg.mode == TrainMode::Hybrid {
        let frozen = &unit.initial_state.objects;
        while steps_student < budget && carry.pose != unit.target_pose {
            let pose = carry.pose;
            let o = single_step(
                model,
                &mut tape,
                unit,
                &dialogue,
                Feed::Student {
                    env: &student_env,
                    field,
                    terminal: unit.terminal(),
                    nav_mask: cfg.nav_mask_in_student,
                },
                carry,
            )?;
            let mut probe = unit.initial_state.clone();
            probe.agent = pose;
            if o.taken.is_navigation() {
                probe = world::step(&probe, &Action::nav(o.taken), &Default::default()).0;
            }
            if &probe.objects != frozen || probe.inventory != unit.initial_state.inventory {
                student_object_changes += 1;
            }
            let weighted = tape.scale(o.action_loss, cfg.student_loss_weight);
            losses.push(weighted);
            steps.push(StepRecord {
                stage: Stage::Student,
                pose,
                gt: o.gt.kind,
                taken: o.taken,
                action_loss: tape.scalar(o.action_loss),
                object_loss: None,
            });
            last_logits = Some(o.out.action_logits);
            carry = o.carry;
            steps_student += 1;
        }
    }
    let reached_target = carry.pose == unit.target_pose;

    let demo_env = CountingEnv::new(store);
    let demo = prepare_demonstration(unit, &demo_env, field, carry.pose)?;
    let mut object_loss_terms = 0;
    for (obs, target, next_pose) in &demo.frames {
        let pose = carry.pose;
        let o = single_step(
            model,
            &mut tape,
            unit,
            &dialogue,
            Feed::Teacher {
                obs,
                target: *target,
                next_pose: *next_pose,
            },
            carry,
        )?;
        losses.push(o.action_loss);
        if let Some(ol) = o.object_loss {
            losses.push(ol);
            object_loss_terms += 1;
        }
        steps.push(StepRecord {
            stage: Stage::Teacher,
            pose,
            gt: target.kind,
            taken: target.kind,
            action_loss: tape.scalar(o.action_loss),
            object_loss: o.object_loss.map(|v| tape.scalar(v)),
        });
        last_logits = Some(o.out.action_logits);
        carry = o.carry;
    }
    let steps_teacher = demo.frames.len();

    let total = tape.add_all(&losses)?;
    let total_loss = tape.scalar(total);
    let final_logits = last_logits.ok_or(Error::Empty("unit produced no steps"))?;
    let final_action = ActionKind::ALL[argmax(&tape.value(final_logits).data)];
    let final_state = tape.value(carry.state).data.clone();
    let grads = tape.backward(total)?;
    if let Some(next) = &unit.next {
        matrix.write(
            next,
            MatrixEntry {
                state: final_state.clone(),
                action: model.vocab.action_id(final_action),
            },
        );
    }
    Ok((
        UnitTrace {
            unit_id: unit.unit_id.clone(),
            steps,
            steps_student,
            steps_teacher,
            gt_path_len,
            budget,
            reached_target,
            total_loss,
            env_reads_student: student_env.reads(),
            env_reads_teacher: 0,
            env_reads_demo: demo_env.reads(),
            student_object_changes,
            object_loss_terms,
            started_from_matrix,
            final_action,
            final_state,
        },
        grads,
    ))
}

/// One unit, one optimizer step.
pub fn train_unit(
    model: &mut UnitTransformer,
    unit: &UnitInstance,
    store: &PanoramaStore,
    matrix: &GlobalStateMatrix,
    cfg: &UnitRolloutConfig,
) -> Result<UnitTrace> {
    let field = DistanceField::toward(&unit.initial_state.grid, unit.target_pose)?;
    let (trace, grads) = unit_gradients(model, unit, store, matrix, &field, cfg)?;
    model.params.accumulate(&grads);
    model.params.sgd_step(cfg.lr)?;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Corpus training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub units: usize,
    pub mean_student_steps: f64,
    pub mean_teacher_steps: f64,
    pub reached_fraction: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_loss,units,mean_student_steps,mean_teacher_steps,reached_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{},{:.4},{:.4},{:.4}",
            self.epoch,
            self.mean_loss,
            self.units,
            self.mean_student_steps,
            self.mean_teacher_steps,
            self.reached_fraction
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub probe_sr: Option<f64>,
    pub jobs: usize,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EpochStats::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{}", e.csv_row());
        }
        out
    }
}

pub type EpochHook<'a> = dyn FnMut(&EpochStats, &UnitTransformer, &[UnitTrace]) -> Result<()> + 'a;
pub type Probe<'a> = dyn Fn(&UnitTransformer) -> Result<f64> + 'a;

/// Seeded unit order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Trains over `units` for `cfg.epochs` epochs. With `jobs == 1` every
/// unit is its own optimizer step and the run is bit-deterministic. With
/// more jobs, each batch of units computes gradients concurrently from
/// the same parameters; gradients are summed in batch order.
pub fn train_corpus(
    model: &mut UnitTransformer,
    units: &[UnitInstance],
    stores: &StoreCache,
    matrix: &GlobalStateMatrix,
    cfg: &UnitRolloutConfig,
    mut on_epoch: Option<&mut EpochHook<'_>>,
    probe: Option<&Probe<'_>>,
) -> Result<TrainingReport> {
    if units.is_empty() {
        return Err(Error::Empty("no units to train on"));
    }
    let fields = FieldCache::default();
    let jobs = cfg.jobs.max(1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(units.len(), cfg.seed, epoch);
        let mut traces = Vec::with_capacity(units.len());
        for batch in order.chunks(jobs) {
            let m: &UnitTransformer = model;
            let results: Vec<Result<(UnitTrace, Gradients)>> = if jobs == 1 {
                par::map_sequential(batch, |&i| run_one(m, &units[i], stores, matrix, &fields, cfg))
            } else {
                par::map(batch, |&i| run_one(m, &units[i], stores, matrix, &fields, cfg))
            };
            let mut sum = Gradients::default();
            for r in results {
                let (t, g) = r?;
                sum.merge(&g);
                traces.push(t);
            }
            model.params.accumulate(&sum);
            model.params.sgd_step(cfg.lr)?;
        }
        let n = traces.len() as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: traces.iter().map(|t| t.total_loss).sum::<f64>() / n,
            units: traces.len(),
            mean_student_steps: traces.iter().map(|t| t.steps_student as f64).sum::<f64>() / n,
            mean_teacher_steps: traces.iter().map(|t| t.steps_teacher as f64).sum::<f64>() / n,
            reached_fraction: traces.iter().filter(|t| t.reached_target).count() as f64 / n,
        };
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(&stats, model, &traces)?;
        }
        epochs.push(stats);
    }
    let probe_sr = match probe {
        Some(p) => Some(p(model)?),
        None => None,
    };
    Ok(TrainingReport {
        epochs,
        probe_sr,
        jobs,
    })
}

fn run_one(
    model: &UnitTransformer,
    unit: &UnitInstance,
    stores: &StoreCache,
    matrix: &GlobalStateMatrix,
    fields: &FieldCache,
    cfg: &UnitRolloutConfig,
) -> Result<(UnitTrace, Gradients)> {
    let store = stores.get(unit)?;
    let field = fields.get(unit)?;
    unit_gradients(model, unit, &store, matrix, &field, cfg)
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rollout: UnitRolloutConfig,
    pub model: ModelConfig,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rollout: UnitRolloutConfig::default(),
            model: ModelConfig::default(),
            checkpoint_every: 10,
        }
    }
}

pub const SEED_ENV: &str = "UNITCRAFT_SEED";

impl TrainConfig {
    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value for {key}: {v}"))
        }
        let r = &mut self.rollout;
        let m = &mut self.model;
        match key {
            "seed" => {
                r.seed = num(key, value)?;
                m.seed = r.seed;
            }
            "lr" => r.lr = num(key, value)?,
            "epochs" => r.epochs = num(key, value)?,
            "student_extra_steps" => r.student_extra_steps = num(key, value)?,
            "nav_mask_in_student" => r.nav_mask_in_student = num(key, value)?,
            "student_loss_weight" => r.student_loss_weight = num(key, value)?,
            "jobs" => r.jobs = num(key, value)?,
            "mode" => {
                r.mode = match value {
                    "hybrid" => TrainMode::Hybrid,
                    "teacher_only" | "teacher" => TrainMode::TeacherOnly,
                    _ => return Err(format!("bad mode {value}")),
                }
            }
            "d_model" => m.d_model = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "layers" => m.layers = num(key, value)?,
            "ffn" => m.ffn = num(key, value)?,
            "max_dialogue" => m.max_dialogue = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// `UNITCRAFT_SEED`, when set, overrides the configured seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim()).map_err(Error::Config)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let r = &self.rollout;
        let m = &self.model;
        let mode = match r.mode {
            TrainMode::Hybrid => "hybrid",
            TrainMode::TeacherOnly => "teacher_only",
        };
        format!(
            "seed={}\nlr={}\nepochs={}\nstudent_extra_steps={}\nnav_mask_in_student={}\nstudent_loss_weight={}\njobs={}\nmode={mode}\nd_model={}\nheads={}\nlayers={}\nffn={}\nmax_dialogue={}\ncheckpoint_every={}\n",
            r.seed, r.lr, r.epochs, r.student_extra_steps, r.nav_mask_in_student, r.student_loss_weight, r.jobs,
            m.d_model, m.heads, m.layers, m.ffn, m.max_dialogue, self.checkpoint_every
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offline_env::build_store;
    use crate::scenegen::{generate_session, GenConfig};
    use crate::segmentation::segment_units;
    use crate::world::WorldConfig;

    fn tiny_model() -> UnitTransformer {
        UnitTransformer::new(ModelConfig {
            d_model: 16,
            heads: 2,
            layers: 2,
            ffn: 32,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn units(seed: u64) -> Vec<UnitInstance> {
        let s = generate_session(&GenConfig {
            rng_seed: seed,
            ..GenConfig::default()
        })
        .unwrap();
        segment_units(&s, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn budget_and_branch_laws_hold() {
        let model = tiny_model();
        let matrix = GlobalStateMatrix::new();
        for seed in 0..4 {
            for u in units(seed) {
                let store = build_store(&u, &WorldConfig::default()).unwrap();
                let field = DistanceField::toward(&u.initial_state.grid, u.target_pose).unwrap();
                let (t, g) = unit_gradients(&model, &u, &store, &matrix, &field, &Default::default()).unwrap();
                assert!(t.steps_student <= t.gt_path_len + 5);
                assert_eq!(t.env_reads_student, t.steps_student);
                assert_eq!(t.env_reads_teacher, 0);
                assert_eq!(t.student_object_changes, 0);
                let interaction = u.terminal().kind.is_interaction();
                assert_eq!(t.object_loss_terms, interaction as usize);
                assert!(t.steps.iter().filter(|s| s.stage == Stage::Student).all(|s| s.taken.is_navigation()));
                let sum: f64 = t.steps.iter().map(|s| s.action_loss + s.object_loss.unwrap_or(0.0)).sum();
                assert!((sum - t.total_loss).abs() < 1e-9 * sum.max(1.0));
                assert!(!g.is_empty());
            }
        }
    }

    #[test]
    fn empty_prefix_unit_goes_straight_to_interaction() {
        let model = tiny_model();
        let u = units(2).into_iter().find(|u| u.navigation().is_empty());
        let Some(u) = u else { return };
        let store = build_store(&u, &WorldConfig::default()).unwrap();
        let field = DistanceField::toward(&u.initial_state.grid, u.target_pose).unwrap();
        let (t, _) = unit_gradients(&model, &u, &store, &GlobalStateMatrix::new(), &field, &Default::default()).unwrap();
        assert_eq!(t.steps_student, 0);
        assert_eq!(t.steps_teacher, 1);
        assert!(t.reached_target);
    }

    #[test]
    fn chain_head_uses_defaults_and_matrix_is_written() {
        let model = tiny_model();
        let us = units(1);
        let matrix = GlobalStateMatrix::new();
        let store = build_store(&us[0], &WorldConfig::default()).unwrap();
        let field = DistanceField::toward(&us[0].initial_state.grid, us[0].target_pose).unwrap();
        let (t, _) = unit_gradients(&model, &us[0], &store, &matrix, &field, &Default::default()).unwrap();
        assert!(!t.started_from_matrix);
        let e = matrix.get(us[0].next.as_ref().unwrap()).unwrap();
        assert_eq!(e.state, t.final_state);
        assert_eq!(e.action, model.vocab.action_id(t.final_action));
        let default = matrix.read_or_default(&us[0].unit_id, &model);
        assert_eq!(default.action, START);
        assert_eq!(default.state, model.initial_state());
    }

    #[test]
    fn matrix_state_carries_no_gradient() {
        // Same values enter either as the live [CLS] parameter (chain head)
        // or as a matrix entry; only the live path sends gradient into the
        // [CLS] row through the state slot.
        let model = tiny_model();
        let u = &units(3)[1];
        let store = build_store(u, &WorldConfig::default()).unwrap();
        let field = DistanceField::toward(&u.initial_state.grid, u.target_pose).unwrap();
        let cfg = UnitRolloutConfig::default();
        let (t_live, g_live) = unit_gradients(&model, u, &store, &GlobalStateMatrix::new(), &field, &cfg).unwrap();
        let matrix = GlobalStateMatrix::new();
        matrix.write(
            &u.unit_id,
            MatrixEntry {
                state: model.initial_state(),
                action: START,
            },
        );
        let (t_mat, g_mat) = unit_gradients(&model, u, &store, &matrix, &field, &cfg).unwrap();
        assert!(t_mat.started_from_matrix);
        assert_eq!(t_live.total_loss, t_mat.total_loss);
        let embed = model.params.id("embed.tokens").unwrap();
        let d = model.d_model();
        let cls = crate::model::CLS as usize;
        let row = |g: &Gradients| g.dense(&model.params, embed)[cls * d..(cls + 1) * d].to_vec();
        assert_ne!(row(&g_live), row(&g_mat));
        let head = model.params.id("head.action.w").unwrap();
        assert_eq!(g_live.dense(&model.params, head), g_mat.dense(&model.params, head));
    }

    #[test]
    fn single_threaded_training_is_deterministic() {
        let us: Vec<UnitInstance> = (0..2).flat_map(units).take(10).collect();
        let cfg = UnitRolloutConfig {
            epochs: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = tiny_model();
            let cache = StoreCache::in_memory(WorldConfig::default());
            let matrix = GlobalStateMatrix::new();
            let r = train_corpus(&mut m, &us, &cache, &matrix, &cfg, None, None).unwrap();
            for u in &us {
                if u.prev.is_some() {
                    assert!(matrix.write_count(&u.unit_id) >= 1);
                }
            }
            (r, m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn student_mask_keeps_navigation() {
        let mut logits = vec![0.0; 17];
        logits[ActionKind::PickUp.index()] = 10.0;
        logits[ActionKind::TurnLeft.index()] = 1.0;
        assert_eq!(masked_nav_argmax(&logits), ActionKind::TurnLeft);
        assert_eq!(ActionKind::ALL[argmax(&logits)], ActionKind::PickUp);
    }

    #[test]
    fn kv_config_roundtrip() {
        let mut c = TrainConfig::default();
        c.apply_kv("seed = 5\nlr=0.01 # faster\nmode=teacher_only\n\nd_model=32").unwrap();
        assert_eq!(c.rollout.seed, 5);
        assert_eq!(c.model.seed, 5);
        assert_eq!(c.rollout.mode, TrainMode::TeacherOnly);
        assert_eq!(c.model.d_model, 32);
        let mut d = TrainConfig::default();
        d.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(c, d);
        assert!(c.apply_kv("bogus=1").is_err());
        assert!(c.apply_kv("lr").is_err());
    }
}
