//! Unit-grained and EDH-style segmentation of sessions, plus corpus
//! statistics.
//!
//! A unit is a navigation prefix closed by exactly one interaction. Trailing
//! navigation with no closing interaction becomes a final unit closed by a
//! synthesized `Stop`.

use crate::error::{Error, Result};
use crate::scenegen::{DemoStep, Session, Speaker, Utterance};
use crate::world::{self, Action, ActionKind, GoalCondition, ObjectClass, Pose, WorldConfig, WorldState};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub session_id: String,
    pub index: usize,
}

impl UnitId {
    pub fn new(session_id: impl Into<String>, index: usize) -> Self {
        Self {
            session_id: session_id.into(),
            index,
        }
    }

    /// Filesystem-friendly key.
    pub fn key(&self) -> String {
        format!("{}.u{:03}", self.session_id, self.index)
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session_id, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetInteraction {
    pub kind: ActionKind,
    /// `None` for Stop.
    pub class: Option<ObjectClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitInstance {
    pub unit_id: UnitId,
    pub prev: Option<UnitId>,
    pub next: Option<UnitId>,
    pub initial_state: WorldState,
    /// Dialogue emitted before the unit's first action.
    pub dialogue: Vec<Utterance>,
    /// Navigation prefix followed by the terminal action.
    pub actions: Vec<DemoStep>,
    pub target_pose: Pose,
    pub target_interaction: TargetInteraction,
    /// Offset of the unit's first action in the session demonstration.
    pub start_step: usize,
    /// True when the terminal Stop was synthesized for trailing navigation.
    pub synthesized_stop: bool,
}

impl UnitInstance {
    pub fn start_pose(&self) -> Pose {
        self.initial_state.agent
    }

    pub fn terminal(&self) -> Action {
        self.actions.last().expect("units are never empty").action
    }

    pub fn navigation(&self) -> &[DemoStep] {
        &self.actions[..self.actions.len() - 1]
    }

    pub fn is_chain_head(&self) -> bool {
        self.prev.is_none()
    }

    /// Replays the unit from its initial state, checking that navigation
    /// leaves objects and inventory untouched.
    pub fn replay(&self, cfg: &WorldConfig) -> Result<WorldState> {
        let mut state = self.initial_state.clone();
        for (i, s) in self.actions.iter().enumerate() {
            let (next, r) = world::step(&state, &s.action, cfg);
            if !r.ok || next.agent != s.pose {
                return Err(Error::Replay {
                    step: self.start_step + i,
                    reason: format!("unit {} action {} diverged", self.unit_id, s.action.kind),
                });
            }
            if s.action.kind.is_navigation()
                && (next.objects != state.objects || next.inventory != state.inventory)
            {
                return Err(Error::Replay {
                    step: self.start_step + i,
                    reason: "navigation changed object state".into(),
                });
            }
            state = next;
        }
        Ok(state)
    }
}

/// One unit per interaction; a trailing navigation suffix becomes a final
/// Stop-terminated unit.
pub fn segment_units(session: &Session, cfg: &WorldConfig) -> Result<Vec<UnitInstance>> {
    session.replay(cfg)?;
    let mut spans: Vec<(usize, Vec<DemoStep>, bool)> = Vec::new();
    let mut current: Vec<DemoStep> = Vec::new();
    let mut start = 0;
    for (i, step) in session.demo_actions.iter().enumerate() {
        current.push(*step);
        if step.action.kind.is_interaction() || step.action.kind == ActionKind::Stop {
            spans.push((start, std::mem::take(&mut current), false));
            start = i + 1;
        }
    }
    if !current.is_empty() {
        let pose = current.last().unwrap().pose;
        current.push(DemoStep {
            action: Action::STOP,
            pose,
        });
        spans.push((start, current, true));
    }

    let n = spans.len();
    let id = |k: usize| UnitId::new(session.session_id.clone(), k);
    let mut state = session.scene.clone();
    let mut units = Vec::with_capacity(n);
    for (k, (start, actions, synthesized)) in spans.into_iter().enumerate() {
        let terminal = actions.last().unwrap().action;
        let target_pose = if actions.len() >= 2 {
            actions[actions.len() - 2].pose
        } else {
            state.agent
        };
        let class = terminal
            .target
            .and_then(|t| state.object(t))
            .map(|o| o.class);
        let dialogue = session
            .dialogue
            .iter()
            .filter(|u| u.emitted_before_step <= start)
            .cloned()
            .collect();
        let unit = UnitInstance {
            unit_id: id(k),
            prev: (k > 0).then(|| id(k - 1)),
            next: (k + 1 < n).then(|| id(k + 1)),
            initial_state: state.clone(),
            dialogue,
            actions,
            target_pose,
            target_interaction: TargetInteraction {
                kind: terminal.kind,
                class,
            },
            start_step: start,
            synthesized_stop: synthesized,
        };
        state = unit.replay(cfg)?;
        units.push(unit);
    }
    Ok(units)
}

// ---------------------------------------------------------------------------
// EDH instances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdhInstance {
    pub instance_id: String,
    pub session_id: String,
    pub dialogue_history: Vec<Utterance>,
    pub action_history: Vec<DemoStep>,
    pub future_actions: Vec<DemoStep>,
    pub initial_state: WorldState,
    pub final_state: WorldState,
    /// Session goals that hold in `final_state` but not in `initial_state`.
    pub goals: Vec<GoalCondition>,
}

fn edh_span(
    session: &Session,
    start: usize,
    end: usize,
    index: usize,
    cfg: &WorldConfig,
) -> Result<EdhInstance> {
    let mut state = session.scene.clone();
    let mut initial = None;
    for (i, s) in session.demo_actions[..end].iter().enumerate() {
        if i == start {
            initial = Some(state.clone());
        }
        let (next, r) = world::step(&state, &s.action, cfg);
        if !r.ok {
            return Err(Error::Replay {
                step: i,
                reason: format!("{} failed: {:?}", s.action.kind, r.reason),
            });
        }
        state = next;
    }
    let initial_state = initial.unwrap_or_else(|| state.clone());
    let before = world::check_goals(&initial_state, &session.goals)?;
    let after = world::check_goals(&state, &session.goals)?;
    let goals = session
        .goals
        .iter()
        .zip(before.iter().zip(&after))
        .filter(|(_, (b, a))| **a && !**b)
        .map(|(g, _)| g.clone())
        .collect();
    Ok(EdhInstance {
        instance_id: format!("{}.e{index:02}", session.session_id),
        session_id: session.session_id.clone(),
        dialogue_history: session
            .dialogue
            .iter()
            .filter(|u| u.emitted_before_step <= start)
            .cloned()
            .collect(),
        action_history: session.demo_actions[..start].to_vec(),
        future_actions: session.demo_actions[start..end].to_vec(),
        initial_state,
        final_state: state,
        goals,
    })
}

/// Splits at commander-turn boundaries: each instance spans the actions
/// between consecutive commander utterances.
pub fn segment_edh(session: &Session, cfg: &WorldConfig) -> Result<Vec<EdhInstance>> {
    let n = session.demo_actions.len();
    let mut bounds: Vec<usize> = std::iter::once(0)
        .chain(
            session
                .dialogue
                .iter()
                .filter(|u| u.speaker == Speaker::Commander)
                .map(|u| u.emitted_before_step),
        )
        .filter(|&b| b < n)
        .collect();
    bounds.sort_unstable();
    bounds.dedup();
    let mut out = Vec::with_capacity(bounds.len());
    for (k, &start) in bounds.iter().enumerate() {
        let end = bounds.get(k + 1).copied().unwrap_or(n);
        out.push(edh_span(session, start, end, k, cfg)?);
    }
    Ok(out)
}

/// The whole session as a single instance with an empty action history.
/// Its dialogue history is what was said before the first action.
pub fn whole_session(session: &Session, cfg: &WorldConfig) -> Result<EdhInstance> {
    let mut e = edh_span(session, 0, session.demo_actions.len(), 0, cfg)?;
    e.instance_id = format!("{}.all", session.session_id);
    Ok(e)
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

pub fn dialogue_tokens(dialogue: &[Utterance]) -> usize {
    dialogue.iter().map(|u| u.text.split_whitespace().count()).sum()
}

pub trait InstanceStats {
    fn action_len(&self) -> usize;
    fn dialogue(&self) -> &[Utterance];
}

impl InstanceStats for UnitInstance {
    fn action_len(&self) -> usize {
        self.actions.len()
    }
    fn dialogue(&self) -> &[Utterance] {
        &self.dialogue
    }
}

impl InstanceStats for EdhInstance {
    fn action_len(&self) -> usize {
        self.future_actions.len()
    }
    fn dialogue(&self) -> &[Utterance] {
        &self.dialogue_history
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub count: usize,
    pub mean_action_len: f64,
    pub mean_dialogue_turns: f64,
    pub mean_dialogue_len: f64,
}

pub fn corpus_stats<T: InstanceStats>(instances: &[T]) -> Result<StatsReport> {
    if instances.is_empty() {
        return Err(Error::Empty("statistics need at least one instance"));
    }
    let n = instances.len() as f64;
    let sum = |f: &dyn Fn(&T) -> usize| instances.iter().map(f).sum::<usize>() as f64;
    Ok(StatsReport {
        count: instances.len(),
        mean_action_len: sum(&|i| i.action_len()) / n,
        mean_dialogue_turns: sum(&|i| i.dialogue().len()) / n,
        mean_dialogue_len: sum(&|i| dialogue_tokens(i.dialogue())) / n,
    })
}

/// Per-split statistics laid out with splits as columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsTable {
    pub level: String,
    pub columns: Vec<(String, StatsReport)>,
}

impl StatsTable {
    pub fn to_text(&self) -> String {
        let header = format!("{} instance", self.level);
        let rows: [(&str, Box<dyn Fn(&StatsReport) -> String>); 4] = [
            ("#", Box::new(|r| r.count.to_string())),
            ("Action Length", Box::new(|r| format!("{:.2}", r.mean_action_len))),
            ("# of Dialogue Turns", Box::new(|r| format!("{:.2}", r.mean_dialogue_turns))),
            ("Dialogue Lengths", Box::new(|r| format!("{:.2}", r.mean_dialogue_len))),
        ];
        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap().max(header.len());
        let col_w = self
            .columns
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut out = String::new();
        let _ = write!(out, "{header:<label_w$}");
        for (name, _) in &self.columns {
            let _ = write!(out, " | {name:>col_w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w + self.columns.len() * (col_w + 3)));
        out.push('\n');
        for (label, f) in &rows {
            let _ = write!(out, "{label:<label_w$}");
            for (_, r) in &self.columns {
                let _ = write!(out, " | {:>col_w$}", f(r));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,split,count,action_length,dialogue_turns,dialogue_length\n");
        for (name, r) in &self.columns {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4}",
                self.level, name, r.count, r.mean_action_len, r.mean_dialogue_turns, r.mean_dialogue_len
            );
        }
        out
    }
}
