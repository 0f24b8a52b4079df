//! Shortest navigation paths over the pose graph.
//!
//! Nodes are full poses `(x, y, hor, ver)`; edges are the eight navigation
//! actions under [`world::nav_step`]. Every edge costs one step. Paths are
//! the lexicographically smallest optimal action sequence under
//! [`TIE_ORDER`], so equal inputs always give equal paths.

use crate::error::{Error, Result};
use crate::world::{self, Action, ActionKind, Grid, Pose, HEADINGS, PITCHES};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

pub const TIE_ORDER: [ActionKind; 8] = [
    ActionKind::Forward,
    ActionKind::TurnLeft,
    ActionKind::TurnRight,
    ActionKind::Backward,
    ActionKind::PanLeft,
    ActionKind::PanRight,
    ActionKind::LookUp,
    ActionKind::LookDown,
];

const UNREACHED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosePath {
    pub poses: Vec<Pose>,
    pub actions: Vec<ActionKind>,
    pub cost: usize,
}

impl PosePath {
    pub fn start(&self) -> Pose {
        self.poses[0]
    }

    pub fn end(&self) -> Pose {
        *self.poses.last().expect("path has at least one pose")
    }

    pub fn arrows(&self) -> String {
        let mut out = String::new();
        for (pose, action) in self.poses.iter().zip(&self.actions) {
            let _ = write!(out, "{pose} --{action}--> ");
        }
        let _ = write!(out, "{}", self.end());
        out
    }
}

fn pose_slot(grid: &Grid, p: Pose) -> Option<usize> {
    if !grid.in_bounds(p.cell()) {
        return None;
    }
    let h = HEADINGS.iter().position(|&v| v == p.hor)?;
    let v = PITCHES.iter().position(|&v| v == p.ver)?;
    let cell = (p.y * grid.width() + p.x) as usize;
    Some(cell * 16 + h * 4 + v)
}

fn successors(grid: &Grid, p: Pose) -> impl Iterator<Item = (ActionKind, Pose)> + '_ {
    TIE_ORDER
        .into_iter()
        .filter_map(move |a| world::nav_step(grid, p, a).ok().map(|q| (a, q)))
}

/// Step counts from every pose to a fixed target.
#[derive(Debug, Clone)]
pub struct DistanceField {
    grid: Grid,
    target: Pose,
    dist: Vec<u32>,
}

impl DistanceField {
    pub fn toward(grid: &Grid, target: Pose) -> Result<Self> {
        let target_slot = pose_slot(grid, target)
            .filter(|_| grid.is_floor(target.cell()))
            .ok_or_else(|| Error::Config(format!("target pose {target} is not a floor pose")))?;
        let n = (grid.width() * grid.height()) as usize * 16;
        let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n];
        for cell in grid.floor_cells() {
            for hor in HEADINGS {
                for ver in PITCHES {
                    let p = Pose::new(cell.0, cell.1, hor, ver);
                    let ps = pose_slot(grid, p).unwrap();
                    for (_, q) in successors(grid, p) {
                        preds[pose_slot(grid, q).unwrap()].push(ps as u32);
                    }
                }
            }
        }
        let mut dist = vec![UNREACHED; n];
        dist[target_slot] = 0;
        let mut queue = VecDeque::from([target_slot]);
        while let Some(s) = queue.pop_front() {
            let d = dist[s] + 1;
            for &p in &preds[s] {
                if dist[p as usize] == UNREACHED {
                    dist[p as usize] = d;
                    queue.push_back(p as usize);
                }
            }
        }
        Ok(Self {
            grid: grid.clone(),
            target,
            dist,
        })
    }

    pub fn target(&self) -> Pose {
        self.target
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn distance(&self, from: Pose) -> Option<usize> {
        let slot = pose_slot(&self.grid, from)?;
        match self.dist[slot] {
            UNREACHED => None,
            d => Some(d as usize),
        }
    }

    /// First action of the optimal path from `from`; `None` at the target
    /// or when the target is unreachable.
    pub fn next_action(&self, from: Pose) -> Option<(ActionKind, Pose)> {
        let d = self.distance(from)?;
        if d == 0 {
            return None;
        }
        successors(&self.grid, from).find(|(_, q)| self.distance(*q) == Some(d - 1))
    }

    pub fn path_from(&self, from: Pose) -> Result<PosePath> {
        if self.distance(from).is_none() {
            return Err(Error::NoPath {
                from,
                to: self.target,
            });
        }
        let mut poses = vec![from];
        let mut actions = Vec::new();
        let mut cur = from;
        while let Some((a, next)) = self.next_action(cur) {
            actions.push(a);
            poses.push(next);
            cur = next;
        }
        Ok(PosePath {
            cost: actions.len(),
            poses,
            actions,
        })
    }
}

/// Step counts from `from` to every pose (forward BFS).
pub fn distances_from(grid: &Grid, from: Pose) -> HashMap<Pose, usize> {
    let mut dist = HashMap::new();
    if pose_slot(grid, from).is_none() || grid.is_wall(from.cell()) {
        return dist;
    }
    dist.insert(from, 0);
    let mut queue = VecDeque::from([from]);
    while let Some(p) = queue.pop_front() {
        let d = dist[&p] + 1;
        for (_, q) in successors(grid, p) {
            dist.entry(q).or_insert_with(|| {
                queue.push_back(q);
                d
            });
        }
    }
    dist
}

pub fn optimal_path(grid: &Grid, from: Pose, to: Pose) -> Result<PosePath> {
    if pose_slot(grid, from).is_none() || grid.is_wall(from.cell()) {
        return Err(Error::NoPath { from, to });
    }
    DistanceField::toward(grid, to)
        .map_err(|_| Error::NoPath { from, to })?
        .path_from(from)
}

/// Supervision target at `current`: the first action of `path`, or the
/// unit's `terminal` action once the path is exhausted.
pub fn derive_gt_action(current: Pose, path: &PosePath, terminal: Action) -> Result<Action> {
    if path.poses.first() != Some(&current) {
        return Err(Error::PathMismatch { current });
    }
    Ok(match path.actions.first() {
        Some(&kind) => Action::nav(kind),
        None => terminal,
    })
}

/// Per-grid planner with a memoized distance field per target.
#[derive(Debug)]
pub struct Planner {
    grid: Grid,
    cache: Mutex<HashMap<Pose, Arc<DistanceField>>>,
}

impl Planner {
    pub fn new(grid: Grid) -> Self {
        Self {
            grid,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn field(&self, target: Pose) -> Result<Arc<DistanceField>> {
        if let Some(f) = self.cache.lock().unwrap().get(&target) {
            return Ok(f.clone());
        }
        let field = Arc::new(DistanceField::toward(&self.grid, target)?);
        Ok(self
            .cache
            .lock()
            .unwrap()
            .entry(target)
            .or_insert(field)
            .clone())
    }

    pub fn path(&self, from: Pose, to: Pose) -> Result<PosePath> {
        self.field(to)?.path_from(from)
    }
}
