//! Deterministic household gridworld.
//!
//! The world is a value: [`step`] and [`observe`] are pure functions over a
//! [`WorldState`]. Navigation only ever changes the agent pose, which is what
//! makes per-unit offline panoramas exact (see [`crate::offline_env`]).
//!
//! Conventions:
//! - `hor` is the heading in degrees: 0 faces +y, 90 faces +x, 180 faces -y,
//!   270 faces -x. Turning right adds 90.
//! - `ver` is the pitch in degrees, positive looking down, within [-30, 60].
//! - Interactions reach the agent's own cell and the facing-adjacent cell.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

pub const HEADINGS: [i32; 4] = [0, 90, 180, 270];
pub const PITCHES: [i32; 4] = [-30, 0, 30, 60];
pub const PITCH_STEP: i32 = 30;
pub const MIN_PITCH: i32 = -30;
pub const MAX_PITCH: i32 = 60;

/// Number of geometry scalars appended to every region feature.
pub const GEOMETRY_SCALARS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub hor: i32,
    pub ver: i32,
}

impl Pose {
    pub const fn new(x: i32, y: i32, hor: i32, ver: i32) -> Self {
        Self { x, y, hor, ver }
    }

    pub fn cell(&self) -> (i32, i32) {
        (self.x, self.y)
    }

    pub fn with_cell(self, (x, y): (i32, i32)) -> Self {
        Self { x, y, ..self }
    }

    /// Unit vector of the current heading.
    pub fn facing(&self) -> (i32, i32) {
        heading_delta(self.hor)
    }

    pub fn facing_cell(&self) -> (i32, i32) {
        let (dx, dy) = self.facing();
        (self.x + dx, self.y + dy)
    }

    pub fn is_normalized(&self) -> bool {
        HEADINGS.contains(&self.hor) && PITCHES.contains(&self.ver)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x, self.y, self.hor, self.ver)
    }
}

pub fn heading_delta(hor: i32) -> (i32, i32) {
    match hor.rem_euclid(360) {
        0 => (0, 1),
        90 => (1, 0),
        180 => (0, -1),
        _ => (-1, 0),
    }
}

fn rotate(hor: i32, by: i32) -> i32 {
    (hor + by).rem_euclid(360)
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Traversability mask. Serialized as row-major strings, `.` floor, `#` wall;
/// row `y` is the `y`-th string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    width: i32,
    height: i32,
    walls: Vec<bool>,
}

impl Grid {
    pub fn open(width: i32, height: i32) -> Self {
        assert!(width > 0 && height > 0, "grid must be non-empty");
        Self {
            width,
            height,
            walls: vec![false; (width * height) as usize],
        }
    }

    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidScene("grid has no rows".into()));
        }
        let width = rows[0].as_ref().chars().count();
        if width == 0 {
            return Err(Error::InvalidScene("grid has empty rows".into()));
        }
        let mut walls = Vec::with_capacity(width * rows.len());
        for (y, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != width {
                return Err(Error::InvalidScene(format!("row {y} has ragged width")));
            }
            for c in row.chars() {
                match c {
                    '.' => walls.push(false),
                    '#' => walls.push(true),
                    other => {
                        return Err(Error::InvalidScene(format!("unknown grid glyph {other:?}")))
                    }
                }
            }
        }
        Ok(Self {
            width: width as i32,
            height: rows.len() as i32,
            walls,
        })
    }

    pub fn rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| if self.is_wall((x, y)) { '#' } else { '.' })
                    .collect()
            })
            .collect()
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn in_bounds(&self, (x, y): (i32, i32)) -> bool {
        x >= 0 && y >= 0 && x < self.width && y < self.height
    }

    fn index(&self, (x, y): (i32, i32)) -> usize {
        (y * self.width + x) as usize
    }

    /// Out-of-bounds cells count as walls.
    pub fn is_wall(&self, cell: (i32, i32)) -> bool {
        !self.in_bounds(cell) || self.walls[self.index(cell)]
    }

    pub fn is_floor(&self, cell: (i32, i32)) -> bool {
        !self.is_wall(cell)
    }

    pub fn set_wall(&mut self, cell: (i32, i32), wall: bool) {
        if self.in_bounds(cell) {
            let i = self.index(cell);
            self.walls[i] = wall;
        }
    }

    pub fn floor_cells(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| (x, y)))
            .filter(|&c| self.is_floor(c))
    }

    /// Floor cells 4-connected to `start`, in BFS discovery order.
    pub fn reachable_from(&self, start: (i32, i32)) -> Vec<(i32, i32)> {
        if self.is_wall(start) {
            return Vec::new();
        }
        let mut seen = vec![false; self.walls.len()];
        let mut order = vec![start];
        seen[self.index(start)] = true;
        let mut head = 0;
        while head < order.len() {
            let (x, y) = order[head];
            head += 1;
            for (dx, dy) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                let next = (x + dx, y + dy);
                if self.is_floor(next) && !seen[self.index(next)] {
                    seen[self.index(next)] = true;
                    order.push(next);
                }
            }
        }
        order
    }

    /// True when a wall lies strictly between the two cells on the
    /// Bresenham line joining them.
    pub fn occluded(&self, from: (i32, i32), to: (i32, i32)) -> bool {
        let (mut x, mut y) = from;
        let dx = (to.0 - from.0).abs();
        let dy = -(to.1 - from.1).abs();
        let sx = if from.0 < to.0 { 1 } else { -1 };
        let sy = if from.1 < to.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            if (x, y) == to {
                return false;
            }
            if (x, y) != from && self.is_wall((x, y)) {
                return true;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        Grid::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Objects
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Bread,
    Apple,
    Tomato,
    Potato,
    Mug,
    Cup,
    Knife,
    Kettle,
    Fridge,
    Cabinet,
    Drawer,
    Microwave,
    CounterTop,
    Sink,
    CoffeeMachine,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 15] = [
        ObjectClass::Bread,
        ObjectClass::Apple,
        ObjectClass::Tomato,
        ObjectClass::Potato,
        ObjectClass::Mug,
        ObjectClass::Cup,
        ObjectClass::Knife,
        ObjectClass::Kettle,
        ObjectClass::Fridge,
        ObjectClass::Cabinet,
        ObjectClass::Drawer,
        ObjectClass::Microwave,
        ObjectClass::CounterTop,
        ObjectClass::Sink,
        ObjectClass::CoffeeMachine,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Lower-case token used in dialogue and as the label text.
    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Bread => "bread",
            ObjectClass::Apple => "apple",
            ObjectClass::Tomato => "tomato",
            ObjectClass::Potato => "potato",
            ObjectClass::Mug => "mug",
            ObjectClass::Cup => "cup",
            ObjectClass::Knife => "knife",
            ObjectClass::Kettle => "kettle",
            ObjectClass::Fridge => "fridge",
            ObjectClass::Cabinet => "cabinet",
            ObjectClass::Drawer => "drawer",
            ObjectClass::Microwave => "microwave",
            ObjectClass::CounterTop => "countertop",
            ObjectClass::Sink => "sink",
            ObjectClass::CoffeeMachine => "coffeemachine",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    pub fn default_flags(self) -> ObjectFlags {
        use ObjectClass::*;
        let mut f = ObjectFlags::default();
        match self {
            Bread | Apple | Tomato | Potato => {
                f.portable = true;
                f.sliceable = true;
            }
            Mug | Cup | Kettle => {
                f.portable = true;
                f.fillable = true;
            }
            Knife => {
                f.portable = true;
                f.knife_class = true;
            }
            Fridge | Cabinet | Drawer => {
                f.receptacle = true;
                f.openable = true;
            }
            Microwave => {
                f.receptacle = true;
                f.openable = true;
                f.toggleable = true;
            }
            CounterTop | Sink => f.receptacle = true,
            CoffeeMachine => f.toggleable = true,
        }
        f
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectFlags {
    pub portable: bool,
    pub openable: bool,
    pub toggleable: bool,
    pub sliceable: bool,
    pub receptacle: bool,
    pub knife_class: bool,
    pub fillable: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fill {
    #[default]
    Empty,
    Liquid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectState {
    pub is_open: bool,
    pub is_on: bool,
    pub is_sliced: bool,
    pub fill: Fill,
}

impl ObjectState {
    fn bits(&self) -> u64 {
        (self.is_open as u64)
            | (self.is_on as u64) << 1
            | (self.is_sliced as u64) << 2
            | ((self.fill == Fill::Liquid) as u64) << 3
    }
}

pub type ObjectId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub class: ObjectClass,
    /// `None` only while held by the agent.
    pub cell: Option<(i32, i32)>,
    pub flags: ObjectFlags,
    pub state: ObjectState,
    pub parent: Option<ObjectId>,
}

impl ObjectInstance {
    pub fn new(id: ObjectId, class: ObjectClass, cell: (i32, i32)) -> Self {
        Self {
            id,
            class,
            cell: Some(cell),
            flags: class.default_flags(),
            state: ObjectState::default(),
            parent: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    Forward,
    Backward,
    PanLeft,
    PanRight,
    TurnLeft,
    TurnRight,
    LookUp,
    LookDown,
    PickUp,
    Place,
    Pour,
    Slice,
    Open,
    Close,
    ToggleOn,
    ToggleOff,
    Stop,
}

impl ActionKind {
    pub const ALL: [ActionKind; 17] = [
        ActionKind::Forward,
        ActionKind::Backward,
        ActionKind::PanLeft,
        ActionKind::PanRight,
        ActionKind::TurnLeft,
        ActionKind::TurnRight,
        ActionKind::LookUp,
        ActionKind::LookDown,
        ActionKind::PickUp,
        ActionKind::Place,
        ActionKind::Pour,
        ActionKind::Slice,
        ActionKind::Open,
        ActionKind::Close,
        ActionKind::ToggleOn,
        ActionKind::ToggleOff,
        ActionKind::Stop,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub const NAVIGATION: [ActionKind; 8] = [
        ActionKind::Forward,
        ActionKind::Backward,
        ActionKind::PanLeft,
        ActionKind::PanRight,
        ActionKind::TurnLeft,
        ActionKind::TurnRight,
        ActionKind::LookUp,
        ActionKind::LookDown,
    ];

    pub const INTERACTION: [ActionKind; 8] = [
        ActionKind::PickUp,
        ActionKind::Place,
        ActionKind::Pour,
        ActionKind::Slice,
        ActionKind::Open,
        ActionKind::Close,
        ActionKind::ToggleOn,
        ActionKind::ToggleOff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_navigation(self) -> bool {
        self.index() < 8
    }

    pub fn is_interaction(self) -> bool {
        (8..16).contains(&self.index())
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Forward => "Forward",
            ActionKind::Backward => "Backward",
            ActionKind::PanLeft => "PanLeft",
            ActionKind::PanRight => "PanRight",
            ActionKind::TurnLeft => "TurnLeft",
            ActionKind::TurnRight => "TurnRight",
            ActionKind::LookUp => "LookUp",
            ActionKind::LookDown => "LookDown",
            ActionKind::PickUp => "PickUp",
            ActionKind::Place => "Place",
            ActionKind::Pour => "Pour",
            ActionKind::Slice => "Slice",
            ActionKind::Open => "Open",
            ActionKind::Close => "Close",
            ActionKind::ToggleOn => "ToggleOn",
            ActionKind::ToggleOff => "ToggleOff",
            ActionKind::Stop => "Stop",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ObjectId>,
}

impl Action {
    pub const STOP: Action = Action {
        kind: ActionKind::Stop,
        target: None,
    };

    pub fn nav(kind: ActionKind) -> Self {
        debug_assert!(kind.is_navigation());
        Self { kind, target: None }
    }

    pub fn interact(kind: ActionKind, target: ObjectId) -> Self {
        debug_assert!(kind.is_interaction());
        Self {
            kind,
            target: Some(target),
        }
    }
}

impl From<ActionKind> for Action {
    fn from(kind: ActionKind) -> Self {
        Self { kind, target: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Blocked,
    OutOfBounds,
    PitchLimit,
    NotVisible,
    NotReachable,
    HandsFull,
    HandsEmpty,
    WrongFlags,
    ClosedReceptacle,
    NoKnife,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<FailReason>,
}

impl StepResult {
    pub const OK: StepResult = StepResult {
        ok: true,
        reason: None,
    };

    pub fn fail(reason: FailReason) -> Self {
        Self {
            ok: false,
            reason: Some(reason),
        }
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub scene_id: String,
    pub grid: Grid,
    /// Sorted by id; ids are dense indices.
    pub objects: Vec<ObjectInstance>,
    pub agent: Pose,
    pub inventory: Option<ObjectId>,
}

impl WorldState {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.get(id as usize).filter(|o| o.id == id)
    }

    fn object_mut(&mut self, id: ObjectId) -> &mut ObjectInstance {
        &mut self.objects[id as usize]
    }

    pub fn held(&self) -> Option<&ObjectInstance> {
        self.inventory.and_then(|id| self.object(id))
    }

    pub fn instances_of(&self, class: ObjectClass) -> impl Iterator<Item = &ObjectInstance> {
        self.objects.iter().filter(move |o| o.class == class)
    }

    /// True when some ancestor in the containment chain is a closed openable.
    pub fn is_hidden(&self, id: ObjectId) -> bool {
        let mut cur = self.object(id).and_then(|o| o.parent);
        let mut guard = 0;
        while let Some(pid) = cur {
            let Some(p) = self.object(pid) else { break };
            if p.flags.openable && !p.state.is_open {
                return true;
            }
            cur = p.parent;
            guard += 1;
            if guard > self.objects.len() {
                break;
            }
        }
        false
    }

    /// Hash of grid, objects and inventory. The agent pose is excluded.
    pub fn frozen_hash(&self) -> String {
        #[derive(Serialize)]
        struct Frozen<'a> {
            grid: &'a Grid,
            objects: &'a [ObjectInstance],
            inventory: Option<ObjectId>,
        }
        let bytes = serde_json::to_vec(&Frozen {
            grid: &self.grid,
            objects: &self.objects,
            inventory: self.inventory,
        })
        .expect("state serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidScene(m));
        if !self.agent.is_normalized() {
            return fail(format!("agent pose {} not normalized", self.agent));
        }
        if !self.grid.is_floor(self.agent.cell()) {
            return fail(format!("agent at {} is not on floor", self.agent));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.id as usize != i {
                return fail(format!("object ids must be dense, found {} at {i}", o.id));
            }
            let held = self.inventory == Some(o.id);
            match (o.cell, held) {
                (None, false) => return fail(format!("object {} has no cell", o.id)),
                (Some(_), true) => return fail(format!("held object {} has a cell", o.id)),
                (Some(c), false) if !self.grid.in_bounds(c) => {
                    return fail(format!("object {} out of bounds", o.id))
                }
                _ => {}
            }
            if held && o.parent.is_some() {
                return fail(format!("held object {} has a parent", o.id));
            }
            if let Some(p) = o.parent {
                match self.object(p) {
                    Some(p) if p.flags.receptacle => {}
                    _ => return fail(format!("object {} parent {p} is not a receptacle", o.id)),
                }
            }
        }
        // containment acyclic
        for o in &self.objects {
            let mut cur = o.parent;
            let mut depth = 0;
            while let Some(p) = cur {
                depth += 1;
                if depth > self.objects.len() {
                    return fail(format!("containment cycle through object {}", o.id));
                }
                cur = self.objects[p as usize].parent;
            }
        }
        if let Some(h) = self.inventory {
            if self.object(h).is_none() {
                return fail(format!("inventory references missing object {h}"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// View-cone depth in cells.
    pub view_radius: i32,
    /// Maximum detections kept per observation.
    pub max_detections: usize,
    /// Region feature dimension, including the trailing geometry scalars.
    pub region_dim: usize,
    pub slice_requires_knife: bool,
    pub feature_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            view_radius: 3,
            max_detections: 16,
            region_dim: 32,
            slice_requires_knife: true,
            feature_seed: 19980417,
        }
    }
}

// ---------------------------------------------------------------------------
// Transition function
// ---------------------------------------------------------------------------

/// Pose after a navigation action on `grid`, or the failure reason.
pub fn nav_step(grid: &Grid, pose: Pose, kind: ActionKind) -> std::result::Result<Pose, FailReason> {
    let translate = |dir: i32| {
        let (dx, dy) = heading_delta(dir);
        let next = (pose.x + dx, pose.y + dy);
        if !grid.in_bounds(next) {
            Err(FailReason::OutOfBounds)
        } else if grid.is_wall(next) {
            Err(FailReason::Blocked)
        } else {
            Ok(pose.with_cell(next))
        }
    };
    match kind {
        ActionKind::Forward => translate(pose.hor),
        ActionKind::Backward => translate(rotate(pose.hor, 180)),
        ActionKind::PanLeft => translate(rotate(pose.hor, -90)),
        ActionKind::PanRight => translate(rotate(pose.hor, 90)),
        ActionKind::TurnLeft => Ok(Pose {
            hor: rotate(pose.hor, -90),
            ..pose
        }),
        ActionKind::TurnRight => Ok(Pose {
            hor: rotate(pose.hor, 90),
            ..pose
        }),
        ActionKind::LookUp | ActionKind::LookDown => {
            let delta = if kind == ActionKind::LookUp {
                -PITCH_STEP
            } else {
                PITCH_STEP
            };
            let ver = pose.ver + delta;
            if (MIN_PITCH..=MAX_PITCH).contains(&ver) {
                Ok(Pose { ver, ..pose })
            } else {
                Err(FailReason::PitchLimit)
            }
        }
        _ => panic!("nav_step called with non-navigation action {kind}"),
    }
}

/// Apply `action` to `state`. Failed actions return an unchanged copy.
pub fn step(state: &WorldState, action: &Action, cfg: &WorldConfig) -> (WorldState, StepResult) {
    let kind = action.kind;
    if kind == ActionKind::Stop {
        return (state.clone(), StepResult::OK);
    }
    if kind.is_navigation() {
        return match nav_step(&state.grid, state.agent, kind) {
            Ok(pose) => {
                let mut next = state.clone();
                next.agent = pose;
                (next, StepResult::OK)
            }
            Err(r) => (state.clone(), StepResult::fail(r)),
        };
    }
    let mut next = state.clone();
    match interact(&mut next, action, cfg) {
        Ok(()) => (next, StepResult::OK),
        Err(r) => (state.clone(), StepResult::fail(r)),
    }
}

/// True when `id` can be touched from the agent's pose: on the agent's own
/// cell or the facing cell, not held and not hidden in a closed receptacle.
pub fn within_reach(state: &WorldState, id: ObjectId) -> bool {
    let Some(obj) = state.object(id) else {
        return false;
    };
    let Some(cell) = obj.cell else { return false };
    (cell == state.agent.cell() || cell == state.agent.facing_cell()) && !state.is_hidden(id)
}

fn interact(
    state: &mut WorldState,
    action: &Action,
    cfg: &WorldConfig,
) -> std::result::Result<(), FailReason> {
    use FailReason::*;
    let id = action.target.ok_or(NotVisible)?;
    let obj = state.object(id).ok_or(NotVisible)?.clone();
    if state.inventory == Some(id) {
        return Err(NotVisible);
    }
    let cell = obj.cell.ok_or(NotVisible)?;
    let in_reach = cell == state.agent.cell() || cell == state.agent.facing_cell();
    let flags = obj.flags;

    let required = match action.kind {
        ActionKind::PickUp => flags.portable,
        ActionKind::Place => flags.receptacle,
        ActionKind::Pour => flags.fillable,
        ActionKind::Slice => flags.sliceable,
        ActionKind::Open | ActionKind::Close => flags.openable,
        ActionKind::ToggleOn | ActionKind::ToggleOff => flags.toggleable,
        _ => unreachable!("non-interaction routed to interact"),
    };
    if !required {
        return Err(WrongFlags);
    }
    if !in_reach {
        return Err(NotReachable);
    }
    if state.is_hidden(id) {
        return Err(ClosedReceptacle);
    }

    match action.kind {
        ActionKind::PickUp => {
            if state.inventory.is_some() {
                return Err(HandsFull);
            }
            let o = state.object_mut(id);
            o.cell = None;
            o.parent = None;
            state.inventory = Some(id);
        }
        ActionKind::Place => {
            let held = state.inventory.ok_or(HandsEmpty)?;
            if flags.openable && !obj.state.is_open {
                return Err(ClosedReceptacle);
            }
            let o = state.object_mut(held);
            o.cell = Some(cell);
            o.parent = Some(id);
            state.inventory = None;
        }
        ActionKind::Pour => {
            let held = state.held().ok_or(HandsEmpty)?;
            if !held.flags.fillable || held.state.fill != Fill::Liquid {
                return Err(WrongFlags);
            }
            if obj.state.fill == Fill::Liquid {
                return Err(WrongFlags);
            }
            let held = held.id;
            state.object_mut(held).state.fill = Fill::Empty;
            state.object_mut(id).state.fill = Fill::Liquid;
        }
        ActionKind::Slice => {
            if obj.state.is_sliced {
                return Err(WrongFlags);
            }
            if cfg.slice_requires_knife && !state.held().is_some_and(|h| h.flags.knife_class) {
                return Err(NoKnife);
            }
            state.object_mut(id).state.is_sliced = true;
        }
        ActionKind::Open | ActionKind::Close => {
            let want = action.kind == ActionKind::Open;
            if obj.state.is_open == want {
                return Err(WrongFlags);
            }
            state.object_mut(id).state.is_open = want;
        }
        ActionKind::ToggleOn | ActionKind::ToggleOff => {
            let want = action.kind == ActionKind::ToggleOn;
            if obj.state.is_on == want {
                return Err(WrongFlags);
            }
            state.object_mut(id).state.is_on = want;
        }
        _ => unreachable!(),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Observation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: ObjectClass,
    /// (cx, cy, w, h), normalized.
    pub bbox: [f64; 4],
    pub region_feature: Vec<f64>,
    /// Simulator-side identity; never fed to the model.
    pub instance_id: ObjectId,
}

impl Detection {
    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pose: Pose,
    pub detections: Vec<Detection>,
}

/// Agent-frame offset of `cell`: (depth along heading, lateral to the right).
pub fn relative_offset(pose: &Pose, cell: (i32, i32)) -> (i32, i32) {
    let (fx, fy) = heading_delta(pose.hor);
    let (rx, ry) = heading_delta(rotate(pose.hor, 90));
    let dx = cell.0 - pose.x;
    let dy = cell.1 - pose.y;
    (dx * fx + dy * fy, dx * rx + dy * ry)
}

/// Cells inside the view cone and not occluded by walls.
pub fn visible_cells(grid: &Grid, pose: &Pose, radius: i32) -> Vec<(i32, i32)> {
    let (fx, fy) = pose.facing();
    let (rx, ry) = heading_delta(rotate(pose.hor, 90));
    let mut out = Vec::new();
    for depth in 0..=radius {
        for lateral in -depth..=depth {
            let cell = (
                pose.x + depth * fx + lateral * rx,
                pose.y + depth * fy + lateral * ry,
            );
            if grid.in_bounds(cell) && !grid.occluded(pose.cell(), cell) {
                out.push(cell);
            }
        }
    }
    out
}

/// Box (cx, cy, w, h) for an object at agent-frame offset (depth, lateral)
/// seen with pitch `ver`.
pub fn box_geometry(depth: i32, lateral: i32, ver: i32) -> [f64; 4] {
    let scale = 1.0 / (depth as f64 + 1.0);
    let w = 0.6 * scale;
    let h = 0.6 * scale;
    let cx = (0.5 + 0.5 * lateral as f64 * scale).clamp(0.0, 1.0);
    let cy = (0.5 + 0.15 * scale - 0.1 * (ver / PITCH_STEP) as f64).clamp(0.0, 1.0);
    [cx, cy, w, h]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic region feature: a seeded embedding of (class, state bits)
/// followed by the geometry scalars.
pub fn region_feature(
    cfg: &WorldConfig,
    class: ObjectClass,
    state: &ObjectState,
    bbox: &[f64; 4],
    depth: i32,
    lateral: i32,
) -> Vec<f64> {
    let dim = cfg.region_dim.max(GEOMETRY_SCALARS);
    let key = splitmix64(cfg.feature_seed ^ ((class.index() as u64) << 8 | state.bits()));
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim - GEOMETRY_SCALARS {
        let u = splitmix64(key.wrapping_add(i as u64)) >> 11;
        out.push(u as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
    }
    let r = cfg.view_radius.max(1) as f64;
    out.extend_from_slice(bbox);
    out.push(depth as f64 / r);
    out.push(lateral as f64 / r);
    out
}

/// Symbolic detector over the agent's view cone.
pub fn observe(state: &WorldState, cfg: &WorldConfig) -> Observation {
    let pose = state.agent;
    let cells = visible_cells(&state.grid, &pose, cfg.view_radius);
    let mut detections: Vec<Detection> = state
        .objects
        .iter()
        .filter_map(|o| {
            let cell = o.cell?;
            if !cells.contains(&cell) || state.is_hidden(o.id) {
                return None;
            }
            let (depth, lateral) = relative_offset(&pose, cell);
            let bbox = box_geometry(depth, lateral, pose.ver);
            Some(Detection {
                label: o.class,
                bbox,
                region_feature: region_feature(cfg, o.class, &o.state, &bbox, depth, lateral),
                instance_id: o.id,
            })
        })
        .collect();
    detections.sort_by(|a, b| {
        b.area()
            .total_cmp(&a.area())
            .then(a.instance_id.cmp(&b.instance_id))
    });
    detections.truncate(cfg.max_detections);
    Observation { pose, detections }
}

// ---------------------------------------------------------------------------
// Goals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    In {
        object: ObjectClass,
        receptacle: ObjectClass,
    },
    Sliced {
        object: ObjectClass,
    },
    IsOpen {
        id: ObjectId,
        value: bool,
    },
    IsOn {
        id: ObjectId,
        value: bool,
    },
    Filled {
        object: ObjectClass,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    All,
    Any,
    /// At least `n` instances.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoalCondition {
    pub predicate: Predicate,
    pub quantifier: Quantifier,
}

impl GoalCondition {
    pub fn new(predicate: Predicate, quantifier: Quantifier) -> Self {
        Self {
            predicate,
            quantifier,
        }
    }
}

fn quantify(sat: usize, total: usize, q: Quantifier) -> bool {
    match q {
        Quantifier::All => total > 0 && sat == total,
        Quantifier::Any => sat >= 1,
        Quantifier::Count(n) => sat >= n,
    }
}

pub fn check_goal(state: &WorldState, goal: &GoalCondition) -> Result<bool> {
    let by_class = |class: ObjectClass, test: &dyn Fn(&ObjectInstance) -> bool| {
        let members: Vec<_> = state.instances_of(class).collect();
        if members.is_empty() {
            return Err(Error::UnknownGoalTarget(format!("class {class}")));
        }
        let sat = members.iter().filter(|o| test(o)).count();
        Ok(quantify(sat, members.len(), goal.quantifier))
    };
    let by_id = |id: ObjectId| {
        state
            .object(id)
            .ok_or_else(|| Error::UnknownGoalTarget(format!("object {id}")))
    };
    match goal.predicate {
        Predicate::In { object, receptacle } => {
            if state.instances_of(receptacle).next().is_none() {
                return Err(Error::UnknownGoalTarget(format!("class {receptacle}")));
            }
            by_class(object, &|o| {
                o.parent
                    .and_then(|p| state.object(p))
                    .is_some_and(|p| p.class == receptacle)
            })
        }
        Predicate::Sliced { object } => by_class(object, &|o| o.state.is_sliced),
        Predicate::Filled { object } => by_class(object, &|o| o.state.fill == Fill::Liquid),
        Predicate::IsOpen { id, value } => {
            let o = by_id(id)?;
            if !o.flags.openable {
                return Err(Error::Config(format!("object {id} is not openable")));
            }
            Ok(o.state.is_open == value)
        }
        Predicate::IsOn { id, value } => {
            let o = by_id(id)?;
            if !o.flags.toggleable {
                return Err(Error::Config(format!("object {id} is not toggleable")));
            }
            Ok(o.state.is_on == value)
        }
    }
}

/// One boolean per goal condition.
pub fn check_goals(state: &WorldState, goals: &[GoalCondition]) -> Result<Vec<bool>> {
    goals.iter().map(|g| check_goal(state, g)).collect()
}
