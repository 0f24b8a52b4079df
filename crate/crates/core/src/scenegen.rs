//! Procedural scenes, compositional household tasks, templated dialogue and
//! oracle demonstrations.
//!
//! Generation is a pure function of [`GenConfig`]: the same config always
//! yields byte-identical sessions. Demonstrations navigate with
//! [`pathing::optimal_path`] and then interact, so every session replays
//! cleanly and ends with all goals satisfied.

use crate::error::{Error, Result};
use crate::par;
use crate::pathing;
use crate::world::{
    self, Action, ActionKind, Fill, GoalCondition, Grid, ObjectClass, ObjectId, ObjectInstance,
    Pose, Predicate, Quantifier, WorldConfig, WorldState, HEADINGS,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    PutAll,
    Slice,
    MakeDrink,
    OpenClose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Terse,
    Chatty,
}

/// When hint utterances are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintTiming {
    Upfront,
    /// Right before the demonstrator starts heading for the hidden object.
    Stepwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hidden {
    /// Each portable is hidden with this probability.
    Fraction(f64),
    /// Exactly this many task objects are hidden; distractors stay visible.
    Exactly(usize),
}

/// The fixed furniture of every layout, one instance each.
pub const FIXTURES: [ObjectClass; 7] = [
    ObjectClass::Fridge,
    ObjectClass::Cabinet,
    ObjectClass::Drawer,
    ObjectClass::Microwave,
    ObjectClass::CounterTop,
    ObjectClass::Sink,
    ObjectClass::CoffeeMachine,
];

const HIDING_PLACES: [ObjectClass; 3] = [ObjectClass::Fridge, ObjectClass::Cabinet, ObjectClass::Drawer];
const OPENABLES: [ObjectClass; 4] = [
    ObjectClass::Fridge,
    ObjectClass::Cabinet,
    ObjectClass::Drawer,
    ObjectClass::Microwave,
];
const DESTINATIONS: [ObjectClass; 5] = [
    ObjectClass::Cabinet,
    ObjectClass::CounterTop,
    ObjectClass::Fridge,
    ObjectClass::Sink,
    ObjectClass::Drawer,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub rng_seed: u64,
    /// Inclusive width range in cells.
    pub width: (i32, i32),
    pub height: (i32, i32),
    pub wall_density: f64,
    /// Portable object counts per class.
    pub objects: BTreeMap<ObjectClass, usize>,
    pub templates: Vec<TaskTemplate>,
    /// Pins the put-all object and receptacle classes.
    pub put_all: Option<(ObjectClass, ObjectClass)>,
    pub hidden: Hidden,
    pub verbosity: Verbosity,
    pub hint_timing: HintTiming,
    /// Append an explicit Stop after the last interaction.
    pub final_stop: bool,
    pub max_retries: usize,
    /// Sessions sharing one layout inside a corpus.
    pub sessions_per_layout: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        let objects = [
            (ObjectClass::Bread, 2),
            (ObjectClass::Apple, 1),
            (ObjectClass::Tomato, 1),
            (ObjectClass::Mug, 1),
            (ObjectClass::Knife, 1),
            (ObjectClass::Kettle, 1),
        ]
        .into_iter()
        .collect();
        Self {
            rng_seed: 19980417,
            width: (5, 7),
            height: (5, 7),
            wall_density: 0.1,
            objects,
            templates: vec![
                TaskTemplate::PutAll,
                TaskTemplate::Slice,
                TaskTemplate::MakeDrink,
                TaskTemplate::OpenClose,
            ],
            put_all: None,
            hidden: Hidden::Fraction(0.3),
            verbosity: Verbosity::Terse,
            hint_timing: HintTiming::Stepwise,
            final_stop: true,
            max_retries: 32,
            sessions_per_layout: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Commander,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub emitted_before_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoStep {
    pub action: Action,
    /// Agent pose after the action.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub template: TaskTemplate,
    pub scene: WorldState,
    pub goals: Vec<GoalCondition>,
    pub dialogue: Vec<Utterance>,
    pub demo_actions: Vec<DemoStep>,
    pub final_state: WorldState,
}

impl Session {
    pub fn interaction_count(&self) -> usize {
        self.demo_actions
            .iter()
            .filter(|s| s.action.kind.is_interaction())
            .count()
    }

    /// Replays the demonstration; every step must succeed, land on the
    /// recorded pose, and end in `final_state`.
    pub fn replay(&self, cfg: &WorldConfig) -> Result<WorldState> {
        let mut state = self.scene.clone();
        for (i, s) in self.demo_actions.iter().enumerate() {
            let (next, r) = world::step(&state, &s.action, cfg);
            if !r.ok {
                return Err(Error::Replay {
                    step: i,
                    reason: format!("{} failed: {:?}", s.action.kind, r.reason),
                });
            }
            if next.agent != s.pose {
                return Err(Error::Replay {
                    step: i,
                    reason: format!("pose {} differs from recorded {}", next.agent, s.pose),
                });
            }
            state = next;
        }
        if state != self.final_state {
            return Err(Error::Replay {
                step: self.demo_actions.len(),
                reason: "final state differs from recorded final state".into(),
            });
        }
        Ok(state)
    }

    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        self.scene.validate()?;
        let end = self.replay(cfg)?;
        let mask = world::check_goals(&end, &self.goals)?;
        if !mask.iter().all(|&b| b) {
            return Err(Error::Replay {
                step: self.demo_actions.len(),
                reason: "goals not satisfied by the demonstration".into(),
            });
        }
        if self
            .dialogue
            .windows(2)
            .any(|w| w[0].emitted_before_step > w[1].emitted_before_step)
        {
            return Err(Error::InvalidScene("dialogue indices decrease".into()));
        }
        Ok(())
    }
}

/// Every word any template can emit, sorted.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec![
        "a", "all", "and", "can", "close", "coffee", "could", "do", "done", "every", "from",
        "hello", "i", "in", "inside", "into", "is", "it", "machine", "make", "move", "ok", "on",
        "open", "place", "please", "pour", "put", "should", "slice", "the", "then", "turn",
        "water", "what", "you", "cut", "drink", "shut", "up",
    ];
    words.extend(ObjectClass::ALL.iter().map(|c| c.name()));
    words.sort_unstable();
    words.dedup();
    words
}

pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Layouts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub scene_id: String,
    pub grid: Grid,
    /// Fixture classes in [`FIXTURES`] order with their cells.
    pub fixtures: Vec<(ObjectClass, (i32, i32))>,
}

pub fn generate_layout(cfg: &GenConfig, seed: u64, scene_id: &str) -> Result<Layout> {
    let portables: usize = cfg.objects.values().sum();
    for attempt in 0..cfg.max_retries.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt as u64));
        let w = rng.gen_range(cfg.width.0..=cfg.width.1.max(cfg.width.0));
        let h = rng.gen_range(cfg.height.0..=cfg.height.1.max(cfg.height.0));
        let mut grid = Grid::open(w, h);
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(cfg.wall_density.clamp(0.0, 0.9)) {
                    grid.set_wall((x, y), true);
                }
            }
        }
        // keep the largest component
        let mut best: Vec<(i32, i32)> = Vec::new();
        let mut assigned = vec![false; (w * h) as usize];
        for c in grid.floor_cells().collect::<Vec<_>>() {
            if assigned[(c.1 * w + c.0) as usize] {
                continue;
            }
            let comp = grid.reachable_from(c);
            for &(x, y) in &comp {
                assigned[(y * w + x) as usize] = true;
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
        if best.len() < FIXTURES.len() + portables.min(4) + 3 {
            continue;
        }
        let keep: std::collections::HashSet<_> = best.iter().copied().collect();
        for y in 0..h {
            for x in 0..w {
                if !keep.contains(&(x, y)) {
                    grid.set_wall((x, y), true);
                }
            }
        }
        let mut cells: Vec<_> = grid.floor_cells().collect();
        cells.shuffle(&mut rng);
        let fixtures = FIXTURES.iter().copied().zip(cells).collect();
        return Ok(Layout {
            scene_id: scene_id.to_string(),
            grid,
            fixtures,
        });
    }
    Err(Error::Generation {
        attempts: cfg.max_retries,
        reason: "could not build a connected layout".into(),
    })
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

struct Builder {
    world: WorldConfig,
    rng: ChaCha8Rng,
    state: WorldState,
    actions: Vec<DemoStep>,
    hints: Vec<(ObjectClass, ObjectClass, usize)>,
}

impl Builder {
    fn fixture(&self, class: ObjectClass) -> ObjectId {
        self.state
            .objects
            .iter()
            .find(|o| o.class == class)
            .map(|o| o.id)
            .expect("every layout has all fixtures")
    }

    fn container_of(&self, id: ObjectId) -> Option<ObjectId> {
        self.state.object(id).and_then(|o| o.parent)
    }

    /// Navigate to the cheapest pose facing `target`, then perform `kind`.
    fn go_interact(&mut self, kind: ActionKind, target: ObjectId) -> Result<()> {
        let cell = self
            .state
            .object(target)
            .and_then(|o| o.cell)
            .ok_or_else(|| Error::InvalidScene(format!("target {target} has no cell")))?;
        let here = self.state.agent;
        let dists = pathing::distances_from(&self.state.grid, here);
        let mut best: Option<(usize, Pose)> = None;
        for hor in HEADINGS {
            let (dx, dy) = world::heading_delta(hor);
            let stand = Pose::new(cell.0 - dx, cell.1 - dy, hor, here.ver);
            if let Some(&d) = dists.get(&stand) {
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, stand));
                }
            }
        }
        if best.is_none() {
            for hor in HEADINGS {
                let stand = Pose::new(cell.0, cell.1, hor, here.ver);
                if let Some(&d) = dists.get(&stand) {
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, stand));
                    }
                }
            }
        }
        let (_, goal) = best.ok_or_else(|| Error::Generation {
            attempts: 1,
            reason: format!("object {target} unreachable"),
        })?;
        let path = pathing::optimal_path(&self.state.grid, here, goal)?;
        for a in path.actions {
            self.act(Action::nav(a))?;
        }
        self.act(Action::interact(kind, target))
    }

    fn act(&mut self, action: Action) -> Result<()> {
        let (next, r) = world::step(&self.state, &action, &self.world);
        if !r.ok {
            return Err(Error::Generation {
                attempts: 1,
                reason: format!("demonstrator action {} failed: {:?}", action.kind, r.reason),
            });
        }
        self.state = next;
        self.actions.push(DemoStep {
            action,
            pose: self.state.agent,
        });
        Ok(())
    }

    /// Open the closed container hiding `id`, if any, emitting a hint first.
    fn reveal(&mut self, id: ObjectId) -> Result<()> {
        let Some(c) = self.container_of(id) else {
            return Ok(());
        };
        if !self.state.is_hidden(id) {
            return Ok(());
        }
        let obj = self.state.object(id).unwrap().class;
        let cont = self.state.object(c).unwrap().class;
        self.hints.push((obj, cont, self.actions.len()));
        self.go_interact(ActionKind::Open, c)
    }
}

fn choose_template(
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaskTemplate> {
    let has = |c: ObjectClass| cfg.objects.get(&c).copied().unwrap_or(0) > 0;
    let feasible: Vec<TaskTemplate> = cfg
        .templates
        .iter()
        .copied()
        .filter(|t| match t {
            TaskTemplate::PutAll => cfg.objects.iter().any(|(c, n)| *n > 0 && c.default_flags().portable),
            TaskTemplate::Slice => {
                has(ObjectClass::Knife) && cfg.objects.iter().any(|(c, n)| *n > 0 && c.default_flags().sliceable)
            }
            TaskTemplate::MakeDrink => has(ObjectClass::Kettle) && has(ObjectClass::Mug),
            TaskTemplate::OpenClose => true,
        })
        .collect();
    if cfg.templates.is_empty() {
        return Err(Error::Config("no task template enabled".into()));
    }
    feasible.choose(rng).copied().ok_or_else(|| Error::Generation {
        attempts: 0,
        reason: "no enabled template is feasible for the configured objects".into(),
    })
}

fn pick_verb<'b>(rng: &mut ChaCha8Rng, options: &[&'b str]) -> &'b str {
    options.choose(rng).copied().unwrap_or("")
}

/// One session on a fixed layout. Errors when the sampled task cannot be
/// demonstrated; callers retry with a fresh seed.
fn session_on_layout(
    cfg: &GenConfig,
    layout: &Layout,
    seed: u64,
    session_id: &str,
) -> Result<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = choose_template(cfg, &mut rng)?;

    let mut objects: Vec<ObjectInstance> = layout
        .fixtures
        .iter()
        .enumerate()
        .map(|(i, &(class, cell))| ObjectInstance::new(i as ObjectId, class, cell))
        .collect();
    let fixture_id = |class: ObjectClass| FIXTURES.iter().position(|&c| c == class).unwrap() as ObjectId;

    // task parameters
    let portable_classes: Vec<ObjectClass> = cfg
        .objects
        .iter()
        .filter(|(c, n)| **n > 0 && c.default_flags().portable)
        .map(|(c, _)| *c)
        .collect();
    let (put_obj, put_dest) = match (template, cfg.put_all) {
        (TaskTemplate::PutAll, Some(pair)) => (Some(pair.0), Some(pair.1)),
        (TaskTemplate::PutAll, None) => (
            portable_classes.choose(&mut rng).copied(),
            DESTINATIONS.choose(&mut rng).copied(),
        ),
        _ => (None, None),
    };
    if let (Some(o), Some(d)) = (put_obj, put_dest) {
        if !o.default_flags().portable || !d.default_flags().receptacle || !FIXTURES.contains(&d) {
            return Err(Error::Config(format!("cannot put {o} into {d}")));
        }
    }
    let slice_obj = (template == TaskTemplate::Slice).then(|| {
        let sliceable: Vec<_> = portable_classes
            .iter()
            .copied()
            .filter(|c| c.default_flags().sliceable)
            .collect();
        *sliceable.choose(&mut rng).unwrap()
    });
    let (open_a, close_b) = if template == TaskTemplate::OpenClose {
        let mut o = OPENABLES.to_vec();
        o.shuffle(&mut rng);
        (Some(o[0]), Some(o[1]))
    } else {
        (None, None)
    };

    // portables
    let mut task_objects: Vec<ObjectId> = Vec::new();
    let mut next_id = objects.len() as ObjectId;
    let mut portable_ids: Vec<(ObjectId, ObjectClass)> = Vec::new();
    for (&class, &count) in &cfg.objects {
        for _ in 0..count {
            portable_ids.push((next_id, class));
            let relevant = match template {
                TaskTemplate::PutAll => Some(class) == put_obj,
                TaskTemplate::Slice => class == ObjectClass::Knife || Some(class) == slice_obj,
                TaskTemplate::MakeDrink => class == ObjectClass::Kettle || class == ObjectClass::Mug,
                TaskTemplate::OpenClose => false,
            };
            if relevant {
                task_objects.push(next_id);
            }
            next_id += 1;
        }
    }
    let hide_set: Vec<ObjectId> = match cfg.hidden {
        Hidden::Exactly(n) => {
            if n > task_objects.len() {
                return Err(Error::Config(format!(
                    "cannot hide {n} of {} task objects",
                    task_objects.len()
                )));
            }
            task_objects[..n].to_vec()
        }
        Hidden::Fraction(p) => portable_ids
            .iter()
            .filter(|_| rng.gen_bool(p.clamp(0.0, 1.0)))
            .map(|(id, _)| *id)
            .collect(),
    };
    let hiding: Vec<ObjectClass> = HIDING_PLACES
        .iter()
        .copied()
        .filter(|c| Some(*c) != put_dest && Some(*c) != close_b && Some(*c) != open_a)
        .collect();
    let fixture_cells: Vec<(i32, i32)> = layout.fixtures.iter().map(|f| f.1).collect();
    let free_cells: Vec<(i32, i32)> = layout
        .grid
        .floor_cells()
        .filter(|c| !fixture_cells.contains(c))
        .collect();
    if free_cells.is_empty() {
        return Err(Error::Generation {
            attempts: 1,
            reason: "no free floor cells".into(),
        });
    }
    for &(id, class) in &portable_ids {
        let mut obj = ObjectInstance::new(id, class, (0, 0));
        if class == ObjectClass::Kettle {
            obj.state.fill = Fill::Liquid;
        }
        let hide = hide_set.contains(&id) && !hiding.is_empty();
        if hide {
            let host = *hiding.choose(&mut rng).unwrap();
            let hid = fixture_id(host);
            obj.parent = Some(hid);
            obj.cell = Some(objects[hid as usize].cell.unwrap());
        } else {
            let on_counter = rng.gen_bool(0.5)
                && !(put_obj == Some(class) && put_dest == Some(ObjectClass::CounterTop));
            if on_counter {
                let cid = fixture_id(ObjectClass::CounterTop);
                obj.parent = Some(cid);
                obj.cell = objects[cid as usize].cell;
            } else {
                obj.cell = Some(*free_cells.choose(&mut rng).unwrap());
            }
        }
        objects.push(obj);
    }

    // template-specific initial states
    if let Some(d) = put_dest {
        let did = fixture_id(d);
        if objects[did as usize].flags.openable {
            objects[did as usize].state.is_open = true;
        }
    }
    if let Some(b) = close_b {
        objects[fixture_id(b) as usize].state.is_open = true;
    }

    let agent_cell = *free_cells.choose(&mut rng).unwrap();
    let agent = Pose::new(agent_cell.0, agent_cell.1, *HEADINGS.choose(&mut rng).unwrap(), 0);
    let scene = WorldState {
        scene_id: layout.scene_id.clone(),
        grid: layout.grid.clone(),
        objects,
        agent,
        inventory: None,
    };
    scene.validate()?;

    let mut b = Builder {
        world: WorldConfig::default(),
        rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD1A1)),
        state: scene.clone(),
        actions: Vec::new(),
        hints: Vec::new(),
    };

    let goals: Vec<GoalCondition>;
    let statement: String;
    // hidden task objects first, then visible ones, each in id order
    let ordered = |ids: &[ObjectId], st: &WorldState| {
        let mut v = ids.to_vec();
        v.sort_by_key(|&id| (!st.is_hidden(id), id));
        v
    };
    match template {
        TaskTemplate::PutAll => {
            let (obj, dest) = (put_obj.unwrap(), put_dest.unwrap());
            let dest_id = b.fixture(dest);
            let targets = ordered(&task_objects, &b.state);
            let n = targets.len();
            for id in targets {
                b.reveal(id)?;
                b.go_interact(ActionKind::PickUp, id)?;
                b.go_interact(ActionKind::Place, dest_id)?;
            }
            goals = (1..=n)
                .map(|k| {
                    let q = if k == n { Quantifier::All } else { Quantifier::Count(k) };
                    GoalCondition::new(Predicate::In { object: obj, receptacle: dest }, q)
                })
                .collect();
            let verb = pick_verb(&mut b.rng, &["put", "place", "move"]);
            let det = pick_verb(&mut b.rng, &["all the", "every"]);
            statement = format!("{verb} {det} {obj} in the {dest}");
        }
        TaskTemplate::Slice => {
            let obj = slice_obj.unwrap();
            let knife = *task_objects
                .iter()
                .find(|&&id| b.state.object(id).unwrap().class == ObjectClass::Knife)
                .unwrap();
            let cands: Vec<ObjectId> = task_objects
                .iter()
                .copied()
                .filter(|&id| b.state.object(id).unwrap().class == obj)
                .collect();
            let victim = *cands.choose(&mut b.rng).unwrap();
            b.reveal(knife)?;
            b.go_interact(ActionKind::PickUp, knife)?;
            b.reveal(victim)?;
            b.go_interact(ActionKind::Slice, victim)?;
            goals = vec![GoalCondition::new(Predicate::Sliced { object: obj }, Quantifier::Any)];
            let verb = pick_verb(&mut b.rng, &["slice", "cut"]);
            statement = format!("{verb} a {obj}");
        }
        TaskTemplate::MakeDrink => {
            let kettle = *task_objects
                .iter()
                .find(|&&id| b.state.object(id).unwrap().class == ObjectClass::Kettle)
                .unwrap();
            let mug = *task_objects
                .iter()
                .find(|&&id| b.state.object(id).unwrap().class == ObjectClass::Mug)
                .unwrap();
            let machine = b.fixture(ObjectClass::CoffeeMachine);
            b.reveal(kettle)?;
            b.go_interact(ActionKind::PickUp, kettle)?;
            b.reveal(mug)?;
            b.go_interact(ActionKind::Pour, mug)?;
            b.go_interact(ActionKind::ToggleOn, machine)?;
            goals = vec![
                GoalCondition::new(Predicate::Filled { object: ObjectClass::Mug }, Quantifier::Any),
                GoalCondition::new(Predicate::IsOn { id: machine, value: true }, Quantifier::All),
            ];
            statement = "pour water from the kettle into the mug then turn on the coffeemachine".into();
        }
        TaskTemplate::OpenClose => {
            let (a, bb) = (open_a.unwrap(), close_b.unwrap());
            let (aid, bid) = (b.fixture(a), b.fixture(bb));
            b.go_interact(ActionKind::Open, aid)?;
            b.go_interact(ActionKind::Close, bid)?;
            goals = vec![
                GoalCondition::new(Predicate::IsOpen { id: aid, value: true }, Quantifier::All),
                GoalCondition::new(Predicate::IsOpen { id: bid, value: false }, Quantifier::All),
            ];
            let verb = pick_verb(&mut b.rng, &["close", "shut"]);
            statement = format!("open the {a} and {verb} the {bb}");
        }
    }
    if cfg.final_stop {
        b.act(Action::STOP)?;
    }

    let initially = world::check_goals(&scene, &goals)?;
    if initially.iter().all(|&g| g) {
        return Err(Error::Generation {
            attempts: 1,
            reason: "task already satisfied".into(),
        });
    }

    // dialogue
    let chatty = cfg.verbosity == Verbosity::Chatty;
    let mut dialogue = Vec::new();
    let say = |speaker, text: String, at| Utterance {
        speaker,
        text,
        emitted_before_step: at,
    };
    if chatty {
        dialogue.push(say(Speaker::Follower, "hello what should i do".into(), 0));
    }
    let polite = if chatty {
        pick_verb(&mut b.rng, &["please ", "can you ", "could you "])
    } else {
        ""
    };
    dialogue.push(say(Speaker::Commander, format!("{polite}{statement}"), 0));
    for &(obj, cont, at) in &b.hints {
        let at = match cfg.hint_timing {
            HintTiming::Upfront => 0,
            HintTiming::Stepwise => at,
        };
        dialogue.push(say(Speaker::Commander, format!("the {obj} is in the {cont}"), at));
        if chatty {
            dialogue.push(say(Speaker::Follower, "ok".into(), at));
        }
    }
    if chatty {
        dialogue.push(say(Speaker::Follower, "done".into(), b.actions.len()));
    }
    dialogue.sort_by_key(|u| u.emitted_before_step);

    let session = Session {
        session_id: session_id.to_string(),
        template,
        final_state: b.state.clone(),
        scene,
        goals,
        dialogue,
        demo_actions: b.actions,
    };
    session.validate(&WorldConfig::default())?;
    Ok(session)
}

fn with_retries<T>(max: usize, mut f: impl FnMut(u64) -> Result<T>) -> Result<T> {
    let mut last = String::new();
    for attempt in 0..max.max(1) {
        match f(attempt as u64) {
            Ok(v) => return Ok(v),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Generation {
        attempts: max,
        reason: last,
    })
}

pub fn generate_session(cfg: &GenConfig) -> Result<Session> {
    let scene_id = format!("scene-{:016x}", cfg.rng_seed);
    with_retries(cfg.max_retries, |attempt| {
        let layout = generate_layout(cfg, mix_seed(cfg.rng_seed, 2 * attempt), &scene_id)?;
        session_on_layout(
            cfg,
            &layout,
            mix_seed(cfg.rng_seed, 2 * attempt + 1),
            &format!("session-{:016x}", cfg.rng_seed),
        )
    })
}

/// Generates a session on an existing layout.
pub fn generate_session_on(cfg: &GenConfig, layout: &Layout, seed: u64, session_id: &str) -> Result<Session> {
    with_retries(cfg.max_retries, |attempt| {
        session_on_layout(cfg, layout, mix_seed(seed, attempt), session_id)
    })
}

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val_seen: f64,
    pub val_unseen: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val_seen: 0.1,
            val_unseen: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValSeen, Split::ValUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_seed: u64,
    pub sessions: usize,
    pub ratios: SplitRatios,
    pub config: GenConfig,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub scenes: BTreeMap<Split, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Session>,
    pub val_seen: Vec<Session>,
    pub val_unseen: Vec<Session>,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Session] {
        match split {
            Split::Train => &self.train,
            Split::ValSeen => &self.val_seen,
            Split::ValUnseen => &self.val_unseen,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            write_jsonl(&dir.join(format!("{}.jsonl", split.name())), self.split(split))?;
        }
        let mut f = std::fs::File::create(dir.join("MANIFEST.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(dir.join("MANIFEST.json"))?))?;
        let load = |s: Split| read_jsonl::<Session>(&dir.join(format!("{}.jsonl", s.name())));
        Ok(Self {
            train: load(Split::Train)?,
            val_seen: load(Split::ValSeen)?,
            val_unseen: load(Split::ValUnseen)?,
            manifest,
        })
    }
}

/// Expected unit-level figures computed directly from demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub sessions: usize,
    pub units: usize,
    pub unit_actions: usize,
}

pub fn summarize(sessions: &[Session]) -> CorpusSummary {
    let mut units = 0;
    let mut unit_actions = 0;
    for s in sessions {
        let interactions = s.interaction_count();
        let last_terminal = s
            .demo_actions
            .last()
            .is_some_and(|d| d.action.kind.is_interaction() || d.action.kind == ActionKind::Stop);
        let stop_terminal = s.demo_actions.iter().filter(|d| d.action.kind == ActionKind::Stop).count();
        let trailing = usize::from(!last_terminal);
        units += interactions + stop_terminal + trailing;
        unit_actions += s.demo_actions.len() + trailing;
    }
    CorpusSummary {
        sessions: sessions.len(),
        units,
        unit_actions,
    }
}

fn split_counts(n: usize, r: SplitRatios) -> Result<(usize, usize, usize)> {
    let parts = [r.train, r.val_seen, r.val_unseen];
    if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {parts:?} must be in [0,1] and sum to 1")));
    }
    let train = (n as f64 * r.train).round() as usize;
    let val_seen = (n as f64 * r.val_seen).round() as usize;
    if train + val_seen > n {
        return Err(Error::Config(format!("n={n} too small for ratios {parts:?}")));
    }
    let val_unseen = n - train - val_seen;
    let counts = [train, val_seen, val_unseen];
    if parts.iter().zip(counts).any(|(p, c)| *p > 0.0 && c == 0) || (val_seen > 0 && train == 0) {
        return Err(Error::Config(format!("n={n} too small to honor ratios {parts:?}")));
    }
    Ok((train, val_seen, val_unseen))
}

pub fn generate_corpus(cfg: &GenConfig, n: usize, ratios: SplitRatios) -> Result<Corpus> {
    let (n_train, n_vs, n_vu) = split_counts(n, ratios)?;
    let spl = cfg.sessions_per_layout.max(1);
    let seen_layouts = n_train.div_ceil(spl).max(1);
    let unseen_layouts = n_vu.div_ceil(spl);
    let layouts: Vec<Result<Layout>> = par::map_range(seen_layouts + unseen_layouts, |i| {
        generate_layout(
            cfg,
            mix_seed(cfg.rng_seed ^ 0x1A70_57, i as u64),
            &format!("scene-{i:04}"),
        )
    });
    let layouts: Vec<Layout> = layouts.into_iter().collect::<Result<_>>()?;

    let mut jobs: Vec<(Split, usize, usize)> = Vec::with_capacity(n);
    for j in 0..n_train {
        jobs.push((Split::Train, j, j % seen_layouts));
    }
    for j in 0..n_vs {
        jobs.push((Split::ValSeen, j, j % seen_layouts.min(n_train)));
    }
    for j in 0..n_vu {
        jobs.push((Split::ValUnseen, j, seen_layouts + j % unseen_layouts));
    }
    let sessions: Vec<Result<Session>> = par::map_range(jobs.len(), |g| {
        let (split, j, layout) = jobs[g];
        let id = format!("{}-{j:05}", split.name());
        generate_session_on(cfg, &layouts[layout], mix_seed(cfg.rng_seed, g as u64), &id)
    });
    let mut train = Vec::new();
    let mut val_seen = Vec::new();
    let mut val_unseen = Vec::new();
    for (s, (split, _, _)) in sessions.into_iter().zip(&jobs) {
        let s = s?;
        match split {
            Split::Train => train.push(s),
            Split::ValSeen => val_seen.push(s),
            Split::ValUnseen => val_unseen.push(s),
        }
    }
    let ids = |v: &[Session]| v.iter().map(|s| s.session_id.clone()).collect::<Vec<_>>();
    let scenes = |v: &[Session]| {
        let mut s: Vec<String> = v.iter().map(|s| s.scene.scene_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    let manifest = Manifest {
        generator_seed: cfg.rng_seed,
        sessions: n,
        ratios,
        config: cfg.clone(),
        splits: [
            (Split::Train, ids(&train)),
            (Split::ValSeen, ids(&val_seen)),
            (Split::ValUnseen, ids(&val_unseen)),
        ]
        .into_iter()
        .collect(),
        scenes: [
            (Split::Train, scenes(&train)),
            (Split::ValSeen, scenes(&val_seen)),
            (Split::ValUnseen, scenes(&val_unseen)),
        ]
        .into_iter()
        .collect(),
    };
    Ok(Corpus {
        train,
        val_seen,
        val_unseen,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// JSON-lines
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &Session) -> Vec<ActionKind> {
        s.demo_actions
            .iter()
            .map(|d| d.action.kind)
            .filter(|k| k.is_interaction())
            .collect()
    }

    #[test]
    fn put_all_bread_with_one_hidden() {
        let cfg = GenConfig {
            rng_seed: 7,
            objects: [(ObjectClass::Bread, 2)].into_iter().collect(),
            templates: vec![TaskTemplate::PutAll],
            put_all: Some((ObjectClass::Bread, ObjectClass::Cabinet)),
            hidden: Hidden::Exactly(1),
            ..GenConfig::default()
        };
        let s = generate_session(&cfg).unwrap();
        use ActionKind::*;
        assert_eq!(kinds(&s), vec![Open, PickUp, Place, PickUp, Place]);
        assert!(s.dialogue.iter().any(|u| u.text.contains("bread is in the")));
    }

    #[test]
    fn open_close_without_portables() {
        let cfg = GenConfig {
            rng_seed: 3,
            objects: BTreeMap::new(),
            templates: vec![TaskTemplate::OpenClose],
            ..GenConfig::default()
        };
        let s = generate_session(&cfg).unwrap();
        assert_eq!(kinds(&s), vec![ActionKind::Open, ActionKind::Close]);
    }

    #[test]
    fn sessions_are_deterministic_and_valid() {
        for seed in 0..20 {
            let cfg = GenConfig {
                rng_seed: seed,
                ..GenConfig::default()
            };
            let a = serde_json::to_string(&generate_session(&cfg).unwrap()).unwrap();
            let b = serde_json::to_string(&generate_session(&cfg).unwrap()).unwrap();
            assert_eq!(a, b);
            let s: Session = serde_json::from_str(&a).unwrap();
            s.validate(&WorldConfig::default()).unwrap();
        }
    }

    #[test]
    fn infeasible_templates_error() {
        let cfg = GenConfig {
            objects: BTreeMap::new(),
            templates: vec![TaskTemplate::Slice],
            ..GenConfig::default()
        };
        assert!(generate_session(&cfg).is_err());
        let none = GenConfig {
            templates: vec![],
            ..GenConfig::default()
        };
        assert!(matches!(generate_session(&none), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_split_sizes_and_scene_holdout() {
        let c = generate_corpus(&GenConfig::default(), 100, SplitRatios::default()).unwrap();
        assert_eq!((c.train.len(), c.val_seen.len(), c.val_unseen.len()), (80, 10, 10));
        let train_scenes = &c.manifest.scenes[&Split::Train];
        for s in &c.manifest.scenes[&Split::ValUnseen] {
            assert!(!train_scenes.contains(s));
        }
        for s in &c.manifest.scenes[&Split::ValSeen] {
            assert!(train_scenes.contains(s));
        }
    }

    #[test]
    fn corpus_rejects_bad_ratios() {
        let cfg = GenConfig::default();
        let bad = SplitRatios {
            train: 0.5,
            val_seen: 0.1,
            val_unseen: 0.1,
        };
        assert!(generate_corpus(&cfg, 10, bad).is_err());
        assert!(generate_corpus(&cfg, 3, SplitRatios::default()).is_err());
    }
}
