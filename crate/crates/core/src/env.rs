//! Deterministic door-gated gridworld.
//!
//! The level is a multi-room maze with one spawn, one goal and a corridor
//! shortcut that is sealed behind doors. Opening a door requires the `OPEN`
//! action executed while directly facing it, so only agents that own `OPEN`
//! can ever enter corridor cells. Reward is sparse: 1 exactly when the goal is
//! reached, 0 otherwise.
//!
//! Map files are UTF-8 text, one row per line, using the alphabet
//! `#` wall, `.` floor, `D` door, `S` spawn, `G` goal, `C` corridor floor.
//! Short rows are padded with walls.

use std::collections::{HashSet, VecDeque};

use ndarray::Array1;
use thiserror::Error;

use crate::skills::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Floor,
    Door,
    Spawn,
    Goal,
}

/// Heading of the agent. `Forward` moves one cell along this direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orient {
    North,
    East,
    South,
    West,
}

impl Orient {
    pub fn index(self) -> usize {
        match self {
            Orient::North => 0,
            Orient::East => 1,
            Orient::South => 2,
            Orient::West => 3,
        }
    }

    /// (dx, dy) with y growing downwards.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Orient::North => (0, -1),
            Orient::East => (1, 0),
            Orient::South => (0, 1),
            Orient::West => (-1, 0),
        }
    }

    pub fn turned_left(self) -> Orient {
        match self {
            Orient::North => Orient::West,
            Orient::West => Orient::South,
            Orient::South => Orient::East,
            Orient::East => Orient::North,
        }
    }

    pub fn turned_right(self) -> Orient {
        match self {
            Orient::North => Orient::East,
            Orient::East => Orient::South,
            Orient::South => Orient::West,
            Orient::West => Orient::North,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("map has no goal cell")]
    MissingGoal,
    #[error("map has no spawn cell")]
    MissingSpawn,
    #[error("map has more than one spawn cell")]
    MultipleSpawns,
    #[error("map has more than one goal cell")]
    MultipleGoals,
    #[error("map text holds no rows")]
    NonRectangular,
    #[error("unknown map character `{ch}` at ({x},{y})")]
    UnknownCharacter { ch: char, x: usize, y: usize },
    #[error("goal is unreachable from spawn even with all doors open")]
    UnreachableGoal,
    #[error("map must be at least 3x3")]
    TooSmall,
    #[error("border cell ({0},{1}) is not a wall")]
    OpenBorder(usize, usize),
    #[error("door at ({0},{1}) does not gate a passage")]
    DoorNotGating(usize, usize),
    #[error("corridor cell ({0},{1}) is reachable from spawn without passing a door")]
    CorridorNotGated(usize, usize),
}

/// Static level geometry. Immutable and freely shareable across runners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    spawn: (usize, usize),
    goal: (usize, usize),
    corridor_cells: HashSet<(usize, usize)>,
    door_cells: Vec<(usize, usize)>,
}

impl GridMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spawn(&self) -> (usize, usize) {
        self.spawn
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn corridor_cells(&self) -> &HashSet<(usize, usize)> {
        &self.corridor_cells
    }

    /// Door cells in row-major order; the position in this slice is the door
    /// id indexing `EnvState::doors_open`.
    pub fn door_cells(&self) -> &[(usize, usize)] {
        &self.door_cells
    }

    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.width + x]
    }

    pub fn door_index(&self, x: usize, y: usize) -> Option<usize> {
        self.door_cells.iter().position(|&c| c == (x, y))
    }

    fn neighbor(&self, (x, y): (usize, usize), (dx, dy): (isize, isize)) -> Option<(usize, usize)> {
        let nx = x.checked_add_signed(dx)?;
        let ny = y.checked_add_signed(dy)?;
        (nx < self.width && ny < self.height).then_some((nx, ny))
    }

    /// Cell the agent would enter when moving forward from `pos` along
    /// `orient`, ignoring passability.
    pub fn faced_cell(&self, pos: (usize, usize), orient: Orient) -> Option<(usize, usize)> {
        self.neighbor(pos, orient.delta())
    }

    /// Whether `pos` can be stood on given the current door states.
    pub fn is_walkable(&self, (x, y): (usize, usize), doors_open: &[bool]) -> bool {
        match self.cell(x, y) {
            Cell::Wall => false,
            Cell::Floor | Cell::Spawn | Cell::Goal => true,
            Cell::Door => self.door_index(x, y).map(|d| doors_open[d]).unwrap_or(false),
        }
    }

    fn is_statically_walkable(&self, (x, y): (usize, usize), doors_passable: bool) -> bool {
        match self.cell(x, y) {
            Cell::Wall => false,
            Cell::Door => doors_passable,
            _ => true,
        }
    }

    /// Breadth-first shortest path length in moves between two cells, with
    /// doors treated as either all open or all closed. `None` when
    /// unreachable.
    pub fn shortest_path_len(
        &self,
        from: (usize, usize),
        to: (usize, usize),
        doors_passable: bool,
    ) -> Option<usize> {
        if from == to {
            return Some(0);
        }
        let mut dist = vec![usize::MAX; self.cells.len()];
        let mut queue = VecDeque::new();
        dist[from.1 * self.width + from.0] = 0;
        queue.push_back(from);
        while let Some(cur) = queue.pop_front() {
            let d = dist[cur.1 * self.width + cur.0];
            for delta in [(0isize, -1isize), (1, 0), (0, 1), (-1, 0)] {
                if let Some(next) = self.neighbor(cur, delta) {
                    if !self.is_statically_walkable(next, doors_passable) {
                        continue;
                    }
                    let slot = &mut dist[next.1 * self.width + next.0];
                    if *slot == usize::MAX {
                        *slot = d + 1;
                        if next == to {
                            return Some(d + 1);
                        }
                        queue.push_back(next);
                    }
                }
            }
        }
        None
    }

    /// All cells reachable from spawn, with doors all open or all closed.
    pub fn reachable_from_spawn(&self, doors_passable: bool) -> HashSet<(usize, usize)> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert(self.spawn);
        queue.push_back(self.spawn);
        while let Some(cur) = queue.pop_front() {
            for delta in [(0isize, -1isize), (1, 0), (0, 1), (-1, 0)] {
                if let Some(next) = self.neighbor(cur, delta) {
                    if self.is_statically_walkable(next, doors_passable) && seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        seen
    }
}

/// Parses a map from its text form and validates every geometry invariant.
pub fn parse_map(text: &str) -> Result<GridMap, MapError> {
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .skip_while(|l| l.is_empty())
        .collect();
    let lines: Vec<&str> = {
        let mut v = lines;
        while v.last().is_some_and(|l| l.is_empty()) {
            v.pop();
        }
        v
    };
    if lines.is_empty() {
        return Err(MapError::NonRectangular);
    }
    let width = lines.iter().map(|l| l.chars().count()).max().unwrap();
    let height = lines.len();
    if width < 3 || height < 3 {
        return Err(MapError::TooSmall);
    }

    let mut cells = vec![Cell::Wall; width * height];
    let mut corridor_cells = HashSet::new();
    let mut door_cells = Vec::new();
    let mut spawns = Vec::new();
    let mut goals = Vec::new();
    for (y, line) in lines.iter().enumerate() {
        for (x, ch) in line.chars().enumerate() {
            let cell = match ch {
                '#' => Cell::Wall,
                '.' => Cell::Floor,
                'C' => {
                    corridor_cells.insert((x, y));
                    Cell::Floor
                }
                'D' => {
                    door_cells.push((x, y));
                    Cell::Door
                }
                'S' => {
                    spawns.push((x, y));
                    Cell::Spawn
                }
                'G' => {
                    goals.push((x, y));
                    Cell::Goal
                }
                other => return Err(MapError::UnknownCharacter { ch: other, x, y }),
            };
            cells[y * width + x] = cell;
        }
        // Short rows are left as the wall padding they were initialized to.
    }

    match spawns.len() {
        0 => return Err(MapError::MissingSpawn),
        1 => {}
        _ => return Err(MapError::MultipleSpawns),
    }
    match goals.len() {
        0 => return Err(MapError::MissingGoal),
        1 => {}
        _ => return Err(MapError::MultipleGoals),
    }

    let map = GridMap {
        width,
        height,
        cells,
        spawn: spawns[0],
        goal: goals[0],
        corridor_cells,
        door_cells,
    };

    for x in 0..width {
        for y in [0, height - 1] {
            if map.cell(x, y) != Cell::Wall {
                return Err(MapError::OpenBorder(x, y));
            }
        }
    }
    for y in 0..height {
        for x in [0, width - 1] {
            if map.cell(x, y) != Cell::Wall {
                return Err(MapError::OpenBorder(x, y));
            }
        }
    }

    for &(x, y) in &map.door_cells {
        let mut open_sides = 0;
        for delta in [(0isize, -1isize), (1, 0), (0, 1), (-1, 0)] {
            if let Some((nx, ny)) = map.neighbor((x, y), delta) {
                if matches!(map.cell(nx, ny), Cell::Floor | Cell::Spawn | Cell::Goal) {
                    open_sides += 1;
                }
            }
        }
        if open_sides < 2 {
            return Err(MapError::DoorNotGating(x, y));
        }
    }

    let doorless = map.reachable_from_spawn(false);
    if let Some(&cell) = map.corridor_cells.iter().find(|c| doorless.contains(c)) {
        return Err(MapError::CorridorNotGated(cell.0, cell.1));
    }
    if map.shortest_path_len(map.spawn, map.goal, true).is_none() {
        return Err(MapError::UnreachableGoal);
    }

    Ok(map)
}

/// Mutable per-runner episode state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub pos: (usize, usize),
    pub orient: Orient,
    pub doors_open: Vec<bool>,
    pub step_count: u32,
    pub done: bool,
    /// Becomes true the first time `pos` enters a corridor cell and stays
    /// true for the remainder of the episode.
    pub via_corridor: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StepError {
    #[error("episode already finished")]
    StateAlreadyDone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Position bin after the transition; this is the count-table key.
    pub bin: (usize, usize),
    pub via_corridor_so_far: bool,
    pub action_executed: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Array1<f64>,
    pub reward_ext: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Fresh episode state: agent at spawn facing east, doors closed.
pub fn reset(map: &GridMap) -> (EnvState, Array1<f64>) {
    let state = EnvState {
        pos: map.spawn(),
        orient: Orient::East,
        doors_open: vec![false; map.door_cells().len()],
        step_count: 0,
        done: false,
        via_corridor: false,
    };
    let obs = encode_observation(&state, map);
    (state, obs)
}

fn facing_closed_door(state: &EnvState, map: &GridMap) -> bool {
    map.faced_cell(state.pos, state.orient)
        .and_then(|(x, y)| map.door_index(x, y))
        .map(|d| !state.doors_open[d])
        .unwrap_or(false)
}

/// One-hot position and orientation plus a facing-a-closed-door bit.
/// Layout: x (width) | y (height) | orientation (4) | door bit (1).
pub fn encode_observation(state: &EnvState, map: &GridMap) -> Array1<f64> {
    let mut v = Array1::zeros(map.width() + map.height() + 5);
    v[state.pos.0] = 1.0;
    v[map.width() + state.pos.1] = 1.0;
    v[map.width() + map.height() + state.orient.index()] = 1.0;
    if facing_closed_door(state, map) {
        v[map.width() + map.height() + 4] = 1.0;
    }
    v
}

/// Advances the episode by one action.
///
/// `FORWARD` moves one cell if the target is walkable (doors count once
/// opened), `TURN_*` rotate in place, `NOOP` does nothing and `OPEN` opens a
/// directly faced closed door; opened doors stay open for the rest of the
/// episode. The episode ends with reward 1 on reaching the goal, or with
/// reward 0 when `max_steps` is exhausted.
pub fn step(
    state: &mut EnvState,
    map: &GridMap,
    action: Action,
    max_steps: u32,
) -> Result<StepOutcome, StepError> {
    if state.done {
        return Err(StepError::StateAlreadyDone);
    }
    state.step_count += 1;
    match action {
        Action::Forward => {
            if let Some(target) = map.faced_cell(state.pos, state.orient) {
                if map.is_walkable(target, &state.doors_open) {
                    state.pos = target;
                }
            }
        }
        Action::TurnLeft => state.orient = state.orient.turned_left(),
        Action::TurnRight => state.orient = state.orient.turned_right(),
        Action::Noop => {}
        Action::Open => {
            if let Some(d) = map
                .faced_cell(state.pos, state.orient)
                .and_then(|(x, y)| map.door_index(x, y))
            {
                state.doors_open[d] = true;
            }
        }
    }
    if map.corridor_cells().contains(&state.pos) {
        state.via_corridor = true;
    }

    let reached_goal = state.pos == map.goal();
    let out_of_time = state.step_count >= max_steps;
    state.done = reached_goal || out_of_time;
    let reward_ext = if reached_goal { 1.0 } else { 0.0 };

    Ok(StepOutcome {
        observation: encode_observation(state, map),
        reward_ext,
        done: state.done,
        info: StepInfo {
            bin: state.pos,
            via_corridor_so_far: state.via_corridor,
            action_executed: action,
        },
    })
}
