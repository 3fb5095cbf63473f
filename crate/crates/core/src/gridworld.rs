//! Static map, agent kinematics and simultaneous-move resolution.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("map header missing: expected `d=<meters>` on the first line")]
    MissingHeader,
    #[error("invalid cell width `{0}`")]
    BadCellWidth(String),
    #[error("ragged row {row}: expected {expected} cells, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("unknown map character {ch:?} at row {row}, column {col}")]
    UnknownChar { ch: char, row: usize, col: usize },
    #[error("map has no road cell")]
    EmptyRoadNetwork,
    #[error("map must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("map side {0} is below the minimum of 2")]
    TooSmall(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("{poses} poses but {actions} actions")]
    Arity { poses: usize, actions: usize },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("agent index {index} out of range for {agents} agents")]
    IndexOutOfRange { index: usize, agents: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Road,
    Free,
    Obstacle,
}

/// Grid coordinates, row 0 is the northern edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// The nine moves available to an agent. The discriminant is the index used
/// by the Q-network head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Stay = 0,
    N = 1,
    S = 2,
    E = 3,
    W = 4,
    NE = 5,
    NW = 6,
    SE = 7,
    SW = 8,
}

impl Action {
    pub const COUNT: usize = 9;
    pub const ALL: [Action; 9] =
        [Action::Stay, Action::N, Action::S, Action::E, Action::W, Action::NE, Action::NW, Action::SE, Action::SW];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// (d_row, d_col) of the move.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Action::Stay => (0, 0),
            Action::N => (-1, 0),
            Action::S => (1, 0),
            Action::E => (0, 1),
            Action::W => (0, -1),
            Action::NE => (-1, 1),
            Action::NW => (-1, -1),
            Action::SE => (1, 1),
            Action::SW => (1, -1),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    size: usize,
    cells: Vec<CellKind>,
    cell_width: f64,
}

impl GridMap {
    /// Builds a map from raw parts, checking the same invariants as [`load_map`].
    pub fn new(size: usize, cells: Vec<CellKind>, cell_width: f64) -> Result<Self, MapError> {
        if !(cell_width.is_finite() && cell_width > 0.0) {
            return Err(MapError::BadCellWidth(cell_width.to_string()));
        }
        if cells.len() != size * size {
            return Err(MapError::NotSquare { rows: size, cols: cells.len() / size.max(1) });
        }
        if !cells.contains(&CellKind::Road) {
            return Err(MapError::EmptyRoadNetwork);
        }
        if size < 2 {
            return Err(MapError::TooSmall(size));
        }
        Ok(Self { size, cells, cell_width })
    }

    /// Cells per side (M).
    pub fn size(&self) -> usize {
        self.size
    }

    /// Total number of cells (K = M²).
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Cell width d in meters.
    pub fn cell_width(&self) -> f64 {
        self.cell_width
    }

    pub fn kind(&self, cell: Cell) -> CellKind {
        self.cells[self.index(cell)]
    }

    pub fn kind_at(&self, k: usize) -> CellKind {
        self.cells[k]
    }

    pub fn kinds(&self) -> &[CellKind] {
        &self.cells
    }

    /// Row-major index k of a cell.
    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.size + cell.col
    }

    pub fn cell(&self, k: usize) -> Cell {
        Cell::new(k / self.size, k % self.size)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.size && cell.col < self.size
    }

    pub fn is_occupiable(&self, cell: Cell) -> bool {
        self.contains(cell) && self.kind(cell) != CellKind::Obstacle
    }

    pub fn road_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&k| self.cells[k] == CellKind::Road).collect()
    }

    pub fn count(&self, kind: CellKind) -> usize {
        self.cells.iter().filter(|&&c| c == kind).count()
    }

    /// Cell reached from `cell` by `action`, or `None` when it leaves the grid.
    pub fn offset(&self, cell: Cell, action: Action) -> Option<Cell> {
        let (dr, dc) = action.offset();
        let row = cell.row.checked_add_signed(dr)?;
        let col = cell.col.checked_add_signed(dc)?;
        let target = Cell::new(row, col);
        self.contains(target).then_some(target)
    }

    /// Center of a cell in meters.
    pub fn center(&self, cell: Cell) -> (f64, f64) {
        ((cell.row as f64 + 0.5) * self.cell_width, (cell.col as f64 + 0.5) * self.cell_width)
    }

    /// Renders the map in the on-disk format.
    pub fn to_text(&self) -> String {
        let mut out = format!("d={}\n", self.cell_width);
        for row in self.cells.chunks(self.size) {
            out.extend(row.iter().map(|k| match k {
                CellKind::Road => 'R',
                CellKind::Free => '.',
                CellKind::Obstacle => '#',
            }));
            out.push('\n');
        }
        out
    }
}

/// Parses the map file format: a `d=<meters>` header followed by M rows of M
/// characters from `#` (obstacle), `.` (free) and `R` (road).
pub fn load_map(text: &str) -> Result<GridMap, MapError> {
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let header = lines.next().ok_or(MapError::MissingHeader)?;
    let width = header.trim().strip_prefix("d=").ok_or(MapError::MissingHeader)?.trim();
    let cell_width: f64 = width.parse().map_err(|_| MapError::BadCellWidth(width.to_string()))?;
    if !(cell_width.is_finite() && cell_width > 0.0) {
        return Err(MapError::BadCellWidth(width.to_string()));
    }

    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    let mut cells = Vec::new();
    let mut cols = None;
    for (row, line) in rows.iter().enumerate() {
        let found = line.chars().count();
        let expected = *cols.get_or_insert(found);
        if found != expected {
            return Err(MapError::Ragged { row, expected, found });
        }
        for (col, ch) in line.chars().enumerate() {
            cells.push(match ch {
                '#' => CellKind::Obstacle,
                '.' => CellKind::Free,
                'R' => CellKind::Road,
                _ => return Err(MapError::UnknownChar { ch, row, col }),
            });
        }
    }
    if !cells.contains(&CellKind::Road) {
        return Err(MapError::EmptyRoadNetwork);
    }
    let cols = cols.unwrap_or(0);
    if rows.len() != cols {
        return Err(MapError::NotSquare { rows: rows.len(), cols });
    }
    if cols < 2 {
        return Err(MapError::TooSmall(cols));
    }
    Ok(GridMap { size: cols, cells, cell_width })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoveOutcome {
    pub positions: Vec<Cell>,
    /// `true` when the agent's intended move was rejected.
    pub collided: Vec<bool>,
}

/// Resolves one simultaneous move of all agents.
///
/// Rejection rules:
/// 1. a target off the grid or on an obstacle is rejected;
/// 2. when several movers target the same cell the lowest index wins;
/// 3. a mover whose target is the final cell of another agent is rejected.
///    Rejected agents stay put, so rule 3 is applied until no new rejection
///    appears. Swaps and rotations are allowed.
pub fn resolve_moves(map: &GridMap, poses: &[Cell], actions: &[Action]) -> Result<MoveOutcome, GridError> {
    if poses.len() != actions.len() {
        return Err(GridError::Arity { poses: poses.len(), actions: actions.len() });
    }
    for (i, p) in poses.iter().enumerate() {
        if !map.is_occupiable(*p) {
            return Err(GridError::InvariantViolation(format!("agent {i} starts on non-occupiable cell {p}")));
        }
        if poses[..i].contains(p) {
            return Err(GridError::InvariantViolation(format!("agents share cell {p} before the move")));
        }
    }

    let n = poses.len();
    let mut collided = vec![false; n];
    // `None` means the agent stays on its current cell.
    let mut targets: Vec<Option<Cell>> = poses
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(i, (&p, &a))| {
            if a == Action::Stay {
                return None;
            }
            match map.offset(p, a) {
                Some(t) if map.kind(t) != CellKind::Obstacle => Some(t),
                _ => {
                    collided[i] = true;
                    None
                }
            }
        })
        .collect();

    for i in 0..n {
        if let Some(t) = targets[i] {
            for j in (i + 1)..n {
                if targets[j] == Some(t) {
                    targets[j] = None;
                    collided[j] = true;
                }
            }
        }
    }

    loop {
        let mut changed = false;
        for i in 0..n {
            let Some(t) = targets[i] else { continue };
            let blocked = (0..n).any(|j| j != i && targets[j].is_none() && poses[j] == t);
            if blocked {
                targets[i] = None;
                collided[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let positions = targets.iter().zip(poses).map(|(t, &p)| t.unwrap_or(p)).collect();
    Ok(MoveOutcome { positions, collided })
}

/// Agents other than `i` whose cell centers lie within `sensing_range`
/// meters of agent `i`'s cell center.
pub fn neighbors_in_range(
    poses: &[Cell],
    i: usize,
    sensing_range: f64,
    cell_width: f64,
) -> Result<Vec<usize>, GridError> {
    let me = *poses.get(i).ok_or(GridError::IndexOutOfRange { index: i, agents: poses.len() })?;
    let r2 = sensing_range * sensing_range;
    Ok(poses
        .iter()
        .enumerate()
        .filter(|&(j, p)| {
            if j == i {
                return false;
            }
            let dr = (p.row as f64 - me.row as f64) * cell_width;
            let dc = (p.col as f64 - me.col as f64) * cell_width;
            dr * dr + dc * dc <= r2
        })
        .map(|(j, _)| j)
        .collect())
}
