//! Grid worlds, poses and the simulated camera.
//!
//! World files are plain text:
//!
//! ```text
//! world corridor_room
//! seed 7
//! class # 0 wall
//! class . 1 floor
//! class s 2 sofa
//! start corridor 10 2 N
//! target sofa
//! grid
//! ########
//! #..sss.#
//! ...
//! ```
//!
//! `class` lines form the legend (character, class id, name); one of them must
//! be named `floor`. Positions are `row col heading`. Lines starting with `;`
//! are comments.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::class_color;
use crate::error::{io_err, Error, Result};
use crate::types::{ImageTensor, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    /// Unit step `(drow, dcol)`.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }

    pub fn right(self) -> Heading {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }

    fn parse(s: &str) -> Option<Heading> {
        match s {
            "N" => Some(Heading::N),
            "E" => Some(Heading::E),
            "S" => Some(Heading::S),
            "W" => Some(Heading::W),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: i64,
    pub col: i64,
}

impl Cell {
    pub fn new(row: i64, col: i64) -> Self {
        Self { row, col }
    }

    pub fn step(self, h: Heading) -> Cell {
        let (dr, dc) = h.forward();
        Cell::new(self.row + dr, self.col + dc)
    }

    pub fn manhattan(self, other: Cell) -> i64 {
        (self.row - other.row).abs() + (self.col - other.col).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub cell: Cell,
    pub heading: Heading,
}

impl Pose {
    /// World cell at `distance` ahead and `lateral` to the right.
    pub fn offset(&self, distance: i64, lateral: i64) -> Cell {
        let (fr, fc) = self.heading.forward();
        let (rr, rc) = self.heading.right().forward();
        Cell::new(
            self.cell.row + distance * fr + lateral * rr,
            self.cell.col + distance * fc + lateral * rc,
        )
    }
}

/// A named starting pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Start {
    pub name: String,
    pub pose: Pose,
}

/// Static map parsed from a world file.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    cells: Vec<u8>,
    legend: Vec<(char, u8, String)>,
    pub floor_class: u8,
    pub wall_class: u8,
    pub starts: Vec<Start>,
    pub targets: Vec<String>,
}

/// A grid with the robot placed and a target chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub grid: Grid,
    pub pose: Pose,
    pub target: u8,
    pub seed: u64,
}

fn parse_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Config(format!("world file line {line}: {msg}"))
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut seed = 0u64;
        let mut legend: Vec<(char, u8, String)> = Vec::new();
        let mut starts = Vec::new();
        let mut targets = Vec::new();
        let mut rows: Vec<(usize, &str)> = Vec::new();
        let mut in_grid = false;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            if in_grid {
                if !raw.trim().is_empty() {
                    rows.push((ln, raw.trim_end()));
                }
                continue;
            }
            let line = raw.trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[0] {
                "world" if parts.len() == 2 => name = Some(parts[1].to_string()),
                "seed" if parts.len() == 2 => {
                    seed = parts[1].parse().map_err(|e| parse_err(ln, e))?;
                }
                "class" if parts.len() == 4 => {
                    let mut chars = parts[1].chars();
                    let (Some(ch), None) = (chars.next(), chars.next()) else {
                        return Err(parse_err(ln, "class symbol must be one character"));
                    };
                    let id: u8 = parts[2].parse().map_err(|e| parse_err(ln, e))?;
                    if legend.iter().any(|(c, k, _)| *c == ch || *k == id) {
                        return Err(parse_err(ln, "duplicate class symbol or id"));
                    }
                    legend.push((ch, id, parts[3].to_string()));
                }
                "start" if parts.len() == 5 => {
                    let row: i64 = parts[2].parse().map_err(|e| parse_err(ln, e))?;
                    let col: i64 = parts[3].parse().map_err(|e| parse_err(ln, e))?;
                    let heading = Heading::parse(parts[4])
                        .ok_or_else(|| parse_err(ln, "heading must be N, E, S or W"))?;
                    starts.push(Start {
                        name: parts[1].to_string(),
                        pose: Pose {
                            cell: Cell::new(row, col),
                            heading,
                        },
                    });
                }
                "target" if parts.len() >= 2 => {
                    targets.extend(parts[1..].iter().map(|s| s.to_string()));
                }
                "grid" if parts.len() == 1 => in_grid = true,
                _ => return Err(parse_err(ln, format!("unrecognized line {line:?}"))),
            }
        }
        let name = name.ok_or_else(|| Error::Config("world file lacks a `world` line".into()))?;
        let lookup: BTreeMap<char, u8> = legend.iter().map(|(c, k, _)| (*c, *k)).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |(_, r)| r.chars().count());
        let mut cells = Vec::with_capacity(height * width);
        for (ln, r) in &rows {
            if r.chars().count() != width {
                return Err(parse_err(*ln, "grid rows differ in width"));
            }
            for ch in r.chars() {
                cells.push(*lookup.get(&ch).ok_or_else(|| {
                    parse_err(*ln, format!("symbol {ch:?} is not in the legend"))
                })?);
            }
        }
        let id_of = |n: &str| legend.iter().find(|(_, _, s)| s == n).map(|(_, k, _)| *k);
        let floor_class =
            id_of("floor").ok_or_else(|| Error::Config("legend lacks a floor class".into()))?;
        let wall_class =
            id_of("wall").ok_or_else(|| Error::Config("legend lacks a wall class".into()))?;
        let grid = Self {
            name,
            seed,
            height,
            width,
            cells,
            legend,
            floor_class,
            wall_class,
            starts,
            targets,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Class at `cell`; outside the grid reads as wall.
    pub fn class_at(&self, cell: Cell) -> u8 {
        if self.contains(cell) {
            self.cells[cell.row as usize * self.width + cell.col as usize]
        } else {
            self.wall_class
        }
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row >= 0
            && cell.col >= 0
            && (cell.row as usize) < self.height
            && (cell.col as usize) < self.width
    }

    pub fn is_floor(&self, cell: Cell) -> bool {
        self.class_at(cell) == self.floor_class
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.legend
            .iter()
            .find(|(_, _, n)| n == name)
            .map(|(_, k, _)| *k)
    }

    pub fn class_name(&self, id: u8) -> Option<&str> {
        self.legend
            .iter()
            .find(|(_, k, _)| *k == id)
            .map(|(_, _, n)| n.as_str())
    }

    /// Largest class id in the legend plus one.
    pub fn num_classes(&self) -> usize {
        self.legend
            .iter()
            .map(|(_, k, _)| *k as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn count(&self, class: u8) -> usize {
        self.cells.iter().filter(|&&c| c == class).count()
    }

    fn floor_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height * self.width)
            .filter(|&i| self.cells[i] == self.floor_class)
            .map(|i| Cell::new((i / self.width) as i64, (i % self.width) as i64))
    }

    /// Floor connected, starts on floor, targets present.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("world {}: {m}", self.name)));
        if self.height == 0 || self.width == 0 {
            return bad("empty grid".into());
        }
        let floor: Vec<Cell> = self.floor_cells().collect();
        let Some(&first) = floor.first() else {
            return bad("no floor cells".into());
        };
        let reach = self.distances_from(first);
        if floor.iter().any(|c| !reach.contains_key(c)) {
            return bad("floor cells are not connected".into());
        }
        for s in &self.starts {
            if !self.is_floor(s.pose.cell) {
                return bad(format!("start {} is not on a floor cell", s.name));
            }
        }
        for t in &self.targets {
            match self.class_id(t) {
                Some(k) if self.count(k) > 0 => {}
                Some(_) => return bad(format!("target {t} occupies no cell")),
                None => return bad(format!("target {t} is not in the legend")),
            }
        }
        Ok(())
    }

    /// Breadth-first floor distances from `from`.
    pub fn distances_from(&self, from: Cell) -> BTreeMap<Cell, usize> {
        let mut dist = BTreeMap::new();
        if !self.is_floor(from) {
            return dist;
        }
        dist.insert(from, 0);
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let d = dist[&c];
            for h in Heading::ALL {
                let n = c.step(h);
                if self.is_floor(n) && !dist.contains_key(&n) {
                    dist.insert(n, d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// First move of a shortest floor path from `from` to `to`.
    pub fn next_step(&self, from: Cell, to: Cell) -> Option<Heading> {
        if from == to {
            return None;
        }
        let dist = self.distances_from(to);
        let here = *dist.get(&from)?;
        Heading::ALL
            .into_iter()
            .find(|&h| dist.get(&from.step(h)).is_some_and(|&d| d + 1 == here))
    }

    /// Places the robot at start `start` with target class `target`.
    pub fn world(&self, start: usize, target: &str, seed: u64) -> Result<World> {
        let s = self
            .starts
            .get(start)
            .ok_or_else(|| Error::Config(format!("world {} has no start #{start}", self.name)))?;
        let target = self
            .class_id(target)
            .ok_or_else(|| Error::Config(format!("world {} has no class {target}", self.name)))?;
        Ok(World {
            grid: self.clone(),
            pose: s.pose,
            target,
            seed,
        })
    }

    /// Serializes back to the text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("world {}\nseed {}\n", self.name, self.seed);
        for (ch, id, name) in &self.legend {
            out.push_str(&format!("class {ch} {id} {name}\n"));
        }
        for s in &self.starts {
            out.push_str(&format!(
                "start {} {} {} {:?}\n",
                s.name, s.pose.cell.row, s.pose.cell.col, s.pose.heading
            ));
        }
        if !self.targets.is_empty() {
            out.push_str(&format!("target {}\n", self.targets.join(" ")));
        }
        out.push_str("grid\n");
        let sym: BTreeMap<u8, char> = self.legend.iter().map(|(c, k, _)| (*k, *c)).collect();
        for r in 0..self.height {
            let row: String = (0..self.width)
                .map(|c| sym[&self.cells[r * self.width + c]])
                .collect();
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Camera geometry: a `cells×cells` window ahead of the robot rendered at `size×size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// Odd window width in cells.
    pub cells: usize,
    pub size: usize,
}

impl ViewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.cells.is_multiple_of(2) || self.size < self.cells {
            return Err(Error::Config(format!(
                "view needs an odd cell count no larger than the image size, got {self:?}"
            )));
        }
        Ok(())
    }

    /// View cell `(row, col)` holding pixel `(y, x)`.
    pub fn cell_of_pixel(&self, y: usize, x: usize) -> (usize, usize) {
        (y * self.cells / self.size, x * self.cells / self.size)
    }

    /// World cell shown at view cell `(vr, vc)`; the top row is farthest.
    pub fn world_cell(&self, pose: &Pose, vr: usize, vc: usize) -> Cell {
        let distance = (self.cells - vr) as i64;
        let lateral = vc as i64 - (self.cells / 2) as i64;
        pose.offset(distance, lateral)
    }

    /// World cell shown at pixel `(y, x)`.
    pub fn world_cell_of_pixel(&self, pose: &Pose, y: usize, x: usize) -> Cell {
        let (vr, vc) = self.cell_of_pixel(y, x);
        self.world_cell(pose, vr, vc)
    }
}

/// Ground-truth view labels. Each view column looks straight ahead; the first
/// non-floor cell hides everything behind it, so it fills the rest of the column.
pub fn render_labels(grid: &Grid, pose: &Pose, view: &ViewSpec) -> LabelMap {
    let v = view.cells;
    let mut cells = vec![grid.floor_class; v * v];
    for vc in 0..v {
        let mut occluder = None;
        for vr in (0..v).rev() {
            let class = occluder.unwrap_or_else(|| grid.class_at(view.world_cell(pose, vr, vc)));
            if class != grid.floor_class {
                occluder = Some(class);
            }
            cells[vr * v + vc] = class;
        }
    }
    LabelMap::from_fn(view.size, view.size, |y, x| {
        let (vr, vc) = view.cell_of_pixel(y, x);
        cells[vr * v + vc]
    })
}

/// The camera image matching [`render_labels`], painted with the synthetic palette.
pub fn render_image(labels: &LabelMap) -> ImageTensor {
    ImageTensor::from_fn(3, labels.height(), labels.width(), |c, y, x| {
        class_color(labels.get(y, x))[c] as f64 / 255.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "world t\nseed 3\nclass # 0 wall\nclass . 1 floor\nclass s 2 sofa\n\
start a 3 1 N\ntarget sofa\ngrid\n#####\n#sss#\n#...#\n#...#\n#####\n";

    #[test]
    fn parse_round_trip() {
        let g = Grid::parse(TEXT).unwrap();
        assert_eq!((g.height, g.width), (5, 5));
        assert_eq!(g.class_at(Cell::new(1, 2)), 2);
        assert_eq!(g.class_at(Cell::new(-1, 2)), 0);
        assert_eq!(Grid::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn disconnected_floor_is_rejected() {
        let text = TEXT.replace("#...#\n#...#", "#.#.#\n###.#");
        assert!(Grid::parse(&text).is_err());
    }

    #[test]
    fn occlusion_fills_columns() {
        let g = Grid::parse(TEXT).unwrap();
        let view = ViewSpec { cells: 3, size: 3 };
        let pose = Pose {
            cell: Cell::new(3, 2),
            heading: Heading::N,
        };
        let l = render_labels(&g, &pose, &view);
        // distance 1 is floor, distance 2 is the sofa which occludes distance 3.
        assert_eq!(l.data(), &[2, 2, 2, 2, 2, 2, 1, 1, 1]);
    }
}
