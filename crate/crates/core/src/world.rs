//! The symbolic micro-world: scenes of attributed shapes on a grid, with
//! spatial relations derived from object positions.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{GraphObject, GraphRelation, SceneGraph};
use crate::error::{Error, Result};
use crate::seed::{domain, rng_for};

pub const DATASET_HEADER: &str = "cyclecap-scenes v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Circle,
        Category::Square,
        Category::Triangle,
        Category::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Circle => "circle",
            Category::Square => "square",
            Category::Triangle => "triangle",
            Category::Star => "star",
        }
    }
}

/// Object colors plus `Black`, which only ever appears as a canvas color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl Color {
    /// Colors an object may take; these are the color words of the caption vocabulary.
    pub const PALETTE: [Color; 5] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn from_name(name: &str) -> Option<Color> {
        Color::PALETTE
            .into_iter()
            .chain([Color::Black])
            .find(|c| c.name() == name)
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Glyph radius as a fraction of the cell edge.
    pub fn radius_fraction(self) -> f64 {
        match self {
            Size::Small => 0.30,
            Size::Large => 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::Above,
        RelationKind::Below,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left_of",
            RelationKind::RightOf => "right_of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
        }
    }

    /// Whether `subject` stands in this relation to `object`, given (row, col) cells.
    /// Row 0 is the top of the image.
    pub fn holds(self, subject: (usize, usize), object: (usize, usize)) -> bool {
        let (sr, sc) = subject;
        let (or, oc) = object;
        match self {
            RelationKind::LeftOf => sc < oc,
            RelationKind::RightOf => sc > oc,
            RelationKind::Above => sr < or,
            RelationKind::Below => sr > or,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    pub color: Color,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn cell(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub relation: RelationKind,
    pub object: usize,
}

/// Ground truth of one synthetic image. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub background: Color,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_relations: usize,
    pub background: Color,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid: 8,
            min_objects: 1,
            max_objects: 5,
            max_relations: 4,
            background: Color::Black,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::Config("world.grid must be at least 1".into()));
        }
        if self.grid * self.grid < self.max_objects {
            return Err(Error::Config(format!(
                "a {0}x{0} grid cannot hold {1} objects",
                self.grid, self.max_objects
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "world.min_objects ({}) exceeds world.max_objects ({})",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

impl Scene {
    /// Check every structural invariant against a grid size.
    pub fn validate(&self, grid: usize) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Format {
                kind: "scene",
                detail: msg,
            })
        };
        for (i, o) in self.objects.iter().enumerate() {
            if o.row >= grid || o.col >= grid {
                return bad(format!(
                    "object {i} at ({}, {}) is off a {grid}x{grid} grid",
                    o.row, o.col
                ));
            }
            if o.color == Color::Black {
                return bad(format!("object {i} uses the canvas-only color black"));
            }
            if self.objects[..i].iter().any(|p| p.cell() == o.cell()) {
                return bad(format!("object {i} shares cell ({}, {})", o.row, o.col));
            }
        }
        for r in &self.relations {
            let n = self.objects.len();
            if r.subject >= n || r.object >= n || r.subject == r.object {
                return bad(format!("relation {r:?} has invalid endpoints"));
            }
            if !r.relation.holds(
                self.objects[r.subject].cell(),
                self.objects[r.object].cell(),
            ) {
                return bad(format!("relation {r:?} contradicts object positions"));
            }
        }
        Ok(())
    }
}

/// Every geometrically true relation between distinct objects, in
/// (subject, object, relation) lexical order.
pub fn true_relations(objects: &[SceneObject]) -> Vec<Relation> {
    let mut out = Vec::new();
    for (s, so) in objects.iter().enumerate() {
        for (o, oo) in objects.iter().enumerate() {
            if s == o {
                continue;
            }
            for kind in RelationKind::ALL {
                if kind.holds(so.cell(), oo.cell()) {
                    out.push(Relation {
                        subject: s,
                        relation: kind,
                        object: o,
                    });
                }
            }
        }
    }
    out
}

/// Sample one scene; a pure function of `(seed, config)`.
pub fn sample_scene(seed: u64, config: &WorldConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng_for(&[domain::SCENE, seed]);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let cells = index::sample(&mut rng, config.grid * config.grid, count);
    let objects: Vec<SceneObject> = cells
        .iter()
        .map(|cell| SceneObject {
            category: Category::ALL[rng.random_range(0..Category::ALL.len())],
            color: Color::PALETTE[rng.random_range(0..Color::PALETTE.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
            row: cell / config.grid,
            col: cell % config.grid,
        })
        .collect();

    let all = true_relations(&objects);
    let relations = if all.len() <= config.max_relations {
        all
    } else {
        let mut keep = index::sample(&mut rng, all.len(), config.max_relations).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| all[i]).collect()
    };

    Ok(Scene {
        background: config.background,
        objects,
        relations,
    })
}

/// Sample `count` scenes with per-scene seeds derived from `seed`.
pub fn sample_dataset(seed: u64, count: usize, config: &WorldConfig) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| sample_scene(crate::seed::mix(&[seed, i]), config))
        .collect()
}

/// Project a scene onto its fully attributed scene graph.
pub fn ground_truth_graph(scene: &Scene) -> SceneGraph {
    SceneGraph {
        objects: scene
            .objects
            .iter()
            .map(|o| GraphObject {
                category: o.category,
                color: Some(o.color),
                size: Some(o.size),
                cell: Some((o.row, o.col)),
            })
            .collect(),
        relations: scene
            .relations
            .iter()
            .map(|r| GraphRelation {
                subject: r.subject,
                relation: r.relation,
                object: r.object,
            })
            .collect(),
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

pub fn write_dataset<W: Write>(mut out: W, scenes: &[Scene]) -> std::io::Result<()> {
    writeln!(out, "{DATASET_HEADER}")?;
    for scene in scenes {
        writeln!(out, "{scene}")?;
    }
    out.flush()
}

pub fn save_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(std::io::BufWriter::new(file), scenes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset<R: BufRead>(input: R, grid: usize) -> Result<Vec<Scene>> {
    let mut lines = input.lines();
    let fmt_err = |detail: String| Error::Format {
        kind: "dataset",
        detail,
    };
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == DATASET_HEADER => {}
        Some(Ok(h)) => return Err(fmt_err(format!("bad header {h:?}"))),
        Some(Err(e)) => return Err(fmt_err(e.to_string())),
        None => return Err(fmt_err("empty file".into())),
    }
    let mut scenes = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| fmt_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene =
            serde_json::from_str(&line).map_err(|e| fmt_err(format!("record {}: {e}", n + 1)))?;
        scene.validate(grid)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_dataset(path: &Path, grid: usize) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(file), grid)
}
