//! Procedural scenes: a semantic [`SceneSpec`], its pixel rendering and its
//! five templated captions.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, COLOR_WORDS, COUNT_WORDS, COL_WORDS, RELATION_WORDS, ROW_WORDS, SHAPE_WORDS, SIZE_WORDS};
use super::{CaptionTokens, SceneImage};
use crate::error::{contract_err, Result};
use crate::seed;

pub const CAPTIONS_PER_IMAGE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Bar];

    pub fn word(self) -> &'static str {
        SHAPE_WORDS[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn word(self) -> &'static str {
        COLOR_WORDS[self as usize]
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        SIZE_WORDS[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Cell on the grid, row-major index.
    pub cell: usize,
    pub size: Size,
}

/// Semantic content of one scene.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Color,
}

/// Knobs of the procedural generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            grid: 4,
            min_objects: 1,
            max_objects: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid != 4 {
            return Err(contract_err!("caption templates assume a 4x4 grid, got {}", self.grid));
        }
        if self.image_size % self.grid != 0 || self.image_size / self.grid < 6 {
            return Err(contract_err!(
                "image size {} must split into {} cells of at least 6 px",
                self.image_size,
                self.grid
            ));
        }
        if self.min_objects < 1 || self.max_objects > 3 || self.min_objects > self.max_objects {
            return Err(contract_err!(
                "object count range {}..={} must lie within 1..=3",
                self.min_objects,
                self.max_objects
            ));
        }
        Ok(())
    }
}

impl SceneSpec {
    /// Checks 1-3 objects on distinct cells of a `grid x grid` board.
    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(contract_err!("scene must hold 1-3 objects, has {}", self.objects.len()));
        }
        let cells: BTreeSet<usize> = self.objects.iter().map(|o| o.cell).collect();
        if cells.len() != self.objects.len() {
            return Err(contract_err!("two objects share a cell"));
        }
        if let Some(o) = self.objects.iter().find(|o| o.cell >= grid * grid) {
            return Err(contract_err!("cell {} outside a {grid}x{grid} grid", o.cell));
        }
        Ok(())
    }

    pub fn random(rng: &mut impl Rng, config: &GeneratorConfig) -> Self {
        let count = rng.random_range(config.min_objects..=config.max_objects);
        let cells = sample(rng, config.grid * config.grid, count).into_vec();
        let objects: Vec<SceneObject> = cells
            .into_iter()
            .map(|cell| SceneObject {
                shape: Shape::ALL[rng.random_range(0..4)],
                color: Color::ALL[rng.random_range(0..8)],
                cell,
                size: if rng.random_bool(0.5) { Size::Large } else { Size::Small },
            })
            .collect();
        let free: Vec<Color> = Color::ALL
            .iter()
            .copied()
            .filter(|c| objects.iter().all(|o| o.color != *c))
            .collect();
        let background = free[rng.random_range(0..free.len())];
        Self { objects, background }
    }

    /// Attribute words a caption of this scene may use.
    pub fn attribute_words(&self) -> BTreeSet<&'static str> {
        let mut words = BTreeSet::new();
        words.insert(self.background.word());
        for o in &self.objects {
            words.insert(o.shape.word());
            words.insert(o.color.word());
            words.insert(o.size.word());
            words.insert(ROW_WORDS[o.cell / 4]);
            words.insert(COL_WORDS[o.cell % 4]);
        }
        words
    }

    /// (shape, color) labels, used as categories for image retrieval.
    pub fn labels(&self) -> BTreeSet<(Shape, Color)> {
        self.objects.iter().map(|o| (o.shape, o.color)).collect()
    }
}

/// Draws the scene. Nuisance parameters (object jitter inside the cell,
/// object brightness, background shade) come from `render_seed`.
pub fn render_scene(spec: &SceneSpec, render_seed: u64, config: &GeneratorConfig) -> SceneImage {
    let mut rng = seed::rng(&[render_seed, 0xD8A4]);
    let size = config.image_size;
    let cell = (size / config.grid) as f32;
    let mut image = SceneImage::zeros(size, size, 3);
    let shade: f32 = rng.random_range(-0.05..0.05);
    let bg = spec.background.rgb().map(|c| (0.3 * c + 0.1 + shade).clamp(0.0, 1.0));
    for y in 0..size {
        for x in 0..size {
            image.set_pixel(y, x, bg);
        }
    }
    for obj in &spec.objects {
        let (radius, jitter) = match obj.size {
            Size::Large => (0.375 * cell, 0.125 * cell),
            Size::Small => (0.25 * cell, 0.1875 * cell),
        };
        let cy = (obj.cell / config.grid) as f32 * cell + cell / 2.0 + rng.random_range(-jitter..=jitter);
        let cx = (obj.cell % config.grid) as f32 * cell + cell / 2.0 + rng.random_range(-jitter..=jitter);
        let brightness: f32 = rng.random_range(0.9..=1.0);
        let rgb = obj.color.rgb().map(|c| c * brightness);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let inside = match obj.shape {
                    Shape::Circle => dx * dx + dy * dy <= radius * radius,
                    Shape::Square => dx.abs() <= 0.85 * radius && dy.abs() <= 0.85 * radius,
                    Shape::Triangle => dy.abs() <= radius && dx.abs() <= (dy + radius) / 2.0,
                    Shape::Bar => dx.abs() <= radius && dy.abs() <= 0.35 * radius,
                };
                if inside {
                    image.set_pixel(y, x, rgb);
                }
            }
        }
    }
    image
}

/// The five templated captions of a scene, each a distinct token sequence.
pub fn captions(spec: &SceneSpec, vocab: &Vocabulary) -> Vec<CaptionTokens> {
    let w = |s: &str| vocab.expect_id(s);
    let objs = &spec.objects;
    let joined = |parts: Vec<Vec<u32>>| -> Vec<u32> {
        let and = w("and");
        let mut out = Vec::new();
        for (i, p) in parts.into_iter().enumerate() {
            if i > 0 {
                out.push(and);
            }
            out.extend(p);
        }
        out
    };

    // color shape row col, objects in reading order
    let mut by_cell = objs.clone();
    by_cell.sort_by_key(|o| o.cell);
    let c1 = joined(
        by_cell
            .iter()
            .map(|o| vec![w(o.color.word()), w(o.shape.word()), w(ROW_WORDS[o.cell / 4]), w(COL_WORDS[o.cell % 4])])
            .collect(),
    );

    // size color shape ... on <bg> background
    let mut c2 = joined(
        objs.iter()
            .map(|o| vec![w(o.size.word()), w(o.color.word()), w(o.shape.word())])
            .collect(),
    );
    c2.extend([w("on"), w(spec.background.word()), w("background")]);

    // <count> objects color shape ...
    let mut c3 = vec![
        w(COUNT_WORDS[objs.len() - 1]),
        w(if objs.len() == 1 { "object" } else { "objects" }),
    ];
    c3.extend(joined(
        objs.iter().map(|o| vec![w(o.color.word()), w(o.shape.word())]).collect(),
    ));

    // relation between the first two objects
    let a = w("a");
    let mut c4 = vec![a, w(objs[0].color.word()), w(objs[0].shape.word())];
    if objs.len() == 1 {
        c4.extend([w("alone"), w("on"), w(spec.background.word())]);
    } else {
        let (p, q) = (objs[0].cell, objs[1].cell);
        let rel = if p / 4 < q / 4 {
            RELATION_WORDS[0]
        } else if p / 4 > q / 4 {
            RELATION_WORDS[1]
        } else if p % 4 < q % 4 {
            RELATION_WORDS[2]
        } else {
            RELATION_WORDS[3]
        };
        c4.extend([w(rel), a, w(objs[1].color.word()), w(objs[1].shape.word())]);
        if let Some(o) = objs.get(2) {
            c4.extend([w("and"), a, w(o.color.word()), w(o.shape.word())]);
        }
    }

    // shape color size, reverse order, with <bg>
    let mut c5 = joined(
        objs.iter()
            .rev()
            .map(|o| vec![w(o.shape.word()), w(o.color.word()), w(o.size.word())])
            .collect(),
    );
    c5.extend([w("with"), w(spec.background.word())]);

    [c1, c2, c3, c4, c5].into_iter().map(CaptionTokens::new).collect()
}

/// Attribute words (colors, shapes, sizes, grid rows and columns) found in
/// a caption.
pub fn caption_attributes(tokens: &CaptionTokens, vocab: &Vocabulary) -> BTreeSet<String> {
    let attribute_groups = [&COLOR_WORDS[..], &SHAPE_WORDS, &SIZE_WORDS, &ROW_WORDS, &COL_WORDS];
    tokens
        .ids()
        .iter()
        .filter_map(|&id| vocab.word(id))
        .filter(|w| attribute_groups.iter().any(|g| g.contains(w)))
        .map(str::to_string)
        .collect()
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub image: SceneImage,
    pub captions: Vec<CaptionTokens>,
    pub render_seed: u64,
}

/// Samples a scene, renders it and writes its captions, all from `seed`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig, vocab: &Vocabulary) -> Result<GeneratedScene> {
    config.validate()?;
    let mut rng = seed::rng(&[seed, 0x5CE]);
    let spec = SceneSpec::random(&mut rng, config);
    spec.validate(config.grid)?;
    let render_seed = seed::derive(&[seed, 0x7E4D]);
    let image = render_scene(&spec, render_seed, config);
    let captions = captions(&spec, vocab);
    Ok(GeneratedScene {
        spec,
        image,
        captions,
        render_seed,
    })
}
