//! Procedural shapes scenes with template captions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Bumped whenever rendering or the caption grammar changes.
pub const GRAMMAR_VERSION: u32 = 1;

/// Subsamples per pixel side used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

pub const KINDS: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

pub const SHAPE_COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [240, 210, 40]),
    ("orange", [245, 140, 30]),
    ("purple", [140, 60, 180]),
    ("cyan", [40, 200, 210]),
    ("brown", [120, 75, 40]),
];

pub const BACKGROUNDS: [(&str, [u8; 3]); 4] =
    [("white", [250, 250, 250]), ("black", [15, 15, 15]), ("gray", [128, 128, 128]), ("beige", [225, 205, 165])];

/// Row-major 3x3 grid cells.
pub const CELLS: [&str; 9] =
    ["top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: Kind,
    pub color: usize,
    pub cell: usize,
    pub size: Size,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Sorted by cell; cells are distinct.
    pub shapes: Vec<ShapeSpec>,
    pub background: usize,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Circle => "circle",
            Kind::Square => "square",
            Kind::Triangle => "triangle",
        }
    }
}

impl Size {
    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Half-extent in unit image coordinates.
    fn radius(self) -> f64 {
        match self {
            Size::Small => 0.085,
            Size::Large => 0.15,
        }
    }
}

impl SceneSpec {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=3);
        let mut cells: Vec<usize> = (0..CELLS.len()).collect();
        cells.shuffle(&mut rng);
        let mut shapes: Vec<ShapeSpec> = cells[..count]
            .iter()
            .map(|&cell| ShapeSpec {
                kind: KINDS[rng.random_range(0..KINDS.len())],
                color: rng.random_range(0..SHAPE_COLORS.len()),
                cell,
                size: if rng.random_bool(0.5) { Size::Large } else { Size::Small },
            })
            .collect();
        shapes.sort_by_key(|s| s.cell);
        let background = rng.random_range(0..BACKGROUNDS.len());
        Self { shapes, background }
    }

    pub fn caption(&self) -> String {
        let parts: Vec<String> = self
            .shapes
            .iter()
            .map(|s| {
                format!("a {} {} {} at the {}", s.size.name(), SHAPE_COLORS[s.color].0, s.kind.name(), CELLS[s.cell])
            })
            .collect();
        format!("{} on a {} background", parts.join(" and "), BACKGROUNDS[self.background].0)
    }

    /// Anti-aliased RGB raster, row-major `[res, res, 3]`.
    pub fn render(&self, res: usize) -> Vec<u8> {
        let bg = BACKGROUNDS[self.background].1.map(f64::from);
        let mut out = Vec::with_capacity(res * res * 3);
        let step = 1.0 / (res * SUPERSAMPLE) as f64;
        for py in 0..res {
            for px in 0..res {
                let mut acc = [0.0f64; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let y = ((py * SUPERSAMPLE + sy) as f64 + 0.5) * step;
                        let x = ((px * SUPERSAMPLE + sx) as f64 + 0.5) * step;
                        // later shapes paint over earlier ones; cells never overlap anyway
                        let c = self
                            .shapes
                            .iter()
                            .rev()
                            .find(|s| s.covers(x, y))
                            .map_or(bg, |s| SHAPE_COLORS[s.color].1.map(f64::from));
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                }
                let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                out.extend(acc.map(|a| (a / n).round().clamp(0.0, 255.0) as u8));
            }
        }
        out
    }
}

impl ShapeSpec {
    fn center(&self) -> (f64, f64) {
        let (row, col) = (self.cell / 3, self.cell % 3);
        ((col as f64 + 0.5) / 3.0, (row as f64 + 0.5) / 3.0)
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center();
        let r = self.size.radius();
        let (dx, dy) = (x - cx, y - cy);
        match self.kind {
            Kind::Circle => dx * dx + dy * dy <= r * r,
            Kind::Square => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
            // apex up, base at +r
            Kind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
        }
    }
}

/// Every word the caption grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w = vec!["a", "at", "the", "and", "on", "background", "small", "large"];
    w.extend(KINDS.iter().map(|k| k.name()));
    w.extend(SHAPE_COLORS.iter().map(|c| c.0));
    w.extend(BACKGROUNDS.iter().map(|c| c.0));
    w.extend(CELLS.iter().flat_map(|c| c.split(' ')));
    w
}

/// Derives a per-sample seed from a corpus seed.
pub fn sample_seed(corpus_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = corpus_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One generated `(rgb, caption)` pair at `res` pixels.
pub fn gen_sample(seed: u64, res: usize) -> (Vec<u8>, String) {
    let spec = SceneSpec::sample(seed);
    (spec.render(res), spec.caption())
}
