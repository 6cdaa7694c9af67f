//! Procedural scene generator used as a self-contained stand-in for aerial imagery.
//!
//! Every scene is a textured background that identifies its class with a few
//! colored square objects on top. Captions are five paraphrase templates over
//! (class, object count, object color).

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageCaptionRecord, Split};
use crate::error::{Error, Result};

pub const SCENE_SIZE: u32 = 256;
const OBJECT_SIZE: u32 = 40;
const MAX_OBJECTS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneClass {
    Water,
    Forest,
    Buildings,
    Tanks,
    Runway,
}

impl SceneClass {
    pub const ALL: [SceneClass; 5] = [
        SceneClass::Water,
        SceneClass::Forest,
        SceneClass::Buildings,
        SceneClass::Tanks,
        SceneClass::Runway,
    ];

    pub fn word(self) -> &'static str {
        match self {
            SceneClass::Water => "water",
            SceneClass::Forest => "forest",
            SceneClass::Buildings => "buildings",
            SceneClass::Tanks => "tanks",
            SceneClass::Runway => "runway",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectColor {
    Red,
    Yellow,
    White,
    Magenta,
}

impl ObjectColor {
    pub const ALL: [ObjectColor; 4] = [
        ObjectColor::Red,
        ObjectColor::Yellow,
        ObjectColor::White,
        ObjectColor::Magenta,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ObjectColor::Red => "red",
            ObjectColor::Yellow => "yellow",
            ObjectColor::White => "white",
            ObjectColor::Magenta => "magenta",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            ObjectColor::Red => [225, 30, 30],
            ObjectColor::Yellow => [240, 220, 40],
            ObjectColor::White => [248, 248, 248],
            ObjectColor::Magenta => [210, 40, 210],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub scene_class: SceneClass,
    pub object_count: u32,
    pub object_color: ObjectColor,
}

impl SyntheticSceneSpec {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SyntheticSceneSpec {
            seed,
            scene_class: SceneClass::ALL[rng.random_range(0..SceneClass::ALL.len())],
            object_count: rng.random_range(1..=MAX_OBJECTS),
            object_color: ObjectColor::ALL[rng.random_range(0..ObjectColor::ALL.len())],
        }
    }
}

/// Every (class, count, color) combination.
fn attribute_grid() -> Vec<(SceneClass, u32, ObjectColor)> {
    let mut grid = Vec::new();
    for class in SceneClass::ALL {
        for count in 1..=MAX_OBJECTS {
            for color in ObjectColor::ALL {
                grid.push((class, count, color));
            }
        }
    }
    grid
}

/// Specs whose attribute combinations do not repeat until the grid is
/// exhausted, so scenes in a small dataset are told apart by their captions.
fn sample_distinct_specs(n: usize, rng: &mut ChaCha8Rng) -> Vec<SyntheticSceneSpec> {
    let mut out = Vec::with_capacity(n);
    let mut cycle = Vec::new();
    while out.len() < n {
        if cycle.is_empty() {
            cycle = attribute_grid();
            cycle.shuffle(rng);
        }
        let (scene_class, object_count, object_color) = cycle.pop().expect("non-empty grid");
        out.push(SyntheticSceneSpec {
            seed: rng.random(),
            scene_class,
            object_count,
            object_color,
        });
    }
    out
}

fn count_word(n: u32) -> &'static str {
    [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    ]
    .get(n as usize)
    .copied()
    .unwrap_or("many")
}

/// The five reference captions for a scene.
pub fn scene_captions(spec: &SyntheticSceneSpec) -> Vec<String> {
    let class = spec.scene_class.word();
    let count = count_word(spec.object_count);
    let color = spec.object_color.word();
    let noun = if spec.object_count == 1 { "object" } else { "objects" };
    vec![
        format!("an aerial image of {class} with {count} {color} {noun}"),
        format!("there are {count} {color} {noun} in the {class} area"),
        format!("{count} {color} {noun} located in a {class} scene"),
        format!("this {class} region contains {count} {color} {noun}"),
        format!("a remote sensing picture of {class} showing {count} {color} {noun}"),
    ]
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> Rgb<u8> {
    let n = rng.random_range(-amount..=amount);
    Rgb(base.map(|c| (c as i32 + n).clamp(0, 255) as u8))
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn fill_disc(img: &mut RgbImage, cx: i32, cy: i32, r: i32, color: [u8; 3]) {
    for y in (cy - r).max(0)..(cy + r).min(img.height() as i32) {
        for x in (cx - r).max(0)..(cx + r).min(img.width() as i32) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

fn draw_background(img: &mut RgbImage, class: SceneClass, rng: &mut ChaCha8Rng) {
    let s = SCENE_SIZE;
    match class {
        SceneClass::Water => {
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            for y in 0..s {
                for x in 0..s {
                    let wave = ((y as f32 * 0.15 + phase).sin() * 18.0) as i32;
                    let p = jitter(rng, [25, 75, 160], 6);
                    let b = (p[2] as i32 + wave).clamp(0, 255) as u8;
                    img.put_pixel(x, y, Rgb([p[0], p[1], b]));
                }
            }
        }
        SceneClass::Forest => {
            for y in 0..s {
                for x in 0..s {
                    img.put_pixel(x, y, jitter(rng, [35, 105, 40], 8));
                }
            }
            for _ in 0..40 {
                let (cx, cy) = (rng.random_range(0..s) as i32, rng.random_range(0..s) as i32);
                fill_disc(img, cx, cy, rng.random_range(6..16), [20, 70, 25]);
            }
        }
        SceneClass::Buildings => {
            for y in 0..s {
                for x in 0..s {
                    img.put_pixel(x, y, jitter(rng, [120, 120, 125], 5));
                }
            }
            for gy in 0..8 {
                for gx in 0..8 {
                    let shade = rng.random_range(150..200) as u8;
                    fill_rect(img, gx * 32 + 4, gy * 32 + 4, 22, 22, [shade, shade - 10, shade - 20]);
                }
            }
        }
        SceneClass::Tanks => {
            for y in 0..s {
                for x in 0..s {
                    img.put_pixel(x, y, jitter(rng, [195, 170, 120], 6));
                }
            }
            for _ in 0..12 {
                let (cx, cy) = (rng.random_range(0..s) as i32, rng.random_range(0..s) as i32);
                fill_disc(img, cx, cy, 12, [170, 170, 165]);
            }
        }
        SceneClass::Runway => {
            for y in 0..s {
                for x in 0..s {
                    img.put_pixel(x, y, jitter(rng, [95, 120, 70], 6));
                }
            }
            let y0 = rng.random_range(70..130);
            fill_rect(img, 0, y0, s, 56, [60, 60, 62]);
            for x in (8..s).step_by(40) {
                fill_rect(img, x, y0 + 26, 22, 4, [235, 235, 235]);
            }
        }
    }
}

/// Deterministic rendering of a scene spec.
pub fn render_scene(spec: &SyntheticSceneSpec) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05ee_d0f5_ce9e);
    let mut img = RgbImage::new(SCENE_SIZE, SCENE_SIZE);
    draw_background(&mut img, spec.scene_class, &mut rng);

    // objects occupy distinct cells of a 4x4 grid, jittered inside the cell
    let cell = SCENE_SIZE / 4;
    let mut cells: Vec<u32> = (0..16).collect();
    cells.shuffle(&mut rng);
    for &c in cells.iter().take(spec.object_count as usize) {
        let slack = cell - OBJECT_SIZE;
        let x = (c % 4) * cell + rng.random_range(0..=slack);
        let y = (c / 4) * cell + rng.random_range(0..=slack);
        fill_rect(&mut img, x, y, OBJECT_SIZE, OBJECT_SIZE, spec.object_color.rgb());
    }
    img
}

fn split_counts(n: usize) -> (usize, usize) {
    let train = ((n as f64) * 0.8).round() as usize;
    let val = (((n as f64) * 0.1).round() as usize).min(n - train);
    (train, val)
}

/// Writes `n_images` PNG scenes plus `manifest.json` into `out_dir`.
pub fn generate_synthetic_dataset(n_images: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = sample_distinct_specs(n_images, &mut rng);
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val) = split_counts(n_images);
    let mut splits = vec![Split::Test; n_images];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::with_capacity(n_images);
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("scene_{i:05}.png");
        let path = out_dir.join(&name);
        render_scene(spec)
            .save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        records.push(ImageCaptionRecord {
            image_uri: name,
            split: splits[i],
            captions: scene_captions(spec),
            source: None,
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{n_images}-{seed}"),
        base_dir: out_dir.to_path_buf(),
        records,
    };
    let on_disk = DatasetManifest {
        base_dir: "".into(),
        ..manifest.clone()
    };
    on_disk.save(&out_dir.join("manifest.json"))?;
    let specs_json = serde_json::to_string_pretty(&specs)?;
    let specs_path = out_dir.join("scenes.json");
    std::fs::write(&specs_path, specs_json + "\n").map_err(|e| Error::io(&specs_path, e))?;
    Ok(manifest)
}
