//! Procedural content scenes: one or two flat shapes of one category on a
//! plain background, with the object mask and a raw caption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

pub const CATEGORY_NAMES: [&str; 6] = ["circle", "square", "triangle", "ring", "cross", "bar"];

const OBJECT_COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [210, 40, 40]),
    ("blue", [40, 70, 210]),
    ("green", [40, 170, 60]),
    ("yellow", [235, 210, 40]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 50, 180]),
    ("white", [245, 245, 245]),
    ("black", [20, 20, 20]),
];

const BACKGROUNDS: [(&str, [u8; 3]); 4] = [
    ("dark", [45, 45, 55]),
    ("bright", [230, 228, 215]),
    ("gray", [128, 128, 128]),
    ("light-colored", [200, 215, 230]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ContentImage {
    pub raster: Raster,
    pub mask: Mask,
    pub category: usize,
    pub objects: usize,
    pub caption: String,
    pub seed: u64,
}

/// Whether the pixel centre offset `(dx, dy)` from an object centre lies
/// inside a shape of the category with radius `r`.
fn inside(category: usize, dx: f64, dy: f64, r: f64) -> bool {
    match category {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.5 * (dy + r),
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.25 * r * r
        }
        4 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        _ => dx.abs() <= r && dy.abs() <= r / 3.0,
    }
}

/// Renders one scene from `seed`.
pub fn render_content(size: usize, category: usize, seed: u64) -> Result<ContentImage> {
    if size < 8 {
        return Err(Error::invalid(format!("content size {size} is below 8 pixels")));
    }
    if category >= CATEGORY_NAMES.len() {
        return Err(Error::invalid(format!("category {category} is not one of {}", CATEGORY_NAMES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bg_name, bg) = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];
    let objects = rng.gen_range(1..=2);
    let mut raster = Raster::filled(size, size, bg);
    let mut mask = Mask::empty(size, size);
    let s = size as f64;
    let mut names = Vec::new();
    for _ in 0..objects {
        let (name, color) = loop {
            let c = OBJECT_COLORS[rng.gen_range(0..OBJECT_COLORS.len())];
            let contrast: i32 = (0..3).map(|i| (c.1[i] as i32 - bg[i] as i32).abs()).sum();
            if contrast > 120 {
                break c;
            }
        };
        let r = s * rng.gen_range(0.19..0.3);
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        for y in 0..size {
            for x in 0..size {
                if inside(category, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    raster.set(x, y, color);
                    mask.set(x, y, true);
                }
            }
        }
        names.push(name);
    }
    let shape = CATEGORY_NAMES[category];
    let subject = names.iter().map(|n| format!("a {n} {shape}")).collect::<Vec<_>>().join(" and ");
    Ok(ContentImage {
        raster,
        mask,
        category,
        objects,
        caption: format!("{subject} on a {bg_name} background"),
        seed,
    })
}

/// `count` scenes with categories assigned round-robin over the first
/// `categories` names, so divisible counts give exactly equal shares.
pub fn generate_content(count: usize, categories: usize, size: usize, seed: u64) -> Result<Vec<ContentImage>> {
    if count == 0 {
        return Err(Error::invalid("content count must be at least 1"));
    }
    if categories == 0 || categories > CATEGORY_NAMES.len() {
        return Err(Error::invalid(format!("categories must be in 1..={}", CATEGORY_NAMES.len())));
    }
    (0..count)
        .map(|i| render_content(size, i % categories, derive_seed(seed, &[1, i as u64])))
        .collect()
}
