//! Procedural style families standing in for style LoRAs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};
use crate::raster::{quantize, Mask, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleLevel {
    Color,
    Line,
    Texture,
    Semantic,
}

/// Generator of one family. Colors are RGB in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleSpec {
    Identity,
    /// Fixed 3×3 color matrix (rows produce R, G, B).
    ColorMatrix { matrix: [[f64; 3]; 3] },
    /// Luma mapped linearly between two colors.
    Duotone { dark: [f64; 3], light: [f64; 3] },
    /// Channels thresholded at 0.5; on and off colors per channel.
    Posterize { on: [f64; 3], off: [f64; 3] },
    /// Color edges drawn as strokes on paper, optional grid every `grid` pixels.
    Outline { paper: [f64; 3], ink: [f64; 3], grid: usize, width: usize },
    /// Edges in the darkened object color, each stroke pixel jittered by up to one pixel.
    Crayon { paper: [f64; 3], darken: f64 },
    /// Diagonal lines whose density follows luma.
    Hatch { paper: [f64; 3], ink: [f64; 3], period: usize },
    /// Partial desaturation plus uniform noise of the given amplitude.
    Grain { saturation: f64, amplitude: f64 },
    /// Round dots per cell with radius growing with darkness.
    Halftone { paper: [f64; 3], ink: [f64; 3], cell: usize },
    /// Block-mean tiles separated by grout lines.
    Mosaic { tile: usize, grout: [f64; 3] },
    /// Objects become a stamped motif with rough, partly eroded edges.
    GlyphStamp { paper: [f64; 3], ink: [f64; 3], erosion: f64 },
    /// Jittered dots sampling the content colors on paper.
    Pointillism { paper: [f64; 3], spacing: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleFamily {
    pub style_id: String,
    pub level: StyleLevel,
    pub spec: StyleSpec,
    pub seed: u64,
}

/// Identifiers of the built-in families, Color through Semantic.
pub const FAMILY_IDS: [&str; 12] = [
    "sepia",
    "ocean_duotone",
    "neon_posterize",
    "ink_outline",
    "blueprint",
    "crayon_edge",
    "diagonal_hatch",
    "film_grain",
    "halftone",
    "mosaic",
    "glyph_stamp",
    "pointillism",
];

const PAPER: [f64; 3] = [0.96, 0.94, 0.88];

impl StyleFamily {
    pub fn identity() -> Self {
        Self {
            style_id: "identity".into(),
            level: StyleLevel::Color,
            spec: StyleSpec::Identity,
            seed: 0,
        }
    }

    /// A built-in family by id (see [`FAMILY_IDS`]), or `identity`.
    pub fn builtin(id: &str) -> Result<Self> {
        use StyleLevel::*;
        use StyleSpec::*;
        let (level, spec) = match id {
            "identity" => return Ok(Self::identity()),
            "sepia" => (
                Color,
                ColorMatrix {
                    matrix: [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]],
                },
            ),
            "ocean_duotone" => (
                Color,
                Duotone {
                    dark: [0.02, 0.1, 0.3],
                    light: [0.5, 0.92, 0.88],
                },
            ),
            "neon_posterize" => (
                Color,
                Posterize {
                    on: [1.0, 0.2, 0.85],
                    off: [0.05, 0.0, 0.12],
                },
            ),
            "ink_outline" => (
                Line,
                Outline {
                    paper: [1.0, 1.0, 1.0],
                    ink: [0.05, 0.05, 0.05],
                    grid: 0,
                    width: 1,
                },
            ),
            "blueprint" => (
                Line,
                Outline {
                    paper: [0.08, 0.2, 0.55],
                    ink: [0.88, 0.93, 1.0],
                    grid: 4,
                    width: 1,
                },
            ),
            "crayon_edge" => (Line, Crayon { paper: PAPER, darken: 0.6 }),
            "diagonal_hatch" => (
                Texture,
                Hatch {
                    paper: PAPER,
                    ink: [0.15, 0.12, 0.1],
                    period: 4,
                },
            ),
            "film_grain" => (
                Texture,
                Grain {
                    saturation: 0.3,
                    amplitude: 0.25,
                },
            ),
            "halftone" => (
                Texture,
                Halftone {
                    paper: [1.0, 1.0, 1.0],
                    ink: [0.85, 0.1, 0.45],
                    cell: 4,
                },
            ),
            "mosaic" => (
                Texture,
                Mosaic {
                    tile: 4,
                    grout: [0.25, 0.22, 0.2],
                },
            ),
            "glyph_stamp" => (
                Semantic,
                GlyphStamp {
                    paper: [0.78, 0.65, 0.45],
                    ink: [0.7, 0.08, 0.1],
                    erosion: 0.3,
                },
            ),
            "pointillism" => (Semantic, Pointillism { paper: PAPER, spacing: 3 }),
            other => return Err(Error::Config(format!("unknown style family {other}"))),
        };
        Ok(Self {
            style_id: id.to_string(),
            level,
            spec,
            seed: derive_seed(0x5eed, &[FAMILY_IDS.iter().position(|f| *f == id).unwrap_or(0) as u64]),
        })
    }

    pub fn builtins() -> Vec<Self> {
        FAMILY_IDS.iter().map(|id| Self::builtin(id).expect("builtin")).collect()
    }
}

/// Output of a style transform: the image and the object layout it keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct Stylized {
    pub raster: Raster,
    pub mask: Mask,
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn to_u8(p: [f64; 3]) -> [u8; 3] {
    [quantize(p[0]), quantize(p[1]), quantize(p[2])]
}

/// Pixels whose color differs from a 4-neighbour by more than 0.15 in some channel.
fn edge_map(img: &Raster) -> Vec<bool> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = img.unit(x, y);
            let differs = |nx: usize, ny: usize| {
                let q = img.unit(nx, ny);
                (0..3).any(|c| (p[c] - q[c]).abs() > 0.15)
            };
            let e = (x + 1 < w && differs(x + 1, y))
                || (y + 1 < h && differs(x, y + 1))
                || (x > 0 && differs(x - 1, y))
                || (y > 0 && differs(x, y - 1));
            out[y * w + x] = e;
        }
    }
    out
}

fn map_pixels(img: &Raster, f: impl Fn(usize, usize, [f64; 3]) -> [f64; 3]) -> Raster {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set(x, y, to_u8(f(x, y, img.unit(x, y))));
        }
    }
    out
}

/// Applies `family` to a content image. Every family keeps the object
/// layout: the returned mask has IoU ≥ 0.7 with `mask`.
pub fn apply_style(img: &Raster, mask: &Mask, family: &StyleFamily, seed: u64) -> Result<Stylized> {
    if mask.width() != img.width() || mask.height() != img.height() {
        return Err(Error::UnsupportedImage("mask and image sizes differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(family.seed, &[seed]));
    let (w, h) = (img.width(), img.height());
    let mut out_mask = mask.clone();
    let raster = match &family.spec {
        StyleSpec::Identity => img.clone(),
        StyleSpec::ColorMatrix { matrix } => map_pixels(img, |_, _, p| {
            let row = |r: &[f64; 3]| r[0] * p[0] + r[1] * p[1] + r[2] * p[2];
            [row(&matrix[0]), row(&matrix[1]), row(&matrix[2])]
        }),
        StyleSpec::Duotone { dark, light } => map_pixels(img, |_, _, p| lerp(*dark, *light, luma(p))),
        StyleSpec::Posterize { on, off } => {
            map_pixels(img, |_, _, p| std::array::from_fn(|c| if p[c] > 0.5 { on[c] } else { off[c] }))
        }
        StyleSpec::Outline { paper, ink, grid, width } => {
            let edges = edge_map(img);
            let thick = |x: usize, y: usize| {
                let r = width.saturating_sub(1);
                (y.saturating_sub(r)..(y + r + 1).min(h)).any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| edges[yy * w + xx]))
            };
            map_pixels(img, |x, y, _| {
                if thick(x, y) {
                    *ink
                } else if *grid > 0 && (x % grid == 0 || y % grid == 0) {
                    lerp(*paper, *ink, 0.25)
                } else {
                    *paper
                }
            })
        }
        StyleSpec::Crayon { paper, darken } => {
            let edges = edge_map(img);
            let mut out = Raster::filled(w, h, to_u8(*paper));
            for y in 0..h {
                for x in 0..w {
                    if !edges[y * w + x] {
                        continue;
                    }
                    let p = img.unit(x, y);
                    let ink = p.map(|v| v * *darken);
                    let jx = (x as i64 + rng.gen_range(-1..=1)).clamp(0, w as i64 - 1) as usize;
                    let jy = (y as i64 + rng.gen_range(-1..=1)).clamp(0, h as i64 - 1) as usize;
                    out.set(x, y, to_u8(ink));
                    out.set(jx, jy, to_u8(lerp(ink, *paper, 0.3)));
                }
            }
            out
        }
        StyleSpec::Hatch { paper, ink, period } => map_pixels(img, |x, y, p| {
            let darkness = 1.0 - luma(p);
            let lines = ((darkness * *period as f64).round() as usize).max(1);
            if (x + y) % period < lines {
                *ink
            } else {
                *paper
            }
        }),
        StyleSpec::Grain { saturation, amplitude } => {
            let noise: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-*amplitude..*amplitude)).collect();
            map_pixels(img, |x, y, p| {
                let l = luma(p);
                let n = noise[y * w + x];
                p.map(|v| l + (v - l) * *saturation + n)
            })
        }
        StyleSpec::Halftone { paper, ink, cell } => {
            let c = *cell;
            map_pixels(img, |x, y, _| {
                let (cx, cy) = (x / c * c, y / c * c);
                let mut dark = 0.0;
                let mut n = 0.0;
                for yy in cy..(cy + c).min(h) {
                    for xx in cx..(cx + c).min(w) {
                        dark += 1.0 - luma(img.unit(xx, yy));
                        n += 1.0;
                    }
                }
                let radius = (dark / n) * c as f64 * 0.75;
                let centre = c as f64 / 2.0;
                let dx = (x - cx) as f64 + 0.5 - centre;
                let dy = (y - cy) as f64 + 0.5 - centre;
                if dx * dx + dy * dy <= radius * radius {
                    *ink
                } else {
                    *paper
                }
            })
        }
        StyleSpec::Mosaic { tile, grout } => {
            let t = *tile;
            map_pixels(img, |x, y, _| {
                if (x % t == t - 1) || (y % t == t - 1) {
                    return *grout;
                }
                let (cx, cy) = (x / t * t, y / t * t);
                let mut sum = [0.0; 3];
                let mut n = 0.0;
                for yy in cy..(cy + t - 1).min(h) {
                    for xx in cx..(cx + t - 1).min(w) {
                        let q = img.unit(xx, yy);
                        (0..3).for_each(|k| sum[k] += q[k]);
                        n += 1.0;
                    }
                }
                sum.map(|v| v / n)
            })
        }
        StyleSpec::GlyphStamp { paper, ink, erosion } => {
            let mut out = Raster::filled(w, h, to_u8(*paper));
            // eroding at most a quarter of the mask keeps IoU >= 0.75
            let mut budget = mask.count() / 4;
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(x, y) {
                        continue;
                    }
                    let boundary = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !mask.get(nx as usize, ny as usize)
                    });
                    if boundary && rng.gen_bool(*erosion) && budget > 0 {
                        budget -= 1;
                        out_mask.set(x, y, false);
                        continue;
                    }
                    // plus-shaped motif on a 3-pixel lattice
                    let motif = (x % 3 == 1) || (y % 3 == 1);
                    out.set(x, y, to_u8(if motif { *ink } else { lerp(*ink, *paper, 0.55) }));
                }
            }
            out
        }
        StyleSpec::Pointillism { paper, spacing } => {
            let s = *spacing;
            let mut out = Raster::filled(w, h, to_u8(*paper));
            for gy in (0..h).step_by(s) {
                for gx in (0..w).step_by(s) {
                    let cx = (gx + rng.gen_range(0..s)).min(w - 1);
                    let cy = (gy + rng.gen_range(0..s)).min(h - 1);
                    let color = to_u8(img.unit(cx, cy));
                    for (dx, dy) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                        let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                            out.set(x as usize, y as usize, color);
                        }
                    }
                }
            }
            out
        }
    };
    Ok(Stylized { raster, mask: out_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::content::generate_content;

    #[test]
    fn identity_returns_content() {
        let c = &generate_content(1, 1, 16, 4).unwrap()[0];
        let s = apply_style(&c.raster, &c.mask, &StyleFamily::identity(), 9).unwrap();
        assert_eq!(s.raster, c.raster);
        assert_eq!(s.mask, c.mask);
    }

    #[test]
    fn palette_remap_of_constant_image_is_constant() {
        let img = Raster::filled(8, 8, [100, 150, 200]);
        let fam = StyleFamily::builtin("ocean_duotone").unwrap();
        let s = apply_style(&img, &Mask::empty(8, 8), &fam, 0).unwrap();
        let first = s.raster.get(0, 0);
        assert!((0..8).all(|y| (0..8).all(|x| s.raster.get(x, y) == first)));
        let l = luma([100.0 / 255.0, 150.0 / 255.0, 200.0 / 255.0]);
        assert_eq!(first, to_u8(lerp([0.02, 0.1, 0.3], [0.5, 0.92, 0.88], l)));
    }

    #[test]
    fn every_family_is_deterministic_and_keeps_layout() {
        let contents = generate_content(24, 6, 16, 7).unwrap();
        for fam in StyleFamily::builtins() {
            for (i, c) in contents.iter().enumerate() {
                let a = apply_style(&c.raster, &c.mask, &fam, i as u64).unwrap();
                let b = apply_style(&c.raster, &c.mask, &fam, i as u64).unwrap();
                assert_eq!(a, b);
                assert!(a.mask.iou(&c.mask) >= 0.7, "{} on {i}", fam.style_id);
            }
        }
    }

    #[test]
    fn ids_are_distinct_and_unknown_rejected() {
        let all = StyleFamily::builtins();
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert_ne!(a.spec, b.spec);
            }
        }
        assert!(StyleFamily::builtin("watercolor").is_err());
    }
}
