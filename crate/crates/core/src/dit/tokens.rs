//! Patch layout and the `[c, z_t, z_c]` token sequence.

use crate::error::{Error, Result};
use crate::numeric::Array;
use crate::raster::Raster;

/// Concatenated condition, noisy-image and content-control tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array,
    c_len: usize,
    zt_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// End of the condition block and end of the noisy block.
    pub fn boundaries(&self) -> (usize, usize) {
        (self.c_len, self.c_len + self.zt_len)
    }

    pub fn with_tokens(&self, tokens: Array) -> Result<Self> {
        if tokens.rows() != self.len() {
            return Err(Error::Shape {
                op: "with_tokens",
                lhs: self.tokens.shape().to_vec(),
                rhs: tokens.shape().to_vec(),
            });
        }
        Ok(Self {
            tokens,
            c_len: self.c_len,
            zt_len: self.zt_len,
        })
    }

    /// The three blocks; absent blocks are `None`.
    pub fn split(&self) -> (Option<Array>, Array, Option<Array>) {
        let w = self.tokens.cols();
        let (a, b) = self.boundaries();
        let rows = |s: usize, e: usize| Array::from_parts(vec![e - s, w], self.tokens.data()[s * w..e * w].to_vec());
        let c = (a > 0).then(|| rows(0, a));
        (c, rows(a, b), (b < self.len()).then(|| rows(b, self.len())))
    }
}

/// Orders tokens as `[c, z_t, z_c]` and records the block boundaries. The
/// condition and content blocks may be absent.
pub fn assemble_tokens(c: Option<&Array>, z_t: &Array, z_c: Option<&Array>) -> Result<TokenSequence> {
    if z_t.shape().len() != 2 || z_t.rows() == 0 {
        return Err(Error::invalid("noisy-image block must not be empty"));
    }
    let w = z_t.cols();
    let mut data = Vec::new();
    let mut c_len = 0;
    for (block, name) in [(c, "condition"), (Some(z_t), "noisy"), (z_c, "content")] {
        let Some(block) = block else { continue };
        if block.shape().len() != 2 || block.cols() != w {
            return Err(Error::Shape {
                op: "assemble_tokens",
                lhs: z_t.shape().to_vec(),
                rhs: block.shape().to_vec(),
            });
        }
        if name == "condition" {
            c_len = block.rows();
        }
        data.extend_from_slice(block.data());
    }
    let rows = data.len() / w;
    Ok(TokenSequence {
        tokens: Array::from_parts(vec![rows, w], data),
        c_len,
        zt_len: z_t.rows(),
    })
}

/// Square image geometry for patchification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub image_size: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(image_size: usize, patch: usize) -> Result<Self> {
        if patch == 0 || image_size == 0 || !image_size.is_multiple_of(patch) {
            return Err(Error::Config(format!("image size {image_size} is not divisible by patch size {patch}")));
        }
        Ok(Self { image_size, patch })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Interleaved RGB pixels in `[-1, 1]` to `[num_patches, patch_dim]`,
    /// patches row-major, pixels row-major within a patch.
    pub fn patchify(&self, pixels: &[f64]) -> Result<Array> {
        let n = self.image_size;
        if pixels.len() != n * n * 3 {
            return Err(Error::UnsupportedImage(format!("expected {} values, got {}", n * n * 3, pixels.len())));
        }
        let (g, p) = (self.grid(), self.patch);
        let mut data = Vec::with_capacity(pixels.len());
        for gy in 0..g {
            for gx in 0..g {
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        let i = (y * n + x) * 3;
                        data.extend_from_slice(&pixels[i..i + 3]);
                    }
                }
            }
        }
        Ok(Array::from_parts(vec![self.num_patches(), self.patch_dim()], data))
    }

    pub fn unpatchify(&self, patches: &Array) -> Result<Vec<f64>> {
        if patches.shape() != [self.num_patches(), self.patch_dim()] {
            return Err(Error::Shape {
                op: "unpatchify",
                lhs: patches.shape().to_vec(),
                rhs: vec![self.num_patches(), self.patch_dim()],
            });
        }
        let (n, g, p) = (self.image_size, self.grid(), self.patch);
        let mut out = vec![0.0; n * n * 3];
        let mut k = 0;
        for gy in 0..g {
            for gx in 0..g {
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        let i = (y * n + x) * 3;
                        out[i..i + 3].copy_from_slice(&patches.data()[k..k + 3]);
                        k += 3;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn raster_to_patches(&self, image: &Raster) -> Result<Array> {
        if image.width() != self.image_size || image.height() != self.image_size {
            return Err(Error::UnsupportedImage(format!(
                "expected {0}x{0}, got {1}x{2}",
                self.image_size,
                image.width(),
                image.height()
            )));
        }
        let pixels: Vec<f64> = image.to_unit_vec().iter().map(|v| 2.0 * v - 1.0).collect();
        self.patchify(&pixels)
    }

    pub fn patches_to_raster(&self, patches: &Array) -> Result<Raster> {
        let pixels: Vec<f64> = self.unpatchify(patches)?.iter().map(|v| (v + 1.0) / 2.0).collect();
        Raster::from_unit(self.image_size, self.image_size, &pixels)
    }
}
