//! Boxes and binary masks at pixel resolution.
//!
//! Boxes are half-open `[x1,x2) x [y1,y2)` with the origin at the top-left,
//! x rightward and y downward, so `area = (x2-x1)*(y2-y1)` and rasterized
//! unions are exact. Validity (`x1<x2`, `y1<y2`) is enforced at construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Half-open axis-aligned pixel box. Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// The box covering an entire `width x height` image.
    pub fn full(width: u32, height: u32) -> Result<Self> {
        BBox::new(0, 0, width, height)
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn x2(&self) -> u32 {
        self.x2
    }
    pub fn y2(&self) -> u32 {
        self.y2
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.x2 > width || self.y2 > height {
            return Err(Error::BoxOutOfBounds {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                width,
                height,
            });
        }
        Ok(())
    }

    /// Smallest box containing every box in the iterator.
    pub fn enclosing<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        let mut it = boxes.into_iter();
        let first = *it.next()?;
        let mut acc = first;
        for b in it {
            acc.x1 = acc.x1.min(b.x1);
            acc.y1 = acc.y1.min(b.y1);
            acc.x2 = acc.x2.max(b.x2);
            acc.y2 = acc.y2.max(b.y2);
        }
        Some(acc)
    }

    /// Scale every coordinate by an integer factor.
    pub fn scale(&self, factor: u32) -> BBox {
        BBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [u32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> [u32; 4] {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// One binary flag per pixel, row-major, same dimensions as the image it
/// annotates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        Ok(Mask {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        })
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        let mut m = Mask::empty(width, height)?;
        m.bits.fill(true);
        Ok(m)
    }

    /// Rasterized union of boxes; every box must lie within the dimensions.
    pub fn from_boxes(width: u32, height: u32, boxes: &[BBox]) -> Result<Self> {
        let mut m = Mask::empty(width, height)?;
        for b in boxes {
            b.check_within(width, height)?;
            for y in b.y1()..b.y2() {
                let row = (y as usize) * (width as usize);
                for x in b.x1()..b.x2() {
                    m.bits[row + x as usize] = true;
                }
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.bits[(y as usize) * (self.width as usize) + (x as usize)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        debug_assert!(x < self.width && y < self.height);
        self.bits[(y as usize) * (self.width as usize) + (x as usize)] = value;
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Row-major indices of set pixels.
    pub fn set_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Row-major flags.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Set the pixel at a row-major index.
    pub fn set_index(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Render as a 0/255 image for PGM serialization.
    pub fn to_image(&self) -> GrayImage {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::new(self.width, self.height, data).expect("mask dims are valid")
    }

    /// Interpret an image as a mask: values >= 128 are set.
    pub fn from_image(img: &GrayImage) -> Mask {
        Mask {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v >= 128).collect(),
        }
    }

    /// Downscale or upscale through the shared bilinear resampler, then
    /// re-binarize at 128. Preserves 0/255 semantics.
    pub fn resize(&self, width: u32, height: u32) -> Result<Mask> {
        Ok(Mask::from_image(
            &self.to_image().resize_bilinear(width, height)?,
        ))
    }

    /// Nearest-neighbor upscale; an integer factor k maps a box [a,b) to
    /// exactly [k*a, k*b).
    pub fn upsample_nearest(&self, width: u32, height: u32) -> Result<Mask> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        let mut m = Mask::empty(width, height)?;
        for y in 0..height {
            let sy = (y as u64 * self.height as u64 / height as u64) as u32;
            for x in 0..width {
                let sx = (x as u64 * self.width as u64 / width as u64) as u32;
                if self.get(sx, sy) {
                    m.set(x, y, true);
                }
            }
        }
        Ok(m)
    }
}

/// Tightest half-open box enclosing all set pixels.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox> {
    let (mut min_x, mut min_y) = (u32::MAX, u32::MAX);
    let (mut max_x, mut max_y) = (0u32, 0u32);
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return Err(Error::EmptyRegion);
    }
    BBox::new(min_x, min_y, max_x + 1, max_y + 1)
}

/// Pixel counts over the rasterized union regions of two box lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnionCounts {
    /// Pixels in both union regions.
    pub intersection: u64,
    /// Pixels in either union region.
    pub union: u64,
    /// Pixels in the union region of `boxes_a`.
    pub area_a: u64,
    /// Pixels in the union region of `boxes_b`.
    pub area_b: u64,
}

/// Count overlap between the union regions of two box lists at the given
/// dimensions. Overlapping boxes within one list are counted once.
pub fn union_pixel_count(
    boxes_a: &[BBox],
    boxes_b: &[BBox],
    dims: (u32, u32),
) -> Result<UnionCounts> {
    let (width, height) = dims;
    let a = Mask::from_boxes(width, height, boxes_a)?;
    let b = Mask::from_boxes(width, height, boxes_b)?;
    let mut counts = UnionCounts {
        intersection: 0,
        union: 0,
        area_a: 0,
        area_b: 0,
    };
    for i in 0..a.bits.len() {
        let (pa, pb) = (a.bits[i], b.bits[i]);
        counts.area_a += pa as u64;
        counts.area_b += pb as u64;
        counts.intersection += (pa && pb) as u64;
        counts.union += (pa || pb) as u64;
    }
    Ok(counts)
}
