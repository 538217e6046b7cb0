//! Synthetic labelled images: one large target shape per image plus smaller
//! distractor shapes drawn from other classes, with exact bounding boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    /// Chebyshev distance from a pixel to the rectangle (zero inside).
    pub fn chebyshev_distance(&self, y: usize, x: usize) -> usize {
        let dy = self.y0.saturating_sub(y).max(y.saturating_sub(self.y1));
        let dx = self.x0.saturating_sub(x).max(x.saturating_sub(self.x1));
        dy.max(dx)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    fn overlaps_with_margin(&self, other: &BoxRect, margin: usize) -> bool {
        self.x0 <= other.x1 + margin
            && other.x0 <= self.x1 + margin
            && self.y0 <= other.y1 + margin
            && other.y0 <= self.y1 + margin
    }
}

/// Ground-truth boxes of one class in one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: usize,
    pub class: usize,
    pub boxes: Vec<BoxRect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

/// Class colours, 8-bit RGB.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 90, 230],
    [230, 210, 40],
    [200, 60, 210],
    [40, 210, 210],
    [240, 140, 30],
    [240, 240, 240],
];

const BACKGROUND: u8 = 40;

pub fn class_shape(class: usize) -> Shape {
    SHAPES[class % SHAPES.len()]
}

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub image_size: usize,
    /// 3 for colour, 1 for grey (luma of the palette colour).
    pub channels: usize,
    pub distractors: usize,
    pub target_size: (usize, usize),
    pub distractor_size: (usize, usize),
    /// Uniform per-pixel noise amplitude, in 8-bit levels.
    pub noise: u8,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { image_size: 32, channels: 3, distractors: 1, target_size: (10, 14), distractor_size: (5, 7), noise: 12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    /// `C x H x W` with values `k / 255`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Box of the target shape of each image, under its label.
    pub annotations: Vec<Annotation>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            annotations: self.annotations[..n].to_vec(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }
}

fn shape_mask(shape: Shape, size: usize) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 - c, x as f64 - c);
            m[y * size + x] = match shape {
                Shape::Square => true,
                Shape::Circle => fy * fy + fx * fx <= (size as f64 / 2.0).powi(2),
                Shape::Triangle => fx.abs() <= (y as f64 + 1.0) / 2.0,
                Shape::Cross => {
                    let t = (size as f64 / 6.0).max(0.5);
                    fx.abs() <= t || fy.abs() <= t
                }
            };
        }
    }
    m
}

struct Canvas {
    size: usize,
    pixels: Vec<[i32; 3]>,
}

impl Canvas {
    fn paint(&mut self, shape: Shape, color: [u8; 3], x0: usize, y0: usize, size: usize) -> BoxRect {
        let mask = shape_mask(shape, size);
        let mut bbox = BoxRect { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
        for y in 0..size {
            for x in 0..size {
                if mask[y * size + x] {
                    let (py, px) = (y0 + y, x0 + x);
                    self.pixels[py * self.size + px] = color.map(i32::from);
                    bbox.x0 = bbox.x0.min(px);
                    bbox.y0 = bbox.y0.min(py);
                    bbox.x1 = bbox.x1.max(px);
                    bbox.y1 = bbox.y1.max(py);
                }
            }
        }
        bbox
    }
}

fn place(rng: &mut ChaCha8Rng, image_size: usize, size: usize, taken: &[BoxRect]) -> Result<(usize, usize)> {
    for _ in 0..100 {
        let x0 = rng.random_range(0..=image_size - size);
        let y0 = rng.random_range(0..=image_size - size);
        let cand = BoxRect { x0, y0, x1: x0 + size - 1, y1: y0 + size - 1 };
        if taken.iter().all(|t| !cand.overlaps_with_margin(t, 1)) {
            return Ok((x0, y0));
        }
    }
    Err(Error::Generation(format!("could not place a {size}px shape without overlap after 100 attempts")))
}

pub fn generate_shapes(num_images: usize, num_classes: usize, seed: u64) -> Result<ShapesDataset> {
    generate_shapes_with(&ShapesConfig::default(), num_images, num_classes, seed)
}

/// Labels are assigned round-robin so class counts differ by at most one.
pub fn generate_shapes_with(
    cfg: &ShapesConfig,
    num_images: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ShapesDataset> {
    if !(2..=8).contains(&num_classes) {
        return Err(invalid(format!("num_classes must be in [2, 8], got {num_classes}")));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(invalid("channels must be 1 or 3"));
    }
    if cfg.target_size.1 > cfg.image_size || cfg.target_size.0 == 0 || cfg.target_size.0 > cfg.target_size.1 {
        return Err(invalid("target size range does not fit the image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let mut ds = ShapesDataset {
        images: Vec::with_capacity(num_images),
        labels: Vec::with_capacity(num_images),
        annotations: Vec::with_capacity(num_images),
        num_classes,
        seed,
    };
    for id in 0..num_images {
        let label = id % num_classes;
        let mut canvas = Canvas { size: n, pixels: vec![[i32::from(BACKGROUND); 3]; n * n] };
        let size = rng.random_range(cfg.target_size.0..=cfg.target_size.1);
        let (x0, y0) = place(&mut rng, n, size, &[])?;
        let mut taken = vec![BoxRect { x0, y0, x1: x0 + size - 1, y1: y0 + size - 1 }];
        let target_box = canvas.paint(class_shape(label), class_color(label), x0, y0, size);
        for _ in 0..cfg.distractors {
            let other = (label + rng.random_range(1..num_classes)) % num_classes;
            let dsize = rng.random_range(cfg.distractor_size.0..=cfg.distractor_size.1);
            let (dx, dy) = place(&mut rng, n, dsize, &taken)?;
            taken.push(BoxRect { x0: dx, y0: dy, x1: dx + dsize - 1, y1: dy + dsize - 1 });
            canvas.paint(class_shape(other), class_color(other), dx, dy, dsize);
        }
        let noise = i32::from(cfg.noise);
        let mut data = vec![0.0; cfg.channels * n * n];
        for (p, px) in canvas.pixels.iter().enumerate() {
            let jitter = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
            if cfg.channels == 3 {
                for c in 0..3 {
                    data[c * n * n + p] = f64::from((px[c] + jitter).clamp(0, 255) as u8) / 255.0;
                }
            } else {
                let luma = (299 * px[0] + 587 * px[1] + 114 * px[2]) / 1000;
                data[p] = f64::from((luma + jitter).clamp(0, 255) as u8) / 255.0;
            }
        }
        ds.images.push(Tensor::new(vec![cfg.channels, n, n], data)?);
        ds.labels.push(label);
        ds.annotations.push(Annotation { image_id: id, class: label, boxes: vec![target_box] });
    }
    Ok(ds)
}
