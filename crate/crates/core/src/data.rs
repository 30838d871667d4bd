//! Dataset loading and generation: IDX files, deterministic subsets, and a
//! procedurally rendered digit corpus for offline runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::warp::Image;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// One image with its class label and a stable identity within its source
/// dataset. The index keys per-example search state and RNG streams, so it
/// survives subsetting and augmentation.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: Image,
    pub label: u8,
    pub index: u64,
}

/// Immutable collection of same-sized labeled images.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    height: usize,
    width: usize,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        let name = name.into();
        let first = examples
            .first()
            .ok_or_else(|| Error::Consistency(format!("dataset {name} is empty")))?;
        let (height, width) = (first.image.height(), first.image.width());
        for ex in &examples {
            if ex.image.height() != height || ex.image.width() != width {
                return Err(Error::Consistency(format!(
                    "dataset {name}: example {} is {}x{}, expected {height}x{width}",
                    ex.index,
                    ex.image.height(),
                    ex.image.width()
                )));
            }
            if usize::from(ex.label) >= NUM_CLASSES {
                return Err(Error::Consistency(format!(
                    "dataset {name}: example {} has label {} outside 0..{NUM_CLASSES}",
                    ex.index, ex.label
                )));
            }
        }
        Ok(Self { name, height, width, examples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    /// Draws `n` distinct examples without replacement (partial
    /// Fisher-Yates over positions), then restores original order. The
    /// result is a pure function of `(self, n, seed)`.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Bounds(format!(
                "subset of {n} from dataset {} of size {}",
                self.name,
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions: Vec<usize> = (0..self.len()).collect();
        for i in 0..n {
            let j = rng.gen_range(i..positions.len());
            positions.swap(i, j);
        }
        let mut chosen = positions[..n].to_vec();
        chosen.sort_unstable();
        let examples = chosen.into_iter().map(|p| self.examples[p].clone()).collect();
        Dataset::new(format!("{}[{n}@{seed}]", self.name), examples)
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair (big-endian headers, magic `0x803`
/// for images and `0x801` for labels, one byte per pixel scaled to
/// `[0, 1]`).
pub fn load_idx(images_path: &Path, labels_path: &Path, name: &str) -> Result<Dataset> {
    let mut img_reader = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut img_reader)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut img_reader)? as usize;
    let rows = read_u32_be(&mut img_reader)? as usize;
    let cols = read_u32_be(&mut img_reader)? as usize;

    let mut lbl_reader = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lbl_reader)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut lbl_reader)? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let mut labels = vec![0u8; count];
    lbl_reader.read_exact(&mut labels)?;

    let mut examples = Vec::with_capacity(count);
    let mut buf = vec![0u8; rows * cols];
    for (i, label) in labels.into_iter().enumerate() {
        img_reader.read_exact(&mut buf)?;
        let pixels = buf.iter().map(|b| f32::from(*b) / 255.0).collect();
        let image = Image::from_pixels(rows, cols, pixels)?;
        examples.push(LabeledExample { image, label, index: i as u64 });
    }
    Dataset::new(name, examples)
}

/// Writes a dataset as an IDX image/label file pair, quantizing pixels by
/// rounding to `0..=255`.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img_writer = BufWriter::new(File::create(images_path)?);
    img_writer.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img_writer.write_all(&(ds.len() as u32).to_be_bytes())?;
    img_writer.write_all(&(ds.height() as u32).to_be_bytes())?;
    img_writer.write_all(&(ds.width() as u32).to_be_bytes())?;
    for ex in ds.examples() {
        let bytes: Vec<u8> = ex
            .image
            .pixels()
            .iter()
            .map(|p| (f64::from(*p) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        img_writer.write_all(&bytes)?;
    }
    img_writer.flush()?;

    let mut lbl_writer = BufWriter::new(File::create(labels_path)?);
    lbl_writer.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lbl_writer.write_all(&(ds.len() as u32).to_be_bytes())?;
    for ex in ds.examples() {
        lbl_writer.write_all(&[ex.label])?;
    }
    lbl_writer.flush()?;
    Ok(())
}

/// Stroke-rendered 28x28 digit corpus.
///
/// Each class is a fixed set of polyline strokes; per-example jitter
/// (small rotation, shift, scale, stroke thickness, ink level) makes the
/// classes non-trivial while leaving a dark border so moderate warps lose
/// no content. Labels cycle `0..=9`; everything is a pure function of
/// `(n, seed)`.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let shapes = digit_shapes();
    let examples = (0..n)
        .map(|i| {
            let label = (i % NUM_CLASSES) as u8;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let image = render_digit(&shapes[usize::from(label)], &mut rng);
            LabeledExample { image, label, index: i as u64 }
        })
        .collect();
    Dataset::new(format!("synthetic@{seed}"), examples).expect("generator produces valid examples")
}

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, r: f64, deg_from: f64, deg_to: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let a = (deg_from + (deg_to - deg_from) * i as f64 / steps as f64).to_radians();
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn circle(cx: f64, cy: f64, r: f64) -> Stroke {
    arc(cx, cy, r, 0.0, 360.0, 28)
}

/// Control polylines per digit in a unit box, x right and y down.
fn digit_shapes() -> [Vec<Stroke>; NUM_CLASSES] {
    [
        // 0
        vec![arc(0.5, 0.5, 1.0, 0.0, 360.0, 28)
            .into_iter()
            .map(|(x, y)| (0.5 + (x - 0.5) * 0.31, 0.5 + (y - 0.5) * 0.42))
            .collect()],
        // 1
        vec![vec![(0.32, 0.26), (0.52, 0.08), (0.52, 0.92)]],
        // 2
        vec![
            arc(0.5, 0.32, 0.27, 180.0, 350.0, 10),
            vec![(0.76, 0.3), (0.22, 0.9)],
            vec![(0.22, 0.9), (0.8, 0.9)],
        ],
        // 3
        vec![
            arc(0.45, 0.3, 0.24, 205.0, 430.0, 12),
            arc(0.45, 0.69, 0.26, -75.0, 145.0, 12),
        ],
        // 4
        vec![
            vec![(0.6, 0.08), (0.2, 0.62), (0.84, 0.62)],
            vec![(0.66, 0.4), (0.66, 0.92)],
        ],
        // 5
        vec![
            vec![(0.76, 0.1), (0.3, 0.1), (0.27, 0.48)],
            arc(0.48, 0.66, 0.26, -140.0, 150.0, 12),
        ],
        // 6
        vec![
            vec![(0.68, 0.08), (0.46, 0.38), (0.34, 0.62)],
            circle(0.48, 0.68, 0.23),
        ],
        // 7
        vec![vec![(0.2, 0.1), (0.8, 0.1), (0.44, 0.92)]],
        // 8
        vec![circle(0.5, 0.3, 0.2), circle(0.5, 0.7, 0.24)],
        // 9
        vec![
            circle(0.5, 0.32, 0.22),
            vec![(0.72, 0.34), (0.6, 0.92)],
        ],
    ]
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_digit(strokes: &[Stroke], rng: &mut ChaCha8Rng) -> Image {
    const SIZE: usize = 28;
    let box_half = 9.0 * rng.gen_range(0.9..1.1);
    let angle: f64 = rng.gen_range(-0.10..0.10);
    let (cx, cy) = (
        14.0 + rng.gen_range(-1.2..1.2),
        14.0 + rng.gen_range(-1.2..1.2),
    );
    let half_width = rng.gen_range(0.55..1.0);
    let peak = rng.gen_range(0.85..1.0);
    let (sin, cos) = angle.sin_cos();

    // Place each stroke on the canvas, with a small whole-stroke offset so
    // samples of one class are not pixel-identical.
    let placed: Vec<Stroke> = strokes
        .iter()
        .map(|stroke| {
            let (ox, oy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            stroke
                .iter()
                .map(|&(x, y)| {
                    let (dx, dy) = ((x - 0.5) * 2.0 * box_half, (y - 0.5) * 2.0 * box_half);
                    (cx + cos * dx - sin * dy + ox, cy + sin * dx + cos * dy + oy)
                })
                .collect()
        })
        .collect();

    let mut img = Image::zeros(SIZE, SIZE);
    for v in 0..SIZE {
        for u in 0..SIZE {
            let (px, py) = (u as f64, v as f64);
            let mut dist = f64::INFINITY;
            for stroke in &placed {
                for pair in stroke.windows(2) {
                    let d = dist_to_segment(px, py, pair[0].0, pair[0].1, pair[1].0, pair[1].1);
                    dist = dist.min(d);
                }
            }
            let coverage = (half_width + 0.5 - dist).clamp(0.0, 1.0);
            img.set(u, v, (peak * coverage) as f32);
        }
    }
    img
}
