use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Shape families; class `k + 1` is the `k`-th family, class 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle];

    pub fn class(&self) -> u8 {
        match self {
            ShapeKind::Rectangle => 1,
            ShapeKind::Disk => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// Continuous extent of a shape in pixel coordinates (pixel `(y, x)` has its
/// center at `(y + 0.5, x + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Geometry {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Geometry::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
            Geometry::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Geometry::Triangle { pts } => {
                let side = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    /// `(top, left, bottom, right)` bounding box.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geometry::Rect { top, left, bottom, right } => (top, left, bottom, right),
            Geometry::Disk { cy, cx, r } => (cy - r, cx - r, cy + r, cx + r),
            Geometry::Triangle { pts } => {
                let ys = pts.map(|p| p.0);
                let xs = pts.map(|p| p.1);
                let min = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (min(ys), min(xs), max(ys), max(xs))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub geometry: Geometry,
    /// Fill color, RGB in `[0, 1]`.
    pub color: [f64; 3],
}

impl PlacedShape {
    pub fn class(&self) -> u8 {
        self.kind.class()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Smallest shape extent as a fraction of `min(height, width)`.
    pub min_size: f64,
    /// Largest shape extent as a fraction of `min(height, width)`.
    pub max_size: f64,
    /// Per-channel range of the background color.
    pub background: (f64, f64),
    /// Per-channel range of shape fill colors, shared by every class.
    pub foreground: (f64, f64),
    /// Smallest Euclidean RGB distance between a shape's fill and the background.
    pub min_contrast: f64,
    /// Placement attempts per shape before the whole layout is redrawn.
    pub attempts: usize,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        SynthConfig {
            height,
            width,
            num_classes,
            min_shapes: 1,
            max_shapes: 4,
            noise: 0.05,
            min_size: 0.25,
            max_size: 0.7,
            background: (0.0, 0.35),
            foreground: (0.5, 1.0),
            min_contrast: 0.3,
            attempts: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::contract(format!(
                "the shape generator supports 2 to 4 classes, got {}",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::contract(format!(
                "bad generator geometry {}x{} with {}..={} shapes",
                self.height, self.width, self.min_shapes, self.max_shapes
            )));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::contract(format!(
                "shape size range [{}, {}] must lie in (0, 1]",
                self.min_size, self.max_size
            )));
        }
        Ok(())
    }
}

const GAP: usize = 2;
const LAYOUT_TRIES: usize = 50;

/// Random shape whose extent is drawn from `[cfg.min_size, max_size]`.
fn propose<R: Rng>(kind: ShapeKind, cfg: &SynthConfig, max_size: f64, rng: &mut R) -> Geometry {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let mut extent = || rng.gen_range(cfg.min_size..=max_size) * side;
    match kind {
        ShapeKind::Rectangle => {
            let (rh, rw) = (extent(), extent());
            let top = rng.gen_range(0.0..=(h - rh).max(0.0));
            let left = rng.gen_range(0.0..=(w - rw).max(0.0));
            Geometry::Rect {
                top,
                left,
                bottom: top + rh,
                right: left + rw,
            }
        }
        ShapeKind::Disk => {
            let r = extent() / 2.0;
            Geometry::Disk {
                cy: rng.gen_range(r..=(h - r).max(r)),
                cx: rng.gen_range(r..=(w - r).max(r)),
                r,
            }
        }
        ShapeKind::Triangle => {
            // roughly equilateral, random orientation, circumradius from the extent
            let r = extent() * 0.75;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let cy = rng.gen_range(r..=(h - r).max(r));
            let cx = rng.gen_range(r..=(w - r).max(r));
            let mut pts = [(0.0, 0.0); 3];
            for (i, p) in pts.iter_mut().enumerate() {
                let a = phase + i as f64 * 2.0 * PI / 3.0 + rng.gen_range(-0.25..0.25);
                *p = (cy + r * a.sin(), cx + r * a.cos());
            }
            Geometry::Triangle { pts }
        }
    }
}

/// Pixels whose centers fall inside `g`, or `None` if `g` leaves the canvas.
fn raster(g: &Geometry, h: usize, w: usize) -> Option<Vec<(usize, usize)>> {
    let (t, l, b, r) = g.bounds();
    if t < 0.0 || l < 0.0 || b > h as f64 || r > w as f64 {
        return None;
    }
    let mut px = Vec::new();
    for y in t.floor() as usize..(b.ceil() as usize).min(h) {
        for x in l.floor() as usize..(r.ceil() as usize).min(w) {
            if g.contains(y as f64 + 0.5, x as f64 + 0.5) {
                px.push((y, x));
            }
        }
    }
    Some(px)
}

/// Marks every pixel within `GAP` (Chebyshev distance) of `pixels`.
fn occupy(occupied: &mut [bool], pixels: &[(usize, usize)], h: usize, w: usize) {
    for &(y, x) in pixels {
        for yy in y.saturating_sub(GAP)..(y + GAP + 1).min(h) {
            for xx in x.saturating_sub(GAP)..(x + GAP + 1).min(w) {
                occupied[yy * w + xx] = true;
            }
        }
    }
}

fn color<R: Rng>(range: (f64, f64), rng: &mut R) -> [f64; 3] {
    [0; 3].map(|_| rng.gen_range(range.0..range.1))
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Places `count` shapes, or gives up when one of them finds no free spot.
fn layout<R: Rng>(
    cfg: &SynthConfig,
    kinds: &[ShapeKind],
    count: usize,
    background: &[f64; 3],
    rng: &mut R,
) -> Option<Vec<PlacedShape>> {
    let (h, w) = (cfg.height, cfg.width);
    let mut occupied = vec![false; h * w];
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        // the size cap slides down to min_size over the attempts, so crowded
        // canvases get smaller shapes rather than failures
        let (geometry, pixels) = (0..cfg.attempts).find_map(|a| {
            let t = a as f64 / (cfg.attempts.max(2) - 1) as f64;
            let cap = cfg.max_size - (cfg.max_size - cfg.min_size) * t;
            let g = propose(kind, cfg, cap, rng);
            let px = raster(&g, h, w)?;
            let free = !px.is_empty() && px.iter().all(|&(y, x)| !occupied[y * w + x]);
            free.then_some((g, px))
        })?;
        occupy(&mut occupied, &pixels, h, w);
        let fill = loop {
            let c = color(cfg.foreground, rng);
            if distance(&c, background) >= cfg.min_contrast {
                break c;
            }
        };
        shapes.push(PlacedShape {
            kind,
            geometry,
            color: fill,
        });
    }
    Some(shapes)
}

fn generate_one(cfg: &SynthConfig, seed: u64, index: u64) -> Result<Sample> {
    let mut rng = stream_rng(seed, Stream::Synth, index, 0);
    let (h, w) = (cfg.height, cfg.width);
    let kinds = &ShapeKind::ALL[..cfg.num_classes - 1];
    let background = color(cfg.background, &mut rng);
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes = (0..LAYOUT_TRIES)
        .find_map(|_| layout(cfg, kinds, count, &background, &mut rng))
        .ok_or_else(|| {
            Error::Data(format!(
                "could not place {count} shapes on the {h}x{w} canvas of sample {index}"
            ))
        })?;

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let mut labels = vec![0u8; h * w];
    let mut image = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let owner = shapes.iter().find(|s| s.geometry.contains(cy, cx));
            let base = owner.map_or(background, |s| s.color);
            labels[y * w + x] = owner.map_or(0, PlacedShape::class);
            for (c, &v) in base.iter().enumerate() {
                let v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                // the same f32 a PPM byte decodes to
                image[c * h * w + y * w + x] = (v * 255.0).round() as f32 / 255.0;
            }
        }
    }
    let mut sample = Sample::new(h, w, image, labels)?;
    sample.shapes = shapes;
    Ok(sample)
}

/// `n` samples of 0..=4 non-overlapping shapes on a flat background.
///
/// Every class draws its fill from the same color distribution, so color
/// separates shapes from the background but says nothing about which shape a
/// pixel belongs to; the outline is what identifies the class. Sample `i`
/// depends only on `(seed, i)`.
pub fn generate_shapes(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..n as u64)
        .map(|i| generate_one(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        num_classes: cfg.num_classes,
    })
}
