use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab;
use super::{BBox, CorpusError, Image, QuerySample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    StripePatch,
    NoisePatch,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::StripePatch, Shape::NoisePatch];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn token(self) -> usize {
        vocab::SHAPE_BASE + self.index()
    }

    /// Whether pixel center `(px, py)` is covered, in box-relative units.
    fn covers(self, bx: &BBox, x: usize, y: usize) -> bool {
        let (w, h) = (bx.width() as f32, bx.height() as f32);
        let px = x as f32 + 0.5 - bx.x0 as f32;
        let py = y as f32 + 0.5 - bx.y0 as f32;
        match self {
            Shape::Square | Shape::StripePatch | Shape::NoisePatch => true,
            Shape::Circle => {
                let dx = (px - w / 2.0) / (w / 2.0);
                let dy = (py - h / 2.0) / (h / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle => (px - w / 2.0).abs() <= py / h * w / 2.0 + 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Background {
    Solid { color: [f32; 3] },
    /// Linear blend from `from` to `to` along the unit direction `dir`.
    Gradient { from: [f32; 3], to: [f32; 3], dir: [f32; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Palette index; doubles as the color query word.
    pub color: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Texture cycles per canvas width; 0 renders flat.
    pub frequency: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub object_count: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
}

impl SceneSpec {
    pub fn empty(canvas_size: usize, background: Background) -> Self {
        Self { canvas_size, object_count: 0, objects: Vec::new(), background }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.canvas_size == 0 {
            return Err(CorpusError::InvalidSpec("canvas size must be positive".into()));
        }
        if self.object_count != self.objects.len() {
            return Err(CorpusError::InvalidSpec(format!(
                "object_count {} but {} objects listed",
                self.object_count,
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.within(self.canvas_size, self.canvas_size) {
                return Err(CorpusError::InvalidSpec(format!("object {i} box {:?} leaves the canvas", o.bbox.as_tuple())));
            }
            if o.color >= vocab::PALETTE.len() {
                return Err(CorpusError::InvalidSpec(format!("object {i} color index {} out of range", o.color)));
            }
            if !(o.frequency.is_finite() && o.frequency >= 0.0) {
                return Err(CorpusError::InvalidSpec(format!("object {i} frequency {}", o.frequency)));
            }
            if let Some(j) = self.objects[..i].iter().position(|p| p.bbox.intersects(&o.bbox)) {
                return Err(CorpusError::InvalidSpec(format!("object {i} overlaps object {j}")));
            }
        }
        Ok(())
    }
}

/// Knobs of the random scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_frequency: f32,
    /// Probability that a solid shape gets a texture.
    pub texture_prob: f64,
    pub gradient_prob: f64,
    /// Restricts object shapes; empty means all.
    pub shapes: Vec<Shape>,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            canvas_size: 32,
            min_objects: 0,
            max_objects: 4,
            min_size: 6,
            max_size: 14,
            max_frequency: 8.0,
            texture_prob: 0.5,
            gradient_prob: 0.5,
            shapes: Vec::new(),
        }
    }
}

impl CorpusParams {
    /// Single-object scenes over four shape classes, label = shape index.
    pub fn shape_probe() -> Self {
        Self {
            min_objects: 1,
            max_objects: 1,
            min_size: 10,
            max_size: 18,
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle, Shape::StripePatch],
            ..Self::default()
        }
    }

    fn shape_pool(&self) -> &[Shape] {
        if self.shapes.is_empty() {
            &Shape::ALL
        } else {
            &self.shapes
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let ok = self.canvas_size > 0
            && self.min_objects <= self.max_objects
            && self.min_size >= 3
            && self.min_size <= self.max_size
            && self.max_size <= self.canvas_size
            && self.max_frequency >= 0.0
            && (0.0..=1.0).contains(&self.texture_prob)
            && (0.0..=1.0).contains(&self.gradient_prob);
        if ok {
            Ok(())
        } else {
            Err(CorpusError::InvalidSpec(format!("inconsistent corpus parameters {self:?}")))
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 20;

fn dark_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.0..0.4), rng.random_range(0.0..0.4), rng.random_range(0.0..0.4)]
}

/// Draws a random scene. Objects are placed without overlap; when an object
/// does not fit, the whole layout is redrawn, and a scene that still cannot
/// fit after bounded retries fails with the offending index.
pub fn sample_spec(params: &CorpusParams, seed: u64) -> Result<SceneSpec, CorpusError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE9_E5EE_D000_0001);
    let n = rng.random_range(params.min_objects..=params.max_objects);
    let background = if rng.random_bool(params.gradient_prob) {
        let a: f32 = rng.random_range(0.0..2.0 * PI);
        Background::Gradient { from: dark_color(&mut rng), to: dark_color(&mut rng), dir: [a.cos(), a.sin()] }
    } else {
        Background::Solid { color: dark_color(&mut rng) }
    };
    let c = params.canvas_size;
    let attrs: Vec<(Shape, usize, f32)> = (0..n)
        .map(|_| {
            let shape = params.shape_pool()[rng.random_range(0..params.shape_pool().len())];
            let color = rng.random_range(0..vocab::PALETTE.len());
            let frequency = match shape {
                Shape::StripePatch => rng.random_range(2.0..params.max_frequency.max(2.0) + 1.0).floor(),
                Shape::NoisePatch => 0.0,
                _ if params.max_frequency > 0.0 && rng.random_bool(params.texture_prob) => {
                    rng.random_range(1.0..params.max_frequency + 1.0).floor()
                }
                _ => 0.0,
            };
            (shape, color, frequency)
        })
        .collect();
    let mut failed = 0;
    for _ in 0..LAYOUT_ATTEMPTS {
        match layout(params, &mut rng, n) {
            Ok(boxes) => {
                let objects = attrs
                    .iter()
                    .zip(boxes)
                    .map(|(&(shape, color, frequency), bbox)| ObjectSpec { shape, color, bbox, frequency })
                    .collect();
                return Ok(SceneSpec { canvas_size: c, object_count: n, objects, background });
            }
            Err(index) => failed = index,
        }
    }
    Err(CorpusError::Placement { index: failed, attempts: PLACEMENT_ATTEMPTS })
}

/// Non-overlapping boxes for `n` objects, or the index that did not fit.
fn layout(params: &CorpusParams, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<BBox>, usize> {
    let c = params.canvas_size;
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for index in 0..n {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(params.min_size..=params.max_size);
            let h = rng.random_range(params.min_size..=params.max_size);
            let x0 = rng.random_range(0..=c - w);
            let y0 = rng.random_range(0..=c - h);
            let bbox = BBox::new(x0, y0, x0 + w - 1, y0 + h - 1);
            if boxes.iter().all(|o| !o.intersects(&bbox)) {
                placed = Some(bbox);
                break;
            }
        }
        boxes.push(placed.ok_or(index)?);
    }
    Ok(boxes)
}

fn background_at(bg: &Background, canvas: usize, x: usize, y: usize) -> [f32; 3] {
    match bg {
        Background::Solid { color } => *color,
        Background::Gradient { from, to, dir } => {
            let u = (x as f32 + 0.5) / canvas as f32 - 0.5;
            let v = (y as f32 + 0.5) / canvas as f32 - 0.5;
            // projection onto dir spans [-√2/2, √2/2]; map to [0, 1]
            let t = ((u * dir[0] + v * dir[1]) / std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            [0, 1, 2].map(|c| from[c] + (to[c] - from[c]) * t)
        }
    }
}

fn coarse_location(b: &BBox, canvas: usize) -> usize {
    let cx = (b.x0 + b.x1 + 1) as f32 / 2.0 / canvas as f32;
    let cy = (b.y0 + b.y1 + 1) as f32 / 2.0 / canvas as f32;
    let mid = |v: f32| (1.0 / 3.0..=2.0 / 3.0).contains(&v);
    let slot = if mid(cx) && mid(cy) {
        4
    } else {
        match (cy >= 0.5, cx >= 0.5) {
            (false, false) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (true, true) => 3,
        }
    };
    vocab::LOCATION_BASE + slot
}

/// Renders `spec`. Noise textures draw from a stream seeded by `seed`, so the
/// output is a pure function of `(spec, seed)`.
///
/// Returns one query per object (color, shape, coarse location; box = tight
/// bounds of the painted pixels) followed by the `null` query.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(Image, Vec<QuerySample>), CorpusError> {
    spec.validate()?;
    let c = spec.canvas_size;
    let mut img = Image::filled(c, c, [0.0; 3]);
    for y in 0..c {
        for x in 0..c {
            img.set_pixel(y, x, background_at(&spec.background, c, x, y));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(spec.objects.len() + 1);
    for (index, o) in spec.objects.iter().enumerate() {
        let base = vocab::PALETTE[o.color];
        let b = o.bbox;
        let mut tight: Option<BBox> = None;
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                // drawn unconditionally so the noise stream is independent of coverage
                let noise: f32 = rng.random_range(0.15..1.0);
                if !o.shape.covers(&b, x, y) {
                    continue;
                }
                let phase = 2.0 * PI * o.frequency / c as f32;
                let gain = match o.shape {
                    Shape::NoisePatch => noise,
                    Shape::StripePatch => {
                        if (phase * (x as f32 + 0.5)).sin() >= 0.0 {
                            1.0
                        } else {
                            0.3
                        }
                    }
                    _ if o.frequency > 0.0 => 0.7 + 0.3 * (phase * (x as f32 + y as f32 + 1.0)).sin(),
                    _ => 1.0,
                };
                img.set_pixel(y, x, base.map(|v| v * gain));
                tight = Some(match tight {
                    None => BBox::new(x, y, x, y),
                    Some(t) => BBox::new(t.x0.min(x), t.y0.min(y), t.x1.max(x), t.y1.max(y)),
                });
            }
        }
        let tight = tight.ok_or_else(|| CorpusError::InvalidSpec(format!("object {index} covers no pixel")))?;
        queries.push(QuerySample {
            query_tokens: vec![vocab::COLOR_BASE + o.color, o.shape.token(), coarse_location(&tight, c)],
            boxes: vec![tight],
            image_id: seed,
        });
    }
    queries.push(QuerySample::null(seed));
    Ok((img, queries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square() -> SceneSpec {
        SceneSpec {
            canvas_size: 32,
            object_count: 1,
            objects: vec![ObjectSpec { shape: Shape::Square, color: 0, bbox: BBox::new(4, 4, 12, 12), frequency: 0.0 }],
            background: Background::Solid { color: [0.1, 0.1, 0.1] },
        }
    }

    #[test]
    fn empty_scene_is_uniform_with_only_null_query() {
        let spec = SceneSpec::empty(32, Background::Solid { color: [0.2, 0.3, 0.4] });
        let (img, q) = generate_scene(&spec, 7).unwrap();
        assert!(img.data().chunks(3).all(|p| p == [0.2, 0.3, 0.4]));
        assert_eq!(q, vec![QuerySample::null(7)]);
    }

    #[test]
    fn square_box_equals_painted_mask() {
        let (img, q) = generate_scene(&red_square(), 1).unwrap();
        let bg = [0.1f32, 0.1, 0.1];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..32 {
            for x in 0..32 {
                if img.pixel(y, x) != bg {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        assert_eq!(BBox::new(x0, y0, x1, y1), BBox::new(4, 4, 12, 12));
        assert_eq!(q[0].boxes, vec![BBox::new(4, 4, 12, 12)]);
        assert_eq!(q[0].text(), "red square top-left");
        assert!(q[1].is_null());
    }

    #[test]
    fn same_spec_and_seed_is_bit_identical() {
        let spec = sample_spec(&CorpusParams::default(), 99).unwrap();
        assert_eq!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 5).unwrap());
        assert_eq!(sample_spec(&CorpusParams::default(), 99).unwrap(), spec);
    }

    #[test]
    fn default_corpus_always_places() {
        let p = CorpusParams::default();
        for seed in 0..5000 {
            assert!(sample_spec(&p, seed).is_ok(), "seed {seed}");
        }
    }

    #[test]
    fn impossible_placement_names_object() {
        let p = CorpusParams { min_objects: 4, max_objects: 4, min_size: 20, max_size: 20, ..Default::default() };
        assert!(matches!(sample_spec(&p, 0), Err(CorpusError::Placement { index: 1, .. })));
    }

    #[test]
    fn overlapping_spec_rejected() {
        let mut s = red_square();
        s.objects.push(ObjectSpec { shape: Shape::Circle, color: 1, bbox: BBox::new(10, 10, 20, 20), frequency: 0.0 });
        s.object_count = 2;
        assert!(matches!(generate_scene(&s, 0), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn default_distribution_always_places() {
        let p = CorpusParams::default();
        for seed in 0..2000 {
            sample_spec(&p, seed).unwrap();
        }
    }
}
