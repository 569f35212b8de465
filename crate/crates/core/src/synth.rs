//! Shape-world scenes with templated referring expressions.
//!
//! Four expression classes: one target, several targets of one shape,
//! targets of two different shapes joined by "and", and no target. Every
//! sample is produced from its own derived seed, and the train and val
//! splits draw background levels of opposite parity so no scene can occur in
//! both.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::BinaryMask;

/// Closed vocabulary; id 0 is reserved for unknown words.
pub const VOCAB: &[&str] = &[
    "<unk>", "the", "a", "all", "and", "of", "object", "objects", "shape", "shapes", "circle", "circles", "square",
    "squares", "triangle", "triangles", "red", "green", "blue", "yellow", "purple", "cyan", "leftmost", "rightmost",
    "topmost", "bottommost", "left", "right", "top", "bottom", "one", "two", "both", "every", "in", "image", "big",
    "small", "thing", "things",
];

pub const UNKNOWN_TOKEN: u32 = 0;
pub const MAX_OBJECTS: usize = 6;

/// Whitespace split, lowercase, vocabulary lookup.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            VOCAB.iter().position(|&v| v == w).map_or(UNKNOWN_TOKEN, |i| i as u32)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self, plural: bool) -> &'static str {
        match (self, plural) {
            (Shape::Circle, false) => "circle",
            (Shape::Circle, true) => "circles",
            (Shape::Square, false) => "square",
            (Shape::Square, true) => "squares",
            (Shape::Triangle, false) => "triangle",
            (Shape::Triangle, true) => "triangles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Cyan];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Cyan => [40, 200, 210],
        }
    }
}

/// An object occupying the `size x size` box with top-left `(x0, y0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl SceneObject {
    /// Twice the center coordinates, kept integral for exact comparisons.
    pub fn center2(&self) -> (usize, usize) {
        (2 * self.x0 + self.size, 2 * self.y0 + self.size)
    }

    fn boxes_touch(&self, other: &SceneObject, gap: usize) -> bool {
        self.x0 < other.x0 + other.size + gap
            && other.x0 < self.x0 + self.size + gap
            && self.y0 < other.y0 + other.size + gap
            && other.y0 < self.y0 + self.size + gap
    }

    /// Hard rasterization: pixel `(x, y)` is inside when its center is.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.size || y >= self.y0 + self.size {
            return false;
        }
        let s = self.size as f64;
        let (px, py) = (x as f64 + 0.5 - self.x0 as f64, y as f64 + 0.5 - self.y0 as f64);
        match self.shape {
            Shape::Square => true,
            Shape::Circle => {
                let (dx, dy) = (px - s / 2.0, py - s / 2.0);
                dx * dx + dy * dy <= s * s / 4.0
            }
            Shape::Triangle => {
                // Apex at the top center, base along the bottom edge.
                let half = py / s * s / 2.0;
                (px - s / 2.0).abs() <= half
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() > MAX_OBJECTS {
            return Err(invalid_arg!("{} objects (max {})", self.objects.len(), MAX_OBJECTS));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size == 0 || o.x0 + o.size > self.size || o.y0 + o.size > self.size {
                return Err(invalid_arg!("object {} leaves the image", i));
            }
            if self.objects[..i].iter().any(|p| p.boxes_touch(o, 0)) {
                return Err(invalid_arg!("object {} overlaps another", i));
            }
        }
        Ok(())
    }
}

/// Rendered RGB8 image (row-major, interleaved) and one mask per object.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Vec<u8>,
    pub masks: Vec<BinaryMask>,
}

pub fn render(scene: &SceneSpec) -> Rendered {
    let n = scene.size;
    let mut image = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        image.extend_from_slice(&scene.background);
    }
    let mut masks = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let m = BinaryMask::from_fn(n, n, |y, x| o.covers(x, y));
        let rgb = o.color.rgb();
        for (p, _) in m.data.iter().enumerate().filter(|(_, &b)| b) {
            image[3 * p..3 * p + 3].copy_from_slice(&rgb);
        }
        masks.push(m);
    }
    Rendered { image, masks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Top,
    Bottom,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Top, Direction::Bottom];

    fn word(self) -> &'static str {
        match self {
            Direction::Left => "leftmost",
            Direction::Right => "rightmost",
            Direction::Top => "topmost",
            Direction::Bottom => "bottommost",
        }
    }

    /// Key to minimize.
    fn key(self, o: &SceneObject) -> i64 {
        let (cx, cy) = o.center2();
        match self {
            Direction::Left => cx as i64,
            Direction::Right => -(cx as i64),
            Direction::Top => cy as i64,
            Direction::Bottom => -(cy as i64),
        }
    }
}

/// Predicate selecting the referred objects of a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// "the red circle" / "the red circles"
    ColorShape { color: Color, shape: Shape, plural: bool },
    /// "the red object"
    Color { color: Color },
    /// "the circle" / "all circles"
    Shape { shape: Shape, plural: bool },
    /// "the leftmost circle"
    Extreme { direction: Direction, shape: Shape },
    /// "<a> and <b>"
    And(Box<Selector>, Box<Selector>),
}

impl Selector {
    /// Indices of selected objects, ascending.
    pub fn select(&self, scene: &SceneSpec) -> Vec<usize> {
        let objs = &scene.objects;
        let mut out: Vec<usize> = match self {
            Selector::ColorShape { color, shape, .. } => {
                (0..objs.len()).filter(|&i| objs[i].color == *color && objs[i].shape == *shape).collect()
            }
            Selector::Color { color } => (0..objs.len()).filter(|&i| objs[i].color == *color).collect(),
            Selector::Shape { shape, .. } => (0..objs.len()).filter(|&i| objs[i].shape == *shape).collect(),
            Selector::Extreme { direction, shape } => {
                let cands: Vec<usize> = (0..objs.len()).filter(|&i| objs[i].shape == *shape).collect();
                match cands.iter().map(|&i| direction.key(&objs[i])).min() {
                    Some(best) => cands.into_iter().filter(|&i| direction.key(&objs[i]) == best).collect(),
                    None => Vec::new(),
                }
            }
            Selector::And(a, b) => {
                let mut v = a.select(scene);
                v.extend(b.select(scene));
                v
            }
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn text(&self) -> String {
        match self {
            Selector::ColorShape { color, shape, plural } => format!("the {} {}", color.word(), shape.word(*plural)),
            Selector::Color { color } => format!("the {} object", color.word()),
            Selector::Shape { shape, plural: false } => format!("the {}", shape.word(false)),
            Selector::Shape { shape, plural: true } => format!("all {}", shape.word(true)),
            Selector::Extreme { direction, shape } => format!("the {} {}", direction.word(), shape.word(false)),
            Selector::And(a, b) => format!("{} and {}", a.text(), b.text()),
        }
    }

    fn plural(&self) -> bool {
        match self {
            Selector::ColorShape { plural, .. } | Selector::Shape { plural, .. } => *plural,
            Selector::Color { .. } | Selector::Extreme { .. } => false,
            Selector::And(..) => true,
        }
    }

    /// Whether the selector reads naturally for its match count: singular
    /// forms need exactly one referent, plural forms at least two, and
    /// extremes a strict winner among at least two candidates.
    fn well_formed(&self, scene: &SceneSpec) -> bool {
        let n = self.select(scene).len();
        match self {
            Selector::Extreme { shape, .. } => n == 1 && scene.objects.iter().filter(|o| o.shape == *shape).count() >= 2,
            Selector::And(a, b) => a.well_formed(scene) && b.well_formed(scene),
            s if s.plural() => n >= 2,
            _ => n == 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExprClass {
    Single,
    MultiSame,
    MultiCross,
    NoTarget,
}

impl ExprClass {
    pub const ALL: [ExprClass; 4] = [ExprClass::Single, ExprClass::MultiSame, ExprClass::MultiCross, ExprClass::NoTarget];

    pub fn name(self) -> &'static str {
        match self {
            ExprClass::Single => "single",
            ExprClass::MultiSame => "multi_same",
            ExprClass::MultiCross => "multi_cross",
            ExprClass::NoTarget => "no_target",
        }
    }
}

/// Class proportions; must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mix {
    pub single: f64,
    pub multi_same: f64,
    pub multi_cross: f64,
    pub no_target: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self { single: 0.3, multi_same: 0.3, multi_cross: 0.2, no_target: 0.2 }
    }
}

impl Mix {
    pub fn weights(&self) -> [f64; 4] {
        [self.single, self.multi_same, self.multi_cross, self.no_target]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid_arg!("mix proportions must be finite and non-negative"));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid_arg!("mix proportions sum to {}, not 1", s));
        }
        Ok(())
    }

    /// Exact per-class counts for `count` samples (largest remainder).
    pub fn quotas(&self, count: usize) -> [usize; 4] {
        let w = self.weights();
        let raw: Vec<f64> = w.iter().map(|p| p * count as f64).collect();
        let mut q = [0usize; 4];
        for i in 0..4 {
            q[i] = num_traits::Float::floor(raw[i]) as usize;
        }
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - q[a] as f64;
            let fb = raw[b] - q[b] as f64;
            fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut left = count - q.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if w[i] > 0.0 {
                q[i] += 1;
                left -= 1;
            }
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One example. `image` is RGB8 (divide by 255 for the `[0, 1]` raster).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub image: Vec<u8>,
    pub size: usize,
    pub text: String,
    pub tokens: Vec<u32>,
    pub gt_mask: BinaryMask,
    pub nt_flag: bool,
    pub class: ExprClass,
    pub scene: SceneSpec,
    pub selector: Selector,
}

impl SampleRecord {
    /// Channel-interleaved floats in `[0, 1]`.
    pub fn image_floats<F: crate::float::Float>(&self) -> Vec<F> {
        let inv = F::one() / F::lit(255.0);
        self.image.iter().map(|&b| F::lit(b as f64) * inv).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub mix: Mix,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { image_size: 96, min_objects: 2, max_objects: 5, mix: Mix::default() }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.image_size < 16 {
            return Err(invalid_arg!("image_size {} is too small", self.image_size));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return Err(invalid_arg!("object count range must satisfy 2 <= min <= max <= {}", MAX_OBJECTS));
        }
        Ok(())
    }

    fn size_range(&self) -> (usize, usize) {
        let lo = (self.image_size / 4).max(4);
        let hi = (self.image_size * 2 / 5).max(lo + 1);
        (lo, hi)
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derived_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(mix64(seed) ^ split.id()) ^ index))
}

fn random_scene<R: Rng>(spec: &DatasetSpec, split: Split, rng: &mut R) -> SceneSpec {
    let n = spec.image_size;
    let (lo, hi) = spec.size_range();
    // Background levels of opposite parity keep the splits disjoint.
    let level = 2 * rng.gen_range(35u8..65) + split.id() as u8;
    let want = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(want);
    let mut tries = 0;
    while objects.len() < want && tries < 200 {
        tries += 1;
        let size = rng.gen_range(lo..=hi);
        let o = SceneObject {
            shape: *Shape::ALL.choose(rng).expect("non-empty"),
            color: *Color::ALL.choose(rng).expect("non-empty"),
            x0: rng.gen_range(0..=n - size),
            y0: rng.gen_range(0..=n - size),
            size,
        };
        if objects.iter().all(|p| !p.boxes_touch(&o, 2)) {
            objects.push(o);
        }
    }
    SceneSpec { size: n, background: [level; 3], objects }
}

/// Every selector of the given class that reads naturally on `scene`.
pub fn candidate_selectors(scene: &SceneSpec, class: ExprClass) -> Vec<Selector> {
    let mut singles = Vec::new();
    let mut plurals = Vec::new();
    let mut absent = Vec::new();
    for shape in Shape::ALL {
        for color in Color::ALL {
            for plural in [false, true] {
                singles.push(Selector::ColorShape { color, shape, plural });
            }
        }
        for plural in [false, true] {
            singles.push(Selector::Shape { shape, plural });
        }
        for direction in Direction::ALL {
            singles.push(Selector::Extreme { direction, shape });
        }
    }
    for color in Color::ALL {
        singles.push(Selector::Color { color });
    }
    let shape_of = |sel: &Selector| -> Option<Shape> {
        let idx = sel.select(scene);
        let first = scene.objects.get(*idx.first()?)?.shape;
        idx.iter().all(|&i| scene.objects[i].shape == first).then_some(first)
    };
    let mut one_shape = Vec::new();
    for s in singles {
        let n = s.select(scene).len();
        if n == 0 {
            if !s.plural() && !matches!(s, Selector::Extreme { .. }) {
                absent.push(s);
            }
            continue;
        }
        if !s.well_formed(scene) {
            continue;
        }
        if s.plural() {
            plurals.push(s.clone());
        }
        if shape_of(&s).is_some() {
            one_shape.push(s);
        }
    }
    match class {
        ExprClass::Single => one_shape.into_iter().filter(|s| !s.plural()).collect(),
        ExprClass::MultiSame => plurals.into_iter().filter(|s| shape_of(s).is_some()).collect(),
        ExprClass::MultiCross => {
            let mut out = Vec::new();
            for a in &one_shape {
                for b in &one_shape {
                    let (sa, sb) = (shape_of(a), shape_of(b));
                    // Fixed order (by shape) so each pair appears once.
                    if sa < sb {
                        out.push(Selector::And(Box::new(a.clone()), Box::new(b.clone())));
                    }
                }
            }
            out
        }
        ExprClass::NoTarget => absent,
    }
}

fn make_sample(spec: &DatasetSpec, seed: u64, split: Split, index: u64, class: ExprClass) -> Result<SampleRecord> {
    let mut rng = derived_rng(seed, split, index);
    for _ in 0..1000 {
        let scene = random_scene(spec, split, &mut rng);
        if scene.objects.len() < spec.min_objects {
            continue;
        }
        let cands = candidate_selectors(&scene, class);
        let Some(selector) = cands.choose(&mut rng).cloned() else { continue };
        let rendered = render(&scene);
        let selected = selector.select(&scene);
        let mut gt = BinaryMask::empty(scene.size, scene.size);
        for &i in &selected {
            gt.union_with(&rendered.masks[i]);
        }
        let text = selector.text();
        return Ok(SampleRecord {
            id: index,
            image: rendered.image,
            size: scene.size,
            tokens: tokenize(&text),
            text,
            nt_flag: gt.is_empty(),
            gt_mask: gt,
            class,
            scene,
            selector,
        });
    }
    Err(Error::InvalidState(format!("could not build a {} sample", class.name())))
}

/// Class of each sample id: exact quotas, shuffled under the seed.
pub fn class_schedule(mix: &Mix, count: usize, seed: u64, split: Split) -> Vec<ExprClass> {
    let q = mix.quotas(count);
    let mut classes: Vec<ExprClass> = ExprClass::ALL.iter().zip(q).flat_map(|(&c, k)| vec![c; k]).collect();
    let mut rng = derived_rng(seed, split, u64::MAX);
    classes.shuffle(&mut rng);
    classes
}

/// `count` samples of `split`, deterministic under `seed`.
pub fn generate_dataset(spec: &DatasetSpec, count: usize, seed: u64, split: Split) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    if count == 0 {
        return Err(invalid_arg!("count must be >= 1"));
    }
    class_schedule(&spec.mix, count, seed, split)
        .into_iter()
        .enumerate()
        .map(|(i, c)| make_sample(spec, seed, split, i as u64, c))
        .collect()
}

/// Generates one sample by id (same result as inside the full dataset).
pub fn generate_sample(spec: &DatasetSpec, count: usize, seed: u64, split: Split, index: usize) -> Result<SampleRecord> {
    spec.validate()?;
    let classes = class_schedule(&spec.mix, count, seed, split);
    let class = *classes.get(index).ok_or_else(|| invalid_arg!("sample {} out of {}", index, count))?;
    make_sample(spec, seed, split, index as u64, class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn small() -> DatasetSpec {
        DatasetSpec { image_size: 64, ..DatasetSpec::default() }
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("the red circle");
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|&i| i != UNKNOWN_TOKEN));
        assert!(tokenize("").is_empty());
        let z = tokenize("The zorp circle");
        assert_eq!(z[0], tokenize("the")[0]);
        assert_eq!(z[1], UNKNOWN_TOKEN);
        assert!(VOCAB.len() >= 36 && VOCAB.len() <= 44);
    }

    #[test]
    fn render_examples() {
        let empty = SceneSpec { size: 8, background: [7, 7, 7], objects: vec![] };
        let r = render(&empty);
        assert!(r.image.iter().all(|&b| b == 7) && r.masks.is_empty());
        let s = 6;
        let sq = SceneObject { shape: Shape::Square, color: Color::Red, x0: 5, y0: 5, size: s };
        let scene = SceneSpec { size: 16, background: [0; 3], objects: vec![sq] };
        assert_eq!(render(&scene).masks[0].count(), s * s);
        let c = SceneObject { shape: Shape::Circle, color: Color::Blue, x0: 0, y0: 0, size: 5 };
        let two = SceneSpec { size: 16, background: [0; 3], objects: vec![sq, c] };
        two.validate().unwrap();
        let r2 = render(&two);
        assert_eq!(r2.masks[0].count() + r2.masks[1].count(), s * s + render(&SceneSpec { objects: vec![c], ..two.clone() }).masks[0].count());
        assert!(r2.masks[0].data.iter().zip(&r2.masks[1].data).all(|(a, b)| !(a & b)));
    }

    #[test]
    fn all_no_target() {
        let spec = DatasetSpec { mix: Mix { single: 0.0, multi_same: 0.0, multi_cross: 0.0, no_target: 1.0 }, ..small() };
        let d = generate_dataset(&spec, 20, 3, Split::Train).unwrap();
        assert!(d.iter().all(|s| s.nt_flag && s.gt_mask.is_empty() && s.class == ExprClass::NoTarget));
    }

    #[test]
    fn cross_class_has_two_shapes() {
        let spec = DatasetSpec { mix: Mix { single: 0.0, multi_same: 0.0, multi_cross: 1.0, no_target: 0.0 }, ..small() };
        for s in generate_dataset(&spec, 20, 5, Split::Val).unwrap() {
            let idx = s.selector.select(&s.scene);
            let shapes: BTreeSet<Shape> = idx.iter().map(|&i| s.scene.objects[i].shape).collect();
            assert!(idx.len() >= 2 && shapes.len() >= 2, "{}", s.text);
            assert!(s.text.contains(" and "));
        }
    }

    #[test]
    fn deterministic_and_invariants() {
        let spec = small();
        let a = generate_dataset(&spec, 60, 42, Split::Train).unwrap();
        let b = generate_dataset(&spec, 60, 42, Split::Train).unwrap();
        assert_eq!(a, b);
        let q = spec.mix.quotas(60);
        for (c, k) in ExprClass::ALL.iter().zip(q) {
            assert_eq!(a.iter().filter(|s| s.class == *c).count(), k);
        }
        for s in &a {
            s.scene.validate().unwrap();
            assert_eq!(s.nt_flag, s.gt_mask.is_empty());
            assert_eq!(s.nt_flag, s.class == ExprClass::NoTarget);
            // Union of the selected objects' masks, exactly.
            let r = render(&s.scene);
            let mut u = BinaryMask::empty(64, 64);
            for i in s.selector.select(&s.scene) {
                u.union_with(&r.masks[i]);
            }
            assert_eq!(u, s.gt_mask);
            assert_eq!(r.image, s.image);
            assert!(!s.tokens.is_empty() && s.tokens.iter().all(|&t| t != UNKNOWN_TOKEN));
            match s.class {
                ExprClass::Single => assert_eq!(s.selector.select(&s.scene).len(), 1),
                ExprClass::MultiSame => {
                    let idx = s.selector.select(&s.scene);
                    assert!(idx.len() >= 2);
                    assert!(idx.iter().all(|&i| s.scene.objects[i].shape == s.scene.objects[idx[0]].shape));
                }
                _ => {}
            }
        }
        let one = generate_sample(&spec, 60, 42, Split::Train, 17).unwrap();
        assert_eq!(one, a[17]);
    }

    /// Brute force: the selected object has the strictly smallest key.
    #[test]
    fn extremes_are_truthful() {
        let spec = small();
        let mut seen = 0;
        for s in generate_dataset(&spec, 200, 9, Split::Train).unwrap() {
            let Selector::Extreme { direction, shape } = s.selector else { continue };
            seen += 1;
            let idx = s.selector.select(&s.scene);
            assert_eq!(idx.len(), 1);
            let pick = &s.scene.objects[idx[0]];
            for o in s.scene.objects.iter().filter(|o| o.shape == shape && *o != pick) {
                let (pc, oc) = (pick.center2(), o.center2());
                let better = match direction {
                    Direction::Left => pc.0 < oc.0,
                    Direction::Right => pc.0 > oc.0,
                    Direction::Top => pc.1 < oc.1,
                    Direction::Bottom => pc.1 > oc.1,
                };
                assert!(better);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = small();
        let t = generate_dataset(&spec, 50, 1, Split::Train).unwrap();
        let v = generate_dataset(&spec, 50, 1, Split::Val).unwrap();
        assert!(t.iter().all(|s| s.scene.background[0] % 2 == 0));
        assert!(v.iter().all(|s| s.scene.background[0] % 2 == 1));
    }

    #[test]
    fn invalid_mix_rejected() {
        let bad = DatasetSpec { mix: Mix { single: 0.5, multi_same: 0.5, multi_cross: 0.5, no_target: 0.0 }, ..small() };
        assert!(generate_dataset(&bad, 4, 0, Split::Train).is_err());
        assert!(generate_dataset(&small(), 0, 0, Split::Train).is_err());
        assert_eq!(Mix::default().quotas(2000), [600, 600, 400, 400]);
        assert_eq!(Mix::default().quotas(7).iter().sum::<usize>(), 7);
    }
}
