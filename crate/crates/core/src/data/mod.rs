//! Synthetic referring-segmentation scenes: hard-edged shapes on a flat
//! background, a compositional expression naming one of them, and the exact
//! visible-pixel mask of that object.

pub mod vocab;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::catn::{self, AnyTensor};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_T_MAX: usize = 16;
const MAX_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

/// Direction an ordinal counts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Purple => [0.6, 0.2, 0.8],
            Color::Orange => [1.0, 0.55, 0.0],
        }
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }
}

const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];

/// Sampling share of attribute, extreme and ordinal expressions when all apply.
const FAMILY_SHARE: [f64; 3] = [0.85, 0.10, 0.05];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Center in pixel coordinates (x right, y down).
    pub cx: f64,
    pub cy: f64,
    /// Half extent.
    pub r: f64,
}

impl Object {
    /// Hard-edged coverage test at a pixel center.
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => {
                let h = 0.85 * self.r;
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Triangle => {
                // Apex up at cy - r, base at cy + 0.8r, base half-width r.
                let top = self.cy - self.r;
                let bottom = self.cy + 0.8 * self.r;
                py >= top && py <= bottom && dx.abs() <= self.r * (py - top) / (bottom - top)
            }
        }
    }
}

/// Objects listed in draw order; later entries occlude earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: f32,
    pub objects: Vec<Object>,
}

/// Pixel-ownership raster of a scene.
#[derive(Debug, Clone)]
pub struct Raster {
    /// Topmost object index per pixel, row-major.
    pub owner: Vec<Option<usize>>,
    pub visible: Vec<usize>,
    /// Pixel count of each object drawn alone.
    pub full: Vec<usize>,
}

impl Scene {
    pub fn rasterize(&self) -> Raster {
        let n = self.objects.len();
        let mut owner = vec![None; self.height * self.width];
        let mut full = vec![0; n];
        for (k, o) in self.objects.iter().enumerate() {
            for y in 0..self.height {
                for x in 0..self.width {
                    if o.covers(x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * self.width + x] = Some(k);
                        full[k] += 1;
                    }
                }
            }
        }
        let mut visible = vec![0; n];
        for k in owner.iter().flatten() {
            visible[*k] += 1;
        }
        Raster { owner, visible, full }
    }

    /// `[H×W×3]` image.
    pub fn render(&self, raster: &Raster) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.height * self.width * 3);
        for o in &raster.owner {
            match o {
                Some(k) => data.extend_from_slice(&self.objects[*k].color.rgb()),
                None => data.extend_from_slice(&[self.background; 3]),
            }
        }
        Tensor::new(&[self.height, self.width, 3], data).expect("image shape")
    }

    /// Binary `[H×W]` mask of the visible pixels of object `k`.
    pub fn mask(&self, raster: &Raster, k: usize) -> Tensor<f32> {
        let data = raster
            .owner
            .iter()
            .map(|o| if *o == Some(k) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[self.height, self.width], data).expect("mask shape")
    }
}

/// A referring expression as a predicate over scene objects.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    /// `[size] [color] shape`
    Attr { size: Option<Size>, color: Option<Color>, shape: Shape },
    /// `shape side`: the outermost object of the shape toward `side`.
    Extreme { shape: Shape, side: Side },
    /// `the <ordinal> [color] shape from side`, rank counted from zero.
    Ordinal { rank: usize, color: Option<Color>, shape: Shape, side: Side },
}

/// Indices of the matching objects ordered from `side`, ties broken by the
/// perpendicular coordinate (ascending).
pub fn order_from(objects: &[Object], members: &[usize], side: Side) -> Vec<usize> {
    let mut m = members.to_vec();
    let key = |o: &Object| -> (f64, f64) {
        match side {
            Side::Left => (o.cx, o.cy),
            Side::Right => (-o.cx, o.cy),
            Side::Top => (o.cy, o.cx),
            Side::Bottom => (-o.cy, o.cx),
        }
    };
    m.sort_by(|&a, &b| {
        let (ka, kb) = (key(&objects[a]), key(&objects[b]));
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    m
}

impl Expression {
    pub fn words(&self) -> String {
        match self {
            Expression::Attr { size, color, shape } => {
                let mut w = Vec::new();
                if let Some(s) = size {
                    w.push(s.word());
                }
                if let Some(c) = color {
                    w.push(c.word());
                }
                w.push(shape.word());
                w.join(" ")
            }
            Expression::Extreme { shape, side } => format!("{} {}", shape.word(), side.word()),
            Expression::Ordinal { rank, color, shape, side } => {
                let c = color.map(|c| format!("{} ", c.word())).unwrap_or_default();
                format!("the {} {c}{} from {}", ORDINALS[*rank], shape.word(), side.word())
            }
        }
    }

    /// All objects satisfying the predicate.
    pub fn referents(&self, objects: &[Object]) -> Vec<usize> {
        let class = |color: Option<Color>, shape: Shape| -> Vec<usize> {
            (0..objects.len())
                .filter(|&i| objects[i].shape == shape && color.is_none_or(|c| objects[i].color == c))
                .collect()
        };
        match self {
            Expression::Attr { size, color, shape } => class(*color, *shape)
                .into_iter()
                .filter(|&i| size.is_none_or(|s| objects[i].size == s))
                .collect(),
            Expression::Extreme { shape, side } => {
                order_from(objects, &class(None, *shape), *side).into_iter().take(1).collect()
            }
            Expression::Ordinal { rank, color, shape, side } => {
                let ord = order_from(objects, &class(*color, *shape), *side);
                ord.get(*rank).copied().into_iter().collect()
            }
        }
    }
}

/// Descriptor of the referred object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cx: f64,
    pub cy: f64,
    /// Zero-based rank from the left among objects of the same shape.
    pub rank: usize,
    pub num_objects: usize,
    pub same_shape: usize,
    pub visible_pixels: usize,
}

impl SampleMeta {
    fn to_tensor(self) -> Tensor<f64> {
        let shape = Shape::ALL.iter().position(|&s| s == self.shape).unwrap();
        let color = Color::ALL.iter().position(|&c| c == self.color).unwrap();
        let size = (self.size == Size::Large) as usize;
        let v = [
            shape as f64,
            color as f64,
            size as f64,
            self.cx,
            self.cy,
            self.rank as f64,
            self.num_objects as f64,
            self.same_shape as f64,
            self.visible_pixels as f64,
        ];
        Tensor::new(&[9], v.to_vec()).unwrap()
    }

    fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let d = t.data();
        if d.len() != 9 {
            return Err(Error::Input(format!("meta has {} entries, expected 9", d.len())));
        }
        let idx = |v: f64, n: usize, what: &str| -> Result<usize> {
            let i = v as usize;
            if v < 0.0 || i >= n || i as f64 != v {
                return Err(Error::Input(format!("bad {what} index {v}")));
            }
            Ok(i)
        };
        Ok(Self {
            shape: Shape::ALL[idx(d[0], 3, "shape")?],
            color: Color::ALL[idx(d[1], 6, "color")?],
            size: if idx(d[2], 2, "size")? == 1 { Size::Large } else { Size::Small },
            cx: d[3],
            cy: d[4],
            rank: d[5] as usize,
            num_objects: d[6] as usize,
            same_shape: d[7] as usize,
            visible_pixels: d[8] as usize,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H×W×3]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub tokens: Vec<u32>,
    /// Binary `[H×W]`.
    pub mask: Tensor<f32>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn expression(&self) -> String {
        vocab::detokenize(&self.tokens).unwrap_or_default()
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Builds a sample from an explicit scene and expression. Fails when the
/// expression does not single out exactly one object.
pub fn compose(scene: &Scene, expr: &Expression, t_max: usize) -> Result<Sample> {
    let refs = expr.referents(&scene.objects);
    if refs.len() != 1 {
        return Err(Error::Input(format!(
            "expression {:?} matches {} objects",
            expr.words(),
            refs.len()
        )));
    }
    let k = refs[0];
    let raster = scene.rasterize();
    let o = scene.objects[k];
    let same: Vec<usize> = (0..scene.objects.len()).filter(|&i| scene.objects[i].shape == o.shape).collect();
    let rank = order_from(&scene.objects, &same, Side::Left).iter().position(|&i| i == k).unwrap();
    Ok(Sample {
        image: scene.render(&raster),
        tokens: vocab::tokenize(&expr.words(), t_max)?,
        mask: scene.mask(&raster, k),
        meta: SampleMeta {
            shape: o.shape,
            color: o.color,
            size: o.size,
            cx: o.cx,
            cy: o.cy,
            rank,
            num_objects: scene.objects.len(),
            same_shape: same.len(),
            visible_pixels: raster.visible[k],
        },
    })
}

/// Dataset split; each draws from its own index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn base_index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
            Split::Test => 2 << 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-sample generator: one ChaCha stream per index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_object(rng: &mut ChaCha8Rng, shape: Shape, color: Color, size: Size) -> Object {
    let r = match size {
        Size::Small => rng.random_range(6.0..8.0),
        Size::Large => rng.random_range(10.5..13.0),
    };
    Object { shape, color, size, cx: 0.0, cy: 0.0, r }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn random_size(rng: &mut ChaCha8Rng) -> Size {
    if rng.random_bool(0.5) {
        Size::Small
    } else {
        Size::Large
    }
}

/// Objects in z-order and the referent's index. Every scene has at least
/// two objects of one shape; most share the referent's shape.
fn draw_objects(rng: &mut ChaCha8Rng) -> (Vec<Object>, usize) {
    let n = rng.random_range(2..=5usize);
    let shape = pick(rng, &Shape::ALL);
    let color = pick(rng, &Color::ALL);
    let size = random_size(rng);
    let mut objs = vec![random_object(rng, shape, color, size)];
    if rng.random_bool(0.75) {
        let c = if rng.random_bool(0.1) { color } else { pick(rng, &Color::ALL) };
        let s = random_size(rng);
        objs.push(random_object(rng, shape, c, s));
    } else {
        let other = pick(rng, &Shape::ALL.iter().copied().filter(|&s| s != shape).collect::<Vec<_>>());
        for _ in 0..2 {
            let (c, s) = (pick(rng, &Color::ALL), random_size(rng));
            objs.push(random_object(rng, other, c, s));
        }
    }
    while objs.len() < n {
        let (sh, c, s) = (pick(rng, &Shape::ALL), pick(rng, &Color::ALL), random_size(rng));
        objs.push(random_object(rng, sh, c, s));
    }
    let mut order: Vec<usize> = (0..objs.len()).collect();
    order.shuffle(rng);
    let shuffled = order.iter().map(|&i| objs[i]).collect();
    let referent = order.iter().position(|&i| i == 0).unwrap();
    (shuffled, referent)
}

/// Every expression form that singles out `k`, with a sampling weight.
fn candidates(objects: &[Object], k: usize) -> Vec<(Expression, f64)> {
    let o = objects[k];
    let mut out = Vec::new();
    let push = |e: Expression, w: f64, out: &mut Vec<(Expression, f64)>| {
        if e.referents(objects) == [k] {
            out.push((e, w));
        }
    };
    push(Expression::Attr { size: None, color: Some(o.color), shape: o.shape }, 4.0, &mut out);
    push(Expression::Attr { size: Some(o.size), color: Some(o.color), shape: o.shape }, 1.0, &mut out);
    push(Expression::Attr { size: None, color: None, shape: o.shape }, 0.5, &mut out);
    let same = objects.iter().filter(|x| x.shape == o.shape).count();
    if same >= 2 {
        for side in Side::ALL {
            push(Expression::Extreme { shape: o.shape, side }, 1.0, &mut out);
            for color in [None, Some(o.color)] {
                for rank in 0..ORDINALS.len() {
                    push(Expression::Ordinal { rank, color, shape: o.shape, side }, 1.0, &mut out);
                }
            }
        }
    }
    // Each form family gets a fixed share, split by weight among its members.
    let family = |e: &Expression| match e {
        Expression::Attr { .. } => 0,
        Expression::Extreme { .. } => 1,
        Expression::Ordinal { .. } => 2,
    };
    let mut sums = [0.0; 3];
    for (e, w) in &out {
        sums[family(e)] += w;
    }
    for (e, w) in out.iter_mut() {
        let f = family(e);
        *w *= FAMILY_SHARE[f] / sums[f];
    }
    out
}

/// One sample for `(seed, index)`; the result depends on nothing else.
pub fn generate_one(seed: u64, index: u64, height: usize, width: usize, t_max: usize) -> Result<Sample> {
    if height < 24 || width < 24 {
        return Err(Error::Config(format!("scene {height}×{width} is too small to place objects")));
    }
    let mut rng = sample_rng(seed, index);
    for _ in 0..MAX_RETRIES {
        let (mut objects, k) = draw_objects(&mut rng);
        for o in objects.iter_mut() {
            o.cx = rng.random_range(o.r..width as f64 - o.r);
            o.cy = rng.random_range(o.r..height as f64 - o.r);
        }
        let scene = Scene {
            height,
            width,
            background: rng.random_range(0.05..0.3),
            objects,
        };
        let raster = scene.rasterize();
        let legible = (0..scene.objects.len()).all(|i| raster.visible[i] * 5 >= raster.full[i] * 3 && raster.full[i] > 0);
        if !legible {
            continue;
        }
        let cands = candidates(&scene.objects, k);
        if cands.is_empty() {
            continue;
        }
        let total: f64 = cands.iter().map(|c| c.1).sum();
        let mut u = rng.random_range(0.0..total);
        let mut chosen = &cands[cands.len() - 1].0;
        for (e, w) in &cands {
            if u < *w {
                chosen = e;
                break;
            }
            u -= w;
        }
        return compose(&scene, chosen, t_max);
    }
    Err(Error::Contract(format!(
        "no scene with a unique referent after {MAX_RETRIES} attempts (seed {seed}, index {index})"
    )))
}

/// `n_samples` samples for indices `0..n_samples`.
pub fn generate(seed: u64, n_samples: usize, height: usize, width: usize) -> Result<Vec<Sample>> {
    generate_range(seed, 0, n_samples, height, width, DEFAULT_T_MAX)
}

pub fn generate_range(seed: u64, first: u64, n: usize, height: usize, width: usize, t_max: usize) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| generate_one(seed, first + i, height, width, t_max))
        .collect()
}

pub fn generate_split(seed: u64, split: Split, n: usize, height: usize, width: usize, t_max: usize) -> Result<Vec<Sample>> {
    generate_range(seed, split.base_index(), n, height, width, t_max)
}

/// Dataset manifest fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub t_max: usize,
    pub vocab_hash: String,
    pub generator_version: u32,
}

impl Manifest {
    pub fn render(&self) -> String {
        format!(
            "generator_version = {}\ncount = {}\nheight = {}\nwidth = {}\nt_max = {}\nvocab_hash = {}\n",
            self.generator_version, self.count, self.height, self.width, self.t_max, self.vocab_hash
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest {
            count: 0,
            height: 0,
            width: 0,
            t_max: 0,
            vocab_hash: String::new(),
            generator_version: 0,
        };
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Input(format!("manifest: bad value for {k}: {v:?}")))
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("manifest: malformed line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "count" => m.count = num(k, v)?,
                "height" => m.height = num(k, v)?,
                "width" => m.width = num(k, v)?,
                "t_max" => m.t_max = num(k, v)?,
                "vocab_hash" => m.vocab_hash = v.to_string(),
                "generator_version" => m.generator_version = num(k, v)? as u32,
                _ => return Err(Error::Input(format!("manifest: unknown key {k}"))),
            }
        }
        Ok(m)
    }
}

fn sample_entries(s: &Sample) -> Vec<(String, AnyTensor)> {
    let t = s.tokens.len();
    let tokens = Tensor::new(&[t], s.tokens.iter().map(|&i| i as f32).collect()).unwrap();
    vec![
        ("image".into(), s.image.clone().into()),
        ("mask".into(), s.mask.clone().into()),
        ("tokens".into(), tokens.into()),
        ("meta".into(), s.meta.to_tensor().into()),
    ]
}

fn entry<'a>(entries: &'a [(String, AnyTensor)], name: &str, path: &Path) -> Result<&'a AnyTensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Input(format!("{}: missing tensor {name}", path.display())))
}

pub fn save_sample(path: &Path, s: &Sample) -> Result<()> {
    catn::save(path, &sample_entries(s))
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    let e = catn::load(path)?;
    let image = entry(&e, "image", path)?.to::<f32>();
    let mask = entry(&e, "mask", path)?.to::<f32>();
    let tokens = entry(&e, "tokens", path)?
        .to::<f32>()
        .data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v as usize >= vocab::size() || v.fract() != 0.0 {
                Err(Error::Input(format!("{}: token {v} out of range", path.display())))
            } else {
                Ok(v as u32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = SampleMeta::from_tensor(&entry(&e, "meta", path)?.to::<f64>())?;
    if image.rank() != 3 || image.shape()[2] != 3 || mask.shape() != &image.shape()[..2] {
        return Err(Error::dim("sample", image.shape(), mask.shape()));
    }
    Ok(Sample { image, tokens, mask, meta })
}

/// Writes `manifest.txt` and `samples/{idx}.catn`.
pub fn save(samples: &[Sample], dir: &Path) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Input("cannot save an empty dataset".into()))?;
    fs::create_dir_all(dir.join("samples"))?;
    for (i, s) in samples.iter().enumerate() {
        save_sample(&dir.join("samples").join(format!("{i}.catn")), s)?;
    }
    let m = Manifest {
        count: samples.len(),
        height: first.height(),
        width: first.width(),
        t_max: first.tokens.len(),
        vocab_hash: vocab::hash(),
        generator_version: GENERATOR_VERSION,
    };
    fs::write(dir.join("manifest.txt"), m.render())?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join("manifest.txt").display())))?;
    let m = Manifest::parse(&text)?;
    if m.vocab_hash != vocab::hash() {
        return Err(Error::Input("dataset was built with a different vocabulary".into()));
    }
    if m.generator_version != GENERATOR_VERSION {
        return Err(Error::UnsupportedVersion(m.generator_version));
    }
    (0..m.count)
        .map(|i| load_sample(&dir.join("samples").join(format!("{i}.catn"))))
        .collect()
}
