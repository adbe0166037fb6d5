//! Synthetic referring-segmentation data: scenes of coloured shapes on a black
//! canvas, templated expressions that pick out exactly one object, and exact
//! masks. Includes the vocabulary file and the dataset directory format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const SYNTHETIC_TOKENS: [&str; 15] = [
    "<pad>", "<unk>", "red", "green", "blue", "yellow", "square", "circle", "triangle", "left",
    "right", "of", "the", "above", "below",
];

/// Token list; the line number in `vocab.txt` is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Invalid("vocabulary needs the PAD and UNK entries".into()));
        }
        Ok(Vocab { tokens })
    }

    /// The closed vocabulary of the shape-scene templates.
    pub fn synthetic() -> Self {
        Vocab {
            tokens: SYNTHETIC_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of `word`, or [`UNK`] when absent. Reserved entries never match.
    pub fn id(&self, word: &str) -> usize {
        self.tokens
            .iter()
            .skip(2)
            .position(|t| t == word)
            .map_or(UNK, |i| i + 2)
    }

    /// Whitespace tokenisation.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.iter().any(String::is_empty) {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: "empty vocabulary entry".into(),
            });
        }
        Vocab::new(tokens).map_err(|_| Error::Corrupt {
            path: path.into(),
            reason: "fewer than two entries".into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether `a` stands in this relation to `b`, judged on centers with
    /// `y` growing downwards.
    pub fn holds(self, a: &Object, b: &Object) -> bool {
        match self {
            Relation::LeftOf => a.cx < b.cx,
            Relation::RightOf => a.cx > b.cx,
            Relation::Above => a.cy < b.cy,
            Relation::Below => a.cy > b.cy,
        }
    }
}

/// A filled shape centred at `(cx, cy)` with half-extent `r`, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
}

impl Object {
    /// Pixel membership, tested at the pixel centre. Triangles point up.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx as f64;
        let dy = y as f64 + 0.5 - self.cy as f64;
        let r = self.r as f64;
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Inclusive-exclusive pixel bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (i64, i64, i64, i64) {
        (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub h: usize,
    pub w: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    /// RGB image `[H × W × 3]`, black background.
    pub fn render(&self) -> Tensor {
        let mut data = vec![0.0; self.h * self.w * 3];
        for y in 0..self.h {
            for x in 0..self.w {
                if let Some(o) = self.objects.iter().find(|o| o.contains(x, y)) {
                    data[(y * self.w + x) * 3..][..3].copy_from_slice(&o.color.rgb());
                }
            }
        }
        Tensor::new(&[self.h, self.w, 3], data).expect("canvas is non-empty")
    }

    /// Binary mask `[H × W × 1]` of object `i`.
    pub fn mask(&self, i: usize) -> Tensor {
        let o = &self.objects[i];
        let data = (0..self.h * self.w)
            .map(|p| if o.contains(p % self.w, p / self.w) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[self.h, self.w, 1], data).expect("canvas is non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    /// `<color> <shape>`
    Simple { color: Color, shape: Shape },
    /// `<shape> <relation> the <color> <shape>`
    Relational {
        shape: Shape,
        relation: Relation,
        anchor_color: Color,
        anchor_shape: Shape,
    },
}

impl Query {
    pub fn words(&self) -> Vec<&'static str> {
        match *self {
            Query::Simple { color, shape } => vec![color.word(), shape.word()],
            Query::Relational {
                shape,
                relation,
                anchor_color,
                anchor_shape,
            } => {
                let mut w = vec![shape.word()];
                w.extend_from_slice(relation.words());
                w.extend(["the", anchor_color.word(), anchor_shape.word()]);
                w
            }
        }
    }

    pub fn is_relational(&self) -> bool {
        matches!(self, Query::Relational { .. })
    }

    /// Parses the two template forms.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let shape = |w: &str| Shape::ALL.into_iter().find(|s| s.word() == w);
        let color = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w);
        let bad = || Error::Invalid(format!("expression {text:?} does not follow a template"));
        match words.as_slice() {
            [c, s] => Ok(Query::Simple {
                color: color(c).ok_or_else(bad)?,
                shape: shape(s).ok_or_else(bad)?,
            }),
            [s, rest @ .., "the", c, a] => {
                let relation = Relation::ALL
                    .into_iter()
                    .find(|r| r.words() == rest)
                    .ok_or_else(bad)?;
                Ok(Query::Relational {
                    shape: shape(s).ok_or_else(bad)?,
                    relation,
                    anchor_color: color(c).ok_or_else(bad)?,
                    anchor_shape: shape(a).ok_or_else(bad)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words().join(" "))
    }
}

/// Index of the unique object described by `query`.
pub fn resolve(scene: &Scene, query: &Query) -> Result<usize> {
    let matching: Vec<usize> = match *query {
        Query::Simple { color, shape } => (0..scene.objects.len())
            .filter(|&i| scene.objects[i].color == color && scene.objects[i].shape == shape)
            .collect(),
        Query::Relational {
            shape,
            relation,
            anchor_color,
            anchor_shape,
        } => {
            let anchors: Vec<usize> = (0..scene.objects.len())
                .filter(|&i| {
                    scene.objects[i].color == anchor_color && scene.objects[i].shape == anchor_shape
                })
                .collect();
            let &[anchor] = anchors.as_slice() else {
                return Err(Error::Ambiguous(format!(
                    "{query}: {} candidate anchors",
                    anchors.len()
                )));
            };
            let a = &scene.objects[anchor];
            (0..scene.objects.len())
                .filter(|&i| i != anchor)
                .filter(|&i| scene.objects[i].shape == shape && relation.holds(&scene.objects[i], a))
                .collect()
        }
    };
    match matching.as_slice() {
        &[i] => Ok(i),
        _ => Err(Error::Ambiguous(format!("{query}: {} referents", matching.len()))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[H × W × 3]` in `[0, 1]`.
    pub image: Tensor,
    pub tokens: Vec<usize>,
    /// `[H × W × 1]` in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub samples: Vec<Sample>,
}

/// One generated sample with the scene and query it came from.
#[derive(Clone, Debug)]
pub struct Generated {
    pub scene_index: usize,
    pub scene: Scene,
    pub query: Query,
    pub target: usize,
}

const MAX_SCENE_TRIES: usize = 1000;

fn place_objects(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Option<Vec<Object>> {
    let n = rng.gen_range(2..=4);
    let side = h.min(w) as i64;
    let (rmin, rmax) = ((side / 10).max(3), (side / 6).max(4));
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..100 {
            let r = rng.gen_range(rmin..=rmax);
            let o = Object {
                shape: *Shape::ALL.choose(rng).unwrap(),
                color: *Color::ALL.choose(rng).unwrap(),
                cx: rng.gen_range(r..=w as i64 - r),
                cy: rng.gen_range(r..=h as i64 - r),
                r,
            };
            // One clear pixel between bounding boxes keeps pixel sets disjoint.
            let (x0, y0, x1, y1) = o.bbox();
            let clear = objects.iter().all(|p| {
                let (a0, b0, a1, b1) = p.bbox();
                x1 < a0 || a1 < x0 || y1 < b0 || b1 < y0
            });
            let distinct_centers = objects.iter().all(|p| p.cx != o.cx && p.cy != o.cy);
            if clear && distinct_centers {
                objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

fn candidate_queries(scene: &Scene, relational: bool) -> Vec<(Query, usize)> {
    let mut out = Vec::new();
    let objs = &scene.objects;
    if relational {
        for t in objs {
            for a in objs {
                for relation in Relation::ALL {
                    let q = Query::Relational {
                        shape: t.shape,
                        relation,
                        anchor_color: a.color,
                        anchor_shape: a.shape,
                    };
                    if let Ok(i) = resolve(scene, &q) {
                        if !out.contains(&(q, i)) {
                            out.push((q, i));
                        }
                    }
                }
            }
        }
    } else {
        for o in objs {
            let q = Query::Simple {
                color: o.color,
                shape: o.shape,
            };
            if let Ok(i) = resolve(scene, &q) {
                out.push((q, i));
            }
        }
    }
    out
}

/// Scene `index` of the stream for `seed`: each scene draws from its own
/// ChaCha stream so scenes can be produced independently.
fn generate_scene(seed: u64, index: usize, h: usize, w: usize, per_scene: usize) -> Result<Vec<Generated>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_SCENE_TRIES {
        let Some(objects) = place_objects(&mut rng, h, w) else {
            continue;
        };
        let scene = Scene { h, w, objects };
        let mut kinds = [false, true];
        kinds.shuffle(&mut rng);
        let mut picked: Vec<(Query, usize)> = Vec::new();
        for &relational in kinds.iter().take(per_scene) {
            let options: Vec<(Query, usize)> = candidate_queries(&scene, relational)
                .into_iter()
                .filter(|(_, t)| picked.iter().all(|(_, p)| p != t))
                .collect();
            if let Some(&choice) = options.choose(&mut rng) {
                picked.push(choice);
            }
        }
        if picked.len() == per_scene {
            return Ok(picked
                .into_iter()
                .map(|(query, target)| Generated {
                    scene_index: index,
                    scene: scene.clone(),
                    query,
                    target,
                })
                .collect());
        }
    }
    Err(Error::Invalid(format!(
        "could not place an unambiguous scene on a {h}×{w} canvas"
    )))
}

/// `count` samples, two per scene with different targets, half of them
/// relational. Deterministic in `seed`.
pub fn generate_scenes(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<Generated>> {
    if h < 32 || w < 32 {
        return Err(Error::Invalid(format!("canvas {h}×{w} is smaller than 32×32")));
    }
    let mut out = Vec::with_capacity(count);
    let mut index = 0;
    while out.len() < count {
        let per_scene = (count - out.len()).min(2);
        out.extend(generate_scene(seed, index, h, w, per_scene)?);
        index += 1;
    }
    Ok(out)
}

pub fn generate(seed: u64, count: usize, h: usize, w: usize) -> Result<Dataset> {
    let vocab = Vocab::synthetic();
    let samples = generate_scenes(seed, count, h, w)?
        .into_iter()
        .enumerate()
        .map(|(id, g)| Sample {
            id,
            image: g.scene.render(),
            tokens: g.query.words().iter().map(|w| vocab.id(w)).collect(),
            mask: g.scene.mask(g.target),
        })
        .collect();
    Ok(Dataset { vocab, samples })
}

pub const INDEX_MAGIC: &str = "RSTRDS";
pub const INDEX_VERSION: u32 = 1;

fn sample_file(dir: &Path, id: usize, ext: &str) -> PathBuf {
    dir.join(format!("{id:04}.{ext}"))
}

impl Dataset {
    /// Groups of sample indices that share an identical image.
    pub fn image_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            match groups
                .iter_mut()
                .find(|g| self.samples[g[0]].image.data() == s.image.data())
            {
                Some(g) => g.push(i),
                None => groups.push(vec![i]),
            }
        }
        groups
    }

    /// Number of samples per expression length.
    pub fn length_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.tokens.len()).or_insert(0) += 1;
        }
        h
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let mut index = format!("{INDEX_MAGIC} {INDEX_VERSION}\n");
        for s in &self.samples {
            let (h, w) = (s.height(), s.width());
            index.push_str(&format!("{} {h} {w}", s.id));
            for t in &s.tokens {
                index.push_str(&format!(" {t}"));
            }
            index.push('\n');
            let img: Vec<u8> = s
                .image
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            let path = sample_file(dir, s.id, "img");
            fs::write(&path, img).map_err(|e| Error::io(&path, e))?;
            let msk: Vec<u8> = s.mask.data().iter().map(|&v| (v != 0.0) as u8).collect();
            let path = sample_file(dir, s.id, "msk");
            fs::write(&path, msk).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("index.txt");
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.txt");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let corrupt = |reason: String| Error::Corrupt {
            path: index_path.clone(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            [INDEX_MAGIC, v] if *v == INDEX_VERSION.to_string() => {}
            [INDEX_MAGIC, v] => {
                return Err(Error::Version {
                    found: v.to_string(),
                    expected: INDEX_VERSION.to_string(),
                })
            }
            _ => return Err(corrupt(format!("bad header {header:?}"))),
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| corrupt(format!("line {}: non-integer field", n + 2)))?;
            let [id, h, w, ref tokens @ ..] = fields[..] else {
                return Err(corrupt(format!("line {}: expected id, H, W, tokens", n + 2)));
            };
            if h == 0 || w == 0 {
                return Err(corrupt(format!("line {}: zero image dimension", n + 2)));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t >= vocab.len()) {
                return Err(corrupt(format!("line {}: token id {t} outside vocabulary", n + 2)));
            }
            let img_path = sample_file(dir, id, "img");
            let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            if bytes.len() != h * w * 3 * 4 {
                return Err(Error::Corrupt {
                    path: img_path,
                    reason: format!("{} bytes, expected {}", bytes.len(), h * w * 12),
                });
            }
            let image = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let msk_path = sample_file(dir, id, "msk");
            let bytes = fs::read(&msk_path).map_err(|e| Error::io(&msk_path, e))?;
            if bytes.len() != h * w || bytes.iter().any(|&b| b > 1) {
                return Err(Error::Corrupt {
                    path: msk_path,
                    reason: format!("expected {} bytes of 0/1", h * w),
                });
            }
            samples.push(Sample {
                id,
                image: Tensor::new(&[h, w, 3], image)?,
                tokens: tokens.to_vec(),
                mask: Tensor::new(&[h, w, 1], bytes.iter().map(|&b| b as f64).collect())?,
            });
        }
        Ok(Dataset { vocab, samples })
    }
}

/// Checks that the index and the sample files on disk describe the same set
/// of samples. Returns the sample count.
pub fn verify_dir(dir: &Path) -> Result<usize> {
    let ds = Dataset::load(dir)?;
    let mut on_disk = 0;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("img" | "msk")) {
            on_disk += 1;
        }
    }
    if on_disk != 2 * ds.samples.len() {
        return Err(Error::Corrupt {
            path: dir.join("index.txt"),
            reason: format!(
                "index lists {} samples but {on_disk} sample files exist",
                ds.samples.len()
            ),
        });
    }
    Ok(ds.samples.len())
}
