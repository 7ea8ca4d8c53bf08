//! Synthetic modulated-detection scenes: colored shapes rasterized on a
//! small grid, captions naming them, ground-truth boxes, and per-object
//! token spans.
//!
//! Generation is a pure function of `(seed, index)`, so splits never need
//! to be stored to be reproducible. The dataset file format is one JSON
//! header line followed by one JSON scene per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const DATASET_FORMAT: &str = "modet-scenes";
pub const DATASET_VERSION: u32 = 1;

/// Half-open token index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> {
        self.start..self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Normalized (cx, cy, w, h), each in [0, 1].
    pub box_cxcywh: [f64; 4],
    /// Caption tokens naming this object (color word, shape word).
    pub span: Span,
    pub color: String,
    pub shape: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// Row-major `rows × cols × channels`, 0..=255.
    pub data: Vec<u8>,
}

impl Raster {
    fn blank(rows: usize, cols: usize, channels: usize) -> Self {
        Raster { rows, cols, channels, data: vec![0; rows * cols * channels] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let base = (row * self.cols + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let base = (row * self.cols + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub index: u64,
    pub raster: Raster,
    pub caption_tokens: Vec<u32>,
    pub objects: Vec<SceneObject>,
}

fn default_colors() -> Vec<String> {
    crate::vocab::DEFAULT_COLORS.iter().map(|s| s.to_string()).collect()
}

fn default_shapes() -> Vec<String> {
    crate::vocab::DEFAULT_SHAPES.iter().map(|s| s.to_string()).collect()
}

fn default_grid() -> usize {
    16
}

fn default_channels() -> usize {
    3
}

fn default_max_objects() -> usize {
    3
}

fn default_n_train() -> usize {
    256
}

fn default_n_val() -> usize {
    64
}

fn default_min_obj_px() -> usize {
    4
}

fn default_max_obj_px() -> usize {
    7
}

fn default_relation_prob() -> f64 {
    0.5
}

/// Deterministic description of a train/val split. Train scenes take
/// indices `0..n_train`, validation scenes `n_train..n_train+n_val`,
/// so the two are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_grid")]
    pub grid_rows: usize,
    #[serde(default = "default_grid")]
    pub grid_cols: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_colors")]
    pub colors: Vec<String>,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<String>,
    #[serde(default = "default_min_obj_px")]
    pub min_obj_px: usize,
    #[serde(default = "default_max_obj_px")]
    pub max_obj_px: usize,
    /// Probability that a scene's caption also mentions absent objects.
    #[serde(default)]
    pub distractor_prob: f64,
    /// Probability of an explicit spatial joiner when one truthfully applies.
    #[serde(default = "default_relation_prob")]
    pub relation_prob: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

fn palette(color: &str) -> Option<[u8; 3]> {
    Some(match color {
        "red" => [255, 0, 0],
        "green" => [0, 255, 0],
        "blue" => [0, 0, 255],
        "yellow" => [255, 255, 0],
        "purple" => [255, 0, 255],
        "cyan" => [0, 255, 255],
        "orange" => [255, 160, 0],
        "white" => [255, 255, 255],
        _ => return None,
    })
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be positive".into()));
        }
        if self.max_objects > self.colors.len() * self.shapes.len() {
            return Err(Error::Config(format!(
                "vocabulary of {} color-shape pairs cannot fill {} distinct objects",
                self.colors.len() * self.shapes.len(),
                self.max_objects
            )));
        }
        if self.channels != 3 {
            return Err(Error::Config("raster painting needs channels = 3".into()));
        }
        for c in &self.colors {
            if palette(c).is_none() {
                return Err(Error::Config(format!("unknown color {c:?}")));
            }
        }
        if self.min_obj_px < 2 || self.min_obj_px > self.max_obj_px {
            return Err(Error::Config("object pixel sizes must satisfy 2 <= min <= max".into()));
        }
        if self.max_obj_px > self.grid_rows || self.max_obj_px > self.grid_cols {
            return Err(Error::Config("objects larger than the raster".into()));
        }
        // Leave head room so rejection placement terminates quickly.
        if self.max_objects * self.max_obj_px * self.max_obj_px
            > self.grid_rows * self.grid_cols * 3 / 4
        {
            return Err(Error::Config(format!(
                "{} objects of up to {} px cannot be placed disjointly on a {}x{} raster",
                self.max_objects, self.max_obj_px, self.grid_rows, self.grid_cols
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || !(0.0..=1.0).contains(&self.relation_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::for_attributes(&self.colors, &self.shapes)
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val
    }

    pub fn train_indices(&self) -> std::ops::Range<u64> {
        0..self.n_train as u64
    }

    pub fn val_indices(&self) -> std::ops::Range<u64> {
        self.n_train as u64..self.total() as u64
    }

    /// Longest caption the generator can emit: one three-token phrase per
    /// object plus two-token joiners, with distractors adding up to two
    /// more phrases.
    pub fn max_caption_len(&self) -> usize {
        let phrases = self.max_objects + if self.distractor_prob > 0.0 { 2 } else { 0 };
        phrases * 3 + phrases.saturating_sub(1) * 2
    }

    fn scene_rng(&self, index: u64) -> ChaCha8Rng {
        // splitmix-style index scramble, then xor into the split seed
        let mixed = index
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
        ChaCha8Rng::seed_from_u64(self.seed ^ mixed)
    }

    /// Build the scene at `index`. Pure in `(self, index)`.
    pub fn generate(&self, index: u64) -> Result<Scene> {
        if index >= self.total() as u64 {
            return Err(Error::Input(format!(
                "scene index {index} outside split of {}",
                self.total()
            )));
        }
        let vocab = self.vocabulary()?;
        let mut rng = self.scene_rng(index);
        let k = rng.random_range(1..=self.max_objects);
        let picks = sample_distinct_pairs(&mut rng, self.colors.len(), self.shapes.len(), k);

        let rects = place_disjoint_rects(&mut rng, self, k)?;
        let mut raster = Raster::blank(self.grid_rows, self.grid_cols, self.channels);
        let mut objects = Vec::with_capacity(k);
        for (&(ci, si), &rect) in picks.iter().zip(&rects) {
            let color = &self.colors[ci];
            let shape = &self.shapes[si];
            paint_shape(&mut raster, shape, rect, palette(color).expect("validated"));
            objects.push(SceneObject {
                box_cxcywh: rect_to_box(rect, self.grid_rows, self.grid_cols),
                span: Span::new(0, 0), // filled by the caption builder
                color: color.clone(),
                shape: shape.clone(),
            });
        }

        let mention_all: Vec<usize> = (0..objects.len()).collect();
        let (caption_tokens, spans) =
            build_caption(&vocab, self, &objects, &mention_all, &[], &mut rng)?;
        for (obj, span) in objects.iter_mut().zip(spans) {
            obj.span = span;
        }

        let mut scene = Scene {
            scene_id: format!("scene-{index:06}"),
            index,
            raster,
            caption_tokens,
            objects,
        };
        if rng.random_range(0.0..1.0) < self.distractor_prob {
            scene = distractor_caption(&scene, self, &mut rng, 0.25)?;
        }
        Ok(scene)
    }
}

/// Rewrite a scene's caption to mix phrases for present objects with
/// phrases for absent color-shape pairs. Absent phrases carry no span and
/// no ground-truth box; present objects are each dropped from the caption
/// with probability `drop_present_prob`, so the returned ground truth is
/// the mentioned subset (possibly empty).
pub fn distractor_caption(
    scene: &Scene,
    spec: &SplitSpec,
    rng: &mut ChaCha8Rng,
    drop_present_prob: f64,
) -> Result<Scene> {
    let vocab = spec.vocabulary()?;
    let present: Vec<(usize, usize)> = scene
        .objects
        .iter()
        .map(|o| pair_indices(spec, o))
        .collect::<Result<_>>()?;
    let mut unused: Vec<(usize, usize)> = Vec::new();
    for ci in 0..spec.colors.len() {
        for si in 0..spec.shapes.len() {
            if !present.contains(&(ci, si)) {
                unused.push((ci, si));
            }
        }
    }
    if unused.is_empty() {
        return Err(Error::Input(
            "no unused color-shape pairs available for distractor phrases".into(),
        ));
    }
    let kept: Vec<usize> = (0..scene.objects.len())
        .filter(|_| rng.random_range(0.0..1.0) >= drop_present_prob)
        .collect();
    let n_absent = rng.random_range(1..=unused.len().min(2));
    let absent: Vec<(usize, usize)> = (0..n_absent)
        .map(|_| unused.swap_remove(rng.random_range(0..unused.len())))
        .collect();

    let (caption_tokens, spans) = build_caption(&vocab, spec, &scene.objects, &kept, &absent, rng)?;
    let objects = kept
        .iter()
        .zip(spans)
        .map(|(&i, span)| SceneObject { span, ..scene.objects[i].clone() })
        .collect();
    Ok(Scene {
        scene_id: format!("{}+d", scene.scene_id),
        index: scene.index,
        raster: scene.raster.clone(),
        caption_tokens,
        objects,
    })
}

fn pair_indices(spec: &SplitSpec, obj: &SceneObject) -> Result<(usize, usize)> {
    let ci = spec
        .colors
        .iter()
        .position(|c| *c == obj.color)
        .ok_or_else(|| Error::Input(format!("color {:?} not in split spec", obj.color)))?;
    let si = spec
        .shapes
        .iter()
        .position(|s| *s == obj.shape)
        .ok_or_else(|| Error::Input(format!("shape {:?} not in split spec", obj.shape)))?;
    Ok((ci, si))
}

/// Emit "a <color> <shape>" phrases for the selected present objects and
/// the absent pairs, interleaved, with truthful spatial joiners between
/// consecutive present objects. Returns the tokens and one span per
/// selected present object, in `mention` order.
fn build_caption(
    vocab: &Vocabulary,
    spec: &SplitSpec,
    objects: &[SceneObject],
    mention: &[usize],
    absent: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, Vec<Span>)> {
    enum Item {
        Present(usize),
        Absent(usize, usize),
    }
    let mut items: Vec<Item> = mention.iter().map(|&i| Item::Present(i)).collect();
    for &(ci, si) in absent {
        let pos = rng.random_range(0..=items.len());
        items.insert(pos, Item::Absent(ci, si));
    }

    let id = |w: &str| vocab.id(w).expect("vocabulary covers grammar words");
    let mut tokens: Vec<u32> = Vec::new();
    let mut spans = vec![Span::new(0, 0); mention.len()];
    let mut prev_present: Option<usize> = None;
    for (pos, item) in items.iter().enumerate() {
        if pos > 0 {
            let joiner = match (prev_present, item) {
                (Some(p), Item::Present(c)) => relation_joiner(&objects[p], &objects[*c], spec, rng),
                _ => vec!["and"],
            };
            for w in joiner {
                tokens.push(id(w));
            }
        }
        tokens.push(id("a"));
        let (color, shape, slot) = match item {
            Item::Present(i) => {
                prev_present = Some(*i);
                let mslot = mention.iter().position(|m| m == i);
                (objects[*i].color.as_str(), objects[*i].shape.as_str(), mslot)
            }
            Item::Absent(ci, si) => (spec.colors[*ci].as_str(), spec.shapes[*si].as_str(), None),
        };
        let start = tokens.len();
        tokens.push(id(color));
        tokens.push(id(shape));
        if let Some(slot) = slot {
            spans[slot] = Span::new(start, start + 2);
        }
    }
    Ok((tokens, spans))
}

fn relation_joiner<'a>(
    prev: &SceneObject,
    cur: &SceneObject,
    spec: &SplitSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a str> {
    const MARGIN: f64 = 0.15;
    let use_relation = rng.random_range(0.0..1.0) < spec.relation_prob;
    if use_relation && prev.box_cxcywh[0] + MARGIN < cur.box_cxcywh[0] {
        vec!["left", "of"]
    } else if use_relation && prev.box_cxcywh[1] + MARGIN < cur.box_cxcywh[1] {
        vec!["above"]
    } else {
        vec!["and"]
    }
}

/// Pixel rectangle (col0, row0, width, height).
type Rect = (usize, usize, usize, usize);

fn rects_disjoint(a: Rect, b: Rect) -> bool {
    a.0 + a.2 <= b.0 || b.0 + b.2 <= a.0 || a.1 + a.3 <= b.1 || b.1 + b.3 <= a.1
}

fn sample_distinct_pairs(
    rng: &mut ChaCha8Rng,
    n_colors: usize,
    n_shapes: usize,
    k: usize,
) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..n_colors)
        .flat_map(|c| (0..n_shapes).map(move |s| (c, s)))
        .collect();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        picks.push(all.swap_remove(rng.random_range(0..all.len())));
    }
    picks
}

fn place_disjoint_rects(rng: &mut ChaCha8Rng, spec: &SplitSpec, k: usize) -> Result<Vec<Rect>> {
    for _ in 0..200 {
        let mut rects: Vec<Rect> = Vec::with_capacity(k);
        let mut ok = true;
        'object: for _ in 0..k {
            for _ in 0..100 {
                let w = rng.random_range(spec.min_obj_px..=spec.max_obj_px);
                let h = rng.random_range(spec.min_obj_px..=spec.max_obj_px);
                let x0 = rng.random_range(0..=spec.grid_cols - w);
                let y0 = rng.random_range(0..=spec.grid_rows - h);
                let cand = (x0, y0, w, h);
                if rects.iter().all(|r| rects_disjoint(*r, cand)) {
                    rects.push(cand);
                    continue 'object;
                }
            }
            ok = false;
            break;
        }
        if ok {
            return Ok(rects);
        }
    }
    Err(Error::Config(format!(
        "failed to place {k} disjoint objects on a {}x{} raster",
        spec.grid_rows, spec.grid_cols
    )))
}

fn rect_to_box(rect: Rect, rows: usize, cols: usize) -> [f64; 4] {
    let (x0, y0, w, h) = rect;
    [
        (x0 as f64 + w as f64 / 2.0) / cols as f64,
        (y0 as f64 + h as f64 / 2.0) / rows as f64,
        w as f64 / cols as f64,
        h as f64 / rows as f64,
    ]
}

/// True when pixel (x, y) within `rect` belongs to the named shape.
fn shape_covers(shape: &str, x: usize, y: usize, rect: Rect) -> bool {
    let (x0, y0, w, h) = rect;
    let fx = x as f64 + 0.5 - x0 as f64;
    let fy = y as f64 + 0.5 - y0 as f64;
    let (cw, ch) = (w as f64, h as f64);
    match shape {
        "square" => true,
        "circle" => {
            let nx = (fx - cw / 2.0) / (cw / 2.0);
            let ny = (fy - ch / 2.0) / (ch / 2.0);
            nx * nx + ny * ny <= 1.0
        }
        "triangle" => {
            // Apex at the top center, base along the bottom edge.
            let half = (fy / ch) * cw / 2.0;
            (fx - cw / 2.0).abs() <= half
        }
        "cross" => (fx - cw / 2.0).abs() <= cw / 6.0 || (fy - ch / 2.0).abs() <= ch / 6.0,
        // Unknown shapes paint their full rectangle.
        _ => true,
    }
}

fn paint_shape(raster: &mut Raster, shape: &str, rect: Rect, rgb: [u8; 3]) {
    let (x0, y0, w, h) = rect;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if shape_covers(shape, x, y, rect) {
                raster.pixel_mut(y, x).copy_from_slice(&rgb);
            }
        }
    }
}

// ── Dataset files ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub grid: [usize; 2],
    pub channels: usize,
    pub count: usize,
}

pub fn write_scenes(path: &Path, spec: &SplitSpec, scenes: &[Scene]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        grid: [spec.grid_rows, spec.grid_cols],
        channels: spec.channels,
        count: scenes.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(fmt_err)?)?;
    for s in scenes {
        writeln!(w, "{}", serde_json::to_string(s).map_err(fmt_err)?)?;
    }
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(fmt_err)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "unexpected dataset format {:?}",
            header.format
        )));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }
    let mut scenes = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line).map_err(fmt_err)?);
    }
    Ok((header, scenes))
}

fn fmt_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}
