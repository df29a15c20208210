//! Synthetic scene/expression data: deterministic generation of unambiguous
//! referring samples, flat-color rasterization, attribute-vocabulary
//! extraction, and JSON-lines manifest I/O (including ingestion of
//! externally produced annotation files in the same schema).
//!
//! Every generated expression is validated against [`select_referent`], a
//! brute-force predicate evaluator over all scene objects, so the synthetic
//! task has a well-defined optimum.

use crate::geometry::{self, BoxXYWH};
use crate::grounder::AttributeVocab;
use crate::rng::Rng;
use crate::text::tokenize;
use crate::vision::ImageTensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl ColorName {
    pub const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::White,
        ColorName::Black,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::White => "white",
            ColorName::Black => "black",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            ColorName::Red => [255, 0, 0],
            ColorName::Green => [0, 255, 0],
            ColorName::Blue => [0, 0, 255],
            ColorName::Yellow => [255, 255, 0],
            ColorName::White => [255, 255, 255],
            ColorName::Black => [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn word(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

/// One object: square bounding box of side `extent` at top-left (x, y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub size: SizeClass,
    pub x: usize,
    pub y: usize,
    pub extent: usize,
}

impl SceneObject {
    pub fn bbox(&self) -> BoxXYWH {
        BoxXYWH::new(
            self.x as f64,
            self.y as f64,
            self.extent as f64,
            self.extent as f64,
        )
    }

    fn center(&self) -> (f64, f64) {
        self.bbox().center()
    }
}

/// Flat-color scene on a gray canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
}

/// Dataset flavor: `Loc` allows spatial words (location-style expressions),
/// `App` restricts to appearance words only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Loc,
    App,
}

/// Generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive extent range for small objects.
    pub small_extent: (usize, usize),
    /// Inclusive extent range for large objects.
    pub large_extent: (usize, usize),
    pub flavor: Flavor,
    /// Expressions emitted per referent (distinct ones, up to this many).
    pub expressions_per_referent: usize,
    /// Minimum center separation (pixels) required before a spatial
    /// superlative is used as the disambiguator.
    pub spatial_margin: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            canvas: 64,
            min_objects: 1,
            max_objects: 4,
            small_extent: (12, 17),
            large_extent: (20, 28),
            flavor: Flavor::Loc,
            expressions_per_referent: 2,
            spatial_margin: 6.0,
        }
    }
}

const MAX_OVERLAP_IOU: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Rejection-sample a scene: 1..=5 objects fully inside the canvas with all
/// pairwise IoU below 0.1. Deterministic per rng state.
pub fn generate_scene(rng: &mut Rng, cfg: &GenConfig) -> Result<SceneSpec> {
    assert!(cfg.min_objects >= 1 && cfg.max_objects <= 5 && cfg.min_objects <= cfg.max_objects);
    let count = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = ShapeKind::ALL[rng.below(3)];
        let color = ColorName::ALL[rng.below(6)];
        let size = if rng.below(2) == 0 {
            SizeClass::Small
        } else {
            SizeClass::Large
        };
        let (lo, hi) = match size {
            SizeClass::Small => cfg.small_extent,
            SizeClass::Large => cfg.large_extent,
        };
        let extent = rng.range_inclusive(lo, hi);
        if extent >= cfg.canvas {
            return Err(Error::Data(format!(
                "object extent {extent} does not fit canvas {}",
                cfg.canvas
            )));
        }
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.below(cfg.canvas - extent + 1);
            let y = rng.below(cfg.canvas - extent + 1);
            let candidate = SceneObject {
                shape,
                color,
                size,
                x,
                y,
                extent,
            };
            let ok = objects
                .iter()
                .all(|o| geometry::iou(&o.bbox(), &candidate.bbox()) < MAX_OVERLAP_IOU);
            if ok {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place object after {PLACEMENT_ATTEMPTS} attempts (overcrowded config)"
            )));
        }
    }
    Ok(SceneSpec {
        canvas: cfg.canvas,
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spatial {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
    Middle,
    SecondFromLeft,
}

impl Spatial {
    const ALL: [Spatial; 6] = [
        Spatial::Leftmost,
        Spatial::Rightmost,
        Spatial::Topmost,
        Spatial::Bottommost,
        Spatial::Middle,
        Spatial::SecondFromLeft,
    ];
}

/// Attribute + spatial predicates parsed out of an expression.
#[derive(Debug, Clone, Default, PartialEq)]
struct ParsedExpression {
    color: Option<ColorName>,
    size: Option<SizeClass>,
    shape: Option<ShapeKind>,
    spatial: Option<Spatial>,
}

fn parse_expression(expr: &str) -> Option<ParsedExpression> {
    let tokens = tokenize(expr);
    let mut parsed = ParsedExpression::default();
    let has_second = tokens.iter().any(|t| t == "second");
    for tok in &tokens {
        match tok.as_str() {
            "red" => parsed.color = Some(ColorName::Red),
            "green" => parsed.color = Some(ColorName::Green),
            "blue" => parsed.color = Some(ColorName::Blue),
            "yellow" => parsed.color = Some(ColorName::Yellow),
            "white" => parsed.color = Some(ColorName::White),
            "black" => parsed.color = Some(ColorName::Black),
            "small" => parsed.size = Some(SizeClass::Small),
            "large" => parsed.size = Some(SizeClass::Large),
            "circle" => parsed.shape = Some(ShapeKind::Circle),
            "square" => parsed.shape = Some(ShapeKind::Square),
            "triangle" => parsed.shape = Some(ShapeKind::Triangle),
            "second" => parsed.spatial = Some(Spatial::SecondFromLeft),
            "left" | "leftmost" if !has_second => parsed.spatial = Some(Spatial::Leftmost),
            "right" | "rightmost" if !has_second => parsed.spatial = Some(Spatial::Rightmost),
            "top" | "topmost" if !has_second => parsed.spatial = Some(Spatial::Topmost),
            "bottom" | "bottommost" if !has_second => parsed.spatial = Some(Spatial::Bottommost),
            "middle" if !has_second => parsed.spatial = Some(Spatial::Middle),
            _ => {} // filler words
        }
    }
    parsed.shape?;
    Some(parsed)
}

fn matches_attributes(obj: &SceneObject, p: &ParsedExpression) -> bool {
    p.color.is_none_or(|c| obj.color == c)
        && p.size.is_none_or(|s| obj.size == s)
        && p.shape.is_none_or(|sh| obj.shape == sh)
}

/// Rank candidates along an axis; returns the index into `cands` or None on
/// ties (ambiguous).
fn pick_by_rank(cands: &[usize], scene: &SceneSpec, key_x: bool, rank: usize) -> Option<usize> {
    let mut order: Vec<(f64, usize)> = cands
        .iter()
        .map(|&i| {
            let (cx, cy) = scene.objects[i].center();
            (if key_x { cx } else { cy }, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if rank >= order.len() {
        return None;
    }
    // tie at the selected rank boundary makes the phrase ambiguous
    let tied = (rank > 0 && order[rank - 1].0 == order[rank].0)
        || (rank + 1 < order.len() && order[rank].0 == order[rank + 1].0);
    if tied {
        None
    } else {
        Some(order[rank].1)
    }
}

/// Brute-force predicate evaluation over all scene objects: the object the
/// expression denotes, or None when the expression is ambiguous or empty.
pub fn select_referent(scene: &SceneSpec, expr: &str) -> Option<usize> {
    let parsed = parse_expression(expr)?;
    let cands: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| matches_attributes(&scene.objects[i], &parsed))
        .collect();
    if cands.is_empty() {
        return None;
    }
    match parsed.spatial {
        None => {
            if cands.len() == 1 {
                Some(cands[0])
            } else {
                None
            }
        }
        Some(Spatial::Leftmost) => pick_by_rank(&cands, scene, true, 0),
        Some(Spatial::Rightmost) => pick_by_rank(&cands, scene, true, cands.len() - 1),
        Some(Spatial::Topmost) => pick_by_rank(&cands, scene, false, 0),
        Some(Spatial::Bottommost) => pick_by_rank(&cands, scene, false, cands.len() - 1),
        Some(Spatial::Middle) => {
            if cands.len() >= 3 && cands.len() % 2 == 1 {
                pick_by_rank(&cands, scene, true, cands.len() / 2)
            } else {
                None
            }
        }
        Some(Spatial::SecondFromLeft) => {
            if cands.len() >= 3 {
                pick_by_rank(&cands, scene, true, 1)
            } else {
                None
            }
        }
    }
}

/// An expression string plus the attribute words it uses.
pub type ExpressionWithAttrs = (String, Vec<String>);

/// One candidate description before rendering to a string.
#[derive(Debug, Clone)]
struct Description {
    color: Option<ColorName>,
    size: Option<SizeClass>,
    shape: ShapeKind,
    spatial: Option<Spatial>,
}

fn attribute_subsets(obj: &SceneObject) -> [(Option<ColorName>, Option<SizeClass>); 4] {
    [
        (None, None),
        (Some(obj.color), None),
        (None, Some(obj.size)),
        (Some(obj.color), Some(obj.size)),
    ]
}

fn candidates_for(
    scene: &SceneSpec,
    shape: ShapeKind,
    color: Option<ColorName>,
    size: Option<SizeClass>,
) -> Vec<usize> {
    (0..scene.objects.len())
        .filter(|&i| {
            let o = &scene.objects[i];
            o.shape == shape
                && color.is_none_or(|c| o.color == c)
                && size.is_none_or(|s| o.size == s)
        })
        .collect()
}

/// Margin between the chosen candidate and its nearest rank competitor along
/// the relevant axis; None when the spatial word does not select the target.
fn spatial_margin(
    scene: &SceneSpec,
    cands: &[usize],
    target: usize,
    spatial: Spatial,
) -> Option<f64> {
    let key_x = !matches!(spatial, Spatial::Topmost | Spatial::Bottommost);
    let mut order: Vec<(f64, usize)> = cands
        .iter()
        .map(|&i| {
            let (cx, cy) = scene.objects[i].center();
            (if key_x { cx } else { cy }, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let rank = match spatial {
        Spatial::Leftmost | Spatial::Topmost => 0,
        Spatial::Rightmost | Spatial::Bottommost => order.len() - 1,
        Spatial::Middle => {
            if order.len() < 3 || order.len().is_multiple_of(2) {
                return None;
            }
            order.len() / 2
        }
        Spatial::SecondFromLeft => {
            if order.len() < 3 {
                return None;
            }
            1
        }
    };
    if order[rank].1 != target {
        return None;
    }
    let mut margin = f64::INFINITY;
    if rank > 0 {
        margin = margin.min(order[rank].0 - order[rank - 1].0);
    }
    if rank + 1 < order.len() {
        margin = margin.min(order[rank + 1].0 - order[rank].0);
    }
    Some(margin)
}

fn render_description(d: &Description, rng: &mut Rng) -> String {
    let mut attrs = String::new();
    if let Some(s) = d.size {
        attrs.push_str(s.word());
        attrs.push(' ');
    }
    if let Some(c) = d.color {
        attrs.push_str(c.word());
        attrs.push(' ');
    }
    let core = format!("{attrs}{}", d.shape.word());
    match d.spatial {
        None => {
            if rng.below(2) == 0 {
                core
            } else {
                format!("the {core}")
            }
        }
        Some(Spatial::Leftmost) => match rng.below(3) {
            0 => format!("leftmost {core}"),
            1 => format!("the leftmost {core}"),
            _ => format!("the {core} on the left"),
        },
        Some(Spatial::Rightmost) => match rng.below(3) {
            0 => format!("rightmost {core}"),
            1 => format!("the rightmost {core}"),
            _ => format!("the {core} on the right"),
        },
        Some(Spatial::Topmost) => match rng.below(2) {
            0 => format!("the {core} at the top"),
            _ => format!("top {core}"),
        },
        Some(Spatial::Bottommost) => match rng.below(2) {
            0 => format!("the {core} at the bottom"),
            _ => format!("bottom {core}"),
        },
        Some(Spatial::Middle) => {
            if rng.below(2) == 0 {
                format!("middle {core}")
            } else {
                format!("the {core} in the middle")
            }
        }
        Some(Spatial::SecondFromLeft) => format!("the second {core} from the left"),
    }
}

/// Produce one expression uniquely identifying `target`, plus the set of
/// color/size words it uses (the attribute supervision). Fails when no
/// unique description exists under the grammar.
pub fn generate_expression(
    scene: &SceneSpec,
    target: usize,
    rng: &mut Rng,
    cfg: &GenConfig,
) -> Result<ExpressionWithAttrs> {
    let obj = &scene.objects[target];
    let mut plain: Vec<Description> = Vec::new();
    let mut spatial: Vec<Description> = Vec::new();

    for (color, size) in attribute_subsets(obj) {
        let cands = candidates_for(scene, obj.shape, color, size);
        if cands.len() == 1 && cands[0] == target {
            plain.push(Description {
                color,
                size,
                shape: obj.shape,
                spatial: None,
            });
        } else if cands.len() >= 2 && cfg.flavor == Flavor::Loc {
            for sp in Spatial::ALL {
                if let Some(m) = spatial_margin(scene, &cands, target, sp) {
                    if m >= cfg.spatial_margin {
                        spatial.push(Description {
                            color,
                            size,
                            shape: obj.shape,
                            spatial: Some(sp),
                        });
                    }
                }
            }
        }
    }

    let pick_plain = !plain.is_empty() && (spatial.is_empty() || rng.next_f64() < 0.7);
    let pool = if pick_plain { &plain } else { &spatial };
    if pool.is_empty() {
        return Err(Error::Data(
            "no unique description exists under the grammar".into(),
        ));
    }
    let desc = &pool[rng.below(pool.len())];
    let expr = render_description(desc, rng);

    // The generator's own output must satisfy the oracle.
    if select_referent(scene, &expr) != Some(target) {
        return Err(Error::Data(format!(
            "generated expression '{expr}' fails the uniqueness oracle"
        )));
    }

    let mut attrs = Vec::new();
    if let Some(s) = desc.size {
        attrs.push(s.word().to_string());
    }
    if let Some(c) = desc.color {
        attrs.push(c.word().to_string());
    }
    Ok((expr, attrs))
}

const BACKGROUND: u8 = 128;

fn inside(obj: &SceneObject, px: f64, py: f64) -> bool {
    let e = obj.extent as f64;
    let x0 = obj.x as f64;
    let y0 = obj.y as f64;
    match obj.shape {
        ShapeKind::Square => px >= x0 && px <= x0 + e && py >= y0 && py <= y0 + e,
        ShapeKind::Circle => {
            let r = e / 2.0;
            let dx = px - (x0 + r);
            let dy = py - (y0 + r);
            dx * dx + dy * dy <= r * r
        }
        ShapeKind::Triangle => {
            // apex top-center, base along the bottom edge
            let t = py - y0;
            if !(0.0..=e).contains(&t) {
                return false;
            }
            let half = t / 2.0;
            let cx = x0 + e / 2.0;
            px >= cx - half && px <= cx + half
        }
    }
}

/// Deterministic flat-color rasterization, no anti-aliasing, packed RGB rows.
pub fn render_rgb8(scene: &SceneSpec) -> Vec<u8> {
    let p = scene.canvas;
    let mut rgb = vec![BACKGROUND; p * p * 3];
    for obj in &scene.objects {
        let color = obj.color.rgb();
        let y_end = (obj.y + obj.extent).min(p - 1);
        let x_end = (obj.x + obj.extent).min(p - 1);
        for py in obj.y..=y_end {
            for px in obj.x..=x_end {
                if inside(obj, px as f64 + 0.5, py as f64 + 0.5) {
                    let at = (py * p + px) * 3;
                    rgb[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    }
    rgb
}

/// Rasterize and normalize into a [0,1] image tensor.
pub fn render(scene: &SceneSpec) -> ImageTensor {
    ImageTensor::from_rgb8(&render_rgb8(scene), scene.canvas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Image reference: a path on disk or an inline scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Scene(SceneSpec),
}

/// One (image, expression, box) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringSample {
    pub id: String,
    pub image: ImageRef,
    pub width: usize,
    pub height: usize,
    pub expression: String,
    pub bbox: [f64; 4],
    pub attributes: Vec<String>,
    pub split: Split,
}

impl ReferringSample {
    pub fn bbox(&self) -> BoxXYWH {
        BoxXYWH::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }

    /// Key identifying the referent: same image + same ground-truth box.
    pub fn referent_key(&self) -> String {
        let scene_key = match &self.image {
            ImageRef::Path(p) => p.clone(),
            ImageRef::Scene(_) => self
                .id
                .rsplit_once('/')
                .map(|(scene, _)| scene.to_string())
                .unwrap_or_else(|| self.id.clone()),
        };
        format!(
            "{scene_key}|{:x}:{:x}:{:x}:{:x}",
            self.bbox[0].to_bits(),
            self.bbox[1].to_bits(),
            self.bbox[2].to_bits(),
            self.bbox[3].to_bits()
        )
    }
}

/// Manifest header: generation config and seed, written as the first line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub config: GenConfig,
    pub counts: BTreeMap<Split, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub samples: Vec<ReferringSample>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ReferringSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", serde_json::to_string(&self.header)?)?;
        for s in &self.samples {
            writeln!(f, "{}", serde_json::to_string(s)?)?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Data("empty manifest".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::DataLine {
                line: 1,
                msg: format!("bad header: {e}"),
            })?;
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let s: ReferringSample = serde_json::from_str(&line).map_err(|e| Error::DataLine {
                line: i + 2,
                msg: e.to_string(),
            })?;
            samples.push(s);
        }
        Ok(DatasetManifest { header, samples })
    }
}

/// Generate a full dataset: `counts` scenes per split, each contributing one
/// referent with up to `expressions_per_referent` distinct expressions.
/// A pure function of (seed, config): byte-identical across runs.
pub fn generate_manifest(
    seed: u64,
    cfg: &GenConfig,
    counts: &BTreeMap<Split, usize>,
) -> Result<DatasetManifest> {
    let root = Rng::new(seed);
    let mut samples = Vec::new();
    for (si, split) in Split::ALL.iter().enumerate() {
        let n = counts.get(split).copied().unwrap_or(0);
        for i in 0..n {
            let mut rng = root.fork(((si as u64) << 40) | i as u64);
            let (scene, target, exprs) = sample_referent(&mut rng, cfg)?;
            let scene_id = format!("{}-{i:05}", split.tag());
            let gt = scene.objects[target].bbox();
            for (k, (expr, attrs)) in exprs.into_iter().enumerate() {
                samples.push(ReferringSample {
                    id: format!("{scene_id}/{k}"),
                    image: ImageRef::Scene(scene.clone()),
                    width: cfg.canvas,
                    height: cfg.canvas,
                    expression: expr,
                    bbox: [gt.x, gt.y, gt.w, gt.h],
                    attributes: attrs,
                    split: *split,
                });
            }
        }
    }
    Ok(DatasetManifest {
        header: ManifestHeader {
            seed,
            config: cfg.clone(),
            counts: counts.clone(),
        },
        samples,
    })
}

/// Sample one scene plus a describable referent, retrying the scene when the
/// draw cannot be placed or no unique expression exists. Only a full run of
/// failed attempts is treated as an overcrowded/undescribable config.
fn sample_referent(
    rng: &mut Rng,
    cfg: &GenConfig,
) -> Result<(SceneSpec, usize, Vec<ExpressionWithAttrs>)> {
    const SCENE_ATTEMPTS: usize = 64;
    let mut last_err = None;
    for _ in 0..SCENE_ATTEMPTS {
        let scene = match generate_scene(rng, cfg) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let target = rng.below(scene.objects.len());
        let mut exprs: Vec<ExpressionWithAttrs> = Vec::new();
        for _ in 0..cfg.expressions_per_referent.max(1) * 2 {
            if exprs.len() >= cfg.expressions_per_referent.max(1) {
                break;
            }
            match generate_expression(&scene, target, rng, cfg) {
                Ok(pair) => {
                    if !exprs.iter().any(|(e, _)| *e == pair.0) {
                        exprs.push(pair);
                    }
                }
                Err(_) => break,
            }
        }
        if !exprs.is_empty() {
            return Ok((scene, target, exprs));
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Data(format!(
            "no describable referent found in {SCENE_ATTEMPTS} scene attempts"
        ))
    }))
}

/// Top-`n_attr` attribute words by training-set frequency (ties broken
/// lexicographically), weighted 1/sqrt(freq).
pub fn extract_attribute_vocab(train_samples: &[&ReferringSample], n_attr: usize) -> AttributeVocab {
    assert!(n_attr >= 1);
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for s in train_samples {
        for a in &s.attributes {
            *freq.entry(a.clone()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(n_attr);
    let (words, freqs): (Vec<String>, Vec<u64>) = entries.into_iter().unzip();
    AttributeVocab::new(words, freqs)
}

/// Token vocabulary over the training expressions.
pub fn build_vocabulary(train_samples: &[&ReferringSample]) -> crate::text::Vocabulary {
    let tokens: Vec<String> = train_samples
        .iter()
        .flat_map(|s| tokenize(&s.expression))
        .collect();
    crate::text::Vocabulary::from_corpus(tokens.iter().map(|t| t.as_str()))
}

/// Ingest an annotation file in the manifest JSON-lines schema. Lines whose
/// boxes fall outside the declared image dimensions are rejected and
/// counted; malformed lines abort with their line number. Returns the
/// manifest plus the rejected-sample count.
pub fn import_refcoco_style(path: &Path) -> Result<(DatasetManifest, usize)> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut samples = Vec::new();
    let mut rejected = 0usize;
    let mut header: Option<ManifestHeader> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<ManifestHeader>(&line) {
                header = Some(h);
                continue;
            }
        }
        let s: ReferringSample = serde_json::from_str(&line).map_err(|e| Error::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if s.expression.trim().is_empty() {
            return Err(Error::DataLine {
                line: i + 1,
                msg: "empty expression".into(),
            });
        }
        let bb = s.bbox();
        let inside = bb.x >= 0.0
            && bb.y >= 0.0
            && bb.w >= 0.0
            && bb.h >= 0.0
            && bb.right() <= s.width as f64
            && bb.bottom() <= s.height as f64;
        if inside {
            samples.push(s);
        } else {
            rejected += 1;
        }
    }
    let header = header.unwrap_or_else(|| ManifestHeader {
        seed: 0,
        config: GenConfig::default(),
        counts: BTreeMap::new(),
    });
    Ok((DatasetManifest { header, samples }, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(
        shape: ShapeKind,
        color: ColorName,
        size: SizeClass,
        x: usize,
        y: usize,
        extent: usize,
    ) -> SceneObject {
        SceneObject {
            shape,
            color,
            size,
            x,
            y,
            extent,
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_scene(&mut Rng::new(7), &cfg).unwrap();
        let b = generate_scene(&mut Rng::new(7), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_object_config_yields_one_object() {
        let cfg = GenConfig {
            min_objects: 1,
            max_objects: 1,
            ..GenConfig::default()
        };
        let scene = generate_scene(&mut Rng::new(3), &cfg).unwrap();
        assert_eq!(scene.objects.len(), 1);
    }

    #[test]
    fn objects_fit_and_overlap_is_bounded() {
        let cfg = GenConfig {
            min_objects: 5,
            max_objects: 5,
            small_extent: (8, 10),
            large_extent: (12, 14),
            ..GenConfig::default()
        };
        for seed in 0..20 {
            let scene = generate_scene(&mut Rng::new(seed), &cfg).unwrap();
            assert_eq!(scene.objects.len(), 5);
            for (i, a) in scene.objects.iter().enumerate() {
                assert!(a.x + a.extent <= cfg.canvas);
                assert!(a.y + a.extent <= cfg.canvas);
                for b in &scene.objects[i + 1..] {
                    assert!(geometry::iou(&a.bbox(), &b.bbox()) < MAX_OVERLAP_IOU);
                }
            }
        }
    }

    #[test]
    fn lone_object_gets_plain_description() {
        let scene = SceneSpec {
            canvas: 64,
            objects: vec![obj(
                ShapeKind::Circle,
                ColorName::Red,
                SizeClass::Small,
                10,
                10,
                12,
            )],
        };
        let cfg = GenConfig::default();
        let (expr, attrs) = generate_expression(&scene, 0, &mut Rng::new(1), &cfg).unwrap();
        assert!(expr.contains("circle"));
        assert_eq!(select_referent(&scene, &expr), Some(0));
        for a in &attrs {
            assert!(expr.contains(a.as_str()));
        }
    }

    #[test]
    fn twin_objects_force_a_spatial_word() {
        let scene = SceneSpec {
            canvas: 64,
            objects: vec![
                obj(ShapeKind::Circle, ColorName::Red, SizeClass::Small, 4, 20, 12),
                obj(ShapeKind::Circle, ColorName::Red, SizeClass::Small, 44, 20, 12),
            ],
        };
        let cfg = GenConfig::default();
        for seed in 0..10 {
            let (expr, _) = generate_expression(&scene, 0, &mut Rng::new(seed), &cfg).unwrap();
            let parsed = parse_expression(&expr).unwrap();
            assert!(parsed.spatial.is_some(), "expected spatial word in '{expr}'");
            assert_eq!(select_referent(&scene, &expr), Some(0));
        }
    }

    #[test]
    fn app_flavor_fails_on_indistinguishable_twins() {
        let scene = SceneSpec {
            canvas: 64,
            objects: vec![
                obj(ShapeKind::Circle, ColorName::Red, SizeClass::Small, 4, 20, 12),
                obj(ShapeKind::Circle, ColorName::Red, SizeClass::Small, 44, 20, 12),
            ],
        };
        let cfg = GenConfig {
            flavor: Flavor::App,
            ..GenConfig::default()
        };
        assert!(generate_expression(&scene, 0, &mut Rng::new(1), &cfg).is_err());
    }

    #[test]
    fn oracle_on_handmade_scene() {
        let scene = SceneSpec {
            canvas: 64,
            objects: vec![
                obj(ShapeKind::Circle, ColorName::Red, SizeClass::Small, 2, 2, 12),
                obj(ShapeKind::Circle, ColorName::Blue, SizeClass::Small, 30, 2, 12),
                obj(ShapeKind::Square, ColorName::Red, SizeClass::Large, 2, 34, 22),
            ],
        };
        assert_eq!(select_referent(&scene, "blue circle"), Some(1));
        assert_eq!(select_referent(&scene, "the square"), Some(2));
        assert_eq!(select_referent(&scene, "red circle"), Some(0));
        // "red" alone matches two objects of different shapes; shape word required
        assert_eq!(select_referent(&scene, "red thing"), None);
        assert_eq!(select_referent(&scene, "leftmost circle"), Some(0));
        assert_eq!(select_referent(&scene, "the circle on the right"), Some(1));
        assert_eq!(select_referent(&scene, "green circle"), None);
    }

    #[test]
    fn every_generated_sample_passes_the_oracle() {
        let cfg = GenConfig::default();
        let counts: BTreeMap<Split, usize> =
            [(Split::Train, 40), (Split::Val, 5), (Split::Test, 5)].into();
        let manifest = generate_manifest(99, &cfg, &counts).unwrap();
        assert!(!manifest.samples.is_empty());
        for s in &manifest.samples {
            let scene = match &s.image {
                ImageRef::Scene(sc) => sc,
                _ => panic!("generated samples are inline scenes"),
            };
            let picked = select_referent(scene, &s.expression)
                .unwrap_or_else(|| panic!("ambiguous expression '{}'", s.expression));
            assert_eq!(scene.objects[picked].bbox(), s.bbox());
            // attribute set is exactly the color/size tokens of the expression
            let toks = tokenize(&s.expression);
            let colors_sizes: Vec<String> = toks
                .iter()
                .filter(|t| {
                    ColorName::ALL.iter().any(|c| c.word() == t.as_str())
                        || t.as_str() == "small"
                        || t.as_str() == "large"
                })
                .cloned()
                .collect();
            let mut expected = colors_sizes;
            expected.sort();
            let mut got = s.attributes.clone();
            got.sort();
            assert_eq!(got, expected, "attrs mismatch for '{}'", s.expression);
        }
    }

    #[test]
    fn app_flavor_manifests_avoid_spatial_words() {
        let cfg = GenConfig {
            flavor: Flavor::App,
            ..GenConfig::default()
        };
        let counts: BTreeMap<Split, usize> = [(Split::Train, 30)].into();
        let manifest = generate_manifest(123, &cfg, &counts).unwrap();
        let spatial = [
            "left", "right", "top", "bottom", "middle", "leftmost", "rightmost", "second",
        ];
        for s in &manifest.samples {
            let toks = tokenize(&s.expression);
            assert!(
                toks.iter().all(|t| !spatial.contains(&t.as_str())),
                "spatial word in app-flavor expression '{}'",
                s.expression
            );
            let scene = match &s.image {
                ImageRef::Scene(sc) => sc,
                _ => unreachable!(),
            };
            assert!(select_referent(scene, &s.expression).is_some());
        }
    }

    #[test]
    fn manifest_generation_is_reproducible() {
        let cfg = GenConfig::default();
        let counts: BTreeMap<Split, usize> = [(Split::Train, 10)].into();
        let a = generate_manifest(5, &cfg, &counts).unwrap();
        let b = generate_manifest(5, &cfg, &counts).unwrap();
        assert_eq!(a, b);
        let ser_a = serde_json::to_string(&a.samples).unwrap();
        let ser_b = serde_json::to_string(&b.samples).unwrap();
        assert_eq!(ser_a, ser_b);
    }

    #[test]
    fn render_properties() {
        let empty = SceneSpec {
            canvas: 16,
            objects: vec![],
        };
        let rgb = render_rgb8(&empty);
        assert!(rgb.iter().all(|&b| b == BACKGROUND));

        let scene = SceneSpec {
            canvas: 32,
            objects: vec![
                obj(ShapeKind::Circle, ColorName::Red, SizeClass::Small, 2, 2, 10),
                obj(ShapeKind::Square, ColorName::Blue, SizeClass::Small, 16, 16, 10),
                obj(ShapeKind::Triangle, ColorName::Yellow, SizeClass::Small, 2, 18, 10),
            ],
        };
        let rgb = render_rgb8(&scene);
        // re-render equality
        assert_eq!(rgb, render_rgb8(&scene));
        // pixel at each object center carries the object's color
        for o in &scene.objects {
            let (cx, cy) = o.center();
            let at = ((cy as usize) * 32 + cx as usize) * 3;
            assert_eq!(&rgb[at..at + 3], &o.color.rgb());
        }
        // the normalized tensor keeps pure colors exact
        let t = render(&scene);
        let (cx, cy) = scene.objects[0].center();
        assert_eq!(t.get(0, cy as usize, cx as usize), 1.0);
        assert_eq!(t.get(1, cy as usize, cx as usize), 0.0);
    }

    #[test]
    fn attribute_vocab_extraction() {
        let mk = |attrs: &[&str]| ReferringSample {
            id: "x".into(),
            image: ImageRef::Path("p.png".into()),
            width: 64,
            height: 64,
            expression: "e".into(),
            bbox: [0.0, 0.0, 1.0, 1.0],
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            split: Split::Train,
        };
        let samples: Vec<ReferringSample> = (0..9)
            .map(|_| mk(&["red"]))
            .chain(std::iter::once(mk(&["blue", "small"])))
            .chain(std::iter::once(mk(&["small"])))
            .collect();
        let refs: Vec<&ReferringSample> = samples.iter().collect();
        let vocab = extract_attribute_vocab(&refs, 50);
        // red appears 9 times -> weight 1/3
        let red = vocab.words.iter().position(|w| w == "red").unwrap();
        assert_eq!(vocab.freqs[red], 9);
        assert!((vocab.weights[red] - 1.0 / 3.0).abs() < 1e-12);
        // fewer distinct words than n_attr: vocabulary is clamped
        assert_eq!(vocab.len(), 3);
        // frequency order with lexicographic ties: red(9), blue(1)/small(2)...
        assert_eq!(vocab.words[0], "red");
    }

    #[test]
    fn manifest_round_trip_and_import_validation() {
        let cfg = GenConfig::default();
        let counts: BTreeMap<Split, usize> = [(Split::Train, 6), (Split::Test, 2)].into();
        let manifest = generate_manifest(11, &cfg, &counts).unwrap();

        let dir = std::env::temp_dir().join("refground-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.jsonl");
        manifest.save_jsonl(&path).unwrap();
        let loaded = DatasetManifest::load_jsonl(&path).unwrap();
        assert_eq!(loaded, manifest);

        // export . import is identity on valid manifests
        let (imported, rejected) = import_refcoco_style(&path).unwrap();
        assert_eq!(rejected, 0);
        assert_eq!(imported.samples, manifest.samples);

        // out-of-bounds boxes are rejected and counted
        let bad = dir.join("bad.jsonl");
        let mut text = String::new();
        text.push_str(&serde_json::to_string(&manifest.header).unwrap());
        text.push('\n');
        text.push_str(r#"{"id":"a","image":"img.png","width":64,"height":64,"expression":"red circle","bbox":[0,0,10,10],"attributes":["red"],"split":"train"}"#);
        text.push('\n');
        text.push_str(r#"{"id":"b","image":"img.png","width":64,"height":64,"expression":"blue circle","bbox":[60,0,10,10],"attributes":["blue"],"split":"train"}"#);
        text.push('\n');
        std::fs::write(&bad, text).unwrap();
        let (m, rejected) = import_refcoco_style(&bad).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(rejected, 1);

        // malformed line reports its number
        let broken = dir.join("broken.jsonl");
        std::fs::write(&broken, "{\"id\": not-json}\n").unwrap();
        match import_refcoco_style(&broken) {
            Err(Error::DataLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected DataLine error, got {other:?}"),
        }

        // empty file -> empty manifest (import path has no header requirement)
        let empty = dir.join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        let (m, rejected) = import_refcoco_style(&empty).unwrap();
        assert!(m.samples.is_empty());
        assert_eq!(rejected, 0);
    }
}
