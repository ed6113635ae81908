use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AnnotatedCaption, PosTag, RegionMask};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const BACKGROUND: [f64; 3] = [-1.0, -1.0, -1.0];

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }

    /// Whether local pixel `(y, x)` of a `ch × cw` cell is covered.
    pub fn covers(self, y: usize, x: usize, ch: usize, cw: usize) -> bool {
        let (my, mx) = ((ch / 8) as f64, (cw / 8) as f64);
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let (cy, cx) = (ch as f64 / 2.0, cw as f64 / 2.0);
        let inside_box = py > my && py < ch as f64 - my && px > mx && px < cw as f64 - mx;
        match self {
            Shape::Square => inside_box,
            Shape::Circle => {
                let (ry, rx) = (cy - my, cx - mx);
                let (dy, dx) = ((py - cy) / ry, (px - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Triangle => {
                if !inside_box {
                    return false;
                }
                let frac = (py - my) / (ch as f64 - 2.0 * my);
                (px - cx).abs() <= frac * (cx - mx)
            }
        }
    }

    /// Covered fraction of a `ch × cw` cell.
    pub fn fill_fraction(self, ch: usize, cw: usize) -> f64 {
        let n = (0..ch).flat_map(|y| (0..cw).map(move |x| (y, x))).filter(|&(y, x)| self.covers(y, x, ch, cw)).count();
        n as f64 / (ch * cw) as f64
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

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

/// Cells of the 2×2 layout: 0 upper left, 1 upper right, 2 lower left,
/// 3 lower right.
pub fn cell_words(cell: usize) -> [&'static str; 2] {
    [if cell < 2 { "upper" } else { "lower" }, if cell % 2 == 0 { "left" } else { "right" }]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    /// Index of an object the original caption leaves out.
    pub omitted: Option<usize>,
}

fn describe(objects: &[&ObjectSpec], article: bool) -> (Vec<String>, Vec<PosTag>) {
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            words.push("and".to_string());
            tags.push(PosTag::Function);
        }
        if article {
            words.push("a".into());
            tags.push(PosTag::Function);
        }
        let [v, h] = cell_words(o.cell);
        let parts: [(&str, PosTag); 5] = [
            (o.color.word(), PosTag::Adjective),
            (o.shape.word(), PosTag::Noun),
            ("at", PosTag::Function),
            (v, PosTag::Adjective),
            (h, PosTag::Noun),
        ];
        for (w, t) in parts {
            words.push(w.to_string());
            tags.push(t);
        }
    }
    (words, tags)
}

impl SceneSpec {
    /// The caption as a person might write it: objects in scene order, minus
    /// the omitted one.
    pub fn caption(&self) -> (Vec<String>, Vec<PosTag>) {
        let kept: Vec<&ObjectSpec> =
            self.objects.iter().enumerate().filter(|&(i, _)| Some(i) != self.omitted).map(|(_, o)| o).collect();
        describe(&kept, true)
    }

    /// Complete description of every object in cell order, the form used
    /// for generation prompts and caption replacement.
    pub fn synthetic_caption(&self) -> (Vec<String>, Vec<PosTag>) {
        let mut objs: Vec<&ObjectSpec> = self.objects.iter().collect();
        objs.sort_by_key(|o| o.cell);
        describe(&objs, false)
    }

    pub fn labels(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.shape.word().to_string()).collect()
    }

    fn check_size(h: usize, w: usize) -> Result<()> {
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Data(format!("scene images need even sides, got {h}x{w}")));
        }
        Ok(())
    }

    /// Covered pixels of each object, in object order.
    pub fn masks(&self, h: usize, w: usize) -> Result<Vec<RegionMask>> {
        Self::check_size(h, w)?;
        let (ch, cw) = (h / 2, w / 2);
        Ok(self
            .objects
            .iter()
            .map(|o| {
                let mut m = RegionMask::empty(h, w);
                let (oy, ox) = ((o.cell / 2) * ch, (o.cell % 2) * cw);
                for y in 0..ch {
                    for x in 0..cw {
                        if o.shape.covers(y, x, ch, cw) {
                            m.set(oy + y, ox + x, true);
                        }
                    }
                }
                m
            })
            .collect())
    }

    /// `h × w × 3` image in `[-1, 1]`: object colors on black.
    pub fn render<S: Scalar>(&self, h: usize, w: usize) -> Result<Tensor<S>> {
        let masks = self.masks(h, w)?;
        let mut data = Vec::with_capacity(h * w * 3);
        for k in 0..h * w {
            let rgb = self.objects.iter().zip(&masks).find(|(_, m)| m.cells[k]).map_or(BACKGROUND, |(o, _)| o.color.rgb());
            data.extend(rgb.iter().map(|&v| S::lit(v)));
        }
        Tensor::new(vec![h, w, 3], data)
    }

    pub fn annotated(&self, h: usize, w: usize) -> Result<AnnotatedCaption> {
        let (words, tags) = self.caption();
        let (synthetic_words, synthetic_tags) = self.synthetic_caption();
        Ok(AnnotatedCaption {
            words,
            tags,
            synthetic_words,
            synthetic_tags,
            labels: self.labels(),
            region_masks: self.masks(h, w)?,
        })
    }

    /// `"red square 0, blue circle 3"`.
    pub fn to_prompt(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{} {} {}", o.color.word(), o.shape.word(), o.cell))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn parse_prompt(text: &str) -> Result<Self> {
        let mut objects: Vec<ObjectSpec> = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let f: Vec<&str> = part.split_whitespace().collect();
            let bad = || Error::Data(format!("cannot parse object `{part}`; expected `<color> <shape> <cell>`"));
            let [c, s, cell] = f[..] else { return Err(bad()) };
            let o = ObjectSpec {
                color: Color::from_word(c).ok_or_else(bad)?,
                shape: Shape::from_word(s).ok_or_else(bad)?,
                cell: cell.parse().ok().filter(|&c: &usize| c < 4).ok_or_else(bad)?,
            };
            if objects.iter().any(|p| p.cell == o.cell) {
                return Err(Error::Data(format!("cell {} used twice", o.cell)));
            }
            objects.push(o);
        }
        if objects.is_empty() {
            return Err(Error::Data("prompt names no objects".into()));
        }
        Ok(Self { objects, omitted: None })
    }
}

/// A random scene with `objects` objects in distinct cells.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, objects: usize, omit_prob: f64) -> SceneSpec {
    let cells = index::sample(rng, 4, objects.clamp(1, 4)).into_vec();
    let objects: Vec<ObjectSpec> = cells
        .into_iter()
        .map(|cell| ObjectSpec {
            shape: Shape::ALL[rng.gen_range(0..3)],
            color: Color::ALL[rng.gen_range(0..4)],
            cell,
        })
        .collect();
    let omit = rng.gen::<f64>() < omit_prob;
    let omitted = (objects.len() > 1 && omit).then(|| objects.len() - 1);
    SceneSpec { objects, omitted }
}

/// `count` scenes and their renderings; item `i` depends only on
/// `(seed, i)`.
pub fn generate_dataset<S: Scalar>(cfg: &DataConfig, count: usize, seed: u64) -> Result<Vec<(Tensor<S>, SceneSpec)>> {
    if count == 0 {
        return Err(Error::Data("dataset count must be at least 1".into()));
    }
    (0..count)
        .map(|i| {
            let mut rng = stream(&[seed, purpose::DATA, i as u64]);
            let k = rng.gen_range(1..=cfg.max_objects.clamp(1, 4));
            let spec = random_scene(&mut rng, k, cfg.omit_prob);
            Ok((spec.render(cfg.height, cfg.width)?, spec))
        })
        .collect()
}

pub fn to_train_items<S: Scalar>(data: &[(Tensor<S>, SceneSpec)]) -> Result<Vec<TrainItem<S>>> {
    data.iter()
        .map(|(img, spec)| {
            let s = img.shape();
            Ok(TrainItem { image: img.clone(), caption: spec.annotated(s[0], s[1])? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaptionRecord {
    words: Vec<String>,
    tags: Vec<PosTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestItem {
    spec: SceneSpec,
    caption: CaptionRecord,
    synthetic: CaptionRecord,
    labels: Vec<String>,
    /// Run-length encoded masks: `(start, length)` in row-major order.
    masks: Vec<Vec<(usize, usize)>>,
    /// Offset of the image in the blob, in values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    height: usize,
    width: usize,
    channels: usize,
    items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "images.f32";

/// Writes `manifest.json` and the little-endian `f32` image blob.
pub fn save_dataset<S: Scalar>(dir: &Path, data: &[(Tensor<S>, SceneSpec)]) -> Result<()> {
    let Some((first, _)) = data.first() else {
        return Err(Error::Data("nothing to save".into()));
    };
    let &[h, w, c] = first.shape() else {
        return Err(Error::Data("images must be h×w×c".into()));
    };
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(data.len() * h * w * c * 4);
    let mut items = Vec::with_capacity(data.len());
    for (img, spec) in data {
        if img.shape() != [h, w, c] {
            return Err(Error::Data("all images must share one shape".into()));
        }
        let (words, tags) = spec.caption();
        let (sw, st) = spec.synthetic_caption();
        items.push(ManifestItem {
            spec: spec.clone(),
            caption: CaptionRecord { words, tags },
            synthetic: CaptionRecord { words: sw, tags: st },
            labels: spec.labels(),
            masks: spec.masks(h, w)?.iter().map(RegionMask::run_lengths).collect(),
            offset: blob.len() / 4,
        });
        for v in img.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { height: h, width: w, channels: c, items };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Vec<(Tensor<S>, SceneSpec)>> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    let n = manifest.height * manifest.width * manifest.channels;
    manifest
        .items
        .into_iter()
        .map(|it| {
            let bytes = blob
                .get(it.offset * 4..(it.offset + n) * 4)
                .ok_or_else(|| Error::Data("image blob shorter than the manifest says".into()))?;
            let data = bytes.chunks_exact(4).map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect();
            Ok((Tensor::new(vec![manifest.height, manifest.width, manifest.channels], data)?, it.spec))
        })
        .collect()
}
