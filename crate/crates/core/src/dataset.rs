//! Generated datasets: object set, scenes with train/eval split, and the
//! on-disk layout (a manifest plus one binary record per scene).
//!
//! Record layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "CFSCENE\0" | version | N | point width (3) | color width (3)
//! | index width (1) | text length | text | N·3 f32 points | N·3 f32 colors
//! | N u32 model indices
//! ```
//!
//! The text block holds the generator echo followed by `seed`, `object`,
//! `visible`, `model_points` and `gt` (seven numbers) lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pose::{Point3, RigidTransform};
use crate::synth::{make_scene, mix_seed, Observation, Scene, SceneConfig, Shape, SynthObject};

const RECORD_MAGIC: &[u8; 8] = b"CFSCENE\0";
const RECORD_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "corrfuse-dataset 1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub shapes: Vec<Shape>,
    pub scenes_per_model: usize,
    pub seed: u64,
    pub model_points: usize,
    pub scene: SceneConfig,
    /// Fraction of each object's scenes held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::DEFAULT_BOX, Shape::DEFAULT_CYLINDER, Shape::DEFAULT_LSHAPE],
            scenes_per_model: 100,
            seed: 7,
            model_points: 200,
            scene: SceneConfig::default(),
            eval_fraction: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("no models requested".into()));
        }
        let mut kinds: Vec<_> = self.shapes.iter().map(|s| s.kind()).collect();
        kinds.sort_unstable();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each shape kind may appear once".into()));
        }
        if self.scenes_per_model == 0 {
            return Err(Error::Config("scenes per model must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!("eval fraction {} outside [0, 1]", self.eval_fraction)));
        }
        for s in &self.shapes {
            s.validate()?;
        }
        self.scene.validate()
    }

    /// Number of held-out scenes per object.
    pub fn eval_scenes(&self) -> usize {
        (self.eval_fraction * self.scenes_per_model as f64).round() as usize
    }

    /// `key = value` lines that reproduce this configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let shapes: Vec<String> = self.shapes.iter().map(|s| s.to_string()).collect();
        vec![
            ("models".into(), shapes.join(";")),
            ("scenes".into(), self.scenes_per_model.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("model_points".into(), self.model_points.to_string()),
            ("points".into(), self.scene.points.to_string()),
            ("occlusion".into(), self.scene.occlusion.to_string()),
            ("noise".into(), self.scene.noise_sigma.to_string()),
            ("translation_range".into(), self.scene.translation_range.to_string()),
            ("eval_fraction".into(), self.eval_fraction.to_string()),
        ]
    }

    fn from_echo(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Input(format!("manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Input(format!("manifest `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Input(format!("manifest `{k}` is not an integer")))
        };
        Ok(Self {
            shapes: get("models")?.split(';').map(str::parse).collect::<Result<_>>()?,
            scenes_per_model: int("scenes")? as usize,
            seed: int("seed")?,
            model_points: int("model_points")? as usize,
            scene: SceneConfig {
                translation_range: num("translation_range")?,
                occlusion: num("occlusion")?,
                noise_sigma: num("noise")?,
                points: int("points")? as usize,
            },
            eval_fraction: num("eval_fraction")?,
        })
    }
}

/// A dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub objects: Vec<SynthObject>,
    pub scenes: Vec<(Scene, Split)>,
}

fn quantize(p: Point3) -> Point3 {
    p.map(|v| v as f32 as f64)
}

impl Dataset {
    /// Generates every object and scene. Observations are rounded to the
    /// 32-bit precision of the record files so that a freshly generated
    /// dataset equals its reloaded copy.
    pub fn generate(config: &GenConfig) -> Result<Self> {
        config.validate()?;
        let mut objects = Vec::new();
        let mut scenes = Vec::new();
        let n_eval = config.eval_scenes();
        for (j, &shape) in config.shapes.iter().enumerate() {
            let model_seed = mix_seed(config.seed, 1000 + j as u64);
            let object = SynthObject::new(shape.kind(), shape, config.model_points, model_seed)?;
            for k in 0..config.scenes_per_model {
                let seed = mix_seed(model_seed, k as u64);
                let mut scene = make_scene(&object, &config.scene, seed)?;
                scene.observation.points = scene.observation.points.iter().map(|&p| quantize(p)).collect();
                scene.observation.colors = scene.observation.colors.iter().map(|&p| quantize(p)).collect();
                let split = if k + n_eval >= config.scenes_per_model {
                    Split::Eval
                } else {
                    Split::Train
                };
                scenes.push((scene, split));
            }
            objects.push(object);
        }
        Ok(Self {
            config: config.clone(),
            objects,
            scenes,
        })
    }

    pub fn object(&self, id: &str) -> Result<&SynthObject> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::Input(format!("unknown object `{id}`")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |(_, s)| *s == split).map(|(scene, _)| scene)
    }

    /// Ids of objects carrying symmetry metadata.
    pub fn symmetric_ids(&self) -> Vec<String> {
        self.objects
            .iter()
            .filter(|o| o.model.is_symmetric())
            .map(|o| o.id.clone())
            .collect()
    }

    /// Keeps only scenes of the listed objects (all objects stay loaded).
    pub fn restrict_scenes(&mut self, objects: &[String]) {
        self.scenes.retain(|(s, _)| objects.contains(&s.object));
    }

    fn record_name(scene: &Scene, k: usize) -> String {
        format!("scenes/{}_{k:05}.scene", scene.object)
    }

    fn echo_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.echo() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Writes `manifest.txt` and `scenes/*.scene` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let scene_dir = dir.join("scenes");
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let echo = self.echo_text();
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{MANIFEST_HEADER}");
        manifest.push_str(&echo);
        for o in &self.objects {
            let _ = writeln!(
                manifest,
                "model {} {} {} {} {}",
                o.id,
                o.shape,
                o.model.len(),
                o.seed,
                if o.model.is_symmetric() { "symmetric" } else { "asymmetric" }
            );
        }
        let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
        for (scene, split) in &self.scenes {
            let k = counters.entry(&scene.object).or_default();
            let name = Self::record_name(scene, *k);
            *k += 1;
            let path = dir.join(&name);
            fs::write(&path, encode_record(scene, &echo)).map_err(|e| Error::io(&path, e))?;
            let _ = writeln!(
                manifest,
                "scene {name} {} {} {} {}",
                scene.object,
                split.name(),
                scene.visible,
                scene.model_points
            );
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset written by [`Dataset::write`]; models are regenerated
    /// from their recorded shape, size and seed.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::format(&path, "missing dataset header"));
        }
        let mut echo = BTreeMap::new();
        let mut objects = Vec::new();
        let mut scenes = Vec::new();
        for (no, line) in lines.enumerate() {
            let bad = |d: &str| Error::format(&path, format!("line {}: {d}", no + 2));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.first() {
                None => continue,
                Some(&"model") => {
                    let [_, id, shape, m, seed, _sym] = fields[..] else {
                        return Err(bad("model needs id, shape, points, seed, symmetry"));
                    };
                    let shape: Shape = shape.parse()?;
                    let m = m.parse().map_err(|_| bad("bad point count"))?;
                    let seed = seed.parse().map_err(|_| bad("bad seed"))?;
                    objects.push(SynthObject::new(id, shape, m, seed)?);
                }
                Some(&"scene") => {
                    let [_, file, object, split, _, _] = fields[..] else {
                        return Err(bad("scene needs file, object, split, visible, model points"));
                    };
                    let split: Split = split.parse()?;
                    let rec = dir.join(file);
                    let bytes = fs::read(&rec).map_err(|e| Error::io(&rec, e))?;
                    let scene = decode_record(&bytes, &rec)?;
                    if scene.object != object {
                        return Err(Error::format(&rec, format!("record is for `{}`, manifest says `{object}`", scene.object)));
                    }
                    scenes.push((scene, split));
                }
                Some(_) => {
                    let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
                    echo.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
        }
        let config = GenConfig::from_echo(&echo).map_err(|e| Error::format(&path, e.to_string()))?;
        let data = Self {
            config,
            objects,
            scenes,
        };
        for (scene, _) in &data.scenes {
            data.object(&scene.object)
                .map_err(|_| Error::format(&path, format!("scene for undeclared object `{}`", scene.object)))?;
        }
        Ok(data)
    }
}

fn encode_record(scene: &Scene, echo: &str) -> Vec<u8> {
    let mut text = echo.to_string();
    let _ = writeln!(text, "seed = {}", scene.seed);
    let _ = writeln!(text, "object = {}", scene.object);
    let _ = writeln!(text, "visible = {}", scene.visible);
    let _ = writeln!(text, "model_points = {}", scene.model_points);
    let _ = writeln!(text, "gt = {}", scene.gt);
    let n = scene.observation.len();
    let mut out = Vec::with_capacity(40 + text.len() + n * 28);
    out.extend_from_slice(RECORD_MAGIC);
    for v in [RECORD_VERSION, n as u32, 3, 3, 1, text.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(text.as_bytes());
    for p in scene.observation.points.iter().chain(&scene.observation.colors) {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for &i in &scene.indices {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn points(&mut self, n: usize) -> Option<Vec<Point3>> {
        (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for v in p.iter_mut() {
                    *v = f32::from_le_bytes(self.take(4)?.try_into().ok()?) as f64;
                }
                Some(p)
            })
            .collect()
    }
}

fn decode_record(bytes: &[u8], path: &Path) -> Result<Scene> {
    let fail = |d: &str| Error::format(path, d.to_string());
    let truncated = || fail("truncated record");
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8).ok_or_else(truncated)? != RECORD_MAGIC {
        return Err(fail("bad magic"));
    }
    let mut header = [0u32; 6];
    for h in header.iter_mut() {
        *h = cur.u32().ok_or_else(truncated)?;
    }
    let [version, n, pw, cw, iw, text_len] = header;
    if version != RECORD_VERSION {
        return Err(fail("unsupported record version"));
    }
    if (pw, cw, iw) != (3, 3, 1) {
        return Err(fail("unexpected field widths"));
    }
    let text = std::str::from_utf8(cur.take(text_len as usize).ok_or_else(truncated)?)
        .map_err(|_| fail("text block is not UTF-8"))?;
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim(), v.trim());
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| fail(&format!("missing `{k}`")));
    let parse_usize = |k: &str| -> Result<usize> { field(k)?.parse().map_err(|_| fail(&format!("bad `{k}`"))) };
    let n = n as usize;
    let points = cur.points(n).ok_or_else(truncated)?;
    let colors = cur.points(n).ok_or_else(truncated)?;
    let indices = (0..n)
        .map(|_| cur.u32().map(|i| i as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(truncated)?;
    if cur.pos != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok(Scene {
        object: field("object")?.to_string(),
        seed: field("seed")?.parse().map_err(|_| fail("bad seed"))?,
        gt: field("gt")?.parse::<RigidTransform>()?,
        observation: Observation { points, colors },
        indices,
        visible: parse_usize("visible")?,
        model_points: parse_usize("model_points")?,
    })
}

/// Mean visible-point fraction over the scenes listed in a manifest.
pub fn manifest_visible_fraction(dir: &Path) -> Result<f64> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for line in text.lines().filter(|l| l.starts_with("scene ")) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (Some(v), Some(m)) = (f.get(4), f.get(5)) else {
            return Err(Error::format(&path, format!("bad scene line `{line}`")));
        };
        let v: f64 = v.parse().map_err(|_| Error::format(&path, "bad visible count"))?;
        let m: f64 = m.parse().map_err(|_| Error::format(&path, "bad model point count"))?;
        total += v / m;
        count += 1;
    }
    if count == 0 {
        return Err(Error::format(&path, "manifest lists no scenes"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            scenes_per_model: 5,
            model_points: 60,
            ..Default::default()
        }
    }

    #[test]
    fn generate_counts_and_split() {
        let data = Dataset::generate(&small()).unwrap();
        assert_eq!(data.objects.len(), 3);
        assert_eq!(data.scenes.len(), 15);
        assert_eq!(data.split(Split::Eval).count(), 3);
        assert_eq!(data.symmetric_ids(), vec!["box".to_string(), "cylinder".to_string()]);
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::generate(&small()).unwrap();
        data.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, data);
        let frac = manifest_visible_fraction(dir.path()).unwrap();
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
    }

    #[test]
    fn duplicate_shapes_rejected() {
        let cfg = GenConfig {
            shapes: vec![Shape::DEFAULT_BOX, Shape::DEFAULT_BOX],
            ..small()
        };
        assert!(matches!(Dataset::generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn corrupt_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::generate(&small()).unwrap().write(dir.path()).unwrap();
        let rec = dir.path().join("scenes/box_00000.scene");
        let bytes = fs::read(&rec).unwrap();
        fs::write(&rec, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }
}
