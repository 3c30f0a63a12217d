//! Synthetic objects and scenes with exact ground truth, plus the pointwise
//! color/geometry encoders that turn an observation into a [`FeaturePair`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::correlation::FeaturePair;
use crate::error::{Error, Result};
use crate::math::{relu, relu_backward, Linear, Matrix, Param, ParamSet};
use crate::metrics::{ObjectModel, Symmetry};
use crate::pose::{centroid, Point3, Quaternion, RigidTransform};

/// Smallest observation the pipeline accepts.
pub const MIN_POINTS: usize = 8;

/// Stateless 64-bit mixer used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Desk-scale object shapes; all dimensions in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Box { w: f64, h: f64, d: f64 },
    Cylinder { r: f64, h: f64 },
    /// L-shaped prism: arms of length `a` (x) and `b` (y), arm thickness `t`,
    /// extruded `depth` along z.
    LShape { a: f64, b: f64, t: f64, depth: f64 },
}

impl Shape {
    pub const DEFAULT_BOX: Shape = Shape::Box { w: 0.1, h: 0.07, d: 0.05 };
    pub const DEFAULT_CYLINDER: Shape = Shape::Cylinder { r: 0.035, h: 0.1 };
    pub const DEFAULT_LSHAPE: Shape = Shape::LShape { a: 0.1, b: 0.07, t: 0.03, depth: 0.04 };

    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
            Shape::LShape { .. } => "lshape",
        }
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Box { w, h, d } => vec![w, h, d],
            Shape::Cylinder { r, h } => vec![r, h],
            Shape::LShape { a, b, t, depth } => vec![a, b, t, depth],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("shape {self} needs positive dimensions")));
        }
        if let Shape::LShape { a, b, t, .. } = *self {
            if t >= a || t >= b {
                return Err(Error::Config(format!("shape {self}: thickness must be below both arm lengths")));
            }
            if a == b {
                return Err(Error::Config(format!(
                    "shape {self}: equal arms make the L rotationally symmetric"
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of the surface in the model frame.
    pub fn bounds(&self) -> (Point3, Point3) {
        match *self {
            Shape::Box { w, h, d } => ([-w / 2.0, -h / 2.0, -d / 2.0], [w / 2.0, h / 2.0, d / 2.0]),
            Shape::Cylinder { r, h } => ([-r, -r, -h / 2.0], [r, r, h / 2.0]),
            Shape::LShape { a, b, t, depth } => {
                let (cx, cy) = lshape_centroid(a, b, t);
                ([-cx, -cy, -depth / 2.0], [a - cx, b - cy, depth / 2.0])
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            Shape::Box { w, h, d } => 2.0 * (w * h + w * d + h * d),
            Shape::Cylinder { r, h } => 2.0 * PI * r * h + 2.0 * PI * r * r,
            Shape::LShape { a, b, t, depth } => {
                let cap = a * t + (b - t) * t;
                2.0 * cap + 2.0 * (a + b) * depth
            }
        }
    }

    /// Pose-invariant texture: each channel is the normalized model-frame
    /// coordinate along one axis, so the color travels with the surface point.
    pub fn texture(&self, p: Point3) -> Point3 {
        let (lo, hi) = self.bounds();
        std::array::from_fn(|k| ((p[k] - lo[k]) / (hi[k] - lo[k])).clamp(0.0, 1.0))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims().iter().map(|v| v.to_string()).collect();
        write!(f, "{}({})", self.kind(), dims.join(","))
    }
}

impl FromStr for Shape {
    type Err = Error;

    /// `box`, `cylinder`, `lshape` (defaults) or with explicit dimensions,
    /// e.g. `box(0.1,0.1,0.1)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, args) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("unterminated shape `{s}`")))?;
                let vals = inner
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad dimension `{v}` in `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (&s[..i], Some(vals))
            }
            None => (s.as_str(), None),
        };
        let shape = match (name, args.as_deref()) {
            ("box", None) => Shape::DEFAULT_BOX,
            ("box", Some(&[w, h, d])) => Shape::Box { w, h, d },
            ("cylinder", None) => Shape::DEFAULT_CYLINDER,
            ("cylinder", Some(&[r, h])) => Shape::Cylinder { r, h },
            ("lshape" | "l_shape" | "asymmetric-l", None) => Shape::DEFAULT_LSHAPE,
            ("lshape" | "l_shape" | "asymmetric-l", Some(&[a, b, t, depth])) => Shape::LShape { a, b, t, depth },
            _ => return Err(Error::Config(format!("unknown shape `{s}`"))),
        };
        shape.validate()?;
        Ok(shape)
    }
}

fn lshape_centroid(a: f64, b: f64, t: f64) -> (f64, f64) {
    let a1 = a * t;
    let a2 = (b - t) * t;
    let cx = (a1 * a / 2.0 + a2 * t / 2.0) / (a1 + a2);
    let cy = (a1 * t / 2.0 + a2 * (t + b) / 2.0) / (a1 + a2);
    (cx, cy)
}

/// Proper rotations of the cube: signed permutation matrices with det +1.
fn cube_rotations() -> Vec<[[f64; 3]; 3]> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::new();
    for p in perms {
        for signs in 0..8 {
            let mut m = [[0.0; 3]; 3];
            for (row, &col) in p.iter().enumerate() {
                m[row][col] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            if det > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn quaternion_from_matrix(m: &[[f64; 3]; 3]) -> Quaternion {
    let tr = m[0][0] + m[1][1] + m[2][2];
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s)
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        Quaternion::new((m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s)
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        Quaternion::new((m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s)
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        Quaternion::new((m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s)
    }
}

/// Rotations about the origin that map a `w × h × d` box onto itself.
pub fn box_symmetry_group(w: f64, h: f64, d: f64) -> Vec<RigidTransform> {
    let ext = [w, h, d];
    cube_rotations()
        .into_iter()
        .filter(|m| {
            (0..3).all(|row| {
                let col = (0..3).find(|&c| m[row][c] != 0.0).unwrap();
                (ext[row] - ext[col]).abs() <= 1e-12 * ext[row].max(ext[col])
            })
        })
        .map(|m| RigidTransform::from_rotation(quaternion_from_matrix(&m)))
        .collect()
}

fn sample_box(w: f64, h: f64, d: f64, m: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let half = [w / 2.0, h / 2.0, d / 2.0];
    // Face pairs normal to x, y, z with areas h·d, w·d, w·h.
    let areas = [h * d, w * d, w * h];
    let total: f64 = areas.iter().sum();
    (0..m)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && u >= areas[axis] {
                u -= areas[axis];
                axis += 1;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = if k == axis {
                    sign * half[k]
                } else {
                    rng.random_range(-half[k]..=half[k])
                };
            }
            p
        })
        .collect()
}

struct Ring {
    z: f64,
    radius: f64,
    count: usize,
}

/// Rings of evenly spaced points on the side and caps; returns the points and
/// the worst-case distance from an axis-rotated sample to its nearest sample.
fn sample_cylinder(r: f64, h: f64, m: usize, rng: &mut ChaCha8Rng) -> (Vec<Point3>, f64) {
    let area = 2.0 * PI * r * h + 2.0 * PI * r * r;
    let s = (area / m as f64).sqrt();
    let n_side = ((h / s).round() as usize).max(1);
    let k_side = ((2.0 * PI * r / s).round() as usize).max(3);
    let n_cap = (r / s).round() as usize;
    let mut rings = Vec::new();
    for j in 0..n_side {
        let u = rng.random_range(0.25..0.75);
        rings.push(Ring {
            z: -h / 2.0 + (j as f64 + u) * h / n_side as f64,
            radius: r,
            count: k_side,
        });
    }
    for j in 0..n_cap {
        let rho = (j as f64 + 0.5) * r / n_cap as f64;
        let k = ((2.0 * PI * rho / s).round() as usize).max(3);
        for z in [-h / 2.0, h / 2.0] {
            rings.push(Ring { z, radius: rho, count: k });
        }
    }
    let mut total: usize = rings.iter().map(|r| r.count).sum();
    let mut turn = 0;
    while total < m {
        let idx = turn % n_side;
        rings[idx].count += 1;
        total += 1;
        turn += 1;
    }
    while total > m {
        match rings.iter_mut().filter(|r| r.count > 3).max_by_key(|r| r.count) {
            Some(ring) => {
                ring.count -= 1;
                total -= 1;
            }
            None => {
                let ring = rings.pop().expect("rings remain while total > m >= 3");
                total -= ring.count;
                if total < m {
                    // Fewer points than one ring: put the remainder on a side ring.
                    rings[0].count += m - total;
                    total = m;
                }
            }
        }
    }
    let mut points = Vec::with_capacity(m);
    let mut bound = 0.0f64;
    for ring in &rings {
        let step = 2.0 * PI / ring.count as f64;
        let phase = rng.random_range(0.0..step);
        for i in 0..ring.count {
            let a = phase + i as f64 * step;
            points.push([ring.radius * a.cos(), ring.radius * a.sin(), ring.z]);
        }
        bound = bound.max(2.0 * ring.radius * (step / 4.0).sin());
    }
    (points, bound)
}

fn sample_lshape(a: f64, b: f64, t: f64, depth: f64, m: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let (cx, cy) = lshape_centroid(a, b, t);
    let rects = [(0.0, a, 0.0, t), (0.0, t, t, b)];
    let rect_areas = [a * t, t * (b - t)];
    let cap_area = rect_areas[0] + rect_areas[1];
    let outline = [
        ([0.0, 0.0], [a, 0.0]),
        ([a, 0.0], [a, t]),
        ([a, t], [t, t]),
        ([t, t], [t, b]),
        ([t, b], [0.0, b]),
        ([0.0, b], [0.0, 0.0]),
    ];
    let lengths: Vec<f64> = outline
        .iter()
        .map(|(p, q)| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt())
        .collect();
    let perimeter: f64 = lengths.iter().sum();
    let side_area = perimeter * depth;
    let total = 2.0 * cap_area + side_area;
    (0..m)
        .map(|_| {
            let u = rng.random_range(0.0..total);
            let (x, y, z) = if u < 2.0 * cap_area {
                let z = if u < cap_area { -depth / 2.0 } else { depth / 2.0 };
                let pick = if rng.random_range(0.0..cap_area) < rect_areas[0] { 0 } else { 1 };
                let (x0, x1, y0, y1) = rects[pick];
                (rng.random_range(x0..=x1), rng.random_range(y0..=y1), z)
            } else {
                let mut v = rng.random_range(0.0..perimeter);
                let mut e = 0;
                while e < outline.len() - 1 && v >= lengths[e] {
                    v -= lengths[e];
                    e += 1;
                }
                let (p, q) = outline[e];
                let f = v / lengths[e];
                (
                    p[0] + f * (q[0] - p[0]),
                    p[1] + f * (q[1] - p[1]),
                    rng.random_range(-depth / 2.0..=depth / 2.0),
                )
            };
            [x - cx, y - cy, z]
        })
        .collect()
}

/// Seeded surface sampling of `shape` with `m` points.
pub fn make_model(shape: Shape, m: usize, seed: u64) -> Result<ObjectModel> {
    shape.validate()?;
    if m < 3 {
        return Err(Error::Config(format!("model needs at least 3 points, got {m}")));
    }
    let mut rng = rng_for(seed, 0x6d6f_6465_6c);
    let spacing = (shape.surface_area() / m as f64).sqrt();
    match shape {
        Shape::Box { w, h, d } => {
            let points = sample_box(w, h, d, m, &mut rng);
            ObjectModel::new(points, Symmetry::Discrete(box_symmetry_group(w, h, d)), spacing)
        }
        Shape::Cylinder { r, h } => {
            let (points, bound) = sample_cylinder(r, h, m, &mut rng);
            ObjectModel::new(
                points,
                Symmetry::Axis {
                    axis: [0.0, 0.0, 1.0],
                    center: [0.0; 3],
                },
                bound,
            )
        }
        Shape::LShape { a, b, t, depth } => {
            ObjectModel::new(sample_lshape(a, b, t, depth, m, &mut rng), Symmetry::None, spacing)
        }
    }
}

/// A generated object: its id, shape, sampled model and per-point texture.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthObject {
    pub id: String,
    pub shape: Shape,
    pub seed: u64,
    pub model: ObjectModel,
    pub colors: Vec<Point3>,
}

impl SynthObject {
    pub fn new(id: impl Into<String>, shape: Shape, m: usize, seed: u64) -> Result<Self> {
        let model = make_model(shape, m, seed)?;
        let colors = model.points().iter().map(|&p| shape.texture(p)).collect();
        Ok(Self {
            id: id.into(),
            shape,
            seed,
            model,
            colors,
        })
    }
}

/// Scene sampling options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    /// Translations are uniform in `[-range, range]³`, meters.
    pub translation_range: f64,
    /// Fraction of model points removed as one contiguous angular sector.
    pub occlusion: f64,
    /// Isotropic Gaussian noise on observed points, meters.
    pub noise_sigma: f64,
    /// Observed points kept after occlusion; 0 keeps all visible points.
    pub points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            translation_range: 0.15,
            occlusion: 0.2,
            noise_sigma: 0.0,
            points: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.6).contains(&self.occlusion) {
            return Err(Error::Config(format!("occlusion {} outside [0, 0.6]", self.occlusion)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.translation_range >= 0.0) || !self.translation_range.is_finite() {
            return Err(Error::Config("translation range must be >= 0".into()));
        }
        if self.points != 0 && self.points < MIN_POINTS {
            return Err(Error::Config(format!("at least {MIN_POINTS} observed points required")));
        }
        Ok(())
    }
}

/// Points and colors as seen by the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub points: Vec<Point3>,
    pub colors: Vec<Point3>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points mapped through `t`; colors are unchanged.
    pub fn transformed(&self, t: &RigidTransform) -> Observation {
        Observation {
            points: t.apply(&self.points),
            colors: self.colors.clone(),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Observation {
        Observation {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            colors: perm.iter().map(|&i| self.colors[i]).collect(),
        }
    }
}

/// One synthetic observation of an object with its exact pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub object: String,
    pub seed: u64,
    pub gt: RigidTransform,
    pub observation: Observation,
    /// Model point index behind each observed point.
    pub indices: Vec<usize>,
    /// Number of model points that survived occlusion.
    pub visible: usize,
    pub model_points: usize,
}

impl Scene {
    pub fn visible_fraction(&self) -> f64 {
        self.visible as f64 / self.model_points as f64
    }
}

/// Uniformly distributed rotation (subgroup algorithm).
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    let u1: f64 = rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    let u3: f64 = rng.random_range(0.0..1.0);
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    Quaternion::new(b * c3, a * s2, a * c2, b * s3)
}

/// Samples a pose, occludes a contiguous angular sector, subsamples and adds
/// noise. Deterministic in `(object, config, seed)`.
pub fn make_scene(object: &SynthObject, config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let m = object.model.len();
    if m < MIN_POINTS {
        return Err(Error::Config(format!("model has {m} points, fewer than {MIN_POINTS}")));
    }
    let mut attempt = 0u64;
    loop {
        if let Some(scene) = try_scene(object, config, seed, attempt)? {
            return Ok(scene);
        }
        attempt += 1;
        if attempt > 64 {
            return Err(Error::Config("occlusion repeatedly left too few points".into()));
        }
    }
}

fn try_scene(object: &SynthObject, config: &SceneConfig, seed: u64, attempt: u64) -> Result<Option<Scene>> {
    let mut rng = rng_for(seed, attempt);
    let m = object.model.len();
    let range = config.translation_range;
    let q = uniform_rotation(&mut rng);
    let t = if range > 0.0 {
        std::array::from_fn(|_| rng.random_range(-range..=range))
    } else {
        [0.0; 3]
    };
    let gt = RigidTransform::new(q, t);
    let posed = gt.apply(object.model.points());

    // Occlude a contiguous run of points ordered by angle about the object
    // center in the image (x-y) plane.
    let mut by_angle: Vec<(f64, usize)> = posed
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[1] - t[1]).atan2(p[0] - t[0]), i))
        .collect();
    by_angle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let removed = (config.occlusion * m as f64).round() as usize;
    let start = rng.random_range(0..m);
    let mut visible_mask = vec![true; m];
    for k in 0..removed {
        visible_mask[by_angle[(start + k) % m].1] = false;
    }
    let visible: Vec<usize> = (0..m).filter(|&i| visible_mask[i]).collect();
    if visible.len() < MIN_POINTS {
        return Ok(None);
    }

    let mut indices = if config.points != 0 && visible.len() > config.points {
        let mut chosen: Vec<usize> = sample(&mut rng, visible.len(), config.points)
            .into_iter()
            .map(|k| visible[k])
            .collect();
        chosen.sort_unstable();
        chosen
    } else {
        visible.clone()
    };
    indices.shrink_to_fit();

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let points = indices
        .iter()
        .map(|&i| {
            let p = posed[i];
            if config.noise_sigma > 0.0 {
                std::array::from_fn(|k| p[k] + noise.sample(&mut rng))
            } else {
                p
            }
        })
        .collect();
    let colors = indices.iter().map(|&i| object.colors[i]).collect();
    Ok(Some(Scene {
        object: object.id.clone(),
        seed,
        gt,
        observation: Observation { points, colors },
        indices,
        visible: visible.len(),
        model_points: m,
    }))
}

/// Pointwise `3 → hidden → out` rectifier MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoder {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
struct PointEncoderCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl PointEncoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(&format!("{prefix}.hidden"), 3, hidden, rng),
            output: Linear::new(&format!("{prefix}.output"), hidden, out, rng),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, PointEncoderCache)> {
        let pre = self.hidden.forward(x)?;
        let act = relu(&pre);
        let out = self.output.forward(&act)?;
        Ok((
            out,
            PointEncoderCache {
                input: x.clone(),
                pre,
                act,
            },
        ))
    }

    fn backward(&mut self, cache: &PointEncoderCache, g: &Matrix) -> Result<()> {
        let g = self.output.backward(&cache.act, g)?;
        let g = relu_backward(&cache.pre, &g);
        self.hidden.backward(&cache.input, &g)?;
        Ok(())
    }
}

impl ParamSet for PointEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.hidden.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Color encoder `3 → d_rgb` and geometry encoder `3 → d_dep`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub color: PointEncoder,
    pub geometry: PointEncoder,
    /// Multiplier applied to points before the geometry encoder.
    pub point_scale: f64,
    /// Subtract the observation centroid before encoding. Refiners see
    /// points already expressed in the estimated object frame and keep their
    /// absolute position instead.
    pub centered: bool,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(prefix: &str, hidden: usize, dim: usize, point_scale: f64, rng: &mut R) -> Self {
        Self {
            color: PointEncoder::new(&format!("{prefix}.color"), hidden, dim, rng),
            geometry: PointEncoder::new(&format!("{prefix}.geometry"), hidden, dim, rng),
            point_scale,
            centered: true,
        }
    }
}

impl ParamSet for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.color.visit(f);
        self.geometry.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.color.visit_mut(f);
        self.geometry.visit_mut(f);
    }
}

/// Result of [`encode`]: the features, the point the geometry was centered
/// on (the origin when centering is off), and what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: FeaturePair,
    pub centroid: Point3,
    color_cache: PointEncoderCache,
    geom_cache: PointEncoderCache,
}

fn points_matrix(points: &[Point3]) -> Result<Matrix> {
    Matrix::from_vec(points.len(), 3, points.iter().flatten().copied().collect())
}

/// Encodes colors and (by default centroid-centered) points into a
/// [`FeaturePair`].
pub fn encode(obs: &Observation, enc: &EncoderParams) -> Result<Encoded> {
    if obs.points.len() != obs.colors.len() || obs.is_empty() {
        return Err(Error::Input(format!(
            "observation has {} points and {} colors",
            obs.points.len(),
            obs.colors.len()
        )));
    }
    let c = if enc.centered { centroid(&obs.points) } else { [0.0; 3] };
    let centered: Vec<Point3> = obs
        .points
        .iter()
        .map(|p| std::array::from_fn(|k| (p[k] - c[k]) * enc.point_scale))
        .collect();
    let (color, color_cache) = enc.color.forward(&points_matrix(&obs.colors)?)?;
    let (geometry, geom_cache) = enc.geometry.forward(&points_matrix(&centered)?)?;
    Ok(Encoded {
        features: FeaturePair::new(color, geometry)?,
        centroid: c,
        color_cache,
        geom_cache,
    })
}

/// Accumulates encoder gradients given the gradient of the features.
pub fn encode_backward(encoded: &Encoded, enc: &mut EncoderParams, g: &FeaturePair) -> Result<()> {
    enc.color.backward(&encoded.color_cache, &g.color)?;
    enc.geometry.backward(&encoded.geom_cache, &g.geometry)
}
