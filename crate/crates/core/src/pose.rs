//! Rigid transforms, the dense per-point pose head and best-hypothesis
//! selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{relu, relu_backward, sigmoid, Linear, Matrix, Param, ParamSet};

pub type Point3 = [f64; 3];

/// Guard added to the quaternion norm before dividing.
pub const QUAT_NORM_EPS: f64 = 1e-12;

/// Quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        let n = norm3(axis);
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// `q / (‖q‖ + 1e-12)`.
    pub fn normalized(self) -> Self {
        let s = self.norm() + QUAT_NORM_EPS;
        Self::new(self.w / s, self.x / s, self.y / s, self.z / s)
    }

    /// Exact unit normalization; already-unit inputs (to round-off) are
    /// returned unchanged so that normalization is idempotent.
    pub fn unit(self) -> Self {
        let n2 = self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z;
        if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            return self;
        }
        let n = n2.sqrt();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Flips the sign so that `w ≥ 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ o`.
    pub fn mul(self, o: Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Self { w, x, y, z } = self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Chain rule through [`Quaternion::to_matrix`]: maps `dL/dR` to `dL/dq`.
    pub fn matrix_backward(self, g: &[[f64; 3]; 3]) -> [f64; 4] {
        let Self { w, x, y, z } = self;
        let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
        let gx = 2.0
            * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
                + z * g[2][0]
                + w * g[2][1]
                - 2.0 * x * g[2][2]);
        let gy = 2.0
            * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
                - w * g[2][0]
                + z * g[2][1]
                - 2.0 * y * g[2][2]);
        let gz = 2.0
            * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
                + y * g[1][2]
                + x * g[2][0]
                + y * g[2][1]);
        [gw, gx, gy, gz]
    }
}

pub(crate) fn norm3(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add3(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn mat_vec(r: &[[f64; 3]; 3], v: Point3) -> Point3 {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

pub(crate) fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Rotation (unit quaternion, `w ≥ 0`) followed by a translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Quaternion,
    translation: Point3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Quaternion::IDENTITY,
        translation: [0.0; 3],
    };

    /// Normalizes and sign-canonicalizes `rotation`. A zero quaternion maps
    /// to the identity rotation.
    pub fn new(rotation: Quaternion, translation: Point3) -> Self {
        let rotation = if rotation.norm() > 0.0 {
            rotation.unit().canonical()
        } else {
            Quaternion::IDENTITY
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Point3) -> Self {
        Self::new(Quaternion::IDENTITY, t)
    }

    pub fn from_rotation(q: Quaternion) -> Self {
        Self::new(q, [0.0; 3])
    }

    pub fn rotation(&self) -> Quaternion {
        self.rotation
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        self.rotation.to_matrix()
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        add3(mat_vec(&self.rotation_matrix(), p), self.translation)
    }

    pub fn apply(&self, points: &[Point3]) -> Vec<Point3> {
        let r = self.rotation_matrix();
        points
            .iter()
            .map(|&p| add3(mat_vec(&r, p), self.translation))
            .collect()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let q = self.rotation.mul(other.rotation);
        let t = add3(mat_vec(&self.rotation_matrix(), other.translation), self.translation);
        RigidTransform::new(q, t)
    }

    pub fn inverse(&self) -> RigidTransform {
        let q = self.rotation.conjugate();
        let r = q.to_matrix();
        let t = mat_vec(&r, self.translation);
        RigidTransform::new(q, [-t[0], -t[1], -t[2]])
    }

    /// `(w, x, y, z, tx, ty, tz)`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation;
        let t = self.translation;
        [q.w, q.x, q.y, q.z, t[0], t[1], t[2]]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("pose contains non-finite values".into()));
        }
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        if q.norm() < 1e-9 {
            return Err(Error::Input("pose quaternion has zero norm".into()));
        }
        Ok(Self::new(q, [a[4], a[5], a[6]]))
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.rotation.w.clamp(-1.0, 1.0).acos()
    }
}

/// One pose per line: `w x y z tx ty tz`, shortest round-trip decimal form.
impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.to_array();
        write!(f, "{} {} {} {} {} {} {}", a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }
}

impl FromStr for RigidTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let values: Vec<f64> = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Input(format!("bad number `{t}` in pose record")))
            })
            .collect::<Result<_>>()?;
        let arr: [f64; 7] = values
            .try_into()
            .map_err(|v: Vec<f64>| Error::Input(format!("pose record needs 7 numbers, got {}", v.len())))?;
        RigidTransform::from_array(arr)
    }
}

/// Parses a block of pose records, skipping blank lines and `#` comments.
pub fn parse_poses(text: &str) -> Result<Vec<RigidTransform>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

pub fn format_poses(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for p in poses {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    s
}

/// One pose hypothesis with confidence per observed point.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction {
    /// Normalized (not sign-canonicalized) quaternions.
    pub rotations: Vec<Quaternion>,
    pub translations: Vec<Point3>,
    /// Sigmoid outputs in (0, 1].
    pub confidences: Vec<f64>,
}

impl DensePrediction {
    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn pose(&self, i: usize) -> RigidTransform {
        RigidTransform::new(self.rotations[i], self.translations[i])
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        Self {
            rotations: perm.iter().map(|&p| self.rotations[p]).collect(),
            translations: perm.iter().map(|&p| self.translations[p]).collect(),
            confidences: perm.iter().map(|&p| self.confidences[p]).collect(),
        }
    }
}

/// Gradient of a scalar loss with respect to a [`DensePrediction`].
#[derive(Clone, Debug)]
pub struct DenseGrad {
    pub rotations: Vec<[f64; 4]>,
    pub translations: Vec<Point3>,
    pub confidences: Vec<f64>,
}

impl DenseGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            rotations: vec![[0.0; 4]; n],
            translations: vec![[0.0; 3]; n],
            confidences: vec![0.0; n],
        }
    }
}

/// Where head translations live: `t = origin + scale · raw`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslationFrame {
    pub origin: Point3,
    pub scale: f64,
}

impl Default for TranslationFrame {
    fn default() -> Self {
        Self {
            origin: [0.0; 3],
            scale: 1.0,
        }
    }
}

/// Width of the raw head output: 4 quaternion + 3 translation + 1 confidence logit.
pub const HEAD_OUTPUTS: usize = 8;

/// Pointwise MLP `fused → hidden → hidden → 8` with rectifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseHead {
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    act2: Matrix,
    raw: Matrix,
}

impl HeadCache {
    pub fn raw(&self) -> &Matrix {
        &self.raw
    }
}

impl PoseHead {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden1: Linear::new(&format!("{prefix}.hidden1"), d_in, hidden, rng),
            hidden2: Linear::new(&format!("{prefix}.hidden2"), hidden, hidden, rng),
            output: Linear::new(&format!("{prefix}.output"), hidden, HEAD_OUTPUTS, rng),
        }
    }

    pub fn zeros(prefix: &str, d_in: usize, hidden: usize) -> Self {
        Self {
            hidden1: Linear::zeros(&format!("{prefix}.hidden1"), d_in, hidden),
            hidden2: Linear::zeros(&format!("{prefix}.hidden2"), hidden, hidden),
            output: Linear::zeros(&format!("{prefix}.output"), hidden, HEAD_OUTPUTS),
        }
    }

    pub fn forward(&self, fused: &Matrix) -> Result<HeadCache> {
        let pre1 = self.hidden1.forward(fused)?;
        let act1 = relu(&pre1);
        let pre2 = self.hidden2.forward(&act1)?;
        let act2 = relu(&pre2);
        let raw = self.output.forward(&act2)?;
        Ok(HeadCache {
            input: fused.clone(),
            pre1,
            act1,
            pre2,
            act2,
            raw,
        })
    }

    pub fn backward(&mut self, cache: &HeadCache, g_raw: &Matrix) -> Result<Matrix> {
        let g = self.output.backward(&cache.act2, g_raw)?;
        let g = relu_backward(&cache.pre2, &g);
        let g = self.hidden2.backward(&cache.act1, &g)?;
        let g = relu_backward(&cache.pre1, &g);
        self.hidden1.backward(&cache.input, &g)
    }
}

impl ParamSet for PoseHead {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.hidden1.visit(f);
        self.hidden2.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hidden1.visit_mut(f);
        self.hidden2.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Maps raw head rows to poses and confidences.
///
/// The raw quaternion gets `+1` on its `w` component before the guarded
/// normalization, so an all-zero row decodes to the identity rotation.
pub fn decode_dense(raw: &Matrix, frame: TranslationFrame) -> Result<DensePrediction> {
    if raw.cols() != HEAD_OUTPUTS {
        return Err(Error::shape("decode_dense", format!("{} head outputs", raw.cols())));
    }
    if !raw.is_finite() {
        return Err(Error::Numeric("pose head produced non-finite outputs".into()));
    }
    let n = raw.rows();
    let mut pred = DensePrediction {
        rotations: Vec::with_capacity(n),
        translations: Vec::with_capacity(n),
        confidences: Vec::with_capacity(n),
    };
    for i in 0..n {
        let r = raw.row(i);
        pred.rotations
            .push(Quaternion::new(r[0] + 1.0, r[1], r[2], r[3]).normalized());
        pred.translations.push([
            frame.origin[0] + frame.scale * r[4],
            frame.origin[1] + frame.scale * r[5],
            frame.origin[2] + frame.scale * r[6],
        ]);
        pred.confidences.push(sigmoid(r[7]));
    }
    Ok(pred)
}

/// Chain rule through [`decode_dense`].
pub fn decode_dense_backward(raw: &Matrix, pred: &DensePrediction, g: &DenseGrad, frame: TranslationFrame) -> Matrix {
    let n = raw.rows();
    let mut out = Matrix::zeros(n, HEAD_OUTPUTS);
    for i in 0..n {
        let r = raw.row(i);
        let q = [r[0] + 1.0, r[1], r[2], r[3]];
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let s = norm + QUAT_NORM_EPS;
        let gq = g.rotations[i];
        let row = out.row_mut(i);
        // d(q/s)/dq = I/s − q qᵀ / (‖q‖ s²)
        let inner = if norm > 0.0 {
            (q[0] * gq[0] + q[1] * gq[1] + q[2] * gq[2] + q[3] * gq[3]) / (norm * s * s)
        } else {
            0.0
        };
        for k in 0..4 {
            row[k] = gq[k] / s - q[k] * inner;
        }
        for k in 0..3 {
            row[4 + k] = frame.scale * g.translations[i][k];
        }
        let c = pred.confidences[i];
        row[7] = g.confidences[i] * c * (1.0 - c);
    }
    out
}

/// Runs the head on fused features and decodes the per-point hypotheses.
pub fn predict_dense(fused: &Matrix, head: &PoseHead, frame: TranslationFrame) -> Result<DensePrediction> {
    if !fused.is_finite() {
        return Err(Error::Numeric("fused features are not finite".into()));
    }
    decode_dense(head.forward(fused)?.raw(), frame)
}

/// Pose of the most confident hypothesis; ties go to the lowest index.
pub fn select_best(pred: &DensePrediction) -> Result<RigidTransform> {
    Ok(pred.pose(best_index(pred)?))
}

pub fn best_index(pred: &DensePrediction) -> Result<usize> {
    if pred.is_empty() {
        return Err(Error::Input("empty dense prediction".into()));
    }
    let mut best = 0;
    for (i, &c) in pred.confidences.iter().enumerate().skip(1) {
        if c > pred.confidences[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ];
        RigidTransform::new(q, t)
    }

    fn close(a: Point3, b: Point3, tol: f64) -> bool {
        (0..3).all(|k| (a[k] - b[k]).abs() <= tol)
    }

    fn same_pose(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        assert!(same_pose(&RigidTransform::IDENTITY.compose(&t), &t, 1e-15));
        assert!(same_pose(&t.compose(&RigidTransform::IDENTITY), &t, 1e-15));
    }

    #[test]
    fn inverse_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_transform(&mut rng);
        assert!(same_pose(&t.compose(&t.inverse()), &RigidTransform::IDENTITY, 1e-9));
        assert!(same_pose(&t.inverse().compose(&t), &RigidTransform::IDENTITY, 1e-9));
    }

    #[test]
    fn compose_matches_double_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let pts: Vec<Point3> = (0..20)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.2..0.2)))
            .collect();
        let once = a.compose(&b).apply(&pts);
        let twice = a.apply(&b.apply(&pts));
        for (x, y) in once.iter().zip(&twice) {
            assert!(close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn apply_textbook_cases() {
        let p = [[0.1, -0.2, 0.3], [1.0, 2.0, 3.0]];
        assert_eq!(RigidTransform::IDENTITY.apply(&p), p.to_vec());
        let shifted = RigidTransform::from_translation([0.0, 0.0, 0.1]).apply(&p);
        for (o, i) in shifted.iter().zip(&p) {
            assert_eq!(o[2], i[2] + 0.1);
            assert_eq!(o[0], i[0]);
        }
        let rz = RigidTransform::from_rotation(Quaternion::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0));
        assert!(close(rz.apply_point([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn canonical_sign_and_unit_norm() {
        let t = RigidTransform::new(Quaternion::new(-2.0, 0.5, 0.1, 0.0), [0.0; 3]);
        assert!(t.rotation().w >= 0.0);
        assert!((t.rotation().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pose_text_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses: Vec<_> = (0..5).map(|_| random_transform(&mut rng)).collect();
        let parsed = parse_poses(&format_poses(&poses)).unwrap();
        assert_eq!(parsed, poses);
        assert!("1 0 0".parse::<RigidTransform>().is_err());
        assert!("0 0 0 0 1 2 3".parse::<RigidTransform>().is_err());
    }

    #[test]
    fn matrix_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let q0 = [0.3, -0.5, 0.7, 0.2];
        let f = |q: [f64; 4]| {
            let m = Quaternion::from_array(q).to_matrix();
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m[i][j] * g[i][j]).sum::<f64>()
        };
        let analytic = Quaternion::from_array(q0).matrix_backward(&g);
        for k in 0..4 {
            let mut up = q0;
            up[k] += 1e-6;
            let mut down = q0;
            down[k] -= 1e-6;
            let numeric = (f(up) - f(down)) / 2e-6;
            assert!((numeric - analytic[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_head_gives_identity_half_confidence() {
        let head = PoseHead::zeros("head", 6, 64);
        let fused = Matrix::uniform(4, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let pred = predict_dense(&fused, &head, TranslationFrame::default()).unwrap();
        for i in 0..4 {
            assert_eq!(pred.rotations[i], Quaternion::new(1.0 / (1.0 + QUAT_NORM_EPS), 0.0, 0.0, 0.0));
            assert_eq!(pred.translations[i], [0.0; 3]);
            assert_eq!(pred.confidences[i], 0.5);
        }
    }

    #[test]
    fn zero_norm_raw_quaternion_does_not_crash() {
        let mut raw = Matrix::zeros(1, HEAD_OUTPUTS);
        raw[(0, 0)] = -1.0;
        let pred = decode_dense(&raw, TranslationFrame::default()).unwrap();
        assert_eq!(pred.rotations[0].to_array(), [0.0; 4]);
        let g = DenseGrad {
            rotations: vec![[1.0, 1.0, 1.0, 1.0]],
            translations: vec![[0.0; 3]],
            confidences: vec![0.0],
        };
        assert!(decode_dense_backward(&raw, &pred, &g, TranslationFrame::default()).is_finite());
    }

    #[test]
    fn identical_rows_identical_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = PoseHead::new("head", 6, 16, &mut rng);
        let mut fused = Matrix::uniform(3, 6, 1.0, &mut rng);
        let r0 = fused.row(0).to_vec();
        fused.row_mut(2).copy_from_slice(&r0);
        let pred = predict_dense(&fused, &head, TranslationFrame::default()).unwrap();
        assert_eq!(pred.pose(0), pred.pose(2));
        assert_eq!(pred.confidences[0], pred.confidences[2]);
    }

    #[test]
    fn head_and_decode_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut head = PoseHead::new("head", 6, 16, &mut rng);
        let fused = Matrix::uniform(5, 6, 1.0, &mut rng);
        let frame = TranslationFrame {
            origin: [0.1, -0.2, 0.3],
            scale: 0.1,
        };
        let wq: Vec<[f64; 4]> = (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let wt: Vec<Point3> = (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let wc: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(&mut head, 1e-5, |h, with_grad| {
            let cache = h.forward(&fused)?;
            let pred = decode_dense(cache.raw(), frame)?;
            let mut loss = 0.0;
            for i in 0..5 {
                let q = pred.rotations[i].to_array();
                loss += (0..4).map(|k| q[k] * wq[i][k]).sum::<f64>();
                loss += (0..3).map(|k| pred.translations[i][k] * wt[i][k]).sum::<f64>();
                loss += pred.confidences[i] * wc[i];
            }
            if with_grad {
                let g = DenseGrad {
                    rotations: wq.clone(),
                    translations: wt.clone(),
                    confidences: wc.clone(),
                };
                let g_raw = decode_dense_backward(cache.raw(), &pred, &g, frame);
                h.backward(&cache, &g_raw)?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn select_best_tie_breaks_low() {
        let pred = DensePrediction {
            rotations: vec![Quaternion::IDENTITY; 3],
            translations: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            confidences: vec![0.2, 0.9, 0.9],
        };
        assert_eq!(select_best(&pred).unwrap().translation(), [1.0, 0.0, 0.0]);
        let single = DensePrediction {
            rotations: vec![Quaternion::IDENTITY],
            translations: vec![[0.5, 0.0, 0.0]],
            confidences: vec![0.1],
        };
        assert_eq!(select_best(&single).unwrap().translation(), [0.5, 0.0, 0.0]);
        let empty = DensePrediction {
            rotations: vec![],
            translations: vec![],
            confidences: vec![],
        };
        assert!(matches!(select_best(&empty), Err(Error::Input(_))));
    }

    #[test]
    fn select_best_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 50;
        let pred = DensePrediction {
            rotations: vec![Quaternion::IDENTITY; n],
            translations: (0..n).map(|i| [i as f64, 0.0, 0.0]).collect(),
            confidences: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let mut max = f64::MIN;
        for &c in &pred.confidences {
            if c > max {
                max = c;
            }
        }
        let best = select_best(&pred).unwrap();
        assert_eq!(pred.confidences[best.translation()[0] as usize], max);
    }
}
