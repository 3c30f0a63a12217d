//! ADD / ADD-S pose distances, threshold accuracy, AUC and per-object reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pose::{norm3, sub3, Point3, RigidTransform};

/// Upper end of the accuracy-vs-threshold curve, in meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.1;

/// Threshold of the "< 2 cm" accuracy column, in meters.
pub const ACCURACY_THRESHOLD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum Symmetry {
    None,
    /// Proper rotations (about the model origin) that map the shape onto itself.
    Discrete(Vec<RigidTransform>),
    /// Continuous rotational symmetry about a line.
    Axis { axis: Point3, center: Point3 },
}

/// 3D model points (meters) with symmetry metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    points: Vec<Point3>,
    symmetry: Symmetry,
    resolution: f64,
}

impl ObjectModel {
    /// `resolution` is the sampling resolution of `points`; it is also the
    /// tolerance for discrete symmetries, which must map the set onto itself
    /// with mean closest-point distance at most `resolution`.
    pub fn new(points: Vec<Point3>, symmetry: Symmetry, resolution: f64) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Input(format!("object model needs >= 3 points, got {}", points.len())));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("object model has non-finite points".into()));
        }
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::Input(format!("sampling resolution must be positive, got {resolution}")));
        }
        let model = Self {
            points,
            symmetry,
            resolution,
        };
        match &model.symmetry {
            Symmetry::None => {}
            Symmetry::Discrete(group) => {
                for g in group {
                    let moved = g.apply(&model.points);
                    let err = mean_closest_distance(&model.points, &moved);
                    if err > resolution {
                        return Err(Error::Input(format!(
                            "declared symmetry {g} moves the model by {err:.4} m (tolerance {resolution:.4} m)"
                        )));
                    }
                }
            }
            Symmetry::Axis { axis, center } => {
                let n = norm3(*axis);
                if (n - 1.0).abs() > 1e-9 || center.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input("symmetry axis must be a finite unit vector".into()));
                }
            }
        }
        Ok(model)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn symmetry(&self) -> &Symmetry {
        &self.symmetry
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self.symmetry, Symmetry::None)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Largest distance between two model points.
    pub fn diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                d = d.max(norm3(sub3(*a, *b)));
            }
        }
        d
    }
}

fn mean_closest_distance(from: &[Point3], to: &[Point3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| sq_dist(*a, *b))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

#[inline]
pub(crate) fn sq_dist(a: Point3, b: Point3) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Mean distance between corresponding model points under the two poses.
pub fn add(model: &ObjectModel, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let a = pred.apply(&model.points);
    let b = gt.apply(&model.points);
    let total: f64 = a.iter().zip(&b).map(|(x, y)| norm3(sub3(*x, *y))).sum();
    total / model.points.len() as f64
}

/// Mean distance from each ground-truth model point to the closest predicted
/// model point, by exhaustive search.
pub fn add_s(model: &ObjectModel, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let a = pred.apply(&model.points);
    let b = gt.apply(&model.points);
    mean_closest_distance(&b, &a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Add,
    AddS,
}

impl MetricKind {
    pub fn for_model(model: &ObjectModel) -> Self {
        if model.is_symmetric() {
            MetricKind::AddS
        } else {
            MetricKind::Add
        }
    }

    pub fn distance(self, model: &ObjectModel, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
        match self {
            MetricKind::Add => add(model, pred, gt),
            MetricKind::AddS => add_s(model, pred, gt),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Add => "ADD",
            MetricKind::AddS => "ADD-S",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ADD" => Ok(MetricKind::Add),
            "ADD-S" | "ADDS" | "ADD_S" => Ok(MetricKind::AddS),
            _ => Err(Error::Input(format!("unknown metric kind `{s}`"))),
        }
    }
}

fn check_distances(distances: &[f64], threshold: f64, what: &str) -> Result<()> {
    if distances.is_empty() {
        return Err(Error::Input(format!("{what}: empty distance list")));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::Input(format!("{what}: threshold must be positive, got {threshold}")));
    }
    if distances.iter().any(|d| !(*d >= 0.0) || d.is_infinite()) {
        return Err(Error::Input(format!("{what}: distances must be finite and non-negative")));
    }
    Ok(())
}

/// Fraction of distances strictly below `threshold`.
pub fn accuracy_below(distances: &[f64], threshold: f64) -> Result<f64> {
    check_distances(distances, threshold, "accuracy_below")?;
    let hits = distances.iter().filter(|&&d| d < threshold).count();
    Ok(hits as f64 / distances.len() as f64)
}

/// Area under the accuracy-vs-threshold curve on `[0, max_threshold]`,
/// normalized to `[0, 100]`.
///
/// The curve is the step function `τ ↦ #{d < τ}/n`, so each distance
/// contributes `max_threshold − min(d, max_threshold)`; terms are summed in
/// sorted order so the value does not depend on input order.
pub fn auc(distances: &[f64], max_threshold: f64) -> Result<f64> {
    check_distances(distances, max_threshold, "auc")?;
    let mut clipped: Vec<f64> = distances.iter().map(|d| d.min(max_threshold)).collect();
    clipped.sort_by(f64::total_cmp);
    let area: f64 = clipped.iter().map(|d| 1.0 - d / max_threshold).sum();
    Ok(100.0 * area / clipped.len() as f64)
}

/// One line of a distance dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceRecord {
    pub object: String,
    pub kind: MetricKind,
    pub distance: f64,
}

/// A scored pose estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub object: String,
    pub pred: RigidTransform,
    pub gt: RigidTransform,
    pub kind: MetricKind,
    pub distance: f64,
}

impl EvalRecord {
    pub fn score(object: &str, model: &ObjectModel, pred: RigidTransform, gt: RigidTransform, kind: MetricKind) -> Self {
        Self {
            object: object.to_string(),
            pred,
            gt,
            kind,
            distance: kind.distance(model, &pred, &gt),
        }
    }

    pub fn distance_record(&self) -> DistanceRecord {
        DistanceRecord {
            object: self.object.clone(),
            kind: self.kind,
            distance: self.distance,
        }
    }
}

pub const DUMP_HEADER: &str = "# object kind distance_m";

/// Text dump: a header comment then `object kind distance` per line.
pub fn format_distance_dump(records: &[DistanceRecord]) -> String {
    let mut s = String::from(DUMP_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{} {} {}", r.object, r.kind, r.distance);
    }
    s
}

pub fn parse_distance_dump(text: &str) -> Result<Vec<DistanceRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Input(format!("dump line {}: expected 3 fields", lineno + 1)));
        }
        let distance: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Input(format!("dump line {}: bad distance", lineno + 1)))?;
        out.push(DistanceRecord {
            object: fields[0].to_string(),
            kind: fields[1].parse()?,
            distance,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub object: String,
    pub kind: MetricKind,
    pub count: usize,
    /// AUC in `[0, 100]`.
    pub auc: f64,
    /// Percentage of estimates below the accuracy threshold.
    pub below: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub mean_auc: f64,
    pub mean_below: f64,
    pub threshold: f64,
    pub max_threshold: f64,
}

/// Scores each listed object with ADD-S if it is in `symmetric`, ADD
/// otherwise. Rows are ordered by object id; the mean row is the unweighted
/// mean over objects.
pub fn report(
    records: &[DistanceRecord],
    objects: &[String],
    symmetric: &BTreeSet<String>,
    threshold: f64,
    max_threshold: f64,
) -> Result<Report> {
    if objects.is_empty() {
        return Err(Error::Input("report needs at least one object".into()));
    }
    let listed: BTreeSet<&str> = objects.iter().map(String::as_str).collect();
    let mut by_object: BTreeMap<&str, Vec<f64>> = listed.iter().map(|o| (*o, Vec::new())).collect();
    for r in records {
        let Some(bucket) = by_object.get_mut(r.object.as_str()) else {
            return Err(Error::Input(format!("unknown object id `{}`", r.object)));
        };
        let wanted = if symmetric.contains(&r.object) {
            MetricKind::AddS
        } else {
            MetricKind::Add
        };
        if r.kind == wanted {
            bucket.push(r.distance);
        }
    }
    let mut rows = Vec::with_capacity(by_object.len());
    for (object, distances) in by_object {
        let kind = if symmetric.contains(object) {
            MetricKind::AddS
        } else {
            MetricKind::Add
        };
        if distances.is_empty() {
            return Err(Error::Input(format!("no {kind} records for object `{object}`")));
        }
        rows.push(ReportRow {
            object: object.to_string(),
            kind,
            count: distances.len(),
            auc: auc(&distances, max_threshold)?,
            below: 100.0 * accuracy_below(&distances, threshold)?,
        });
    }
    let k = rows.len() as f64;
    let mean_auc = rows.iter().map(|r| r.auc).sum::<f64>() / k;
    let mean_below = rows.iter().map(|r| r.below).sum::<f64>() / k;
    Ok(Report {
        rows,
        mean_auc,
        mean_below,
        threshold,
        max_threshold,
    })
}

impl Report {
    pub fn row(&self, object: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.object == object)
    }

    fn below_label(&self) -> String {
        format!("<{}cm", self.threshold * 100.0)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.object.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:<6}  {:>6}  {:>8}  {:>8}",
            "object",
            "metric",
            "count",
            "AUC",
            self.below_label()
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:<6}  {:>6}  {:>8.2}  {:>8.2}",
                r.object,
                r.kind.to_string(),
                r.count,
                r.auc,
                r.below
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:<6}  {:>6}  {:>8.2}  {:>8.2}",
            "MEAN", "", "", self.mean_auc, self.mean_below
        );
        s
    }

    /// Comma-separated values with full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("object,metric,count,auc,below_pct\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.object, r.kind, r.count, r.auc, r.below);
        }
        let _ = writeln!(s, "MEAN,,,{},{}", self.mean_auc, self.mean_below);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_corners() -> ObjectModel {
        let mut pts = Vec::new();
        for x in [-0.05, 0.05] {
            for y in [-0.05, 0.05] {
                for z in [-0.05, 0.05] {
                    pts.push([x, y, z]);
                }
            }
        }
        ObjectModel::new(pts, Symmetry::None, 0.01).unwrap()
    }

    #[test]
    fn model_validation() {
        assert!(ObjectModel::new(vec![[0.0; 3]; 2], Symmetry::None, 0.01).is_err());
        assert!(ObjectModel::new(vec![[f64::NAN, 0.0, 0.0]; 3], Symmetry::None, 0.01).is_err());
        let pts = vec![[0.1, 0.0, 0.0], [0.0, 0.05, 0.0], [0.0, 0.0, 0.02]];
        let bogus = Symmetry::Discrete(vec![RigidTransform::from_rotation(Quaternion::from_axis_angle(
            [0.0, 0.0, 1.0],
            1.0,
        ))]);
        assert!(ObjectModel::new(pts, bogus, 0.001).is_err());
    }

    #[test]
    fn exact_pose_scores_zero() {
        let m = cube_corners();
        let t = RigidTransform::new(Quaternion::new(0.3, 0.1, -0.4, 0.2), [0.1, 0.2, 0.3]);
        assert_eq!(add(&m, &t, &t), 0.0);
        assert_eq!(add_s(&m, &t, &t), 0.0);
    }

    #[test]
    fn uniform_offset_is_its_length() {
        let m = cube_corners();
        let gt = RigidTransform::new(Quaternion::new(0.9, 0.1, 0.2, 0.3), [0.0, 0.1, 0.5]);
        let pred = gt.compose(&RigidTransform::from_translation([0.03, 0.0, 0.0]));
        assert!((add(&m, &pred, &gt) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn add_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.1..0.1)))
            .collect();
        let m = ObjectModel::new(pts.clone(), Symmetry::None, 0.01).unwrap();
        let a = RigidTransform::new(Quaternion::new(0.2, 0.7, -0.1, 0.4), [0.05, 0.0, 0.2]);
        let b = RigidTransform::new(Quaternion::new(0.8, 0.1, 0.3, -0.2), [0.0, -0.1, 0.25]);
        let (ra, rb) = (a.rotation_matrix(), b.rotation_matrix());
        let (ta, tb) = (a.translation(), b.translation());
        let mut total = 0.0;
        for p in &pts {
            let mut sq = 0.0;
            for i in 0..3 {
                let pa = ra[i][0] * p[0] + ra[i][1] * p[1] + ra[i][2] * p[2] + ta[i];
                let pb = rb[i][0] * p[0] + rb[i][1] * p[1] + rb[i][2] * p[2] + tb[i];
                sq += (pa - pb) * (pa - pb);
            }
            total += sq.sqrt();
        }
        assert!((add(&m, &a, &b) - total / 100.0).abs() < 1e-12);
        assert!(add_s(&m, &a, &b) <= add(&m, &a, &b));
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy_below(&[0.0, 0.0], 0.02).unwrap(), 1.0);
        assert_eq!(accuracy_below(&[0.01, 0.03], 0.02).unwrap(), 0.5);
        assert_eq!(accuracy_below(&[0.02], 0.02).unwrap(), 0.0);
        assert!(accuracy_below(&[], 0.02).is_err());
        assert!(accuracy_below(&[0.1], 0.0).is_err());
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.0; 7], 0.1).unwrap(), 100.0);
        assert_eq!(auc(&[0.1, 0.5, 3.0], 0.1).unwrap(), 0.0);
        assert!((auc(&[0.05], 0.1).unwrap() - 50.0).abs() < 1e-12);
        assert!(auc(&[], 0.1).is_err());
    }

    #[test]
    fn report_routes_and_averages() {
        let records = vec![
            DistanceRecord { object: "a".into(), kind: MetricKind::Add, distance: 0.0 },
            DistanceRecord { object: "a".into(), kind: MetricKind::AddS, distance: 0.5 },
            DistanceRecord { object: "b".into(), kind: MetricKind::Add, distance: 0.5 },
            DistanceRecord { object: "b".into(), kind: MetricKind::AddS, distance: 0.0 },
        ];
        let objects = vec!["b".to_string(), "a".to_string()];
        let none = BTreeSet::new();
        let r = report(&records, &objects, &none, 0.02, 0.1).unwrap();
        assert_eq!(r.rows[0].object, "a");
        assert_eq!(r.row("a").unwrap().auc, 100.0);
        assert_eq!(r.row("b").unwrap().auc, 0.0);
        assert_eq!(r.mean_auc, 50.0);

        let sym: BTreeSet<String> = ["b".to_string()].into();
        let r = report(&records, &objects, &sym, 0.02, 0.1).unwrap();
        assert_eq!(r.row("b").unwrap().kind, MetricKind::AddS);
        assert_eq!(r.row("b").unwrap().auc, 100.0);
        assert_eq!(r.mean_below, 100.0);

        let only_a = vec!["a".to_string()];
        assert!(matches!(report(&records, &only_a, &none, 0.02, 0.1), Err(Error::Input(_))));
        let missing = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert!(report(&records, &missing, &none, 0.02, 0.1).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let records = vec![
            DistanceRecord { object: "box".into(), kind: MetricKind::AddS, distance: 0.012345678901234 },
            DistanceRecord { object: "lshape".into(), kind: MetricKind::Add, distance: 1e-17 },
        ];
        let text = format_distance_dump(&records);
        assert_eq!(parse_distance_dump(&text).unwrap(), records);
        assert!(parse_distance_dump("box ADD").is_err());
        assert!(parse_distance_dump("box XYZ 0.1").is_err());
    }
}
