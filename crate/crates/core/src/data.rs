//! Synthetic domain pairs, few-shot target sampling and CSV interchange.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest labeled-per-class count of the few-shot setting.
pub const FEW_SHOT_MAX_PER_CLASS: usize = 7;
/// Radius of the circle the blob means sit on.
pub const BLOB_RADIUS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
    Generated,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
            Domain::Generated => "generated",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            "generated" => Ok(Domain::Generated),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// Labeled samples from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain: Domain,
    /// Where the samples came from: a generator description or a file path.
    pub provenance: String,
}

impl DomainDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        classes: usize,
        domain: Domain,
        provenance: String,
    ) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
            domain,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            domain: self.domain,
            provenance: self.provenance.clone(),
        }
    }
}

/// Gaussian blobs whose class means sit evenly on a circle of radius 4 in
/// the first two dimensions. Rows are grouped by class.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<DomainDataset> {
    if classes < 2 {
        return Err(Error::invalid(format!("make_blobs needs K >= 2, got {classes}")));
    }
    if dim < 2 {
        return Err(Error::invalid(format!("make_blobs needs d >= 2, got {dim}")));
    }
    if per_class == 0 {
        return Err(Error::invalid("make_blobs needs per_class >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let mut mean = vec![0.0; dim];
        mean[0] = BLOB_RADIUS * theta.cos();
        mean[1] = BLOB_RADIUS * theta.sin();
        for _ in 0..per_class {
            for m in &mean {
                data.push(m + noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let features = Tensor::matrix(classes * per_class, dim, data)?;
    DomainDataset::new(
        features,
        labels,
        classes,
        Domain::Source,
        format!("make_blobs(K={classes}, per_class={per_class}, d={dim}, spread={spread}, seed={seed})"),
    )
}

/// Domain shift applied to features: scale per dimension, rotate the first
/// two dimensions, then translate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShiftSpec {
    Rotation {
        /// Radians; normalised into `[0, 2 pi)`.
        angle: f64,
    },
    Translation {
        offset: Vec<f64>,
    },
    Scale {
        /// One factor for every dimension, or a single shared factor.
        factors: Vec<f64>,
    },
    Composite {
        #[serde(default)]
        angle: f64,
        #[serde(default)]
        offset: Vec<f64>,
        #[serde(default)]
        factors: Vec<f64>,
    },
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::Composite {
            angle: std::f64::consts::PI / 3.0,
            offset: vec![1.0, 0.0],
            factors: Vec::new(),
        }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec::Composite {
            angle: 0.0,
            offset: Vec::new(),
            factors: Vec::new(),
        }
    }

    fn parts(&self) -> (f64, &[f64], &[f64]) {
        match self {
            ShiftSpec::Rotation { angle } => (*angle, &[], &[]),
            ShiftSpec::Translation { offset } => (0.0, offset, &[]),
            ShiftSpec::Scale { factors } => (0.0, &[], factors),
            ShiftSpec::Composite { angle, offset, factors } => (*angle, offset, factors),
        }
    }

    /// Rotation angle in `[0, 2 pi)`.
    pub fn normalized_angle(&self) -> f64 {
        self.parts().0.rem_euclid(2.0 * std::f64::consts::PI)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let (angle, offset, factors) = self.parts();
        if !angle.is_finite() {
            return Err(Error::config("task.shift.angle", "must be finite"));
        }
        if offset.len() > dim || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(
                "task.shift.offset",
                format!("needs at most {dim} finite entries"),
            ));
        }
        if !(factors.is_empty() || factors.len() == 1 || factors.len() == dim) {
            return Err(Error::config(
                "task.shift.factors",
                format!("needs 1 or {dim} entries, got {}", factors.len()),
            ));
        }
        if factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::config("task.shift.factors", "factors must be > 0"));
        }
        Ok(())
    }
}

/// Shifted copy of `ds`, tagged as target data.
pub fn apply_shift(ds: &DomainDataset, shift: &ShiftSpec) -> Result<DomainDataset> {
    let d = ds.dim();
    shift.validate(d)?;
    let (_, offset, factors) = shift.parts();
    let angle = shift.normalized_angle();
    let (s, c) = angle.sin_cos();
    let mut features = ds.features.clone();
    for i in 0..features.rows() {
        let mut row: Vec<f64> = features.row(i).to_vec();
        for (k, v) in row.iter_mut().enumerate() {
            *v *= match factors.len() {
                0 => 1.0,
                1 => factors[0],
                _ => factors[k],
            };
        }
        if angle != 0.0 {
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
        }
        for (v, o) in row.iter_mut().zip(offset) {
            *v += o;
        }
        for (k, v) in row.into_iter().enumerate() {
            features.set(i, k, v);
        }
    }
    Ok(DomainDataset {
        features,
        labels: ds.labels.clone(),
        classes: ds.classes,
        domain: Domain::Target,
        provenance: format!("{} shifted by {shift:?}", ds.provenance),
    })
}

/// Splits `ds` into exactly `per_class` labeled samples per class and an
/// evaluation set holding the rest, in original order.
pub fn few_shot_sample(ds: &DomainDataset, per_class: usize, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if per_class == 0 {
        return Err(Error::invalid("few-shot sampling needs per_class >= 1"));
    }
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, rows) in by_class.iter().enumerate() {
        if rows.len() < per_class + 10 {
            return Err(Error::invalid(format!(
                "class {c} has {} samples; few-shot sampling of {per_class} needs at least {}",
                rows.len(),
                per_class + 10
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::with_capacity(per_class * ds.classes);
    let mut taken = vec![false; ds.len()];
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
        for &i in &rows[..per_class] {
            labeled.push(i);
            taken[i] = true;
        }
    }
    let eval: Vec<usize> = (0..ds.len()).filter(|&i| !taken[i]).collect();
    Ok((ds.subset(&labeled), ds.subset(&eval)))
}

/// Writes `x1..xd,label,domain` with a header row; values use 17
/// significant digits.
pub fn save_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, file).map_err(|e| Error::io(path, e))
}

pub fn write_csv<W: std::io::Write>(ds: &DomainDataset, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header)?;
    let domain = ds.domain.to_string();
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(ds.labels[i].to_string());
        rec.push(domain.clone());
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Reads a dataset written by [`save_csv`]. With `classes` given, labels at
/// or above it are rejected; otherwise the class count is `max label + 1`.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<DomainDataset> {
    let err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => err(0, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let n = cols.len();
    if n < 3 || cols[n - 2] != "label" || cols[n - 1] != "domain" {
        return Err(err(1, "header must be x1..xd,label,domain".into()));
    }
    for (k, name) in cols[..n - 2].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(err(1, format!("expected column x{} but found `{name}`", k + 1)));
        }
    }
    let dim = n - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            err(row, e.to_string())
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != n {
            return Err(err(row, format!("expected {n} fields, found {}", rec.len())));
        }
        for k in 0..dim {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| err(row, format!("x{} is not numeric: `{}`", k + 1, &rec[k])))?;
            data.push(v);
        }
        let y: usize = rec[dim]
            .trim()
            .parse()
            .map_err(|_| err(row, format!("label is not a class index: `{}`", &rec[dim])))?;
        if let Some(k) = classes {
            if y >= k {
                return Err(err(row, format!("label {y} out of range for {k} classes")));
            }
        }
        labels.push(y);
        let d: Domain = rec[dim + 1].trim().parse().map_err(|m| err(row, m))?;
        match domain {
            None => domain = Some(d),
            Some(prev) if prev != d => return Err(err(row, format!("mixed domains `{prev}` and `{d}` in one file"))),
            _ => {}
        }
    }
    let Some(domain) = domain else {
        return Err(err(2, "no data rows".into()));
    };
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Tensor::matrix(labels.len(), dim, data)?;
    DomainDataset::new(features, labels, k, domain, path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(
            make_blobs(3, 10, 2, 0.5, 7).unwrap(),
            make_blobs(3, 10, 2, 0.5, 7).unwrap()
        );
        assert_ne!(
            make_blobs(3, 10, 2, 0.5, 7).unwrap(),
            make_blobs(3, 10, 2, 0.5, 8).unwrap()
        );
    }

    #[test]
    fn zero_spread_puts_points_on_means() {
        let ds = make_blobs(4, 5, 3, 0.0, 1).unwrap();
        for i in 0..ds.len() {
            let c = ds.labels[i];
            let theta = std::f64::consts::FRAC_PI_2 * c as f64;
            let row = ds.features.row(i);
            assert!((row[0] - 4.0 * theta.cos()).abs() < 1e-12);
            assert!((row[1] - 4.0 * theta.sin()).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn blob_preconditions() {
        assert!(make_blobs(1, 5, 2, 0.1, 0).is_err());
        assert!(make_blobs(3, 5, 1, 0.1, 0).is_err());
        assert!(make_blobs(3, 0, 2, 0.1, 0).is_err());
    }

    #[test]
    fn identity_and_periodic_shifts() {
        let ds = make_blobs(3, 8, 2, 0.5, 3).unwrap();
        let same = apply_shift(&ds, &ShiftSpec::identity()).unwrap();
        assert_eq!(same.features, ds.features);
        assert_eq!(same.domain, Domain::Target);
        let full = apply_shift(
            &ds,
            &ShiftSpec::Rotation {
                angle: 2.0 * std::f64::consts::PI,
            },
        )
        .unwrap();
        for (a, b) in full.features.data().iter().zip(ds.features.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_inverse() {
        let ds = make_blobs(3, 8, 3, 0.5, 4).unwrap();
        let q = std::f64::consts::FRAC_PI_4;
        let there = apply_shift(&ds, &ShiftSpec::Rotation { angle: q }).unwrap();
        let back = apply_shift(&there, &ShiftSpec::Rotation { angle: -q }).unwrap();
        for (a, b) in back.features.data().iter().zip(ds.features.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(back.class_counts(), ds.class_counts());
    }

    #[test]
    fn shift_validation() {
        let bad = ShiftSpec::Scale { factors: vec![0.0] };
        assert!(bad.validate(2).is_err());
        let long = ShiftSpec::Translation {
            offset: vec![1.0, 2.0, 3.0],
        };
        assert!(long.validate(2).is_err());
        let parsed: ShiftSpec = serde_json::from_str(r#"{"kind":"composite","angle":1.0,"offset":[1,0]}"#).unwrap();
        assert!(parsed.validate(2).is_ok());
    }

    #[test]
    fn few_shot_split_is_balanced_and_disjoint() {
        let ds = make_blobs(3, 20, 2, 0.5, 5).unwrap();
        let (lab, eval) = few_shot_sample(&ds, 1, 9).unwrap();
        assert_eq!(lab.len(), 3);
        assert_eq!(lab.class_counts(), vec![1, 1, 1]);
        assert_eq!(eval.len(), 57);
        let (lab2, _) = few_shot_sample(&ds, 1, 9).unwrap();
        assert_eq!(lab, lab2);
        assert!(few_shot_sample(&ds, 11, 9).is_err());
    }
}
