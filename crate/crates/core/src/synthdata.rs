//! Synthetic grouped identities on the unit sphere.
//!
//! Each group owns a random anchor direction. Identity centers are the anchor
//! plus a random unit offset scaled by `center_concentration`, renormalized;
//! samples are a center plus isotropic Gaussian noise, renormalized. A small
//! `center_concentration` packs a group's identities into a narrow cone, so
//! its different-identity pairs are more similar and it produces more false
//! positives at any shared threshold.
//!
//! On disk a dataset is `<base>.header.json` plus `<base>.features.csv`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Rng, Stream};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_id: String,
    pub identity_count: usize,
    pub samples_per_identity: usize,
    /// Per-coordinate noise std added to a center before renormalization.
    pub intra_spread: f64,
    /// Scale of identity-center offsets around the group anchor.
    pub center_concentration: f64,
}

impl GroupSpec {
    pub fn new(group_id: impl Into<String>, identity_count: usize, samples_per_identity: usize, intra_spread: f64, center_concentration: f64) -> Self {
        Self {
            group_id: group_id.into(),
            identity_count,
            samples_per_identity,
            intra_spread,
            center_concentration,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("group {:?}: {what}", self.group_id)));
        if self.identity_count < 2 {
            return bad("identity_count must be at least 2");
        }
        if self.samples_per_identity < 2 {
            return bad("samples_per_identity must be at least 2");
        }
        if !(self.intra_spread > 0.0 && self.intra_spread.is_finite()) {
            return bad("intra_spread must be positive");
        }
        if !(self.center_concentration > 0.0 && self.center_concentration.is_finite()) {
            return bad("center_concentration must be positive");
        }
        Ok(())
    }
}

/// The benchmark used throughout the CLI and acceptance suite: four groups
/// of 32 identities with 16 samples each, ordered hardest to easiest.
pub fn default_group_specs() -> Vec<GroupSpec> {
    [("a", 0.3), ("b", 0.5), ("c", 0.8), ("d", 1.2)]
        .into_iter()
        .map(|(id, conc)| GroupSpec::new(id, 32, 16, DEFAULT_INTRA_SPREAD, conc))
        .collect()
}

pub const DEFAULT_RAW_DIM: usize = 32;
pub const DEFAULT_INTRA_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x raw_dim`, unit-norm rows.
    pub features: Matrix,
    /// Contiguous class indices `0..num_classes`.
    pub identity_labels: Vec<usize>,
    pub group_labels: Vec<String>,
    pub spec: Vec<GroupSpec>,
    pub seed: u64,
    /// For each class index, the identity index in the originally generated
    /// dataset. Lets splits stay traceable after class re-indexing.
    pub identity_origin: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identity_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_labels.is_empty()
    }

    pub fn raw_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.identity_origin.len()
    }

    /// Group labels in spec order.
    pub fn group_ids(&self) -> Vec<String> {
        self.spec.iter().map(|g| g.group_id.clone()).collect()
    }

    /// Group label of every class index.
    pub fn class_groups(&self) -> Vec<String> {
        let mut groups = vec![String::new(); self.num_classes()];
        for (label, group) in self.identity_labels.iter().zip(&self.group_labels) {
            groups[*label] = group.clone();
        }
        groups
    }

    /// Restricts the dataset to the listed classes, re-indexing them
    /// contiguously in ascending order of their current index.
    pub fn subset_classes(&self, classes: &BTreeSet<usize>) -> Dataset {
        let remap: HashMap<usize, usize> = classes.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| remap.contains_key(&self.identity_labels[i]))
            .collect();
        let class_groups = self.class_groups();
        let spec = self
            .spec
            .iter()
            .map(|g| GroupSpec {
                identity_count: classes.iter().filter(|&&c| class_groups[c] == g.group_id).count(),
                ..g.clone()
            })
            .collect();
        Dataset {
            features: self.features.select_rows(&rows),
            identity_labels: rows.iter().map(|&i| remap[&self.identity_labels[i]]).collect(),
            group_labels: rows.iter().map(|&i| self.group_labels[i].clone()).collect(),
            spec,
            seed: self.seed,
            identity_origin: classes.iter().map(|&c| self.identity_origin[c]).collect(),
        }
    }
}

/// Generates a dataset from group specs. Deterministic in `seed`.
pub fn generate(specs: &[GroupSpec], raw_dim: usize, seed: u64) -> Result<Dataset> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("at least one group spec is required".into()));
    }
    if raw_dim < 4 {
        return Err(Error::InvalidArgument(format!("raw_dim must be at least 4, got {raw_dim}")));
    }
    let mut seen = BTreeSet::new();
    for g in specs {
        g.validate()?;
        if !seen.insert(g.group_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate group id {:?}", g.group_id)));
        }
    }

    let mut rng = Rng::stream(seed, Stream::Data);
    let total: usize = specs.iter().map(|g| g.identity_count * g.samples_per_identity).sum();
    let mut data = Vec::with_capacity(total * raw_dim);
    let mut identity_labels = Vec::with_capacity(total);
    let mut group_labels = Vec::with_capacity(total);
    let mut class = 0usize;

    for g in specs {
        let anchor = rng.unit_vector(raw_dim);
        for _ in 0..g.identity_count {
            let offset = rng.unit_vector(raw_dim);
            let center: Vec<f64> = anchor
                .iter()
                .zip(&offset)
                .map(|(a, o)| a + g.center_concentration * o)
                .collect();
            let center = unit(center)?;
            for _ in 0..g.samples_per_identity {
                let noisy: Vec<f64> = center.iter().map(|c| c + g.intra_spread * rng.normal()).collect();
                data.extend(unit(noisy)?);
                identity_labels.push(class);
                group_labels.push(g.group_id.clone());
            }
            class += 1;
        }
    }

    Ok(Dataset {
        features: Matrix::new(total, raw_dim, data)?,
        identity_labels,
        group_labels,
        spec: specs.to_vec(),
        seed,
        identity_origin: (0..class).collect(),
    })
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = numerics::norm(&v);
    if !(n > 0.0) {
        return Err(Error::Degenerate("generated a zero vector".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Mean cosine over all different-identity pairs within `group`.
pub fn mean_nontarget_cosine(d: &Dataset, group: &str) -> Option<f64> {
    let rows: Vec<usize> = (0..d.len()).filter(|&i| d.group_labels[i] == group).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            if d.identity_labels[i] != d.identity_labels[j] {
                sum += numerics::dot(d.features.row(i), d.features.row(j));
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Holds out `holdout_identities_per_group` randomly chosen identities from
/// every group. Returns `(train, eval)` with disjoint identities.
pub fn split(d: &Dataset, holdout_identities_per_group: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let class_groups = d.class_groups();
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (c, g) in class_groups.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(c);
    }
    let mut rng = Rng::stream(seed, Stream::Split);
    let mut held = BTreeSet::new();
    for g in &d.spec {
        let mut classes = by_group.get(g.group_id.as_str()).cloned().unwrap_or_default();
        if holdout_identities_per_group > 0 && classes.len() <= holdout_identities_per_group {
            return Err(Error::InvalidArgument(format!(
                "group {:?} has {} identities; cannot hold out {holdout_identities_per_group}",
                g.group_id,
                classes.len()
            )));
        }
        rng.shuffle(&mut classes);
        held.extend(classes.into_iter().take(holdout_identities_per_group));
    }
    let kept: BTreeSet<usize> = (0..d.num_classes()).filter(|c| !held.contains(c)).collect();
    Ok((d.subset_classes(&kept), d.subset_classes(&held)))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    raw_dim: usize,
    num_samples: usize,
    num_classes: usize,
    spec: Vec<GroupSpec>,
    identity_origin: Vec<usize>,
}

pub fn header_path(base: &Path) -> PathBuf {
    with_suffix(base, ".header.json")
}

pub fn features_path(base: &Path) -> PathBuf {
    with_suffix(base, ".features.csv")
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Formats a float with 17 significant digits, which round-trips exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `<base>.header.json` and `<base>.features.csv`.
pub fn save(d: &Dataset, base: &Path) -> Result<()> {
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        seed: d.seed,
        raw_dim: d.raw_dim(),
        num_samples: d.len(),
        num_classes: d.num_classes(),
        spec: d.spec.clone(),
        identity_origin: d.identity_origin.clone(),
    };
    let hpath = header_path(base);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hpath, e))?;
    fs::write(&hpath, text + "\n").map_err(|e| Error::io(&hpath, e))?;

    let fpath = features_path(base);
    let mut out = String::with_capacity(d.len() * (d.raw_dim() + 2) * 24);
    out.push_str("identity_label,group_label");
    for j in 0..d.raw_dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..d.len() {
        out.push_str(&d.identity_labels[i].to_string());
        out.push(',');
        out.push_str(&d.group_labels[i]);
        for v in d.features.row(i) {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(&fpath).map_err(|e| Error::io(&fpath, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&fpath, e))?;
    Ok(())
}

/// Reads a dataset written by [`save`]; errors name the offending line and field.
pub fn load(base: &Path) -> Result<Dataset> {
    let hpath = header_path(base);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: hpath.clone(),
        line: e.line() as u64,
        field: "header".into(),
        message: e.to_string(),
    })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse {
            path: hpath,
            line: 1,
            field: "format_version".into(),
            message: format!("unsupported version {}", header.format_version),
        });
    }

    let fpath = features_path(base);
    let parse_err = |line: u64, field: &str, message: String| Error::Parse {
        path: fpath.clone(),
        line,
        field: field.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&fpath)
        .map_err(|e| parse_err(0, "file", e.to_string()))?;
    let expected_cols = header.raw_dim + 2;
    {
        let names = reader.headers().map_err(|e| parse_err(1, "header", e.to_string()))?;
        if names.len() != expected_cols || &names[0] != "identity_label" || &names[1] != "group_label" {
            return Err(parse_err(1, "header", format!("expected {expected_cols} columns starting with identity_label,group_label")));
        }
    }

    let mut data = Vec::with_capacity(header.num_samples * header.raw_dim);
    let mut identity_labels = Vec::with_capacity(header.num_samples);
    let mut group_labels = Vec::with_capacity(header.num_samples);
    let known_groups: BTreeSet<&str> = header.spec.iter().map(|g| g.group_id.as_str()).collect();
    let mut last_line = 1;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(last_line + 1, |p| p.line());
            parse_err(line, "record", e.to_string())
        })?;
        let line = record.position().map_or(last_line + 1, |p| p.line());
        last_line = line;
        if record.len() != expected_cols {
            return Err(parse_err(line, "record", format!("expected {expected_cols} fields, found {}", record.len())));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|e| parse_err(line, "identity_label", format!("{e}")))?;
        if label >= header.num_classes {
            return Err(parse_err(line, "identity_label", format!("{label} >= num_classes {}", header.num_classes)));
        }
        if !known_groups.contains(&record[1]) {
            return Err(parse_err(line, "group_label", format!("unknown group {:?}", &record[1])));
        }
        identity_labels.push(label);
        group_labels.push(record[1].to_string());
        for j in 0..header.raw_dim {
            let v: f64 = record[j + 2]
                .parse()
                .map_err(|e| parse_err(line, &format!("f{j}"), format!("{e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, &format!("f{j}"), "non-finite value".into()));
            }
            data.push(v);
        }
    }
    if identity_labels.len() != header.num_samples {
        return Err(parse_err(
            last_line + 1,
            "num_samples",
            format!("header declares {} rows, file has {}", header.num_samples, identity_labels.len()),
        ));
    }
    if header.identity_origin.len() != header.num_classes {
        return Err(Error::Parse {
            path: hpath,
            line: 1,
            field: "identity_origin".into(),
            message: format!("expected {} entries", header.num_classes),
        });
    }

    Ok(Dataset {
        features: Matrix::new(header.num_samples, header.raw_dim, data)?,
        identity_labels,
        group_labels,
        spec: header.spec,
        seed: header.seed,
        identity_origin: header.identity_origin,
    })
}
