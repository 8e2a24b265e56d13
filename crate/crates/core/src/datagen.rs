//! Synthetic federated datasets, Non-IID partitions, the tabular CSV adapter
//! and the on-disk dataset container.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_stream, Purpose, Stream, SERVER};
use crate::types::{ClientData, FederatedDataset, GroupIndex, GroupIndexSummary};

/// Largest count accepted for a single cell.
pub const MAX_CELL: i64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Iid,
    Weak,
    Strong,
    Extreme,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::Iid, Setting::Weak, Setting::Strong, Setting::Extreme];

    /// Share of each attribute's samples held by its owning clients on top of
    /// the even split.
    pub fn concentration(self) -> f64 {
        match self {
            Setting::Iid => 0.0,
            Setting::Weak => 0.5,
            Setting::Strong => 0.8,
            Setting::Extreme => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::Iid => "iid",
            Setting::Weak => "weak",
            Setting::Strong => "strong",
            Setting::Extreme => "extreme",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Attribute = class label; clients differ in label mix.
    Label,
    /// Attribute = latent domain; each domain transforms the features.
    Feature,
    /// Label shift with quantities skewed across clients and attributes.
    Unbalanced,
}

fn default_cell_base() -> usize {
    100
}
fn default_separation() -> f64 {
    3.0
}
fn default_domain_shift() -> f64 {
    1.0
}

/// How samples are laid out over the `N × A` (client, attribute) grid, plus
/// the knobs of the synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub setting: Setting,
    pub client_count: usize,
    pub attribute_arity: usize,
    /// Explicit `N × A` counts; derived from `setting` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_cell: Option<Vec<Vec<i64>>>,
    pub shift_kind: ShiftKind,
    /// Average samples per cell for the derived matrices.
    #[serde(default = "default_cell_base")]
    pub cell_base: usize,
    /// Ratio between the smallest and largest attribute totals. Defaults to
    /// 1 (0.1 for `unbalanced`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_skew: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Classes for feature shift (label shift uses one class per attribute).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    /// Distance of the class means from the origin.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Scale of the per-domain rotation and offset.
    #[serde(default = "default_domain_shift")]
    pub domain_shift: f64,
}

impl PartitionSpec {
    pub fn new(setting: Setting, client_count: usize, attribute_arity: usize, shift_kind: ShiftKind) -> Self {
        PartitionSpec {
            setting,
            client_count,
            attribute_arity,
            samples_per_cell: None,
            shift_kind,
            cell_base: default_cell_base(),
            attribute_skew: None,
            feature_dim: None,
            class_count: None,
            separation: default_separation(),
            domain_shift: default_domain_shift(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PartitionSpec = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn class_count(&self) -> usize {
        match self.shift_kind {
            ShiftKind::Label | ShiftKind::Unbalanced => self.attribute_arity,
            ShiftKind::Feature => self.class_count.unwrap_or(2),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or(self.class_count().max(2))
    }

    fn skew(&self) -> f64 {
        self.attribute_skew.unwrap_or(match self.shift_kind {
            ShiftKind::Unbalanced => 0.1,
            _ => 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.client_count == 0 || self.attribute_arity == 0 {
            return fail("client_count and attribute_arity must be >= 1".into());
        }
        let skew = self.skew();
        if !(skew > 0.0 && skew <= 1.0) {
            return fail(format!("attribute_skew {skew} outside (0, 1]"));
        }
        if !(self.separation.is_finite() && self.domain_shift.is_finite()) {
            return fail("separation and domain_shift must be finite".into());
        }
        match self.shift_kind {
            ShiftKind::Label | ShiftKind::Unbalanced => {
                if self.class_count.is_some_and(|c| c != self.attribute_arity) {
                    return fail(
                        "label shift uses one class per attribute; class_count must equal attribute_arity".into(),
                    );
                }
                if self.feature_dim() < self.class_count() {
                    return fail(format!(
                        "feature_dim {} is smaller than the class count {}",
                        self.feature_dim(),
                        self.class_count()
                    ));
                }
            }
            ShiftKind::Feature => {
                if self.class_count() < 2 {
                    return fail("feature shift needs class_count >= 2".into());
                }
                if self.feature_dim() < self.class_count() {
                    return fail("feature_dim must be >= class_count".into());
                }
            }
        }
        if let Some(cells) = &self.samples_per_cell {
            if cells.len() != self.client_count {
                return fail(format!("samples_per_cell has {} rows, expected {}", cells.len(), self.client_count));
            }
            for (i, row) in cells.iter().enumerate() {
                if row.len() != self.attribute_arity {
                    return fail(format!(
                        "samples_per_cell row {i} has {} entries, expected {}",
                        row.len(),
                        self.attribute_arity
                    ));
                }
                for (a, &c) in row.iter().enumerate() {
                    if !(0..=MAX_CELL).contains(&c) {
                        return Err(Error::Data(format!("infeasible cell (client {i}, attribute {a}): count {c}")));
                    }
                }
            }
            if cells.iter().flatten().all(|&c| c == 0) {
                return Err(Error::Data("samples_per_cell is all zero".into()));
            }
        }
        Ok(())
    }

    /// The `N × A` count matrix: explicit if given, otherwise derived from the
    /// setting with attribute totals `N · cell_base · skew^{a/(A−1)}`.
    pub fn cell_counts(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        if let Some(cells) = &self.samples_per_cell {
            return Ok(cells.iter().map(|r| r.iter().map(|&c| c as usize).collect()).collect());
        }
        let (n, a) = (self.client_count, self.attribute_arity);
        let skew = self.skew();
        let totals: Vec<f64> = (0..a)
            .map(|k| {
                let frac = if a > 1 { k as f64 / (a - 1) as f64 } else { 0.0 };
                (n * self.cell_base) as f64 * skew.powf(frac)
            })
            .collect();
        let totals: Vec<usize> = totals.iter().map(|t| t.round().max(1.0) as usize).collect();
        Ok(self.counts_for_totals(&totals))
    }

    /// Splits the given per-attribute totals over clients according to the
    /// setting. Rounds by largest remainder so every column keeps its total.
    pub fn counts_for_totals(&self, totals: &[usize]) -> Vec<Vec<usize>> {
        let (n, a) = (self.client_count, self.attribute_arity);
        let alpha = self.setting.concentration();
        let client_weight = |i: usize| match self.shift_kind {
            ShiftKind::Unbalanced if n > 1 => self.skew().powf(i as f64 / (n - 1) as f64),
            _ => 1.0,
        };
        let mut out = vec![vec![0usize; a]; n];
        for (k, &total) in totals.iter().enumerate() {
            let owners = owners_of(k, n, a);
            let shares: Vec<f64> = (0..n)
                .map(|i| {
                    let even = (1.0 - alpha) / n as f64;
                    let own = if owners.contains(&i) { alpha / owners.len() as f64 } else { 0.0 };
                    (even + own) * client_weight(i)
                })
                .collect();
            let norm: f64 = shares.iter().sum();
            let exact: Vec<f64> = shares.iter().map(|s| s / norm * total as f64).collect();
            for (i, c) in largest_remainder(&exact, total).into_iter().enumerate() {
                out[i][k] = c;
            }
        }
        out
    }
}

/// Clients that own attribute `k`: a block-diagonal assignment.
fn owners_of(k: usize, n: usize, a: usize) -> Vec<usize> {
    if a >= n {
        vec![k * n / a]
    } else {
        (0..n).filter(|i| i % a == k).collect()
    }
}

fn largest_remainder(exact: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    // stable: ties go to the lower index
    order.sort_by(|&x, &y| (exact[y] - exact[y].floor()).total_cmp(&(exact[x] - exact[x].floor())));
    for &j in order.iter().take(total.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

fn data_stream(seed: u64, purpose: Purpose, sub: u32) -> Stream {
    keyed_stream(seed, 0, SERVER, purpose, sub)
}

fn gaussian(stream: &mut Stream) -> f64 {
    StandardNormal.sample(stream)
}

/// Class means `separation · e_c`.
fn class_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            m[c] = separation;
            m
        })
        .collect()
}

/// Fills clients cell by cell: for each client, attributes in ascending order,
/// `count` samples drawn by `draw(attribute, position, stream)`.
fn fill_cells(
    counts: &[Vec<usize>],
    dim: usize,
    seed: u64,
    mut draw: impl FnMut(usize, usize, &mut Stream, &mut Vec<f64>) -> u32,
) -> Vec<ClientData> {
    counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            let mut c = ClientData {
                client_id: i,
                features: Vec::with_capacity(n * dim),
                labels: Vec::with_capacity(n),
                attributes: Vec::with_capacity(n),
            };
            for (a, &count) in row.iter().enumerate() {
                let mut stream = keyed_stream(seed, 0, i as u64, Purpose::Data, a as u32);
                for p in 0..count {
                    let y = draw(a, p, &mut stream, &mut c.features);
                    c.labels.push(y);
                    c.attributes.push(a as u32);
                }
            }
            c
        })
        .collect()
}

/// Class-conditional Gaussians with identity covariance; attribute = label.
pub fn synth_label_shift(spec: &PartitionSpec, seed: u64) -> Result<FederatedDataset> {
    if spec.shift_kind == ShiftKind::Feature {
        return Err(Error::Config("synth_label_shift needs shift_kind label or unbalanced".into()));
    }
    let counts = spec.cell_counts()?;
    let dim = spec.feature_dim();
    let means = class_means(spec.class_count(), dim, spec.separation);
    let clients = fill_cells(&counts, dim, seed, |a, _, stream, out| {
        out.extend(means[a].iter().map(|m| m + gaussian(stream)));
        a as u32
    });
    let data = FederatedDataset {
        clients,
        attribute_arity: spec.attribute_arity,
        feature_dim: dim,
        class_count: spec.class_count(),
    };
    data.validate()?;
    Ok(data)
}

/// Per-domain transform: Givens rotations then an offset, both scaled by
/// `domain_shift` so that a zero shift makes all domains identical.
struct Domain {
    rotations: Vec<(usize, usize, f64)>,
    offset: Vec<f64>,
}

impl Domain {
    fn draw(dim: usize, shift: f64, stream: &mut Stream) -> Domain {
        let rotations = (0..dim)
            .map(|_| {
                let p = stream.random_range(0..dim);
                let mut q = stream.random_range(0..dim - 1);
                if q >= p {
                    q += 1;
                }
                let angle = shift * stream.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
                (p, q, angle)
            })
            .collect();
        let mut dir: Vec<f64> = (0..dim).map(|_| gaussian(stream)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|x| *x *= shift / norm);
        Domain { rotations, offset: dir }
    }

    fn apply(&self, x: &mut [f64]) {
        for &(p, q, angle) in &self.rotations {
            let (s, c) = angle.sin_cos();
            let (xp, xq) = (x[p], x[q]);
            x[p] = c * xp - s * xq;
            x[q] = s * xp + c * xq;
        }
        x.iter_mut().zip(&self.offset).for_each(|(v, o)| *v += o);
    }
}

/// Shared class-conditional Gaussians seen through a per-domain transform;
/// attribute = domain. Labels cycle through the classes inside each cell so
/// every domain has the same label marginal.
pub fn synth_feature_shift(spec: &PartitionSpec, seed: u64) -> Result<FederatedDataset> {
    if spec.shift_kind != ShiftKind::Feature {
        return Err(Error::Config("synth_feature_shift needs shift_kind feature".into()));
    }
    let counts = spec.cell_counts()?;
    let dim = spec.feature_dim();
    let classes = spec.class_count();
    let means = class_means(classes, dim, spec.separation);
    let mut truth = data_stream(seed, Purpose::Truth, 0);
    let domains: Vec<Domain> =
        (0..spec.attribute_arity).map(|_| Domain::draw(dim, spec.domain_shift, &mut truth)).collect();
    let clients = fill_cells(&counts, dim, seed, |a, p, stream, out| {
        let y = p % classes;
        let mut x: Vec<f64> = means[y].iter().map(|m| m + gaussian(stream)).collect();
        domains[a].apply(&mut x);
        out.extend_from_slice(&x);
        y as u32
    });
    let data =
        FederatedDataset { clients, attribute_arity: spec.attribute_arity, feature_dim: dim, class_count: classes };
    data.validate()?;
    Ok(data)
}

/// Dispatches on the spec's shift kind.
pub fn generate(spec: &PartitionSpec, seed: u64) -> Result<FederatedDataset> {
    match spec.shift_kind {
        ShiftKind::Feature => synth_feature_shift(spec, seed),
        ShiftKind::Label | ShiftKind::Unbalanced => synth_label_shift(spec, seed),
    }
}

/// Seeded per-subgroup holdout: a `test_fraction` share (rounded) of every
/// `(client, attribute)` cell goes to the test split. Both splits keep the
/// original sample order.
pub fn holdout_split(
    data: &FederatedDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(FederatedDataset, FederatedDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let index = GroupIndex::build(data);
    let mut train = data.clone();
    let mut test = data.clone();
    for (i, c) in data.clients.iter().enumerate() {
        let mut is_test = vec![false; c.len()];
        for e in index.entries.iter().filter(|e| e.client == i) {
            let take = (e.size as f64 * test_fraction).round() as usize;
            let mut stream = keyed_stream(seed, 0, i as u64, Purpose::Holdout, e.attribute as u32);
            let picked = rand::seq::index::sample(&mut stream, e.size, take);
            for p in picked.iter() {
                is_test[e.indices[p]] = true;
            }
        }
        train.clients[i] = select(c, data.feature_dim, |s| !is_test[s]);
        test.clients[i] = select(c, data.feature_dim, |s| is_test[s]);
    }
    Ok((train, test))
}

fn select(c: &ClientData, dim: usize, keep: impl Fn(usize) -> bool) -> ClientData {
    let mut out =
        ClientData { client_id: c.client_id, features: Vec::new(), labels: Vec::new(), attributes: Vec::new() };
    for s in (0..c.len()).filter(|&s| keep(s)) {
        out.features.extend_from_slice(c.row(s, dim));
        out.labels.push(c.labels[s]);
        out.attributes.push(c.attributes[s]);
    }
    out
}

/// Splits a pooled single-client dataset over `spec.client_count` clients by
/// per-(client, attribute) quotas. Each attribute's samples are shuffled with
/// a seeded stream and dealt out in client order; clients keep the pooled
/// order. Quotas come from `spec.samples_per_cell`, or from the setting
/// applied to the available per-attribute totals.
pub fn partition(pooled: &FederatedDataset, spec: &PartitionSpec, seed: u64) -> Result<FederatedDataset> {
    if pooled.client_count() != 1 {
        return Err(Error::Data(format!("partition expects one pooled client, got {}", pooled.client_count())));
    }
    if spec.attribute_arity != pooled.attribute_arity {
        return Err(Error::Data(format!(
            "spec has {} attributes, dataset has {}",
            spec.attribute_arity, pooled.attribute_arity
        )));
    }
    spec.validate()?;
    let src = &pooled.clients[0];
    let mut by_attr: Vec<Vec<usize>> = vec![Vec::new(); pooled.attribute_arity];
    for (s, &a) in src.attributes.iter().enumerate() {
        by_attr[a as usize].push(s);
    }
    let quotas = match &spec.samples_per_cell {
        Some(_) => spec.cell_counts()?,
        None => spec.counts_for_totals(&by_attr.iter().map(Vec::len).collect::<Vec<_>>()),
    };
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); spec.client_count];
    for (a, pool) in by_attr.iter_mut().enumerate() {
        let need: usize = quotas.iter().map(|r| r[a]).sum();
        if need > pool.len() {
            return Err(Error::Data(format!("quota for attribute {a} needs {need} samples, {} available", pool.len())));
        }
        let mut stream = data_stream(seed, Purpose::Partition, a as u32);
        pool.shuffle(&mut stream);
        let mut next = 0;
        for (i, row) in quotas.iter().enumerate() {
            assigned[i].extend_from_slice(&pool[next..next + row[a]]);
            next += row[a];
        }
    }
    let clients = assigned
        .into_iter()
        .enumerate()
        .map(|(i, mut idx)| {
            idx.sort_unstable();
            let keep: BTreeSet<usize> = idx.into_iter().collect();
            let mut c = select(src, pooled.feature_dim, |s| keep.contains(&s));
            c.client_id = i;
            c
        })
        .collect();
    Ok(FederatedDataset { clients, ..pooled.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Encoding {
    Numeric,
    /// One-hot over `levels`, or over the sorted distinct values when absent.
    Categorical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureColumn {
    pub name: String,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSchema {
    pub feature_columns: Vec<FeatureColumn>,
    pub label_column: String,
    /// Label values in class order; sorted distinct values when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_levels: Option<Vec<String>>,
    /// Columns whose value combination forms the sensitive attribute.
    pub attribute_columns: Vec<String>,
    /// Per attribute column, its values in order; sorted distinct values when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_levels: Option<Vec<Vec<String>>>,
}

/// Result of [`load_tabular_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLoad {
    pub dataset: FederatedDataset,
    pub rejected_rows: usize,
    /// Encoded feature names in column order.
    pub feature_names: Vec<String>,
}

type Encoder = Box<dyn Fn(&csv::StringRecord, &mut Vec<f64>)>;

/// Largest tolerated share of rejected rows.
pub const MAX_REJECT_FRACTION: f64 = 0.05;

fn levels_of(values: &[&str], given: Option<&Vec<String>>) -> Vec<String> {
    match given {
        Some(l) => l.clone(),
        None => values.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect(),
    }
}

/// Reads a headered CSV into a single pooled client. Numeric columns are
/// z-scored with whole-file statistics (population deviation; constant columns
/// are only centered), categoricals are one-hot encoded. A row is rejected if
/// it has the wrong width, an unparseable numeric cell, or a value outside
/// explicitly given levels.
pub fn load_tabular_csv(path: &Path, schema: &TabularSchema) -> Result<TabularLoad> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    };
    let feat_cols: Vec<usize> = schema.feature_columns.iter().map(|f| col(&f.name)).collect::<Result<_>>()?;
    let label_col = col(&schema.label_column)?;
    let attr_cols: Vec<usize> = schema.attribute_columns.iter().map(|c| col(c)).collect::<Result<_>>()?;
    if attr_cols.is_empty() {
        return Err(Error::Config("schema needs at least one attribute column".into()));
    }
    if let Some(l) = &schema.attribute_levels {
        if l.len() != attr_cols.len() {
            return Err(Error::Config("attribute_levels must list one level set per attribute column".into()));
        }
    }

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    let mut total = 0usize;
    let mut rejected = 0usize;
    for rec in reader.records() {
        total += 1;
        let rec = match rec {
            Ok(r) if r.len() == header.len() => r,
            _ => {
                rejected += 1;
                continue;
            }
        };
        let numeric_ok =
            schema.feature_columns.iter().zip(&feat_cols).all(|(f, &c)| {
                f.encoding != Encoding::Numeric || rec[c].trim().parse::<f64>().is_ok_and(f64::is_finite)
            });
        if numeric_ok {
            rows.push(rec);
        } else {
            rejected += 1;
        }
    }

    // Explicit level lists also reject rows with unknown values.
    let in_levels = |given: Option<&Vec<String>>, v: &str| given.is_none_or(|l| l.iter().any(|x| x == v));
    rows.retain(|r| {
        let ok = schema.feature_columns.iter().zip(&feat_cols).all(|(f, &c)| match &f.encoding {
            Encoding::Categorical { levels } => in_levels(levels.as_ref(), r[c].trim()),
            Encoding::Numeric => true,
        }) && in_levels(schema.label_levels.as_ref(), r[label_col].trim())
            && attr_cols
                .iter()
                .enumerate()
                .all(|(j, &c)| in_levels(schema.attribute_levels.as_ref().map(|l| &l[j]), r[c].trim()));
        if !ok {
            rejected += 1;
        }
        ok
    });
    if total > 0 && rejected as f64 > MAX_REJECT_FRACTION * total as f64 {
        return Err(Error::Data(format!("{rejected} of {total} rows rejected (limit 5%)")));
    }
    if rows.is_empty() {
        return Err(Error::Data("no usable rows".into()));
    }

    let cell = |r: &csv::StringRecord, c: usize| r[c].trim().to_string();
    let column_values = |c: usize| rows.iter().map(|r| cell(r, c)).collect::<Vec<String>>();

    let mut feature_names = Vec::new();
    let mut encoders: Vec<Encoder> = Vec::new();
    for (f, &c) in schema.feature_columns.iter().zip(&feat_cols) {
        match &f.encoding {
            Encoding::Numeric => {
                let vals: Vec<f64> = rows.iter().map(|r| r[c].trim().parse::<f64>().expect("checked above")).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
                let scale = if sd > 0.0 { sd } else { 1.0 };
                feature_names.push(f.name.clone());
                encoders.push(Box::new(move |r, out| {
                    out.push((r[c].trim().parse::<f64>().expect("checked") - mean) / scale)
                }));
            }
            Encoding::Categorical { levels } => {
                let vals = column_values(c);
                let refs: Vec<&str> = vals.iter().map(String::as_str).collect();
                let levels = levels_of(&refs, levels.as_ref());
                feature_names.extend(levels.iter().map(|l| format!("{}={l}", f.name)));
                encoders.push(Box::new(move |r, out| {
                    let v = r[c].trim();
                    out.extend(levels.iter().map(|l| if l == v { 1.0 } else { 0.0 }));
                }));
            }
        }
    }

    let label_vals = column_values(label_col);
    let label_levels =
        levels_of(&label_vals.iter().map(String::as_str).collect::<Vec<_>>(), schema.label_levels.as_ref());
    let label_id: BTreeMap<&str, u32> = label_levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
    let attr_levels: Vec<Vec<String>> = attr_cols
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let vals = column_values(c);
            levels_of(
                &vals.iter().map(String::as_str).collect::<Vec<_>>(),
                schema.attribute_levels.as_ref().map(|l| &l[j]),
            )
        })
        .collect();
    let arity: usize = attr_levels.iter().map(Vec::len).product();

    let dim = feature_names.len();
    let mut client = ClientData {
        client_id: 0,
        features: Vec::with_capacity(rows.len() * dim),
        labels: Vec::new(),
        attributes: Vec::new(),
    };
    for r in &rows {
        for enc in &encoders {
            enc(r, &mut client.features);
        }
        client.labels.push(label_id[r[label_col].trim()]);
        // mixed radix, first attribute column most significant
        let mut id = 0usize;
        for (j, &c) in attr_cols.iter().enumerate() {
            let pos = attr_levels[j].iter().position(|l| l == r[c].trim()).expect("level present");
            id = id * attr_levels[j].len() + pos;
        }
        client.attributes.push(id as u32);
    }
    let dataset = FederatedDataset {
        clients: vec![client],
        attribute_arity: arity,
        feature_dim: dim,
        class_count: label_levels.len(),
    };
    dataset.validate()?;
    Ok(TabularLoad { dataset, rejected_rows: rejected, feature_names })
}

pub const FFD_MAGIC: &[u8; 4] = b"FFD1";
pub const FFD_VERSION: u32 = 1;

/// JSON sidecar stored next to a dataset container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub client_count: usize,
    pub attribute_arity: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub cell_counts: Vec<Vec<usize>>,
    pub group_index_digest: String,
    pub group_index: GroupIndexSummary,
}

/// `<path>.groups.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".groups.json");
    PathBuf::from(s)
}

/// Writes the binary container: magic, version, `N, A, d, C` as u64, then per
/// client its id, sample count, labels (u32), attributes (u32) and features (f64).
pub fn encode_dataset(data: &FederatedDataset, out: &mut impl Write) -> Result<()> {
    out.write_all(FFD_MAGIC)?;
    out.write_u32::<LittleEndian>(FFD_VERSION)?;
    for v in [data.client_count(), data.attribute_arity, data.feature_dim, data.class_count] {
        out.write_u64::<LittleEndian>(v as u64)?;
    }
    for c in &data.clients {
        out.write_u64::<LittleEndian>(c.client_id as u64)?;
        out.write_u64::<LittleEndian>(c.len() as u64)?;
        for &l in &c.labels {
            out.write_u32::<LittleEndian>(l)?;
        }
        for &a in &c.attributes {
            out.write_u32::<LittleEndian>(a)?;
        }
        for &x in &c.features {
            out.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn decode_dataset(input: &mut impl Read) -> Result<FederatedDataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FFD_MAGIC {
        return Err(Error::Data("not an FFD1 dataset".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != FFD_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {version}")));
    }
    let mut header = [0usize; 4];
    for h in &mut header {
        *h = input.read_u64::<LittleEndian>()? as usize;
    }
    let [n, arity, dim, classes] = header;
    let mut clients = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let client_id = input.read_u64::<LittleEndian>()? as usize;
        let len = input.read_u64::<LittleEndian>()? as usize;
        let mut labels = vec![0u32; len];
        input.read_u32_into::<LittleEndian>(&mut labels)?;
        let mut attributes = vec![0u32; len];
        input.read_u32_into::<LittleEndian>(&mut attributes)?;
        let mut features = vec![0f64; len * dim];
        input.read_f64_into::<LittleEndian>(&mut features)?;
        clients.push(ClientData { client_id, features, labels, attributes });
    }
    let data = FederatedDataset { clients, attribute_arity: arity, feature_dim: dim, class_count: classes };
    data.validate()?;
    Ok(data)
}

pub fn sidecar(data: &FederatedDataset) -> DatasetSidecar {
    let index = GroupIndex::build(data);
    DatasetSidecar {
        format_version: FFD_VERSION,
        client_count: data.client_count(),
        attribute_arity: data.attribute_arity,
        feature_dim: data.feature_dim,
        class_count: data.class_count,
        cell_counts: data.cell_counts(),
        group_index_digest: index.digest(),
        group_index: index.summary(),
    }
}

/// Writes the container at `path` and its sidecar next to it.
pub fn write_dataset(data: &FederatedDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    encode_dataset(data, &mut out)?;
    out.flush()?;
    let text = serde_json::to_string_pretty(&sidecar(data))?;
    std::fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<FederatedDataset> {
    let mut input = BufReader::new(File::open(path)?);
    decode_dataset(&mut input)
}
