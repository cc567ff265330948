//! Reading and validating genotype matrices, genetic maps, phenotype and
//! covariate tables.
//!
//! All tables are delimited text with a header row. Genotypes are kept in the
//! coding they were read in; the only transformation applied is per-marker
//! mean imputation of missing calls.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Tsv,
}

impl TableFormat {
    pub fn delimiter(self) -> char {
        match self {
            TableFormat::Csv => ',',
            TableFormat::Tsv => '\t',
        }
    }

    /// `.csv` files are comma separated, everything else tab separated.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TableFormat::Csv,
            _ => TableFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coding {
    ZeroOne,
    #[default]
    ZeroOneTwo,
    MinusOnePlusOne,
}

impl std::str::FromStr for Coding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "01" | "zero-one" => Ok(Coding::ZeroOne),
            "012" | "zero-one-two" => Ok(Coding::ZeroOneTwo),
            "-11" | "minus-one-plus-one" => Ok(Coding::MinusOnePlusOne),
            _ => Err(Error::Config(format!("unknown genotype coding `{s}`"))),
        }
    }
}

impl std::fmt::Display for Coding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Coding::ZeroOne => "zero-one",
            Coding::ZeroOneTwo => "zero-one-two",
            Coding::MinusOnePlusOne => "minus-one-plus-one",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub format: TableFormat,
    pub missing_code: String,
    pub coding: Coding,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            format: TableFormat::Tsv,
            missing_code: "NA".to_string(),
            coding: Coding::default(),
        }
    }
}

/// Genotypes of `n_lines` lines at `m` markers. Missing calls have already
/// been replaced by the marker mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerMatrix {
    pub line_ids: Vec<String>,
    pub marker_ids: Vec<String>,
    /// `n_lines x m`, column-major so a region's markers are contiguous slices.
    pub values: DMatrix<f64>,
    pub coding: Coding,
    /// Fraction of calls imputed, per retained marker.
    pub imputed_fraction: Vec<f64>,
    /// Markers dropped because every call was missing.
    pub dropped_markers: Vec<String>,
}

impl MarkerMatrix {
    pub fn new(
        line_ids: Vec<String>,
        marker_ids: Vec<String>,
        values: DMatrix<f64>,
        coding: Coding,
    ) -> Result<Self> {
        if values.nrows() != line_ids.len() || values.ncols() != marker_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} values for {} lines and {} markers",
                values.nrows(),
                values.ncols(),
                line_ids.len(),
                marker_ids.len()
            )));
        }
        check_unique(&line_ids, Error::DuplicateLineId)?;
        check_unique(&marker_ids, Error::DuplicateMarkerId)?;
        let m = marker_ids.len();
        Ok(MarkerMatrix {
            line_ids,
            marker_ids,
            values,
            coding,
            imputed_fraction: vec![0.0; m],
            dropped_markers: Vec::new(),
        })
    }

    pub fn n_lines(&self) -> usize {
        self.line_ids.len()
    }

    pub fn n_markers(&self) -> usize {
        self.marker_ids.len()
    }

    pub fn line_index(&self) -> HashMap<&str, usize> {
        self.line_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    pub fn marker_index(&self) -> HashMap<&str, usize> {
        self.marker_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Dense copy of the given rows and columns.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.values[(rows[i], cols[j])])
    }

    /// A new matrix holding only the given lines, in the given order.
    pub fn select_lines(&self, rows: &[usize]) -> MarkerMatrix {
        let all: Vec<usize> = (0..self.n_markers()).collect();
        MarkerMatrix {
            line_ids: rows.iter().map(|&r| self.line_ids[r].clone()).collect(),
            marker_ids: self.marker_ids.clone(),
            values: self.submatrix(rows, &all),
            coding: self.coding,
            imputed_fraction: self.imputed_fraction.clone(),
            dropped_markers: self.dropped_markers.clone(),
        }
    }

    /// Reorder columns to match `order`. Every id in `order` must be present
    /// and no other markers may be.
    pub fn reorder_markers(&self, order: &[String]) -> Result<MarkerMatrix> {
        let idx = self.marker_index();
        let wanted: HashSet<&str> = order.iter().map(|s| s.as_str()).collect();
        let extra: Vec<&str> = self
            .marker_ids
            .iter()
            .map(|s| s.as_str())
            .filter(|s| !wanted.contains(s))
            .collect();
        let missing: Vec<&str> = order
            .iter()
            .map(|s| s.as_str())
            .filter(|s| !idx.contains_key(s))
            .collect();
        if !extra.is_empty() || !missing.is_empty() {
            let mut msg = String::new();
            if !extra.is_empty() {
                msg.push_str(&format!("unknown markers: {}", extra.join(",")));
            }
            if !missing.is_empty() {
                if !msg.is_empty() {
                    msg.push_str("; ");
                }
                msg.push_str(&format!("missing markers: {}", missing.join(",")));
            }
            return Err(Error::ManifestMismatch(msg));
        }
        let cols: Vec<usize> = order.iter().map(|s| idx[s.as_str()]).collect();
        let rows: Vec<usize> = (0..self.n_lines()).collect();
        Ok(MarkerMatrix {
            line_ids: self.line_ids.clone(),
            marker_ids: order.to_vec(),
            values: self.submatrix(&rows, &cols),
            coding: self.coding,
            imputed_fraction: cols.iter().map(|&c| self.imputed_fraction[c]).collect(),
            dropped_markers: self.dropped_markers.clone(),
        })
    }

    pub fn write(&self, path: &Path, format: TableFormat) -> Result<()> {
        let d = format.delimiter();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            write!(w, "line_id")?;
            for m in &self.marker_ids {
                write!(w, "{d}{m}")?;
            }
            writeln!(w)?;
            for (i, line) in self.line_ids.iter().enumerate() {
                write!(w, "{line}")?;
                for j in 0..self.n_markers() {
                    write!(w, "{d}{}", self.values[(i, j)])?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

fn check_unique(ids: &[String], err: fn(String) -> Error) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(err(id.clone()));
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn trim_eol(line: &str) -> &str {
    line.trim_end_matches(['\n', '\r'])
}

/// Read a genotype table: header `line_id, marker...`, one line per row.
///
/// Missing calls (matching `missing_code` or empty) are imputed with the mean
/// of the observed calls at that marker. A marker with no observed call is
/// dropped with a warning; if more than half of the markers are dropped the
/// file is rejected.
pub fn parse_markers(path: &Path, opts: &ParseOptions) -> Result<MarkerMatrix> {
    let delim = opts.format.delimiter();

    // First pass only counts rows so the column-major buffer can be filled in
    // place without a second full-size copy.
    let mut n_rows = 0usize;
    {
        let mut r = open(path)?;
        let mut buf = String::new();
        let mut first = true;
        loop {
            buf.clear();
            let read = r.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
            if read == 0 {
                break;
            }
            if first {
                first = false;
                continue;
            }
            if !trim_eol(&buf).is_empty() {
                n_rows += 1;
            }
        }
    }

    let mut r = open(path)?;
    let mut buf = String::new();
    r.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = trim_eol(&buf)
        .split(delim)
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if header.is_empty() {
        return Err(Error::format(path, "header row has no marker ids"));
    }
    check_unique(&header, Error::DuplicateMarkerId)?;
    let m = header.len();

    let mut values = DMatrix::<f64>::zeros(n_rows, m);
    let mut line_ids = Vec::with_capacity(n_rows);
    let mut seen_lines = HashSet::with_capacity(n_rows);
    let mut row = 0usize;
    loop {
        buf.clear();
        let read = r.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            break;
        }
        let line = trim_eol(&buf);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(delim);
        let id = fields.next().unwrap_or("").trim().to_string();
        if !seen_lines.insert(id.clone()) {
            return Err(Error::DuplicateLineId(id));
        }
        let mut j = 0usize;
        for field in fields {
            if j >= m {
                return Err(Error::format(
                    path,
                    format!("line `{id}` has more than {m} genotype fields"),
                ));
            }
            let f = field.trim();
            let v = if f.is_empty() || f == opts.missing_code {
                f64::NAN
            } else {
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(Error::NonNumericGenotype {
                            line: id.clone(),
                            marker: header[j].clone(),
                            value: f.to_string(),
                        })
                    }
                }
            };
            values[(row, j)] = v;
            j += 1;
        }
        if j != m {
            return Err(Error::format(
                path,
                format!("line `{id}` has {j} genotype fields, expected {m}"),
            ));
        }
        line_ids.push(id);
        row += 1;
    }

    let (values, marker_ids, imputed_fraction, dropped) = impute_mean(values, header)?;
    Ok(MarkerMatrix {
        line_ids,
        marker_ids,
        values,
        coding: opts.coding,
        imputed_fraction,
        dropped_markers: dropped,
    })
}

/// Mean-impute NaN entries column by column; drop all-missing columns.
fn impute_mean(
    mut values: DMatrix<f64>,
    marker_ids: Vec<String>,
) -> Result<(DMatrix<f64>, Vec<String>, Vec<f64>, Vec<String>)> {
    let n = values.nrows();
    let m = values.ncols();
    let mut fraction = Vec::with_capacity(m);
    let mut drop = Vec::new();
    for j in 0..m {
        let mut col = values.column_mut(j);
        let (mut sum, mut count) = (0.0, 0usize);
        for v in col.iter() {
            if !v.is_nan() {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            drop.push(j);
            fraction.push(1.0);
            continue;
        }
        let mean = sum / count as f64;
        for v in col.iter_mut() {
            if v.is_nan() {
                *v = mean;
            }
        }
        fraction.push((n - count) as f64 / n.max(1) as f64);
    }
    if drop.is_empty() {
        return Ok((values, marker_ids, fraction, Vec::new()));
    }
    if 2 * drop.len() > m {
        return Err(Error::AllMissingMarker {
            dropped: drop.len(),
            total: m,
        });
    }
    let dropped: Vec<String> = drop.iter().map(|&j| marker_ids[j].clone()).collect();
    warn!(
        "dropping {} marker(s) with no observed genotype: {}",
        dropped.len(),
        dropped.join(",")
    );
    let keep: Vec<usize> = (0..m).filter(|j| !drop.contains(j)).collect();
    let values = DMatrix::from_fn(n, keep.len(), |i, k| values[(i, keep[k])]);
    let ids = keep.iter().map(|&j| marker_ids[j].clone()).collect();
    let fraction = keep.iter().map(|&j| fraction[j]).collect();
    Ok((values, ids, fraction, dropped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapUnit {
    CentiMorgan,
    BasePair,
}

impl std::fmt::Display for MapUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapUnit::CentiMorgan => "cM",
            MapUnit::BasePair => "bp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    pub marker_id: String,
    pub chromosome: String,
    pub position: f64,
    pub unit: MapUnit,
}

/// Marker positions, kept sorted by (chromosome, position, marker id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneticMap {
    pub entries: Vec<MapEntry>,
}

/// Natural chromosome order: numeric names by value ("2" < "10"), then
/// names with a numeric prefix ("1A" < "1B" < "2A"), then the rest
/// alphabetically ("X" < "Y").
pub fn chromosome_cmp(a: &str, b: &str) -> Ordering {
    fn key(s: &str) -> (u8, u64, &str) {
        let s2 = s.strip_prefix("chr").unwrap_or(s);
        let digits = s2.bytes().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            (1, 0, s2)
        } else {
            let n = s2[..digits].parse().unwrap_or(u64::MAX);
            (0, n, &s2[digits..])
        }
    }
    key(a).cmp(&key(b)).then_with(|| a.cmp(b))
}

impl GeneticMap {
    pub fn new(mut entries: Vec<MapEntry>) -> Result<Self> {
        check_unique(
            &entries.iter().map(|e| e.marker_id.clone()).collect::<Vec<_>>(),
            Error::DuplicateMarkerId,
        )?;
        for e in &entries {
            if !(e.position >= 0.0) {
                return Err(Error::NegativePosition {
                    marker: e.marker_id.clone(),
                    position: e.position,
                });
            }
        }
        entries.sort_by(|a, b| {
            chromosome_cmp(&a.chromosome, &b.chromosome)
                .then(a.position.total_cmp(&b.position))
                .then_with(|| a.marker_id.cmp(&b.marker_id))
        });
        Ok(GeneticMap { entries })
    }

    pub fn get(&self, marker: &str) -> Option<&MapEntry> {
        self.entries.iter().find(|e| e.marker_id == marker)
    }

    /// Chromosome names in map order.
    pub fn chromosomes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if out.last() != Some(&e.chromosome.as_str()) {
                out.push(&e.chromosome);
            }
        }
        out
    }

    /// Markers in the matrix that have no map entry.
    pub fn unmapped(&self, markers: &MarkerMatrix) -> Vec<String> {
        let mapped: HashSet<&str> = self.entries.iter().map(|e| e.marker_id.as_str()).collect();
        markers
            .marker_ids
            .iter()
            .filter(|m| !mapped.contains(m.as_str()))
            .cloned()
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "marker\tchromosome\tposition\tunit")?;
            for e in &self.entries {
                writeln!(w, "{}\t{}\t{}\t{}", e.marker_id, e.chromosome, e.position, e.unit)?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Read a map table with columns `marker, chromosome, position[, unit]`.
/// A header row is recognised by a non-numeric position field.
pub fn parse_map(path: &Path, format: TableFormat) -> Result<GeneticMap> {
    let delim = format.delimiter();
    let r = open(path)?;
    let mut entries = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = trim_eol(&line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(delim).map(|s| s.trim()).collect();
        if f.len() < 3 || f.len() > 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 or 4 columns, found {}", ln + 1, f.len()),
            ));
        }
        let position = match f[2].parse::<f64>() {
            Ok(p) => p,
            Err(_) if ln == 0 => continue,
            Err(_) => {
                return Err(Error::format(
                    path,
                    format!("line {}: bad position `{}`", ln + 1, f[2]),
                ))
            }
        };
        let unit = match f.get(3).copied() {
            None | Some("") => MapUnit::CentiMorgan,
            Some(u) if u.eq_ignore_ascii_case("cm") => MapUnit::CentiMorgan,
            Some(u) if u.eq_ignore_ascii_case("bp") => MapUnit::BasePair,
            Some(u) => return Err(Error::UnknownUnit(u.to_string())),
        };
        entries.push(MapEntry {
            marker_id: f[0].to_string(),
            chromosome: f[1].to_string(),
            position,
            unit,
        });
    }
    GeneticMap::new(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenoRecord {
    pub line_id: String,
    pub trait_id: String,
    pub value: f64,
    pub env_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhenotypeTable {
    pub records: Vec<PhenoRecord>,
    pub trait_ids: Vec<String>,
}

impl PhenotypeTable {
    pub fn new(records: Vec<PhenoRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut trait_ids: Vec<String> = Vec::new();
        for r in &records {
            if !r.value.is_finite() {
                return Err(Error::NonFinitePhenotype(r.line_id.clone()));
            }
            if !seen.insert((&r.line_id, &r.trait_id, &r.env_id)) {
                return Err(Error::DuplicatePhenotype {
                    line: r.line_id.clone(),
                    trait_id: r.trait_id.clone(),
                });
            }
            if !trait_ids.contains(&r.trait_id) {
                trait_ids.push(r.trait_id.clone());
            }
        }
        Ok(PhenotypeTable { records, trait_ids })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let with_env = self.records.iter().any(|r| r.env_id.is_some());
        let mut emit = || -> std::io::Result<()> {
            if with_env {
                writeln!(w, "line_id\ttrait_id\tvalue\tenv_id")?;
            } else {
                writeln!(w, "line_id\ttrait_id\tvalue")?;
            }
            for r in &self.records {
                write!(w, "{}\t{}\t{}", r.line_id, r.trait_id, r.value)?;
                if with_env {
                    write!(w, "\t{}", r.env_id.as_deref().unwrap_or(""))?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Read a long-format phenotype table with header
/// `line_id, trait_id, value[, env_id]`. Records whose value is the missing
/// code are skipped.
pub fn parse_phenotypes(path: &Path, format: TableFormat, missing_code: &str) -> Result<PhenotypeTable> {
    let delim = format.delimiter();
    let mut lines = open(path)?.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty phenotype file")),
    };
    let cols: Vec<String> = trim_eol(&header).split(delim).map(|s| s.trim().to_string()).collect();
    let find = |name: &str| cols.iter().position(|c| c == name);
    let (li, ti, vi) = match (find("line_id"), find("trait_id"), find("value")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::format(
                path,
                "phenotype header must contain line_id, trait_id and value",
            ))
        }
    };
    let ei = find("env_id");
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = trim_eol(&line);
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(delim).map(|s| s.trim()).collect();
        let get = |i: usize| {
            f.get(i)
                .copied()
                .ok_or_else(|| Error::format(path, format!("line {}: too few columns", ln + 2)))
        };
        let raw = get(vi)?;
        if raw.is_empty() || raw == missing_code {
            continue;
        }
        let value: f64 = raw
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad value `{raw}`", ln + 2)))?;
        records.push(PhenoRecord {
            line_id: get(li)?.to_string(),
            trait_id: get(ti)?.to_string(),
            value,
            env_id: match ei {
                Some(i) => f.get(i).filter(|s| !s.is_empty()).map(|s| s.to_string()),
                None => None,
            },
        });
    }
    PhenotypeTable::new(records)
}

/// Covariates keyed by line (and optionally environment).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedEffectTable {
    pub names: Vec<String>,
    pub rows: HashMap<(String, Option<String>), Vec<f64>>,
}

impl FixedEffectTable {
    pub fn n_covariates(&self) -> usize {
        self.names.len()
    }

    fn lookup(&self, line: &str, env: &Option<String>) -> Option<&Vec<f64>> {
        self.rows
            .get(&(line.to_string(), env.clone()))
            .or_else(|| self.rows.get(&(line.to_string(), None)))
    }

    /// Covariate design for the aligned observations; errors unless
    /// `[1, X]` has full column rank.
    pub fn design(&self, obs: &[Observation], line_ids: &[String]) -> Result<DMatrix<f64>> {
        let p = self.names.len();
        let mut x = DMatrix::zeros(obs.len(), p);
        for (i, o) in obs.iter().enumerate() {
            let line = &line_ids[o.line];
            let row = self
                .lookup(line, &o.env_id)
                .ok_or_else(|| Error::MissingCovariate(line.clone()))?;
            for j in 0..p {
                x[(i, j)] = row[j];
            }
        }
        let with_intercept = crate::linalg::prepend_intercept(&x);
        if crate::linalg::column_rank(&with_intercept) < p + 1 {
            return Err(Error::RankDeficientCovariates);
        }
        Ok(x)
    }

    /// Covariates for a list of lines (no environments), if all present.
    pub fn for_lines(&self, line_ids: &[String]) -> Option<DMatrix<f64>> {
        let p = self.names.len();
        let mut x = DMatrix::zeros(line_ids.len(), p);
        for (i, l) in line_ids.iter().enumerate() {
            let row = self.lookup(l, &None)?;
            for j in 0..p {
                x[(i, j)] = row[j];
            }
        }
        Some(x)
    }
}

/// Header `line_id[, env_id], name...`.
pub fn parse_covariates(path: &Path, format: TableFormat) -> Result<FixedEffectTable> {
    let delim = format.delimiter();
    let mut lines = open(path)?.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty covariate file")),
    };
    let cols: Vec<String> = trim_eol(&header).split(delim).map(|s| s.trim().to_string()).collect();
    let has_env = cols.get(1).map(|c| c == "env_id").unwrap_or(false);
    let first = if has_env { 2 } else { 1 };
    let names: Vec<String> = cols[first.min(cols.len())..].to_vec();
    let mut rows = HashMap::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = trim_eol(&line);
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(delim).map(|s| s.trim()).collect();
        if f.len() != cols.len() {
            return Err(Error::format(path, format!("line {}: wrong column count", ln + 2)));
        }
        let env = if has_env && !f[1].is_empty() {
            Some(f[1].to_string())
        } else {
            None
        };
        let vals = f[first..]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::format(path, format!("line {}: bad covariate `{v}`", ln + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.insert((f[0].to_string(), env), vals);
    }
    Ok(FixedEffectTable { names, rows })
}

/// Observation-to-line incidence: each observation selects exactly one line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incidence {
    /// Column (line index) for every observation.
    pub cols: Vec<usize>,
    /// Number of lines (columns of Z).
    pub q: usize,
}

impl Incidence {
    pub fn identity(q: usize) -> Self {
        Incidence {
            cols: (0..q).collect(),
            q,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.cols.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.cols.len(), self.q);
        for (i, &c) in self.cols.iter().enumerate() {
            z[(i, c)] = 1.0;
        }
        z
    }

    /// `Z v` for a line-indexed vector.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.cols.len(), self.cols.iter().map(|&c| v[c]))
    }

    /// `Z M` for a line-indexed matrix.
    pub fn apply_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.cols.len(), m.ncols(), |i, j| m[(self.cols[i], j)])
    }

    /// `Z^T v` for an observation-indexed vector.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.q);
        for (i, &c) in self.cols.iter().enumerate() {
            out[c] += v[i];
        }
        out
    }

    /// `Z K Z^T`.
    pub fn sandwich(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.cols.len();
        DMatrix::from_fn(n, n, |i, j| k[(self.cols[i], self.cols[j])])
    }

    /// True when observations are exactly the lines in order.
    pub fn is_identity(&self) -> bool {
        self.cols.len() == self.q && self.cols.iter().enumerate().all(|(i, &c)| i == c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub line: usize,
    pub env_id: Option<String>,
}

/// Phenotypes of one trait lined up against the genotyped lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub y: DVector<f64>,
    pub z: Incidence,
    pub obs: Vec<Observation>,
    /// Genotyped lines (columns of Z), in marker-matrix order.
    pub line_ids: Vec<String>,
    /// Phenotyped lines without genotypes.
    pub dropped_ungenotyped: usize,
}

impl Alignment {
    /// Lines that have at least one observation.
    pub fn phenotyped_lines(&self) -> Vec<usize> {
        let mut seen = vec![false; self.z.q];
        for &c in &self.z.cols {
            seen[c] = true;
        }
        (0..self.z.q).filter(|&i| seen[i]).collect()
    }
}

/// Match phenotype records of one trait to genotyped lines.
pub fn align(markers: &MarkerMatrix, phenos: &PhenotypeTable, trait_id: &str) -> Result<Alignment> {
    let idx = markers.line_index();
    let mut y = Vec::new();
    let mut obs = Vec::new();
    let mut dropped = HashSet::new();
    for r in phenos.records.iter().filter(|r| r.trait_id == trait_id) {
        match idx.get(r.line_id.as_str()) {
            Some(&c) => {
                y.push(r.value);
                obs.push(Observation {
                    line: c,
                    env_id: r.env_id.clone(),
                });
            }
            None => {
                dropped.insert(r.line_id.clone());
            }
        }
    }
    if !dropped.is_empty() {
        warn!(
            "{} phenotyped line(s) have no genotypes and were dropped",
            dropped.len()
        );
    }
    let distinct: HashSet<usize> = obs.iter().map(|o| o.line).collect();
    if distinct.len() < 2 {
        return Err(Error::NoOverlap(trait_id.to_string()));
    }
    Ok(Alignment {
        y: DVector::from_vec(y),
        z: Incidence {
            cols: obs.iter().map(|o| o.line).collect(),
            q: markers.n_lines(),
        },
        obs,
        line_ids: markers.line_ids.clone(),
        dropped_ungenotyped: dropped.len(),
    })
}
