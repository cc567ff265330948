//! Model bundle: a directory of plain TSV files plus a manifest of sha256
//! checksums, enough to predict new lines without the original inputs.
//!
//! | file | content |
//! |---|---|
//! | `manifest.tsv` | format version, seed, config hash, input and file checksums |
//! | `config.txt` | resolved configuration |
//! | `markers.tsv` | training genotypes (after imputation) |
//! | `regions.tsv` | region hierarchy |
//! | `fits.tsv` | per-region variance components, kernel and column statistics |
//! | `beta_star.tsv` | per-region fixed-effect estimates |
//! | `eblup.tsv`, `weights.tsv` | per-region training EBLUPs and prediction weights |
//! | `pcs.tsv` | out-of-region principal component loadings |
//! | `gebv.tsv` | standardized training local values |
//! | `combiner.tsv` | intercept, penalties, region weights, covariate effects |
//! | `importance.tsv` | ranked importance scores |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use super::config::{hex, RunConfig};
use crate::combiner::{importance_scores, CombinerModel};
use crate::error::{Error, Result};
use crate::ingest::{parse_markers, Coding, MarkerMatrix, ParseOptions, TableFormat};
use crate::kernel::{Bandwidth, KernelKind, KernelSpec};
use crate::local_gebv::{LocalGebvMatrix, RegionFit};
use crate::partition::{read_region_file, RegionHierarchy};
use crate::pca::PcBasis;
use crate::reml::{FitStatus, FittedRegionModel, PredictionState};

pub const FORMAT_VERSION: &str = "1";

const FILES: &[&str] = &[
    "config.txt",
    "markers.tsv",
    "regions.tsv",
    "fits.tsv",
    "beta_star.tsv",
    "eblup.tsv",
    "weights.tsv",
    "pcs.tsv",
    "gebv.tsv",
    "combiner.tsv",
    "importance.tsv",
];

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub trait_id: String,
    /// Training lines only; region fits index its columns.
    pub train_markers: MarkerMatrix,
    pub hierarchy: RegionHierarchy,
    pub fits: Vec<RegionFit>,
    pub gebv: LocalGebvMatrix,
    pub combiner: CombinerModel,
    pub covariate_names: Vec<String>,
    /// `(name, sha256)` of the input files the model was fitted from.
    pub inputs: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex(&h.finalize()))
}

fn write(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| x.to_string())
}

fn wide(line_ids: &[String], region_ids: &[String], col: impl Fn(usize) -> DVector<f64>) -> String {
    let mut s = String::from("line_id");
    for r in region_ids {
        s.push('\t');
        s.push_str(r);
    }
    s.push('\n');
    let cols: Vec<DVector<f64>> = (0..region_ids.len()).map(col).collect();
    for (i, l) in line_ids.iter().enumerate() {
        s.push_str(l);
        for c in &cols {
            let _ = write!(s, "\t{}", c[i]);
        }
        s.push('\n');
    }
    s
}

/// Importance table `(region_id, chromosome, start_pos, end_pos, importance)`,
/// ranked.
pub fn importance_table(model: &CombinerModel, h: &RegionHierarchy) -> String {
    let mut s = String::from("region_id\tchromosome\tstart_pos\tend_pos\timportance\n");
    for (id, score) in importance_scores(model) {
        let span = h.get(&id).and_then(|r| r.span.as_ref());
        match span {
            Some(sp) => {
                let _ = writeln!(s, "{id}\t{}\t{}\t{}\t{score}", sp.chromosome, sp.start, sp.end);
            }
            None => {
                let _ = writeln!(s, "{id}\t.\tNA\tNA\t{score}");
            }
        }
    }
    s
}

impl ModelBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.txt"), &self.config.dump())?;
        self.train_markers.write(&dir.join("markers.tsv"), TableFormat::Tsv)?;
        self.hierarchy.write_region_file(&dir.join("regions.tsv"), &self.train_markers)?;

        let mut fits = String::from(
            "region_id\tfailed\tstatus\tsigma2_g\tsigma2_e\tdelta\treml_loglik\tnull_loglik\tkernel\tc\td\tbandwidth\tnorm_constant\tscale\tcol_mean\tcol_sd\tflagged\n",
        );
        let mut betas = String::from("region_id\tindex\tvalue\n");
        let mut pcs = String::from("region_id\tmarker_id\tmean\tloadings\n");
        for (j, f) in self.fits.iter().enumerate() {
            let k = &f.kernel;
            let kernel_cols = format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                k.kind_name(),
                k.c,
                k.d,
                opt(f.bandwidth.or(match k.h {
                    Bandwidth::Fixed(h) => Some(h),
                    Bandwidth::Auto => None,
                })),
                k.include_gaussian_norm_constant,
                f.scale
            );
            let stats = format!("{}\t{}\t{}", self.gebv.col_means[j], self.gebv.col_sds[j], self.gebv.flagged[j]);
            match &f.model {
                Some(m) => {
                    let _ = writeln!(
                        fits,
                        "{}\tfalse\t{}\t{}\t{}\t{}\t{}\t{}\t{kernel_cols}\t{stats}",
                        f.region_id,
                        m.status.as_str(),
                        m.sigma2_g,
                        m.sigma2_e,
                        opt(m.delta),
                        m.reml_loglik,
                        m.null_loglik
                    );
                    for (i, b) in m.beta_star.iter().enumerate() {
                        let _ = writeln!(betas, "{}\t{i}\t{b}", f.region_id);
                    }
                }
                None => {
                    let _ = writeln!(fits, "{}\ttrue\tNA\tNA\tNA\tNA\tNA\tNA\t{kernel_cols}\t{stats}", f.region_id);
                }
            }
            for (row, &m) in f.pcs.marker_indices.iter().enumerate() {
                if f.pcs.r() == 0 {
                    break;
                }
                let loads: Vec<String> = f.pcs.loadings.row(row).iter().map(|v| v.to_string()).collect();
                let _ = writeln!(
                    pcs,
                    "{}\t{}\t{}\t{}",
                    f.region_id,
                    self.train_markers.marker_ids[m],
                    f.pcs.means[row],
                    loads.join(",")
                );
            }
        }
        write(&dir.join("fits.tsv"), &fits)?;
        write(&dir.join("beta_star.tsv"), &betas)?;
        write(&dir.join("pcs.tsv"), &pcs)?;

        let q = self.train_markers.n_lines();
        let ids = &self.gebv.region_ids;
        let lines = &self.train_markers.line_ids;
        let model_col = |j: usize, w: bool| match &self.fits[j].model {
            Some(m) if w => m.solver_state.weights.clone(),
            Some(m) => m.ebluphat.clone(),
            None => DVector::zeros(q),
        };
        write(&dir.join("eblup.tsv"), &wide(lines, ids, |j| model_col(j, false)))?;
        write(&dir.join("weights.tsv"), &wide(lines, ids, |j| model_col(j, true)))?;
        write(
            &dir.join("gebv.tsv"),
            &wide(&self.gebv.line_ids, ids, |j| self.gebv.values.column(j).into_owned()),
        )?;

        let c = &self.combiner;
        let mut comb = String::from("kind\tname\tvalue\n");
        let _ = writeln!(comb, "beta0\t.\t{}", c.beta0);
        let _ = writeln!(comb, "lambda1\t.\t{}", c.lambda1);
        let _ = writeln!(comb, "lambda2\t.\t{}", c.lambda2);
        for (id, a) in c.region_ids.iter().zip(c.alpha.iter()) {
            let _ = writeln!(comb, "alpha\t{id}\t{a}");
        }
        for (name, b) in self.covariate_names.iter().zip(c.beta.iter()) {
            let _ = writeln!(comb, "beta\t{name}\t{b}");
        }
        write(&dir.join("combiner.tsv"), &comb)?;
        write(&dir.join("importance.tsv"), &importance_table(c, &self.hierarchy))?;

        let mut manifest = String::from("key\tvalue\n");
        let _ = writeln!(manifest, "format_version\t{FORMAT_VERSION}");
        let _ = writeln!(manifest, "library_version\t{}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(manifest, "trait\t{}", self.trait_id);
        let _ = writeln!(manifest, "seed\t{}", self.config.get("seed"));
        let _ = writeln!(manifest, "config_hash\t{}", self.config.hash());
        let _ = writeln!(manifest, "coding\t{}", self.train_markers.coding);
        for (name, sum) in &self.inputs {
            let _ = writeln!(manifest, "input:{name}\t{sum}");
        }
        for f in FILES {
            let _ = writeln!(manifest, "file:{f}\t{}", sha256_file(&dir.join(f))?);
        }
        write(&dir.join("manifest.tsv"), &manifest)
    }

    pub fn read(dir: &Path) -> Result<ModelBundle> {
        let manifest: HashMap<String, String> = rows(&dir.join("manifest.tsv"))?
            .into_iter()
            .map(|mut r| (std::mem::take(&mut r[0]), std::mem::take(&mut r[1])))
            .collect();
        let get = |k: &str| {
            manifest
                .get(k)
                .cloned()
                .ok_or_else(|| Error::ManifestMismatch(format!("manifest lacks `{k}`")))
        };
        if get("format_version")? != FORMAT_VERSION {
            return Err(Error::ManifestMismatch(format!(
                "bundle format {} is not supported",
                get("format_version")?
            )));
        }
        for f in FILES {
            let want = get(&format!("file:{f}"))?;
            if sha256_file(&dir.join(f))? != want {
                return Err(Error::ManifestMismatch(format!("checksum of {f} does not match")));
            }
        }
        let inputs = manifest
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("input:").map(|n| (n.to_string(), v.clone())))
            .collect();
        let config = RunConfig::from_file(&dir.join("config.txt"))?;
        let coding: Coding = get("coding")?.parse()?;
        let train_markers = parse_markers(
            &dir.join("markers.tsv"),
            &ParseOptions {
                format: TableFormat::Tsv,
                missing_code: "NA".into(),
                coding,
            },
        )?;
        let mut hierarchy = read_region_file(&dir.join("regions.tsv"), &train_markers)?;

        // spans come back from the importance table
        let mut spans = HashMap::new();
        for r in rows(&dir.join("importance.tsv"))? {
            if r[1] != "." {
                spans.insert(r[0].clone(), (r[1].clone(), num(&r[2])?, num(&r[3])?));
            }
        }
        hierarchy.set_spans(&spans);

        let marker_idx = train_markers.marker_index();
        let q = train_markers.n_lines();
        let eblup = read_wide(&dir.join("eblup.tsv"), q)?;
        let weights = read_wide(&dir.join("weights.tsv"), q)?;
        let gebv_vals = read_wide(&dir.join("gebv.tsv"), q)?;

        let mut betas: HashMap<String, Vec<f64>> = HashMap::new();
        for r in rows(&dir.join("beta_star.tsv"))? {
            betas.entry(r[0].clone()).or_default().push(num(&r[2])?);
        }
        let mut pc_rows: HashMap<String, Vec<(usize, f64, Vec<f64>)>> = HashMap::new();
        for r in rows(&dir.join("pcs.tsv"))? {
            let m = *marker_idx
                .get(r[1].as_str())
                .ok_or_else(|| Error::UnknownMarker(r[1].clone()))?;
            let loads = r[3].split(',').map(num).collect::<Result<Vec<f64>>>()?;
            pc_rows.entry(r[0].clone()).or_default().push((m, num(&r[2])?, loads));
        }

        let mut fits = Vec::new();
        let (mut means, mut sds, mut flagged, mut region_ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (j, r) in rows(&dir.join("fits.tsv"))?.into_iter().enumerate() {
            let id = r[0].clone();
            let kind = match r[8].as_str() {
                "linear" => KernelKind::Linear,
                "poly" => KernelKind::Polynomial,
                "gaussian" => KernelKind::Gaussian,
                other => return Err(Error::ManifestMismatch(format!("unknown kernel `{other}` in fits.tsv"))),
            };
            let bandwidth = opt_num(&r[11])?;
            let kernel = KernelSpec {
                kind,
                c: num(&r[9])?,
                d: r[10].parse().map_err(|_| bad(&r[10]))?,
                h: bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed),
                include_gaussian_norm_constant: r[12] == "true",
            };
            let model = if r[1] == "true" {
                None
            } else {
                Some(FittedRegionModel {
                    region_id: id.clone(),
                    sigma2_g: num(&r[3])?,
                    sigma2_e: num(&r[4])?,
                    delta: opt_num(&r[5])?,
                    beta_star: DVector::from_vec(betas.remove(&id).unwrap_or_default()),
                    reml_loglik: num(&r[6])?,
                    null_loglik: num(&r[7])?,
                    status: FitStatus::parse(&r[2]).ok_or_else(|| bad(&r[2]))?,
                    ebluphat: eblup.1.column(j).into_owned(),
                    solver_state: PredictionState {
                        weights: weights.1.column(j).into_owned(),
                    },
                })
            };
            let region = hierarchy.region(&id)?;
            let pcs = match pc_rows.remove(&id) {
                Some(list) => {
                    let r_ = list[0].2.len();
                    PcBasis {
                        marker_indices: list.iter().map(|x| x.0).collect(),
                        means: list.iter().map(|x| x.1).collect(),
                        loadings: DMatrix::from_fn(list.len(), r_, |i, k| list[i].2[k]),
                        singular_values: Vec::new(),
                    }
                }
                None => PcBasis::empty(),
            };
            fits.push(RegionFit {
                region_id: id.clone(),
                marker_indices: region.marker_indices.clone(),
                model,
                kernel,
                bandwidth,
                scale: num(&r[13])?,
                pcs,
            });
            means.push(num(&r[14])?);
            sds.push(num(&r[15])?);
            flagged.push(r[16] == "true");
            region_ids.push(id);
        }

        let mut combiner = CombinerModel {
            beta0: 0.0,
            alpha: DVector::zeros(0),
            beta: DVector::zeros(0),
            lambda1: 0.0,
            lambda2: 0.0,
            importance: Vec::new(),
            region_ids: Vec::new(),
            cv_path: Vec::new(),
        };
        let (mut alpha, mut beta, mut covariate_names) = (Vec::new(), Vec::new(), Vec::new());
        for r in rows(&dir.join("combiner.tsv"))? {
            let v = num(&r[2])?;
            match r[0].as_str() {
                "beta0" => combiner.beta0 = v,
                "lambda1" => combiner.lambda1 = v,
                "lambda2" => combiner.lambda2 = v,
                "alpha" => {
                    combiner.region_ids.push(r[1].clone());
                    alpha.push(v);
                }
                "beta" => {
                    covariate_names.push(r[1].clone());
                    beta.push(v);
                }
                other => return Err(Error::ManifestMismatch(format!("unknown combiner entry `{other}`"))),
            }
        }
        combiner.importance = alpha.iter().map(|a: &f64| a.abs()).collect();
        combiner.alpha = DVector::from_vec(alpha);
        combiner.beta = DVector::from_vec(beta);

        Ok(ModelBundle {
            config,
            trait_id: get("trait")?,
            gebv: LocalGebvMatrix {
                values: gebv_vals.1,
                region_ids,
                col_means: means,
                col_sds: sds,
                flagged,
                line_ids: gebv_vals.0,
            },
            train_markers,
            hierarchy,
            fits,
            combiner,
            covariate_names,
            inputs,
        })
    }
}

fn bad(s: &str) -> Error {
    Error::ManifestMismatch(format!("unreadable value `{s}` in bundle"))
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| bad(s))
}

fn opt_num(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

/// Data rows of a TSV file (header skipped).
fn rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let width = lines.next().map_or(0, |h| h.split('\t').count());
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<String> = l.split('\t').map(str::to_string).collect();
            if f.len() != width {
                return Err(Error::format(path, format!("expected {width} fields, found {}", f.len())));
            }
            Ok(f)
        })
        .collect()
}

fn read_wide(path: &Path, q: usize) -> Result<(Vec<String>, DMatrix<f64>)> {
    let r = rows(path)?;
    if r.len() != q {
        return Err(Error::format(path, format!("expected {q} lines, found {}", r.len())));
    }
    let k = r.first().map_or(0, |x| x.len() - 1);
    let mut m = DMatrix::zeros(q, k);
    for (i, row) in r.iter().enumerate() {
        for j in 0..k {
            m[(i, j)] = num(&row[j + 1])?;
        }
    }
    Ok((r.into_iter().map(|mut x| std::mem::take(&mut x[0])).collect(), m))
}
