//! Flat `key = value` run configuration.
//!
//! Every option has a default; a file may override any subset and command
//! line flags override the file. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::combiner::{CombinerOptions, Penalty};
use crate::error::{Error, Result};
use crate::ingest::{Coding, ParseOptions, TableFormat};
use crate::kernel::{Bandwidth, KernelKind, KernelSpec};
use crate::local_gebv::{LocalGebvOptions, PcScope};
use crate::partition::SplitRule;
use crate::testing::TestPlan;

/// `(key, default, description)`. An empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("markers", "", "genotype table, lines by markers"),
    ("map", "", "genetic map: marker_id, chromosome, position[, unit]"),
    ("pheno", "", "phenotypes: line_id, trait_id, value[, env_id]"),
    ("covariates", "", "optional fixed effects: line_id[, env_id], names..."),
    ("trait", "", "trait to analyse; may be empty when the table holds one trait"),
    ("missing_code", "NA", "token for a missing genotype or phenotype"),
    ("coding", "012", "genotype coding: 01, 012 or -11"),
    ("regions", "", "explicit region file replacing the map-based partition"),
    ("depth", "2", "hierarchy levels below the genome"),
    ("splits", "2", "pieces per region at each level below the chromosomes"),
    ("split_rule", "equal-count", "equal-count or equal-length"),
    ("kernel", "gaussian", "local kernel: linear, poly or gaussian"),
    ("poly_c", "1", "polynomial kernel offset"),
    ("poly_d", "2", "polynomial kernel degree"),
    ("bandwidth", "auto", "Gaussian bandwidth h, or auto (mean squared distance)"),
    ("gaussian_norm_constant", "false", "multiply the Gaussian kernel by 1/sqrt(2 pi h)"),
    ("n_pcs", "5", "out-of-region principal components used as fixed effects"),
    ("pc_scope", "per-region", "per-region or none"),
    ("all_levels", "false", "use every hierarchy region as a column, not only leaves"),
    ("flag_tol", "1e-6", "relative sd below which a local-value column counts as constant"),
    ("lambda1", "auto", "L1 penalty, or auto (10-fold CV)"),
    ("lambda2", "auto", "L2 penalty, or auto (0.1 lambda1 when regions outnumber observations)"),
    ("folds", "10", "folds for the penalty search"),
    ("alpha", "0.05", "family-wise error level"),
    ("null_sims", "10000", "null simulations per tested region"),
    ("models", "mk,lin,gaus", "models compared by cv"),
    ("train_frac", "0.9", "fraction of lines used for training in cv"),
    ("replicates", "30", "cv replicates"),
    ("preset", "mixed", "simulation scenario"),
    ("sim_lines", "", "override the preset's number of lines"),
    ("seed", "1", "master random seed"),
    ("out", "", "output file or directory"),
    ("model", "", "model bundle directory for predict"),
    ("threads", "0", "worker threads; 0 uses every core"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

/// Short spellings accepted in files and on the command line.
pub const ALIASES: &[(&str, &str)] = &[("rule", "split_rule")];

fn canonical_key(key: &str) -> Result<&'static str> {
    let mut k = key.trim().replace('-', "_");
    if let Some((_, full)) = ALIASES.iter().find(|(a, _)| *a == k) {
        k = full.to_string();
    }
    KEYS.iter()
        .find(|(name, _, _)| *name == k)
        .map(|(name, _, _)| *name)
        .ok_or_else(|| Error::Config(format!("unknown key `{}`", key.trim())))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = canonical_key(key)?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Apply a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Default configuration with descriptions, parseable by [`apply_text`](Self::apply_text).
    pub fn dump_defaults() -> String {
        let mut s = String::new();
        for (k, v, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {v}");
        }
        s
    }

    /// Current values, one `key = value` per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// sha256 of [`dump`](Self::dump).
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.dump().as_bytes()))
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.get(key).is_empty()
    }

    /// A path that must be present; the error names the key.
    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        if !self.is_set(key) {
            return Err(Error::Config(format!("missing required input `{key}` (--{})", key.replace('_', "-"))));
        }
        Ok(PathBuf::from(self.get(key)))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.is_set(key).then(|| PathBuf::from(self.get(key)))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("bad value `{}` for `{key}`", self.get(key))))
    }

    pub fn parse_options(&self) -> Result<ParseOptions> {
        Ok(ParseOptions {
            format: TableFormat::Tsv,
            missing_code: self.get("missing_code").to_string(),
            coding: self.get("coding").parse::<Coding>()?,
        })
    }

    pub fn split_rule(&self) -> Result<SplitRule> {
        self.get("split_rule").parse()
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let mut spec = match self.get("kernel") {
            "linear" | "lin" => KernelSpec::linear(),
            "poly" | "polynomial" => KernelSpec::polynomial(self.parse("poly_c")?, self.parse("poly_d")?),
            "gaussian" | "gaus" => KernelSpec::gaussian(),
            other => return Err(Error::Config(format!("unknown kernel `{other}`"))),
        };
        if spec.kind == KernelKind::Gaussian {
            if self.get("bandwidth") != "auto" {
                spec.h = Bandwidth::Fixed(self.parse("bandwidth")?);
            }
            spec.include_gaussian_norm_constant = self.parse("gaussian_norm_constant")?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn local_options(&self) -> Result<LocalGebvOptions> {
        Ok(LocalGebvOptions {
            kernel: self.kernel_spec()?,
            n_pcs: self.parse("n_pcs")?,
            pc_scope: self.get("pc_scope").parse::<PcScope>()?,
            all_levels: self.parse("all_levels")?,
            flag_tol: self.parse("flag_tol")?,
        })
    }

    pub fn combiner_options(&self) -> Result<CombinerOptions> {
        Ok(CombinerOptions {
            lambda1: self.get("lambda1").parse::<Penalty>()?,
            lambda2: self.get("lambda2").parse::<Penalty>()?,
            folds: self.parse("folds")?,
            seed: crate::rng::derive_seed(self.parse("seed")?, "combiner"),
        })
    }

    pub fn test_plan(&self) -> Result<TestPlan> {
        let plan = TestPlan {
            alpha: self.parse("alpha")?,
            null_sims: self.parse("null_sims")?,
            seed: crate::rng::derive_seed(self.parse("seed")?, "assoc"),
        };
        plan.validate()?;
        Ok(plan)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
