//! Synthetic mapped populations with known additive and within-region
//! epistatic architecture.
//!
//! Markers are haploid 0/1. Along a chromosome each line copies the previous
//! marker with probability `ld_decay` and otherwise draws a fresh allele, so
//! adjacent markers have correlation `ld_decay` and every marker keeps the
//! chromosome's allele frequency.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ingest::{Coding, GeneticMap, MapEntry, MapUnit, MarkerMatrix, PhenoRecord, PhenotypeTable, TableFormat};
use crate::partition::{build_hierarchy, SplitRule};
use crate::rng::stream;

const MAF_BOUNDS: (f64, f64) = (0.05, 0.95);
const MAX_REDRAWS: usize = 1000;
const MARKER_SPACING_CM: f64 = 1.0;

/// An interacting marker pair planted in one leaf of the default partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    /// Zero-based leaf index in genome order.
    pub leaf: usize,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_lines: usize,
    pub n_chrom: usize,
    pub markers_per_chrom: usize,
    pub ld_decay: f64,
    pub n_additive_qtl: usize,
    /// Standard deviation of additive effects.
    pub additive_sd: f64,
    pub epistatic_pairs: Vec<PairSpec>,
    pub h2: f64,
    pub seed: u64,
    /// Partition that defines the leaves pairs are planted in.
    pub depth: usize,
    pub splits: usize,
    pub trait_id: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_lines: 500,
            n_chrom: 3,
            markers_per_chrom: 60,
            ld_decay: 0.8,
            n_additive_qtl: 10,
            additive_sd: 1.0,
            epistatic_pairs: Vec::new(),
            h2: 0.5,
            seed: 1,
            depth: 2,
            splits: 2,
            trait_id: "trait1".into(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSimConfig(m.into()));
        if !(self.h2 > 0.0 && self.h2 < 1.0) {
            return bad("h2 must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.ld_decay) {
            return bad("ld_decay must lie in [0, 1)");
        }
        if self.n_lines < 2 || self.n_chrom == 0 || self.markers_per_chrom < 2 {
            return bad("need at least 2 lines, 1 chromosome and 2 markers per chromosome");
        }
        if self.n_additive_qtl > self.n_chrom * self.markers_per_chrom {
            return bad("more QTL than markers");
        }
        Ok(())
    }

    /// Number of leaves of the default partition.
    pub fn n_leaves(&self) -> usize {
        self.n_chrom * self.splits.pow(self.depth.saturating_sub(1) as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPair {
    pub leaf_id: String,
    pub markers: (usize, usize),
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// `(marker index, effect)`.
    pub qtl: Vec<(usize, f64)>,
    pub pairs: Vec<PlantedPair>,
    pub g_true: DVector<f64>,
    pub realized_h2: f64,
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub markers: MarkerMatrix,
    pub map: GeneticMap,
    pub phenotypes: PhenotypeTable,
    pub truth: SimTruth,
}

fn chromosome_block(rng: &mut impl Rng, n: usize, m: usize, ld: f64) -> Result<DMatrix<f64>> {
    for _ in 0..MAX_REDRAWS {
        let p: f64 = rng.gen_range(0.3..0.7);
        let mut block = DMatrix::zeros(n, m);
        for i in 0..n {
            let mut prev = rng.gen_bool(p);
            block[(i, 0)] = prev as u8 as f64;
            for j in 1..m {
                if !rng.gen_bool(ld) {
                    prev = rng.gen_bool(p);
                }
                block[(i, j)] = prev as u8 as f64;
            }
        }
        let ok = (0..m).all(|j| {
            let f = block.column(j).sum() / n as f64;
            f > MAF_BOUNDS.0 && f < MAF_BOUNDS.1
        });
        if ok {
            return Ok(block);
        }
    }
    Err(Error::InvalidSimConfig("could not draw markers with allele frequencies in (0.05, 0.95)".into()))
}

pub fn simulate(cfg: &SimConfig) -> Result<SimData> {
    cfg.validate()?;
    if cfg.n_additive_qtl == 0 && cfg.epistatic_pairs.iter().all(|p| p.effect == 0.0) {
        return Err(Error::InfeasibleH2);
    }
    let (n, mc) = (cfg.n_lines, cfg.markers_per_chrom);
    let m = cfg.n_chrom * mc;

    let mut rng = stream(cfg.seed, "sim-markers");
    let mut values = DMatrix::zeros(n, m);
    for c in 0..cfg.n_chrom {
        let block = chromosome_block(&mut rng, n, mc, cfg.ld_decay)?;
        values.columns_mut(c * mc, mc).copy_from(&block);
    }
    let line_ids: Vec<String> = (1..=n).map(|i| format!("line{i:04}")).collect();
    let mut marker_ids = Vec::with_capacity(m);
    let mut entries = Vec::with_capacity(m);
    for c in 1..=cfg.n_chrom {
        for j in 1..=mc {
            let id = format!("c{c}_m{j:03}");
            entries.push(MapEntry {
                marker_id: id.clone(),
                chromosome: c.to_string(),
                position: j as f64 * MARKER_SPACING_CM,
                unit: MapUnit::CentiMorgan,
            });
            marker_ids.push(id);
        }
    }
    let markers = MarkerMatrix::new(line_ids, marker_ids, values, Coding::ZeroOne)?;
    let map = GeneticMap::new(entries)?;

    let mut rng = stream(cfg.seed, "sim-effects");
    let qtl: Vec<(usize, f64)> = {
        let mut idx = sample(&mut rng, m, cfg.n_additive_qtl).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|j| (j, cfg.additive_sd * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let mut pairs = Vec::with_capacity(cfg.epistatic_pairs.len());
    if !cfg.epistatic_pairs.is_empty() {
        let h = build_hierarchy(&map, &markers, cfg.depth, cfg.splits, SplitRule::EqualCount)?;
        let leaves = h.leaves();
        for p in &cfg.epistatic_pairs {
            let leaf = leaves.get(p.leaf).ok_or_else(|| {
                Error::InvalidSimConfig(format!("pair leaf {} but only {} leaves", p.leaf, leaves.len()))
            })?;
            if leaf.marker_indices.len() < 2 {
                return Err(Error::InvalidSimConfig(format!("leaf {} has fewer than 2 markers", leaf.id)));
            }
            let pick = sample(&mut rng, leaf.marker_indices.len(), 2);
            let (a, b) = (leaf.marker_indices[pick.index(0)], leaf.marker_indices[pick.index(1)]);
            pairs.push(PlantedPair {
                leaf_id: leaf.id.clone(),
                markers: (a.min(b), a.max(b)),
                effect: p.effect,
            });
        }
    }

    let x = &markers.values;
    let g = DVector::from_fn(n, |i, _| {
        let add: f64 = qtl.iter().map(|&(j, e)| e * x[(i, j)]).sum();
        let epi: f64 = pairs.iter().map(|p| p.effect * x[(i, p.markers.0)] * x[(i, p.markers.1)]).sum();
        add + epi
    });
    let gv: Vec<f64> = g.iter().copied().collect();
    let var_g = crate::stats::variance(&gv);
    if !(var_g > 0.0) {
        return Err(Error::InfeasibleH2);
    }

    let mut rng = stream(cfg.seed, "sim-noise");
    let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let target = var_g * (1.0 - cfg.h2) / cfg.h2;
    let f = (target / crate::stats::variance(&raw)).sqrt();
    let y: Vec<f64> = gv.iter().zip(&raw).map(|(g, e)| g + f * e).collect();
    let realized_h2 = var_g / crate::stats::variance(&y);

    let phenotypes = PhenotypeTable::new(
        markers
            .line_ids
            .iter()
            .zip(&y)
            .map(|(l, &v)| PhenoRecord {
                line_id: l.clone(),
                trait_id: cfg.trait_id.clone(),
                value: v,
                env_id: None,
            })
            .collect(),
    )?;
    Ok(SimData {
        markers,
        map,
        phenotypes,
        truth: SimTruth {
            qtl,
            pairs,
            g_true: g,
            realized_h2,
        },
    })
}

/// Named scenarios. The planted pair of the epistatic presets sits in the
/// third of six leaves.
pub fn scenario_presets() -> Vec<(&'static str, SimConfig)> {
    let base = SimConfig::default();
    let pair = vec![PairSpec { leaf: 2, effect: 1.0 }];
    vec![
        ("additive-only", base.clone()),
        (
            "local-epistasis",
            SimConfig {
                n_additive_qtl: 0,
                epistatic_pairs: pair.clone(),
                ..base.clone()
            },
        ),
        (
            "mixed",
            SimConfig {
                n_additive_qtl: 5,
                additive_sd: 0.3,
                epistatic_pairs: pair.clone(),
                ..base.clone()
            },
        ),
        (
            "mixed-h2-0.74",
            SimConfig {
                n_additive_qtl: 5,
                additive_sd: 0.3,
                epistatic_pairs: pair.clone(),
                h2: 0.74,
                ..base.clone()
            },
        ),
        (
            "mixed-h2-0.30",
            SimConfig {
                n_additive_qtl: 5,
                additive_sd: 0.3,
                epistatic_pairs: pair,
                h2: 0.30,
                ..base
            },
        ),
    ]
}

pub fn preset(name: &str) -> Result<SimConfig> {
    scenario_presets()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| c)
        .ok_or_else(|| {
            let names: Vec<&str> = scenario_presets().iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset `{name}`; expected one of {}", names.join(", ")))
        })
}

/// Write `markers.tsv`, `map.tsv`, `pheno.tsv` and `truth.tsv` into `dir`.
pub fn write_dataset(data: &SimData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.markers.write(&dir.join("markers.tsv"), TableFormat::Tsv)?;
    data.map.write(&dir.join("map.tsv"))?;
    data.phenotypes.write(&dir.join("pheno.tsv"))?;
    let mut out = String::from("kind\tregion_id\tmarker_a\tmarker_b\teffect\n");
    let ids = &data.markers.marker_ids;
    for &(j, e) in &data.truth.qtl {
        out.push_str(&format!("additive\t.\t{}\t.\t{e}\n", ids[j]));
    }
    for p in &data.truth.pairs {
        out.push_str(&format!(
            "pair\t{}\t{}\t{}\t{}\n",
            p.leaf_id, ids[p.markers.0], ids[p.markers.1], p.effect
        ));
    }
    let path = dir.join("truth.tsv");
    std::fs::write(&path, out).map_err(|e| Error::io(path, e))
}
