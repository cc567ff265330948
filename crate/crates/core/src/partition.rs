//! Hierarchical partition of the markers: genome, then chromosomes, then
//! nested contiguous subregions.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::ingest::{GeneticMap, MarkerMatrix};

pub const ROOT_ID: &str = "G";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitRule {
    #[default]
    EqualCount,
    EqualLength,
}

impl std::str::FromStr for SplitRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-count" => Ok(SplitRule::EqualCount),
            "equal-length" => Ok(SplitRule::EqualLength),
            _ => Err(Error::Config(format!(
                "unknown split rule `{s}` (equal-count|equal-length)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitRule::EqualCount => "equal-count",
            SplitRule::EqualLength => "equal-length",
        })
    }
}

/// Physical extent of a region that lies on one chromosome.
#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub chromosome: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    /// Column indices into the marker matrix, in map order.
    pub marker_indices: Vec<usize>,
    pub level: usize,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub span: Option<Span>,
}

impl Region {
    pub fn n_markers(&self) -> usize {
        self.marker_indices.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionHierarchy {
    /// Regions in depth-first genome order; the root comes first.
    regions: Vec<Region>,
    index: HashMap<String, usize>,
    pub depth: usize,
    pub splits: usize,
    /// Markers without a map position. They belong to the root only.
    pub unmapped: Vec<usize>,
}

impl RegionHierarchy {
    fn from_regions(regions: Vec<Region>, depth: usize, splits: usize, unmapped: Vec<usize>) -> Self {
        let index = regions
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        RegionHierarchy {
            regions,
            index,
            depth,
            splits,
            unmapped,
        }
    }

    pub fn root(&self) -> &Region {
        &self.regions[0]
    }

    pub fn get(&self, id: &str) -> Option<&Region> {
        self.index.get(id).map(|&i| &self.regions[i])
    }

    pub fn region(&self, id: &str) -> Result<&Region> {
        self.get(id).ok_or_else(|| Error::UnknownRegion(id.to_string()))
    }

    /// Every region, parents before children, siblings in genome order.
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn children(&self, id: &str) -> Vec<&Region> {
        self.get(id)
            .map(|r| r.children.iter().filter_map(|c| self.get(c)).collect())
            .unwrap_or_default()
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.leaves().into_iter().map(|r| r.id.clone()).collect()
    }

    /// Leaf regions in genome order.
    pub fn leaves(&self) -> Vec<&Region> {
        self.regions.iter().filter(|r| r.is_leaf()).collect()
    }

    pub fn regions_at_level(&self, level: usize) -> Vec<&Region> {
        self.regions.iter().filter(|r| r.level == level).collect()
    }

    /// All markers assigned to some chromosome.
    pub fn mapped_markers(&self) -> Vec<usize> {
        let un: HashSet<usize> = self.unmapped.iter().copied().collect();
        self.root()
            .marker_indices
            .iter()
            .copied()
            .filter(|i| !un.contains(i))
            .collect()
    }

    /// Write the `(region_id, parent_id, marker_id)` table.
    pub fn write_region_file(&self, path: &Path, markers: &MarkerMatrix) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "region_id\tparent_id\tmarker_id")?;
            for r in &self.regions {
                let parent = r.parent.as_deref().unwrap_or(".");
                for &m in &r.marker_indices {
                    writeln!(w, "{}\t{}\t{}", r.id, parent, markers.marker_ids[m])?;
                }
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    /// Fill in chromosome spans for regions whose markers share a chromosome.
    pub fn annotate_spans(&mut self, map: &GeneticMap, markers: &MarkerMatrix) {
        let pos: HashMap<&str, (&str, f64)> = map
            .entries
            .iter()
            .map(|e| (e.marker_id.as_str(), (e.chromosome.as_str(), e.position)))
            .collect();
        for r in &mut self.regions {
            let mut chrom: Option<&str> = None;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut ok = !r.marker_indices.is_empty();
            for &m in &r.marker_indices {
                match pos.get(markers.marker_ids[m].as_str()) {
                    Some(&(c, p)) if chrom.is_none() || chrom == Some(c) => {
                        chrom = Some(c);
                        lo = lo.min(p);
                        hi = hi.max(p);
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            r.span = if ok {
                chrom.map(|c| Span {
                    chromosome: c.to_string(),
                    start: lo,
                    end: hi,
                })
            } else {
                None
            };
        }
    }

    /// Set spans from `(chromosome, start, end)` keyed by region id; regions
    /// not listed get none.
    pub fn set_spans(&mut self, spans: &HashMap<String, (String, f64, f64)>) {
        for r in &mut self.regions {
            r.span = spans.get(&r.id).map(|(c, s, e)| Span {
                chromosome: c.clone(),
                start: *s,
                end: *e,
            });
        }
    }
}

/// Read an explicit region file. Regions may overlap; the tree is given by
/// the parent column and must have exactly one root.
pub fn read_region_file(path: &Path, markers: &MarkerMatrix) -> Result<RegionHierarchy> {
    let idx = markers.marker_index();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut parent_of: HashMap<String, Option<String>> = HashMap::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(|s| s.trim()).collect();
        if f.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 columns", ln + 1)));
        }
        let (rid, pid, mid) = (f[0], f[1], f[2]);
        let parent = if pid == "." || pid.is_empty() {
            None
        } else {
            Some(pid.to_string())
        };
        match parent_of.get(rid) {
            None => {
                order.push(rid.to_string());
                parent_of.insert(rid.to_string(), parent);
            }
            Some(p) if *p != parent => {
                return Err(Error::format(path, format!("region `{rid}` has two parents")));
            }
            _ => {}
        }
        let m = *idx
            .get(mid)
            .ok_or_else(|| Error::UnknownMarker(mid.to_string()))?;
        members.entry(rid.to_string()).or_default().push(m);
    }
    let roots: Vec<&String> = order.iter().filter(|r| parent_of[*r].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::format(
            path,
            format!("expected exactly one root region, found {}", roots.len()),
        ));
    }
    for r in &order {
        if let Some(p) = &parent_of[r] {
            if !parent_of.contains_key(p) {
                return Err(Error::UnknownRegion(p.clone()));
            }
        }
    }
    let mut children: HashMap<&str, Vec<String>> = HashMap::new();
    for r in &order {
        if let Some(p) = &parent_of[r] {
            children.entry(p.as_str()).or_default().push(r.clone());
        }
    }

    // depth-first from the root so parents precede children
    let mut regions = Vec::with_capacity(order.len());
    let mut stack = vec![(roots[0].clone(), 0usize)];
    let mut visited = HashSet::new();
    while let Some((id, level)) = stack.pop() {
        if !visited.insert(id.clone()) {
            return Err(Error::format(path, "region parents form a cycle"));
        }
        let kids = children.get(id.as_str()).cloned().unwrap_or_default();
        for k in kids.iter().rev() {
            stack.push((k.clone(), level + 1));
        }
        regions.push(Region {
            marker_indices: members.remove(&id).unwrap_or_default(),
            level,
            parent: parent_of[&id].clone(),
            children: kids,
            id,
            span: None,
        });
    }
    if regions.len() != order.len() {
        return Err(Error::format(path, "some regions are not reachable from the root"));
    }
    let depth = regions.iter().map(|r| r.level).max().unwrap_or(0);
    Ok(RegionHierarchy::from_regions(regions, depth, 0, Vec::new()))
}

struct Site {
    index: usize,
    position: f64,
}

/// Build the genome / chromosome / subregion tree.
///
/// `depth` counts levels below the root: depth 1 stops at chromosomes, each
/// further level splits every region into `splits` contiguous pieces. Regions
/// with fewer than `splits` markers stop subdividing early.
pub fn build_hierarchy(
    map: &GeneticMap,
    markers: &MarkerMatrix,
    depth: usize,
    splits: usize,
    rule: SplitRule,
) -> Result<RegionHierarchy> {
    if depth < 1 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    if splits < 2 {
        return Err(Error::Config("splits must be at least 2".into()));
    }
    let idx = markers.marker_index();
    let mut chroms: Vec<(String, Vec<Site>)> = Vec::new();
    let mut mapped = HashSet::new();
    for e in &map.entries {
        let Some(&i) = idx.get(e.marker_id.as_str()) else {
            continue;
        };
        mapped.insert(i);
        let site = Site {
            index: i,
            position: e.position,
        };
        match chroms.last_mut() {
            Some((c, sites)) if *c == e.chromosome => sites.push(site),
            _ => chroms.push((e.chromosome.clone(), vec![site])),
        }
    }
    let present: HashSet<&str> = chroms.iter().map(|(c, _)| c.as_str()).collect();
    for c in map.chromosomes() {
        if !present.contains(c) {
            warn!("chromosome {c} has no genotyped markers and is skipped");
        }
    }
    if chroms.is_empty() {
        return Err(Error::EmptyChromosome);
    }
    let unmapped: Vec<usize> = (0..markers.n_markers()).filter(|i| !mapped.contains(i)).collect();
    if !unmapped.is_empty() {
        warn!("{} marker(s) have no map position; they enter the root region only", unmapped.len());
    }

    let mut regions = Vec::new();
    let mut root_markers: Vec<usize> = chroms
        .iter()
        .flat_map(|(_, s)| s.iter().map(|x| x.index))
        .collect();
    root_markers.extend(&unmapped);
    regions.push(Region {
        id: ROOT_ID.to_string(),
        marker_indices: root_markers,
        level: 0,
        parent: None,
        children: Vec::new(),
        span: None,
    });

    let mut any_split = false;
    for (name, sites) in &chroms {
        let id = if name.starts_with("chr") {
            format!("{ROOT_ID}/{name}")
        } else {
            format!("{ROOT_ID}/chr{name}")
        };
        regions[0].children.push(id.clone());
        let sites: Vec<&Site> = sites.iter().collect();
        any_split |= grow(&mut regions, id, Some(ROOT_ID.to_string()), &sites, 1, depth, splits, rule);
        if sites.len() < splits.pow((depth - 1) as u32) {
            warn!(
                "chromosome {name} has {} markers, fewer than {}; it stops subdividing early",
                sites.len(),
                splits.pow((depth - 1) as u32)
            );
        }
    }
    if depth >= 2 && !any_split {
        return Err(Error::DepthTooLarge(depth));
    }
    let mut h = RegionHierarchy::from_regions(regions, depth, splits, unmapped);
    h.annotate_spans(map, markers);
    Ok(h)
}

/// Append the region and its subtree to `out` in depth-first order. Returns
/// whether any split happened.
#[allow(clippy::too_many_arguments)]
fn grow(
    out: &mut Vec<Region>,
    id: String,
    parent: Option<String>,
    sites: &[&Site],
    level: usize,
    depth: usize,
    splits: usize,
    rule: SplitRule,
) -> bool {
    let slot = out.len();
    out.push(Region {
        id: id.clone(),
        marker_indices: sites.iter().map(|s| s.index).collect(),
        level,
        parent,
        children: Vec::new(),
        span: None,
    });
    if level >= depth {
        return false;
    }
    let groups = match rule {
        SplitRule::EqualCount => split_equal_count(sites, splits),
        SplitRule::EqualLength => split_equal_length(sites, splits),
    };
    if groups.len() < 2 {
        return false;
    }
    for (k, (lo, hi)) in groups.into_iter().enumerate() {
        let child = format!("{id}/{}", k + 1);
        out[slot].children.push(child.clone());
        grow(out, child, Some(id.clone()), &sites[lo..hi], level + 1, depth, splits, rule);
    }
    true
}

/// Contiguous groups of near-equal size, remainder to the leftmost groups.
/// A boundary that would separate markers at an identical position is moved
/// to the nearest edge of that tie block when this keeps every group
/// non-empty.
fn split_equal_count(sites: &[&Site], splits: usize) -> Vec<(usize, usize)> {
    let n = sites.len();
    if n < splits {
        return Vec::new();
    }
    let base = n / splits;
    let rem = n % splits;
    let mut bounds = vec![0usize];
    let mut acc = 0;
    for k in 0..splits {
        acc += base + usize::from(k < rem);
        bounds.push(acc);
    }
    for k in 1..splits {
        let b = bounds[k];
        let (prev, next) = (bounds[k - 1], bounds[k + 1]);
        if sites[b - 1].position != sites[b].position {
            continue;
        }
        let p = sites[b].position;
        let mut lo = b - 1;
        while lo > 0 && sites[lo - 1].position == p {
            lo -= 1;
        }
        let mut hi = b;
        while hi < n && sites[hi].position == p {
            hi += 1;
        }
        let mut cands: Vec<usize> = [lo, hi]
            .into_iter()
            .filter(|&c| c > prev && c < next)
            .collect();
        cands.sort_by_key(|&c| (c.abs_diff(b), std::cmp::Reverse(c)));
        if let Some(&c) = cands.first() {
            bounds[k] = c;
        }
    }
    bounds.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Split the position span into equal-length windows; empty windows vanish.
fn split_equal_length(sites: &[&Site], splits: usize) -> Vec<(usize, usize)> {
    let n = sites.len();
    if n < 2 {
        return Vec::new();
    }
    let lo = sites[0].position;
    let hi = sites[n - 1].position;
    let width = (hi - lo) / splits as f64;
    if !(width > 0.0) {
        return Vec::new();
    }
    let bucket = |p: f64| (((p - lo) / width).floor() as usize).min(splits - 1);
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || bucket(sites[i].position) != bucket(sites[start].position) {
            out.push((start, i));
            start = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Coding, MapEntry, MapUnit};
    use nalgebra::DMatrix;

    pub(crate) fn genome(chroms: &[(&str, usize)]) -> (GeneticMap, MarkerMatrix) {
        let mut entries = Vec::new();
        let mut ids = Vec::new();
        for (c, n) in chroms {
            for k in 0..*n {
                let id = format!("c{c}_m{k:03}");
                entries.push(MapEntry {
                    marker_id: id.clone(),
                    chromosome: c.to_string(),
                    position: k as f64,
                    unit: MapUnit::CentiMorgan,
                });
                ids.push(id);
            }
        }
        let m = ids.len();
        let g = MarkerMatrix::new(vec!["a".into(), "b".into()], ids, DMatrix::zeros(2, m), Coding::ZeroOne).unwrap();
        (GeneticMap::new(entries).unwrap(), g)
    }

    #[test]
    fn three_chromosomes_depth_two() {
        let (map, g) = genome(&[("1", 10), ("2", 10), ("3", 10)]);
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        assert_eq!(h.regions().len(), 1 + 3 + 6);
        assert_eq!(
            h.leaf_ids(),
            vec!["G/chr1/1", "G/chr1/2", "G/chr2/1", "G/chr2/2", "G/chr3/1", "G/chr3/2"]
        );
        assert_eq!(h.regions_at_level(1).len(), 3);
    }

    #[test]
    fn ten_markers_split_in_halves() {
        let (map, g) = genome(&[("1", 10)]);
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        let leaves = h.leaves();
        assert_eq!(leaves[0].marker_indices, (0..5).collect::<Vec<_>>());
        assert_eq!(leaves[1].marker_indices, (5..10).collect::<Vec<_>>());
    }

    #[test]
    fn remainder_goes_left() {
        let (map, g) = genome(&[("1", 5)]);
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        let sizes: Vec<usize> = h.leaves().iter().map(|r| r.n_markers()).collect();
        assert_eq!(sizes, vec![3, 2]);
    }

    #[test]
    fn depth_one_leaves_are_chromosomes() {
        let (map, g) = genome(&[("1", 4), ("2", 4)]);
        let h = build_hierarchy(&map, &g, 1, 2, SplitRule::EqualCount).unwrap();
        assert_eq!(h.leaf_ids(), vec!["G/chr1", "G/chr2"]);
    }

    #[test]
    fn single_chromosome_depth_three() {
        let (map, g) = genome(&[("1", 16)]);
        let h = build_hierarchy(&map, &g, 3, 2, SplitRule::EqualCount).unwrap();
        assert_eq!(h.leaves().len(), 4);
        assert_eq!(h.leaf_ids()[3], "G/chr1/2/2");
    }

    #[test]
    fn small_chromosome_stops_early() {
        let (map, g) = genome(&[("1", 1), ("2", 8)]);
        let h = build_hierarchy(&map, &g, 3, 2, SplitRule::EqualCount).unwrap();
        assert_eq!(h.leaves().len(), 1 + 4);
        let (map, g) = genome(&[("1", 1)]);
        assert!(matches!(
            build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount),
            Err(Error::DepthTooLarge(2))
        ));
    }

    #[test]
    fn equal_length_uses_positions() {
        let (mut map, g) = genome(&[("1", 6)]);
        // positions 0,1,2,3,4,100: first window holds five markers
        map.entries[5].position = 100.0;
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualLength).unwrap();
        let sizes: Vec<usize> = h.leaves().iter().map(|r| r.n_markers()).collect();
        assert_eq!(sizes, vec![5, 1]);
    }

    #[test]
    fn tied_positions_stay_together() {
        let (mut map, g) = genome(&[("1", 6)]);
        // positions 0,1,2,2,4,5: naive boundary splits the tie at index 3
        map.entries[3].position = 2.0;
        let map = GeneticMap::new(map.entries).unwrap();
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        let sizes: Vec<usize> = h.leaves().iter().map(|r| r.n_markers()).collect();
        assert_eq!(sizes, vec![4, 2]);
    }

    #[test]
    fn unmapped_markers_only_in_root() {
        let (map, mut g) = genome(&[("1", 4)]);
        g.marker_ids.push("loose".into());
        g.values = DMatrix::zeros(2, 5);
        g.imputed_fraction.push(0.0);
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        assert_eq!(h.unmapped, vec![4]);
        assert!(h.root().marker_indices.contains(&4));
        assert!(h.leaves().iter().all(|r| !r.marker_indices.contains(&4)));
        assert_eq!(h.mapped_markers().len(), 4);
    }

    #[test]
    fn region_file_round_trip() {
        let (map, g) = genome(&[("1", 6), ("2", 5)]);
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("regions.tsv");
        h.write_region_file(&p, &g).unwrap();
        let back = read_region_file(&p, &g).unwrap();
        assert_eq!(back.leaf_ids(), h.leaf_ids());
        for (a, b) in back.regions().iter().zip(h.regions()) {
            assert_eq!(a.marker_indices, b.marker_indices);
            assert_eq!(a.level, b.level);
            assert_eq!(a.parent, b.parent);
        }
    }

    #[test]
    fn spans_are_annotated() {
        let (map, g) = genome(&[("1", 6), ("2", 5)]);
        let h = build_hierarchy(&map, &g, 2, 2, SplitRule::EqualCount).unwrap();
        let leaf = h.region("G/chr2/2").unwrap();
        let span = leaf.span.as_ref().unwrap();
        assert_eq!((span.chromosome.as_str(), span.start, span.end), ("2", 3.0, 4.0));
        assert!(h.root().span.is_none());
    }
}
