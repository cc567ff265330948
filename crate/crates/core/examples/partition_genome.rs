//! Build the genome / chromosome / subregion hierarchy from a map and write
//! it as a region file.
//!
//! ```text
//! cargo run --example partition_genome -- [depth] [splits]
//! ```

use legp::partition::{build_hierarchy, read_region_file, SplitRule};
use legp::simulate::{simulate, SimConfig};

fn main() -> legp::Result<()> {
    let mut args = std::env::args().skip(1);
    let depth: usize = args.next().map_or(2, |s| s.parse().expect("depth"));
    let splits: usize = args.next().map_or(3, |s| s.parse().expect("splits"));

    let sim = simulate(&SimConfig { n_lines: 50, ..SimConfig::default() })?;
    for rule in [SplitRule::EqualCount, SplitRule::EqualLength] {
        let mut h = build_hierarchy(&sim.map, &sim.markers, depth, splits, rule)?;
        h.annotate_spans(&sim.map, &sim.markers);
        println!("== {rule:?}: {} regions, {} leaves", h.regions().len(), h.leaves().len());
        for r in h.regions() {
            let span = r
                .span
                .as_ref()
                .map(|s| format!("chr {} {:.0}-{:.0}", s.chromosome, s.start, s.end))
                .unwrap_or_default();
            println!("{}{} ({} markers) {span}", "  ".repeat(r.level), r.id, r.n_markers());
        }
    }

    let dir = tempfile_dir();
    let path = dir.join("regions.tsv");
    let h = build_hierarchy(&sim.map, &sim.markers, depth, splits, SplitRule::EqualCount)?;
    h.write_region_file(&path, &sim.markers)?;
    let back = read_region_file(&path, &sim.markers)?;
    println!("round trip through {}: {} regions", path.display(), back.regions().len());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("legp-partition-{}", std::process::id()));
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}
