//! Linear, polynomial and Gaussian Gram matrices on one region's markers,
//! their normalization, and the cross kernel used for new lines.

use legp::kernel::{cross_gram, gram, normalize, KernelSpec};
use legp::simulate::{simulate, SimConfig};

fn main() -> legp::Result<()> {
    let sim = simulate(&SimConfig { n_lines: 120, ..SimConfig::default() })?;
    let region: Vec<usize> = (0..30).collect();
    let train: Vec<usize> = (0..100).collect();
    let new: Vec<usize> = (100..120).collect();
    let xt = sim.markers.submatrix(&train, &region);
    let xn = sim.markers.submatrix(&new, &region);

    for spec in [KernelSpec::linear(), KernelSpec::polynomial(1.0, 2), KernelSpec::gaussian()] {
        let k = gram(&xt, &spec, None)?;
        let kn = normalize(&k)?;
        kn.check_psd()?;
        let cross = cross_gram(&xt, &xn, &spec, k.bandwidth)? * kn.scale;
        println!(
            "{:<9} trace {:>8.2} -> {:>6.2}  scale {:.3e}  h {:<8}  cross {}x{}  K[0,1] {:.4}",
            spec.kind_name(),
            k.values.trace(),
            kn.values.trace(),
            kn.scale,
            k.bandwidth.map_or("-".into(), |h| format!("{h:.2}")),
            cross.nrows(),
            cross.ncols(),
            kn.values[(0, 1)],
        );
    }

    // a fixed bandwidth overrides the mean squared distance
    let narrow = gram(&xt, &KernelSpec::gaussian().with_bandwidth(1.0), None)?;
    println!("gaussian h=1: K[0,1] {:.3e}", narrow.values[(0, 1)]);
    Ok(())
}
