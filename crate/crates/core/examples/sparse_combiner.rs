//! The lasso / elastic-net combiner on a synthetic matrix of local values:
//! the cross-validated penalty path, the selected regions, and the
//! automatic ridge term when regions outnumber observations.

use legp::combiner::{fit_combiner, kkt_violation, CombinerOptions, Penalty};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn problem(n: usize, k: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, Vec<String>) {
    let mut rng = legp::rng::stream(seed, "example");
    let g = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = 2.0 * g.column(0) - 1.5 * g.column(3) + g.column(7) + 0.5 * noise;
    let ids = (0..k).map(|j| format!("R{j}")).collect();
    (g, y, ids)
}

fn main() -> legp::Result<()> {
    let x = DMatrix::zeros(200, 0);
    let (g, y, ids) = problem(200, 12, 1);
    let m = fit_combiner(&g, &x, &y, &ids, &CombinerOptions::default(), None)?;
    println!("k < N: lambda1 {:.3}  lambda2 {}", m.lambda1, m.lambda2);
    for p in m.cv_path.iter().step_by(10) {
        println!("  lambda1 {:>9.3}  cv error {:>9.2}  nonzero {}", p.lambda1, p.cv_error, p.nonzero);
    }
    for (id, a) in m.region_ids.iter().zip(m.alpha.iter()).filter(|(_, a)| **a != 0.0) {
        println!("  {id:<4} alpha {a:+.3}");
    }
    println!("  KKT violation {:.2e}", kkt_violation(&g, &x, &y, &m));

    let (g, y, ids) = problem(40, 60, 2);
    let x = DMatrix::zeros(40, 0);
    let m = fit_combiner(&g, &x, &y, &ids, &CombinerOptions::default(), None)?;
    println!("k > N: lambda1 {:.3}  lambda2 {:.3}  selected {}", m.lambda1, m.lambda2, m.alpha.iter().filter(|a| **a != 0.0).count());

    let fixed = CombinerOptions { lambda1: Penalty::Fixed(50.0), lambda2: Penalty::Fixed(0.0), ..Default::default() };
    let m = fit_combiner(&g, &x, &y, &ids, &fixed, None)?;
    println!("fixed lambda1 50: selected {}", m.alpha.iter().filter(|a| **a != 0.0).count());
    Ok(())
}
