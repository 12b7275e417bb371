use flowlab_core::field::VelocityField;
use flowlab_core::flow::{backward_flow, FlowOptions};
use flowlab_core::grid::{SpaceGrid, TimeGrid};
use flowlab_core::jacobian::*;
use std::time::Instant;

fn main() {
    // Criterion 3: J indicator in L1 within 4*spacing at gap 0.4
    let f = VelocityField::catalog("sgn", &[], 1, 1.0).unwrap();
    let xg = SpaceGrid::line(-2.0, 2.0, 401).unwrap();
    let h = xg.axes[0].spacing();
    let fm = backward_flow(&f, 1.0, &TimeGrid::single(0.6), &xg, &FlowOptions::with_dt(1e-3)).unwrap();
    let j = backward_jacobian(&f, &fm, JacobianMethod::FiniteDifference).unwrap();
    let mut l1 = 0.0;
    for pi in 0..xg.len() {
        let x = xg.point(pi)[0];
        let exact = if x.abs() >= 0.4 { 1.0 } else { 0.0 };
        l1 += (j.get(0, pi) - exact).abs() * h;
    }
    println!("criterion3: L1 err = {:.4e}, budget 4h = {:.4e}", l1, 4.0*h);

    // Criterion 5: strong L1 convergence over eps = 2^-3..2^-8
    let t0 = Instant::now();
    let eps_list: Vec<f64> = (3..=8).map(|k| 0.5f64.powi(k)).collect();
    let rows = jacobian_convergence_study(&f, &eps_list, 1.0, 0.6, 2.0, 1601, ConvergenceMode::StrongL1).unwrap();
    for r in &rows {
        println!("eps={:.5}  l1_diff={:?}", r.eps, r.l1_diff);
    }
    println!("elapsed {:?}", t0.elapsed());
}
