use flowlab_core::field::VelocityField;
use flowlab_core::flow::{backward_flow, FlowOptions};
use flowlab_core::grid::{SpaceGrid, TimeGrid};
use std::time::Instant;

fn main() {
    let f = VelocityField::catalog("sgn", &[], 1, 2.0).unwrap();
    let xg = SpaceGrid::line(-2.0, 2.0, 401).unwrap();
    let tg = TimeGrid::new(0.0, 1.0, 11).unwrap();
    let opts = FlowOptions::with_dt(1e-3);
    let t0 = Instant::now();
    let fm = backward_flow(&f, 1.0, &tg, &xg, &opts).unwrap();
    let el = t0.elapsed();
    println!("sgn sup error = {:.3e} (budget 2dt = 2e-3), runtime {:?}", fm.max_oracle_error.unwrap(), el);

    // powerlaw too
    let f = VelocityField::catalog("powerlaw", &[0.5], 1, 2.0).unwrap();
    let fm = backward_flow(&f, 1.0, &tg, &xg, &opts).unwrap();
    println!("powerlaw sup error = {:.3e}", fm.max_oracle_error.unwrap());

    // linear jacobian-bound probe: slope vs exp
    let f = VelocityField::catalog("linear", &[-1.0], 1, 2.0).unwrap();
    let fm = backward_flow(&f, 1.0, &TimeGrid::single(0.0), &xg, &opts).unwrap();
    let h = xg.axes[0].spacing();
    let mut max_slope: f64 = 0.0;
    for i in 2..xg.len()-2 {
        let s = (fm.get(0,i+2)[0] - fm.get(0,i-2)[0]) / (4.0*h);
        max_slope = max_slope.max(s);
    }
    println!("linear max FD slope = {:.12}, bound e = {:.12}, excess = {:.3e}", max_slope, std::f64::consts::E, max_slope - std::f64::consts::E);
}
