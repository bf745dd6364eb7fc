use nalgebra::DVector;
use sac::benchmarks::{build_benchmark, Plant};
use sac::integrator::integrate_hybrid;

#[test]
fn slip_hold_commit_probe() {
    let b = build_benchmark("slip_stairs").unwrap();
    let Plant::Hybrid { model, .. } = &b.plant else {
        panic!()
    };
    let x0 = DVector::from_vec(vec![
        1.267978147464,
        1.179392182954,
        1.266889848679,
        1.175301822794,
        1.409989186120,
        -0.5247866128290,
        0.9767479433376,
        0.9768325656783,
    ]);
    let u = |_t: f64| DVector::from_vec(vec![0.0, 0.0, 29.4956]);
    let ht = integrate_hybrid(model, 1, &x0, &u, (2.16, 2.40), 0.01, 10).unwrap();
    let (q, seg) = ht.segments.last().unwrap();
    let x = seg.states.last().unwrap();
    println!("q={q} t={} x={:?}", seg.times.last().unwrap(), x.as_slice());
    for tr in model.transitions_from(*q) {
        let phi = tr.guard(x);
        let x_plus = tr.reset(x);
        let sys_to = model.location(tr.to);
        let f_plus = sys_to.drift(2.4, &x_plus) + sys_to.input_map(2.4, &x_plus) * u(2.4);
        println!("tr {}->{} dir={:?} phi={phi:+.4}", tr.to, tr.to, tr.direction);
        for tr2 in model.transitions_from(tr.to) {
            let g2 = tr2.guard(&x_plus);
            let r2 = tr2.guard_grad(&x_plus).dot(&f_plus);
            println!(
                "  dest tr ->{} dir={:?} guard={g2:+.4} rate={r2:+.4} matches={}",
                tr2.to,
                tr2.direction,
                tr2.direction.matches_rate(r2)
            );
        }
    }
}
