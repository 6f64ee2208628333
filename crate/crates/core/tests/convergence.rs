use chemoflow::driver::{run, InitialSpec, ScalarInit, SimParams, VelocityInit};
use chemoflow::make_domain;
use std::f64::consts::PI;

/// Heat equation only: no chemotaxis, no reactions, no flow.
fn heat_error(n: usize) -> f64 {
    let mut p = SimParams {
        domain: make_domain(2, &[1.0, 1.0], &[n, n]).unwrap(),
        initial: InitialSpec {
            n: ScalarInit::Cosine {
                base: 1.0,
                amplitude: 0.5,
                modes: vec![1, 2],
            },
            c: ScalarInit::Constant { value: 1.0 },
            u: VelocityInit::Zero,
        },
        ..Default::default()
    };
    p.reaction.chi = 0.0;
    p.flags.reactions = false;
    p.time.t_end = 0.02;
    p.time.sample_every = 0.02;
    let r = run(&p).unwrap();
    assert!(r.is_clean(), "{:?}", r.violations);
    let decay = (-5.0 * PI * PI * p.time.t_end).exp();
    let d = p.domain;
    (0..d.cell_count())
        .map(|i| {
            let x = d.cell_center(i);
            let exact = 1.0 + 0.5 * (PI * x[0]).cos() * (2.0 * PI * x[1]).cos() * decay;
            (r.final_state.n.values()[i] - exact).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn heat_mode_converges_at_second_order_in_space() {
    let e: Vec<f64> = [8, 16, 32].iter().map(|&n| heat_error(n)).collect();
    for w in e.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((1.8..=2.2).contains(&order), "errors {e:?}");
    }
}
