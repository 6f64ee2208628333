use chemoflow::config::RunConfig;
use chemoflow::driver::{InitialSpec, Runner, ScalarInit, SimParams, VelocityInit};
use chemoflow::fluid::{ForcingSpec, Potential};
use chemoflow::make_domain;
use chemoflow::storage::{read_checkpoint, records_to_csv, write_checkpoint};

fn params() -> SimParams {
    let mut p = SimParams {
        domain: make_domain(2, &[1.0, 1.0], &[16, 16]).unwrap(),
        initial: InitialSpec {
            n: ScalarInit::Noise {
                base: 1.0,
                amplitude: 0.3,
            },
            c: ScalarInit::Constant { value: 1.0 },
            u: VelocityInit::Noise { amplitude: 0.1 },
        },
        forcing: ForcingSpec {
            phi: Potential::Linear { g: vec![0.0, 0.5] },
            ..Default::default()
        },
        seed: 11,
        ..Default::default()
    };
    p.time.t_end = 2.0;
    p.time.dt_max = 0.02;
    p.flags.implicit_diffusion = true;
    p
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
    let whole = Runner::new(params()).unwrap().finish().unwrap();

    let mut first = Runner::new(params()).unwrap();
    while first.state().t < 0.75 {
        first.step_to_next_sample().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.chfl");
    let cfg = RunConfig {
        sim: params(),
        ..Default::default()
    };
    write_checkpoint(&first, &cfg, &path).unwrap();
    drop(first);

    let (back_cfg, resumed) = read_checkpoint(&path).unwrap();
    assert_eq!(back_cfg.sim, params());
    let rest = resumed.finish().unwrap();

    assert_eq!(rest.steps, whole.steps);
    assert_eq!(rest.records.len(), whole.records.len());
    let exps = &params().diagnostics.lp_exponents;
    assert_eq!(
        records_to_csv(&rest.records, exps),
        records_to_csv(&whole.records, exps)
    );
    assert_eq!(rest.records, whole.records);
    assert_eq!(rest.final_state.n, whole.final_state.n);
    assert_eq!(rest.final_state.c, whole.final_state.c);
    assert_eq!(rest.final_state.u, whole.final_state.u);
    assert_eq!(rest.nc_windows, whole.nc_windows);
    assert_eq!(rest.violations, whole.violations);
}

#[test]
fn identical_parameters_give_identical_records() {
    let mut p = params();
    p.time.t_end = 0.5;
    let a = Runner::new(p.clone()).unwrap().finish().unwrap();
    let b = Runner::new(p).unwrap().finish().unwrap();
    assert_eq!(a.records, b.records);
}
