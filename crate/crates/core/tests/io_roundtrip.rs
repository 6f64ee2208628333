use chemoflow::config::{parse_config, RunConfig};
use chemoflow::diagnostics::{ClampFlags, DiagnosticsRecord};
use chemoflow::driver::{init_state, InitialSpec, ScalarInit, SimParams, VelocityInit};
use chemoflow::make_domain;
use chemoflow::storage::{
    read_records, read_snapshot, records_from_csv, records_to_csv, snapshot_bytes,
    snapshot_from_bytes, write_records, write_snapshot, StorageError,
};
use proptest::prelude::*;

fn any_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(5e-324),
        Just(f64::MAX),
    ]
}

prop_compose! {
    fn record(np: usize)(
        fixed in proptest::collection::vec(any_f64(), 10),
        opts in proptest::collection::vec(proptest::option::of(any_f64()), 3),
        clamp in 0u8..4,
        norms in proptest::collection::vec(any_f64(), 2 * np),
    ) -> DiagnosticsRecord {
        DiagnosticsRecord {
            t: fixed[0],
            mass_n: fixed[1],
            min_n: fixed[2],
            max_n: fixed[3],
            sup_c: fixed[4],
            int_c: fixed[5],
            grad_c_sq: fixed[6],
            kinetic: fixed[7],
            enstrophy_like: fixed[8],
            f_energy: fixed[9],
            g_energy: opts[0],
            y_p: opts[1],
            z_p: opts[2],
            clamp: ClampFlags(clamp),
            lp_norms_n: norms[..np].to_vec(),
            lp_norms_u: norms[np..].to_vec(),
        }
    }
}

proptest! {
    #[test]
    fn records_round_trip_bit_exactly(recs in proptest::collection::vec(record(3), 0..8)) {
        let exps = [2.0, 4.0, 2.5];
        let text = records_to_csv(&recs, &exps);
        let header = text.lines().next().unwrap();
        prop_assert_eq!(header.split(',').count(), 14 + 2 * exps.len());
        let (back_exps, back) = records_from_csv(&text).unwrap();
        prop_assert_eq!(back_exps, exps.to_vec());
        prop_assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
            prop_assert_eq!(a.kinetic.to_bits(), b.kinetic.to_bits());
            prop_assert_eq!(a.g_energy.map(f64::to_bits), b.g_energy.map(f64::to_bits));
            prop_assert_eq!(a.z_p.map(f64::to_bits), b.z_p.map(f64::to_bits));
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.lp_norms_u), bits(&b.lp_norms_u));
        }
        prop_assert_eq!(records_to_csv(&back, &exps), text);
    }

    #[test]
    fn snapshots_round_trip(seed in any::<u64>(), nx in 4usize..8, ny in 4usize..8, nz in 4usize..6, three in any::<bool>()) {
        let domain = if three {
            make_domain(3, &[1.0, 2.0, 0.5], &[nx, ny, nz]).unwrap()
        } else {
            make_domain(2, &[1.5, 1.0], &[nx, ny]).unwrap()
        };
        let p = SimParams {
            domain,
            seed,
            initial: InitialSpec {
                n: ScalarInit::Noise { base: 1.0, amplitude: 0.5 },
                c: ScalarInit::Noise { base: 1.0, amplitude: 0.5 },
                u: VelocityInit::Noise { amplitude: 1.0 },
            },
            ..Default::default()
        };
        let s = init_state(&p).unwrap();
        let bytes = snapshot_bytes(&s);
        let back = snapshot_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.n, &s.n);
        prop_assert_eq!(&back.c, &s.c);
        prop_assert_eq!(&back.u, &s.u);
        let cut = bytes.len() / 2;
        let truncated = snapshot_from_bytes(&bytes[..cut]);
        prop_assert!(matches!(truncated, Err(StorageError::ChecksumMismatch { .. })), "{:?}", truncated.err());
    }

    #[test]
    fn configs_round_trip(chi in 0.0f64..5.0, kappa in 0.0f64..3.0, mu in 0.01f64..3.0, t_end in 0.0f64..100.0, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.sim.reaction.chi = chi;
        cfg.sim.reaction.kappa = kappa;
        cfg.sim.reaction.mu = mu;
        cfg.sim.time.t_end = t_end;
        cfg.sim.seed = seed;
        let back = parse_config(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = SimParams::default();
    let s = init_state(&p).unwrap();
    let snap = dir.path().join("s.chfl");
    write_snapshot(&s, &snap).unwrap();
    let back = read_snapshot(&snap).unwrap();
    assert_eq!(back.n, s.n);
    assert_eq!(back.t, s.t);

    let csv = dir.path().join("r.csv");
    write_records(&[], &[2.0], &csv).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1);
    let (exps, recs) = read_records(&csv).unwrap();
    assert_eq!(exps, vec![2.0]);
    assert!(recs.is_empty());
}

#[test]
fn damaged_records_are_rejected_with_line_numbers() {
    let text = "t,mass_n\n1,2\n";
    assert!(records_from_csv(text).is_err());
    let good = records_to_csv(&[], &[2.0]);
    let bad = format!("{good}1.0,2.0\n");
    let e = records_from_csv(&bad).unwrap_err().to_string();
    assert!(e.contains("line 2"), "{e}");
}
