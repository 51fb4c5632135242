use std::io::Write;

use super::*;

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
    p
}

#[test]
fn empty_cells_are_missing_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let body = "time,a,b\n0,1.5,\n0.5,-2,3.25\n1.25,,0.1\n";
    let p = write(&dir, "in.csv", body);
    let d = load_csv(&p, &CsvSchema::default(), 3, 3).unwrap();
    assert_eq!(d.len(), 1);
    let w = &d.windows[0];
    assert_eq!(w.missing.at(1, 0), 1.0);
    assert_eq!(w.missing.at(0, 2), 1.0);
    assert_eq!(w.values.at(1, 2), 0.1);
    assert_eq!(w.timestamps, vec![0.0, 0.5, 1.25]);
    let out = dir.path().join("out.csv");
    save_csv(&d, &out).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), body);
    assert_eq!(load_csv(&out, &CsvSchema::default(), 3, 3).unwrap(), d);
}

#[test]
fn round_trip_is_lossless_for_awkward_values() {
    let dir = tempfile::tempdir().unwrap();
    let vals = [0.1 + 0.2, 1e-300, -123456789.123456789, std::f64::consts::PI, 5e-324];
    let values = Tensor::matrix(1, 5, vals.to_vec()).unwrap();
    let s = TimeSeries::new(values, Tensor::zeros(&[1, 5]), vec![0.0, 1.5, 2.0, 1e9, 1e9]).unwrap();
    let d = Dataset::new(vec![s], vec!["x".into()]).unwrap();
    let p = dir.path().join("v.csv");
    save_csv(&d, &p).unwrap();
    let back = load_csv(&p, &CsvSchema::default(), 5, 5).unwrap();
    for (a, b) in back.windows[0].values.data().iter().zip(vals) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back, d);
}

#[test]
fn windowing_drops_partial_tail() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("time,v\n");
    for i in 0..100 {
        body.push_str(&format!("{i},{}\n", i as f64 * 0.5));
    }
    let p = write(&dir, "long.csv", &body);
    let d = load_csv(&p, &CsvSchema::default(), 48, 48).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.windows[1].timestamps[0], 48.0);
    let d = load_csv(&p, &CsvSchema::default(), 48, 10).unwrap();
    assert_eq!(d.len(), 6);
}

#[test]
fn malformed_rows_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "bad.csv", "time,a\n0,1\n1,x\n");
    match load_csv(&p, &CsvSchema::default(), 1, 1) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let p = write(&dir, "short.csv", "time,a,b\n0,1,2\n1,2\n");
    assert!(matches!(
        load_csv(&p, &CsvSchema::default(), 1, 1),
        Err(Error::Parse { line: 3, .. })
    ));
}

#[test]
fn missing_schema_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "s.csv", "t,a\n0,1\n");
    assert!(matches!(load_csv(&p, &CsvSchema::default(), 1, 1), Err(Error::Schema(_))));
    let schema = CsvSchema {
        time_column: "t".into(),
        value_columns: Some(vec!["zzz".into()]),
    };
    assert!(matches!(load_csv(&p, &schema, 1, 1), Err(Error::Schema(_))));
}

#[test]
fn unreadable_path_is_io_error() {
    let r = load_csv(Path::new("/nonexistent/dir/x.csv"), &CsvSchema::default(), 1, 1);
    assert!(matches!(r, Err(Error::Io { .. })));
}

fn gappy_dataset() -> Dataset {
    let spec = SyntheticSpec {
        windows: 6,
        length: 20,
        channels: 3,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let mut d = generate_synthetic(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for w in &mut d.windows {
        let missing = Tensor::from_fn(&[3, 20], |_| rng.random_bool(0.2) as u8 as f64);
        *w = TimeSeries::new(w.values.clone(), missing, w.timestamps.clone()).unwrap();
    }
    d
}

#[test]
fn normalization_statistics() {
    let d = gappy_dataset();
    let (n, stats) = normalize(&d).unwrap();
    let again = compute_stats(&Dataset { stats: None, ..n.clone() });
    for c in 0..3 {
        assert!(again.mean[c].abs() < 1e-10);
        assert!((again.std[c] - 1.0).abs() < 1e-10);
        assert!(!stats.constant[c]);
    }
    for w in &n.windows {
        for (v, m) in w.values.data().iter().zip(w.missing.data()) {
            if *m == 1.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }
    let back = denormalize(&n).unwrap();
    for (a, b) in back.windows.iter().zip(&d.windows) {
        assert!(a.values.max_abs_diff(&b.values).unwrap() < 1e-12);
    }
}

#[test]
fn placeholders_do_not_move_stats() {
    let d = gappy_dataset();
    let base = compute_stats(&d);
    let mut poked = d.clone();
    for w in &mut poked.windows {
        for (v, m) in w.values.data_mut().iter_mut().zip(w.missing.data()) {
            if *m == 1.0 {
                *v = 1e6;
            }
        }
    }
    assert_eq!(compute_stats(&poked), base);
}

#[test]
fn constant_channels_are_flagged() {
    let s = TimeSeries::observed(Tensor::matrix(2, 3, vec![4.0, 4.0, 4.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
    let d = Dataset::new(vec![s], vec!["c".into(), "v".into()]).unwrap();
    let (n, stats) = normalize(&d).unwrap();
    assert_eq!(stats.constant, vec![true, false]);
    assert_eq!(stats.std[0], 1.0);
    assert_eq!(n.windows[0].values.row(0), &[0.0, 0.0, 0.0]);
}

#[test]
fn synthetic_is_seeded_and_complete() {
    for kind in [SyntheticKind::SinusoidMixture, SyntheticKind::CoupledOscillator] {
        let spec = SyntheticSpec {
            kind,
            windows: 3,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.windows.iter().all(|w| w.n_missing() == 0 && w.values.all_finite()));
        let c = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn free_oscillators_match_closed_form() {
    let spec = SyntheticSpec {
        kind: SyntheticKind::CoupledOscillator,
        channels: 3,
        length: 200,
        windows: 2,
        coupling: None,
        damping: 0.0,
        noise_std: 0.0,
        seed: 5,
        sample_dt: 0.1,
    };
    let d = generate_synthetic(&spec).unwrap();
    let setup = oscillator_setup(&spec);
    for (w, (x0, v0)) in d.windows.iter().zip(&setup.initial) {
        for c in 0..3 {
            let om = setup.omega[c];
            for t in 0..200 {
                let tt = t as f64 * 0.1;
                let want = x0[c] * (om * tt).cos() + v0[c] / om * (om * tt).sin();
                assert!((w.values.at(c, t) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn coupling_shape_checked() {
    let spec = SyntheticSpec {
        kind: SyntheticKind::CoupledOscillator,
        coupling: Some(Tensor::zeros(&[2, 2])),
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Config { .. })));
}

#[test]
fn split_partitions_indices() {
    let s = split_indices(500, 0.1, 0.1, 1).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (400, 50, 50));
    let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
    all.sort();
    assert_eq!(all, (0..500).collect::<Vec<_>>());
    assert_eq!(s, split_indices(500, 0.1, 0.1, 1).unwrap());
    let tiny = split_indices(1, 0.1, 0.1, 1).unwrap();
    assert_eq!(tiny.train.len(), 1);
    let two = split_indices(2, 0.5, 0.5, 1);
    assert!(two.is_err());
}
