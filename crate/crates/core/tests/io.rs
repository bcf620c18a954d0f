mod common;

use common::{fig1, toy_panel};
use dynrecon::io::*;
use dynrecon::pipeline::{Mode, Preset, Reconciler, ReconcilerConfig};
use dynrecon::synthetic::oracle_exo;
use dynrecon::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn same_bits(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()))
        })
}

#[test]
fn panel_round_trip() {
    let h = fig1();
    let mut p = toy_panel(&h, 30, 1);
    p.rows[3][h.index_of("B2").unwrap()] = f64::NAN;
    p.rows[3] = {
        let b: Vec<f64> = p.rows[3][h.n_a()..].to_vec();
        h.aggregate(&b).unwrap()
    };
    let mut buf = Vec::new();
    write_panel(&mut buf, &h, &p).unwrap();
    let back = read_panel(buf.as_slice(), &h).unwrap();
    assert_eq!(back.times, p.times);
    assert!(same_bits(&back.rows, &p.rows));
}

#[test]
fn base_only_panel_fills_aggregates() {
    let h = fig1();
    let csv = "time,A1,A2,A3,A4,B1,B2,B3,C1,C2,C3\n1,1,2,3,4,5,6,7,8,9,10\n2,1,1,1,1,1,1,1,1,1,1\n";
    let p = read_panel(csv.as_bytes(), &h).unwrap();
    assert_eq!(p.rows[0][h.index_of("T").unwrap()], 55.0);
    assert_eq!(p.rows[0][h.index_of("A").unwrap()], 10.0);
    assert_eq!(p.rows[1][h.index_of("C").unwrap()], 3.0);
}

#[test]
fn panel_errors() {
    let h = fig1();
    let base = "A1,A2,A3,A4,B1,B2,B3,C1,C2,C3";
    let empty = format!("time,{base}\n");
    let e = read_panel(empty.as_bytes(), &h).unwrap_err();
    assert!(e.to_string().contains("no rows"), "{e}");

    let extra = format!("time,{base},Z9,Q\n1,1,1,1,1,1,1,1,1,1,1,1,1\n");
    let e = read_panel(extra.as_bytes(), &h).unwrap_err().to_string();
    assert!(e.contains("Z9") && e.contains("Q"), "{e}");

    let missing = "time,A1\n1,2\n";
    let e = read_panel(missing.as_bytes(), &h).unwrap_err().to_string();
    assert!(e.contains("C3"), "{e}");

    let bad = format!("time,{base}\n1,1,1,1,1,1,1,1,1,1,1\n2,1,1,x,1,1,1,1,1,1,1\n");
    match read_panel(bad.as_bytes(), &h).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        e => panic!("{e}"),
    }

    let back = format!("time,{base}\n2,1,1,1,1,1,1,1,1,1,1\n2,1,1,1,1,1,1,1,1,1,1\n");
    assert!(matches!(read_panel(back.as_bytes(), &h), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn calendar_times_and_weekdays() {
    let h = fig1();
    let ones = ",1".repeat(10);
    let csv = format!(
        "date,A1,A2,A3,A4,B1,B2,B3,C1,C2,C3\n2016-01-01{ones}\n2016-01-02{ones}\n2016-01-03{ones}\n2016-01-10{ones}\n"
    );
    let p = read_panel(csv.as_bytes(), &h).unwrap();
    assert_eq!(p.rows_on_weekday(chrono::Weekday::Sun).unwrap(), vec![2, 3]);
    assert_eq!(p.time_index()[&TimeKey::parse("2016-01-10").unwrap()], 3);
    let ticks = toy_panel(&h, 5, 0);
    assert!(ticks.rows_on_weekday(chrono::Weekday::Sun).is_err());
}

#[test]
fn hierarchy_round_trip() {
    let h = fig1();
    let mut buf = Vec::new();
    write_hierarchy(&mut buf, &h).unwrap();
    let back = read_hierarchy(buf.as_slice()).unwrap();
    assert_eq!(back.ids(), h.ids());
    assert_eq!(back.levels(), h.levels());

    let labelled = "parent,child,parent_level,child_level\nT,A,total,state\nT,B,total,state\nA,a1,,store\nB,b1,,store\n";
    let g = read_hierarchy(labelled.as_bytes()).unwrap();
    assert_eq!(g.level_order(), ["total", "state", "store"]);
    let clash = "parent,child,parent_level,child_level\nT,A,total,state\nT,B,top,state\nA,a1,,\nB,b1,,\n";
    assert!(matches!(read_hierarchy(clash.as_bytes()), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn exo_round_trip_and_errors() {
    let h = fig1();
    let p = toy_panel(&h, 40, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stream = oracle_exo(&h, &p.rows, 30, 2, 0.5, None, &mut rng);
    let rows = exo_rows(&h, &stream, &p.times);
    let mut buf = Vec::new();
    write_rows(&mut buf, &rows).unwrap();
    let back = read_exo(buf.as_slice(), &h, &p.time_index()).unwrap();
    assert_eq!(back, stream);

    let unknown = "series_id,origin_time,horizon,mean,variance\nA1,3,1,1.0,1.0\nZZ,3,1,1.0,\nYY,3,1,1.0,\n";
    let e = read_exo(unknown.as_bytes(), &h, &p.time_index()).unwrap_err().to_string();
    assert!(e.contains("ZZ") && e.contains("YY"), "{e}");

    let malformed = "series_id,origin_time,horizon,mean,variance\nA1,3,1,1.0,1.0\nA2,3,one,1.0,1.0\n";
    assert!(matches!(
        read_exo(malformed.as_bytes(), &h, &p.time_index()),
        Err(Error::Parse { line: 3, .. })
    ));
    let late = "series_id,origin_time,horizon,mean,variance\nA1,99,1,1.0,1.0\n";
    assert!(matches!(read_exo(late.as_bytes(), &h, &p.time_index()), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn record_files_round_trip() {
    let f = vec![
        ForecastRow {
            series_id: "A".into(),
            horizon: 1,
            mean: 0.1 + 0.2,
            variance: 1e-300,
        },
        ForecastRow {
            series_id: "B".into(),
            horizon: 2,
            mean: -3.5e12,
            variance: std::f64::consts::PI,
        },
    ];
    let mut buf = Vec::new();
    write_rows(&mut buf, &f).unwrap();
    assert!(buf.starts_with(FORECAST_HEADER.join(",").as_bytes()));
    assert_eq!(read_rows::<ForecastRow, _>(buf.as_slice()).unwrap(), f);

    let w = vec![WeightRow {
        time: "2016-01-03".into(),
        series_id: "A1".into(),
        source_level: "L1".into(),
        weight_mean: 0.25,
        weight_sd: 1.0 / 3.0,
    }];
    let mut buf = Vec::new();
    write_rows(&mut buf, &w).unwrap();
    assert_eq!(read_rows::<WeightRow, _>(buf.as_slice()).unwrap(), w);

    let s = vec![ScoreInputRow {
        method: "dhf".into(),
        origin_time: "7".into(),
        series_id: "T".into(),
        horizon: 3,
        mean: 2.0,
        variance: 0.5,
    }];
    let mut buf = Vec::new();
    write_rows(&mut buf, &s).unwrap();
    assert_eq!(read_rows::<ScoreInputRow, _>(buf.as_slice()).unwrap(), s);

    let mut buf = Vec::new();
    write_rows_with_header::<WeightRow, _>(&mut buf, &WEIGHT_HEADER, &[]).unwrap();
    assert!(read_rows::<WeightRow, _>(buf.as_slice()).unwrap().is_empty());
}

fn run(rec: &mut Reconciler, p: &SeriesPanel, exo: &dynrecon::pipeline::ExoStream, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    range
        .map(|t| {
            let f = rec.step(&p.rows[t], exo.at(t)).unwrap();
            let (m, v) = f.full_moments(rec.hierarchy(), 1).unwrap();
            m.into_iter().chain(v).collect()
        })
        .collect()
}

#[test]
fn checkpoint_resumes_exactly() {
    let h = fig1();
    let p = toy_panel(&h, 80, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let exo = oracle_exo(&h, &p.rows, 0, 2, 0.5, None, &mut rng);
    for (mode, pooled) in [(Mode::Prior, false), (Mode::OneStep, false), (Mode::OneStep, true), (Mode::TwoStep, false)] {
        let mut cfg = ReconcilerConfig::preset(Preset::Fast, 0.99);
        cfg.horizons = 2;
        cfg.combination.pooled = pooled;
        let mut a = Reconciler::new(&h, &cfg, mode, &p.rows).unwrap();
        run(&mut a, &p, &exo, 0..50);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &a, &p.times[49]).unwrap();
        let ck = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(ck.last_time, "49");
        let mut again = Vec::new();
        write_checkpoint(&mut again, &ck.reconciler, &ck.last_time).unwrap();
        assert_eq!(again, bytes, "{mode:?}");
        let mut b = ck.reconciler;
        assert!(same_bits(&run(&mut a, &p, &exo, 50..80), &run(&mut b, &p, &exo, 50..80)), "{mode:?}");
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let h = fig1();
    let p = toy_panel(&h, 30, 6);
    let rec = Reconciler::new(&h, &ReconcilerConfig::default(), Mode::OneStep, &p.rows).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &rec, "0").unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(read_checkpoint(flipped.as_slice()), Err(Error::Checkpoint(_))));

    let mut newer = bytes.clone();
    newer[8] = 9;
    let e = read_checkpoint(newer.as_slice()).unwrap_err().to_string();
    assert!(e.contains("version 9"), "{e}");

    assert!(matches!(read_checkpoint(&bytes[..bytes.len() / 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(read_checkpoint(&b"not a checkpoint at all"[..]), Err(Error::Checkpoint(_))));
}

#[test]
fn run_config_rules() {
    let cfg = RunConfig::from_json(r#"{"schema_version": 1, "preset": "fast", "methods": ["bu-diag", "dhf"]}"#).unwrap();
    assert_eq!(cfg.reconciler().unwrap().discounts, Preset::Fast.discounts());
    assert_eq!(cfg.methods, ["bu-diag", "dhf"]);
    assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);

    let typo = RunConfig::from_json(r#"{"schema_version": 1, "presett": "fast"}"#).unwrap_err().to_string();
    assert!(typo.contains("presett"), "{typo}");
    let nested = r#"{"schema_version": 1, "reconciler": {"horizon": 3}}"#;
    assert!(RunConfig::from_json(nested).unwrap_err().to_string().contains("horizon"));
    assert!(RunConfig::from_json(r#"{"preset": "fast"}"#).unwrap_err().to_string().contains("schema_version"));
    assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
    assert!(RunConfig::from_json(r#"{"schema_version": 1, "preset": "slow", "reconciler": {}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"schema_version": 1, "forecast_weekday": "Caturday"}"#).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"schema_version": 1, "data": "missing.csv"}"#).unwrap();
    assert!(RunConfig::load(&path).unwrap_err().to_string().contains("missing.csv"));
    std::fs::write(dir.path().join("d.csv"), "time,x\n").unwrap();
    std::fs::write(&path, r#"{"schema_version": 1, "data": "d.csv"}"#).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().data.unwrap(), dir.path().join("d.csv"));
}
