use std::collections::BTreeSet;

use trajdiff_core::data::{
    generate_synthetic, leave_one_out_splits, load_ethucy, parse_annotations, read_scenes, write_scenes, Mode,
    SyntheticParams, SyntheticSpec, WindowSpec,
};
use trajdiff_core::geometry::{to_invariant_future, to_invariant_history};
use trajdiff_core::Error;

fn spec() -> WindowSpec {
    WindowSpec {
        t_p: 8,
        t_f: 12,
        stride: 1,
        dt: 0.4,
        swap_xy: false,
    }
}

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn one_straight_walker_gives_one_window() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = (0..20).map(|k| format!("{}\t1.0\t{}\t2.0\n", 10 * k, 0.5 * k as f64)).collect();
    let scenes = load_ethucy(&write(&dir, "walk.txt", &text), &spec()).unwrap();
    assert_eq!(scenes.len(), 1);
    let s = &scenes[0];
    assert_eq!(s.agents.len(), 1);
    assert_eq!(s.focal_track().past.len(), 8);
    assert_eq!(s.focal_track().future.len(), 12);
    assert_eq!(s.focal_track().future[11], [9.5, 2.0]);
    s.validate(8, 12).unwrap();
}

#[test]
fn gaps_exclude_agents_from_windows() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for k in 0..20 {
        text.push_str(&format!("{} 1 {} 0\n", 10 * k, k));
        if k != 3 {
            text.push_str(&format!("{} 2 {} 5\n", 10 * k, k));
        }
        if k != 15 {
            text.push_str(&format!("{} 3 {} 9\n", 10 * k, k));
        }
    }
    let scenes = load_ethucy(&write(&dir, "gaps.txt", &text), &spec()).unwrap();
    // agent 2 misses a history frame, agent 3 a future frame
    assert_eq!(scenes.len(), 1);
    let ids: Vec<i64> = scenes[0].agents.iter().map(|a| a.agent_id).collect();
    assert_eq!(ids, vec![1, 3]);
    assert!(scenes[0].agents[1].future.is_empty());
    assert_eq!(scenes[0].focal_track().agent_id, 1);
}

#[test]
fn stride_and_frame_step() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = (0..30).map(|k| format!("{} 7 {} 0\n", 6 * k, k)).collect();
    let p = write(&dir, "long.txt", &text);
    assert_eq!(load_ethucy(&p, &spec()).unwrap().len(), 11);
    let s3 = load_ethucy(&p, &WindowSpec { stride: 3, ..spec() }).unwrap();
    assert_eq!(s3.len(), 4);
    assert_eq!(s3[1].focal_track().past[0], [3.0, 0.0]);
}

#[test]
fn swapped_columns() {
    let rows = parse_annotations("1 2 3.5 4.5\n", "x", true).unwrap();
    assert_eq!((rows[0].x, rows[0].y), (4.5, 3.5));
}

#[test]
fn malformed_rows_report_line_numbers() {
    let err = parse_annotations("0 1 0 0\n\n10 1 abc 0\n", "f.txt", false).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let err = parse_annotations("0 1 0 0\n0 1 1 1\n", "f.txt", false).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }));
    assert!(parse_annotations("0 1 0\n", "f.txt", false).is_err());
    assert!(parse_annotations("0.5 1 0 0\n", "f.txt", false).is_err());
    assert_eq!(parse_annotations("# c\n10.0\t2.0\t1\t1\n", "f", false).unwrap().len(), 1);
}

#[test]
fn scenes_round_trip_through_the_canonical_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for k in 0..25 {
        for a in 0..3 {
            text.push_str(&format!("{} {} {:.4} {:.4}\n", 10 * k, a, 0.31 * k as f64 + a as f64, (0.17 * k as f64).sin()));
        }
    }
    let scenes = load_ethucy(&write(&dir, "multi.txt", &text), &spec()).unwrap();
    assert_eq!(scenes.len(), 18);
    let synth = generate_synthetic(&SyntheticSpec {
        params: SyntheticParams {
            scenes: 5,
            ..Default::default()
        },
        seed: 3,
        t_p: 8,
        t_f: 12,
        dt: 0.4,
    })
    .unwrap();
    for set in [scenes, synth] {
        let path = dir.path().join("scenes.jsonl");
        write_scenes(&path, &set).unwrap();
        assert_eq!(read_scenes(&path).unwrap(), set);
    }
    let bad = write(&dir, "bad.jsonl", "{\"format\":\"other\",\"version\":1}\n");
    assert!(read_scenes(&bad).is_err());
}

#[test]
fn windows_never_cross_files() {
    let dir = tempfile::tempdir().unwrap();
    let a: String = (0..12).map(|k| format!("{} 1 {} 0\n", 10 * k, k)).collect();
    let b: String = (12..20).map(|k| format!("{} 1 {} 0\n", 10 * k, k)).collect();
    assert!(load_ethucy(&write(&dir, "a.txt", &a), &spec()).unwrap().is_empty());
    assert!(load_ethucy(&write(&dir, "b.txt", &b), &spec()).unwrap().is_empty());
}

#[test]
fn leave_one_out() {
    let s = leave_one_out_splits("ETH").unwrap();
    assert_eq!(s.test, vec!["biwi_eth.txt"]);
    assert_eq!(
        s.train,
        vec!["biwi_hotel.txt", "students001.txt", "students003.txt", "crowds_zara01.txt", "crowds_zara02.txt"]
    );
    assert!(matches!(leave_one_out_splits("eth2"), Err(Error::Config(m)) if m.contains("Zara2")));
    for name in ["ETH", "hotel", "Univ", "zara1", "Zara2"] {
        let s = leave_one_out_splits(name).unwrap();
        let train: BTreeSet<_> = s.train.iter().collect();
        let test: BTreeSet<_> = s.test.iter().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 6);
    }
}

fn synth(weights: [f64; 4], noise: f64, scenes: usize, seed: u64) -> Vec<trajdiff_core::data::Scene> {
    generate_synthetic(&SyntheticSpec {
        params: SyntheticParams {
            scenes,
            weights,
            noise,
            ..Default::default()
        },
        seed,
        t_p: 8,
        t_f: 12,
        dt: 0.4,
    })
    .unwrap()
}

#[test]
fn noiseless_straight_futures_have_constant_displacements() {
    for s in synth([1.0, 0.0, 0.0, 0.0], 0.0, 20, 1) {
        s.validate(8, 12).unwrap();
        let t = s.focal_track();
        let h = to_invariant_history(t).unwrap();
        let y = to_invariant_future(t, &h.rotation).unwrap().displacements;
        for d in &y {
            assert!((d[0] - y[0][0]).abs() < 1e-12 && d[1].abs() < 1e-12);
        }
        assert_eq!(s.label.as_ref().unwrap().mode, Mode::Straight);
        assert_eq!(s.endpoint_of(Mode::Straight).unwrap(), t.future[11]);
    }
}

#[test]
fn mode_frequencies_follow_weights() {
    let scenes = synth([0.0, 0.5, 0.5, 0.0], 0.05, 1000, 11);
    let left = scenes.iter().filter(|s| s.label.as_ref().unwrap().mode == Mode::Left).count() as f64;
    let sd = (1000.0f64 * 0.25).sqrt();
    assert!((left - 500.0).abs() <= 3.0 * sd, "{left}");
    assert!(scenes.iter().all(|s| matches!(s.label.as_ref().unwrap().mode, Mode::Left | Mode::Right)));
}

#[test]
fn generation_is_seeded() {
    assert_eq!(synth([0.25; 4], 0.1, 10, 5), synth([0.25; 4], 0.1, 10, 5));
    assert_ne!(synth([0.25; 4], 0.1, 10, 5), synth([0.25; 4], 0.1, 10, 6));
    // scene i does not depend on how many scenes are generated
    assert_eq!(synth([0.25; 4], 0.1, 10, 5)[..4], synth([0.25; 4], 0.1, 4, 5)[..]);
    let bad = SyntheticSpec {
        params: SyntheticParams {
            weights: [0.5, 0.6, 0.0, 0.0],
            ..Default::default()
        },
        seed: 0,
        t_p: 8,
        t_f: 12,
        dt: 0.4,
    };
    assert!(generate_synthetic(&bad).is_err());
}
