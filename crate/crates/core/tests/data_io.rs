use std::collections::HashSet;

use pehcm::data::{generate, ingest_features, write_binary, write_csv, Dataset, Sample, SyntheticSpec};
use pehcm::Error;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("pehcm-data-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn generate_write_ingest_round_trips_exactly() {
    let spec = SyntheticSpec {
        n_coarse: 3,
        fines_per_coarse: 2,
        instances_per_fine: 7,
        eval_instances_per_fine: 3,
        dim: 5,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    for (name, write) in [
        ("rt.csv", write_csv as fn(&std::path::Path, &[Sample], usize) -> pehcm::Result<()>),
        ("rt.bin", write_binary),
    ] {
        let path = tmp(name);
        write(&path, &data.train, data.dim).unwrap();
        let (dim, back) = ingest_features(&path).unwrap();
        assert_eq!(dim, 5);
        assert_eq!(back, data.train, "{name}");
    }
}

#[test]
fn files_without_fine_labels_round_trip() {
    let samples = vec![
        Sample::new(vec![0.5, -1.25], 0, None, 0),
        Sample::new(vec![1e-300, 3.0], 1, None, 1),
        Sample::new(vec![-0.0, 7.5], 0, None, 2),
    ];
    let path = tmp("nofine.csv");
    write_csv(&path, &samples, 2).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("dim=2,has_fine=0\n"));
    assert_eq!(ingest_features(&path).unwrap(), (2, samples));
}

#[test]
fn dataset_from_files_offsets_eval_ids() {
    let data = generate(&SyntheticSpec {
        instances_per_fine: 4,
        eval_instances_per_fine: 2,
        dim: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (train, eval) = (tmp("train.bin"), tmp("eval.csv"));
    write_binary(&train, &data.train, 3).unwrap();
    write_csv(&eval, &data.eval, 3).unwrap();
    let loaded = Dataset::from_files(&train, &eval).unwrap();
    assert_eq!(loaded.n_coarse, 5);
    let ids: HashSet<u64> = loaded.train.iter().chain(&loaded.eval).map(|s| s.instance_id).collect();
    assert_eq!(ids.len(), loaded.train.len() + loaded.eval.len());

    let other = tmp("other.csv");
    write_csv(&other, &[Sample::new(vec![1.0], 0, Some(0), 0)], 1).unwrap();
    assert!(matches!(Dataset::from_files(&train, &other), Err(Error::Contract(_))));
}

#[test]
fn malformed_rows_name_their_line() {
    let path = tmp("bad.csv");
    std::fs::write(&path, "dim=2,has_fine=1\n0,1,0.5,0.5\n1,0,0.5\n").unwrap();
    match ingest_features(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "dims=2\n").unwrap();
    assert!(matches!(ingest_features(&path), Err(Error::Parse { line: 1, .. })));
}

/// Mean pairwise distance within fine classes, within coarse classes across
/// fines, and across coarse classes, by exhaustive enumeration.
fn hierarchy_means(samples: &[Sample]) -> (f64, f64, f64) {
    let mut acc = [(0.0, 0usize); 3];
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let slot = if a.coarse != b.coarse {
                2
            } else if a.fine_label() == b.fine_label() {
                0
            } else {
                1
            };
            acc[slot].0 += dist(&a.features, &b.features);
            acc[slot].1 += 1;
        }
    }
    let m = |k: usize| acc[k].0 / acc[k].1 as f64;
    (m(0), m(1), m(2))
}

#[test]
fn default_spreads_give_nested_pair_distances() {
    for seed in 0..8 {
        let data = generate(&SyntheticSpec {
            dim: 16,
            instances_per_fine: 20,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (fine, coarse, cross) = hierarchy_means(&data.train);
        assert!(fine < coarse && coarse < cross, "seed {seed}: {fine} {coarse} {cross}");
    }
}
