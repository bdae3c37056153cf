use std::fs;
use std::path::Path;

use missfuse::datagen::{self, generate, read_cohort, write_cohort, Cohort, GenConfig, MANIFEST_FILE, TABLE_FILE};
use missfuse::{Error, ModalityMask, Sample};
use proptest::prelude::*;

fn round_trip(cohort: &Cohort) -> Cohort {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(cohort, dir.path()).unwrap();
    read_cohort(dir.path()).unwrap()
}

fn small_config() -> GenConfig {
    GenConfig {
        input_dims: vec![2, 3, 1, 2],
        latent_dim: 4,
        n_samples: 0,
        ..GenConfig::default()
    }
}

#[test]
fn empty_cohort_writes_header_only_and_round_trips() {
    let cohort = Cohort {
        config: small_config(),
        train: vec![],
        val: vec![],
        test: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir.path()).unwrap();
    let table = fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    assert_eq!(table.lines().count(), 1);
    assert!(table.starts_with("id,split,label,m0,m1,m2,m3,x0_0"));
    assert_eq!(read_cohort(dir.path()).unwrap(), cohort);
}

#[test]
fn one_sample_per_mask_pattern() {
    let config = small_config();
    let train: Vec<Sample> = ModalityMask::all_nonempty(4)
        .into_iter()
        .enumerate()
        .map(|(i, mask)| {
            let features = config
                .input_dims
                .iter()
                .enumerate()
                .map(|(m, &d)| mask.is_observed(m).then(|| (0..d).map(|j| (i * 10 + j) as f32 / 7.0).collect()))
                .collect();
            Sample::new(i as u64, features, i % 3)
        })
        .collect();
    let cohort = Cohort {
        config,
        train,
        val: vec![],
        test: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir.path()).unwrap();
    let table = fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    assert_eq!(table.lines().count(), 16);
    assert_eq!(read_cohort(dir.path()).unwrap(), cohort);
}

#[test]
fn generated_cohort_round_trips() {
    let cohort = generate(&GenConfig {
        n_samples: 500,
        seed: 17,
        ..GenConfig::default()
    })
    .unwrap();
    assert_eq!(cohort.len(), 500);
    assert_eq!(round_trip(&cohort), cohort);
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = GenConfig {
        n_samples: 200,
        seed: 5,
        ..GenConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_cohort(&generate(&cfg).unwrap(), a.path()).unwrap();
    write_cohort(&generate(&cfg).unwrap(), b.path()).unwrap();
    for f in [MANIFEST_FILE, TABLE_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let other = generate(&GenConfig { seed: 6, ..cfg.clone() }).unwrap();
    assert_ne!(other.train, generate(&cfg).unwrap().train);
}

fn corrupt(dir: &Path, edit: impl Fn(String) -> String) -> Error {
    let path = dir.join(TABLE_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, edit(text)).unwrap();
    read_cohort(dir).unwrap_err()
}

#[test]
fn malformed_tables_report_line_and_field() {
    let cohort = generate(&GenConfig {
        n_samples: 20,
        input_dims: vec![2, 2],
        subset_weights: Some(vec![0.0, 0.0, 1.0]),
        ..GenConfig::default()
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir.path()).unwrap();
    // Third line, first feature of modality 1.
    let err = corrupt(dir.path(), |t| {
        let mut lines: Vec<String> = t.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
        fields[7] = "abc".into();
        lines[2] = fields.join(",");
        lines.join("\n") + "\n"
    });
    match err {
        Error::Parse { line, field, .. } => assert_eq!((line, field.as_str()), (3, "x1_0")),
        other => panic!("unexpected {other}"),
    }

    write_cohort(&cohort, dir.path()).unwrap();
    let err = corrupt(dir.path(), |t| t.replacen(",train,", ",bogus,", 1));
    assert!(matches!(err, Error::Parse { ref field, .. } if field == "split"), "{err}");

    write_cohort(&cohort, dir.path()).unwrap();
    let err = corrupt(dir.path(), |t| {
        let mut lines: Vec<String> = t.lines().map(String::from).collect();
        lines[1] = lines[1].split(',').take(4).collect::<Vec<_>>().join(",");
        lines.join("\n") + "\n"
    });
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

    write_cohort(&cohort, dir.path()).unwrap();
    let err = corrupt(dir.path(), |t| {
        let mut lines: Vec<&str> = t.lines().collect();
        lines.pop();
        lines.join("\n") + "\n"
    });
    assert!(matches!(err, Error::Parse { ref field, .. } if field == "counts"), "{err}");
}

#[test]
fn stratification_within_one_sample() {
    let cfg = GenConfig {
        n_samples: 1001,
        split: [5.0, 2.0, 3.0],
        ..GenConfig::default()
    };
    let cohort = generate(&cfg).unwrap();
    let n = cohort.len() as f64;
    for class in 0..cfg.num_classes {
        let total = [&cohort.train, &cohort.val, &cohort.test]
            .iter()
            .map(|s| s.iter().filter(|x| x.label == class).count())
            .sum::<usize>() as f64;
        for split in [&cohort.train, &cohort.val, &cohort.test] {
            let k = split.iter().filter(|x| x.label == class).count() as f64;
            let target = total * split.len() as f64 / n;
            assert!((k - target).abs() <= 1.0, "class {class}: {k} vs {target}");
        }
    }
}

#[test]
fn invalid_distribution_is_a_configuration_error() {
    let cfg = GenConfig {
        subset_weights: Some(vec![1.0, f64::NAN, 1.0]),
        input_dims: vec![2, 2],
        ..GenConfig::default()
    };
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    let bad_rate = GenConfig {
        subset_weights: None,
        degraded_rate: 1.5,
        ..cfg
    };
    assert!(matches!(generate(&bad_rate), Err(Error::Config(_))));
    assert!(datagen::parse_split("40:7").is_err());
}

fn arb_sample(dims: Vec<usize>) -> impl Strategy<Value = Sample> {
    let m = dims.len();
    (
        any::<u64>(),
        0usize..3,
        1u32..(1 << m),
        prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, dims.iter().sum::<usize>()),
    )
        .prop_map(move |(id, label, bits, values)| {
            let mask = ModalityMask::from_bits(bits, m).unwrap();
            let mut offset = 0;
            let features = dims
                .iter()
                .enumerate()
                .map(|(j, &d)| {
                    let slice = values[offset..offset + d].to_vec();
                    offset += d;
                    mask.is_observed(j).then_some(slice)
                })
                .collect();
            Sample::new(id, features, label)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arbitrary_cohorts_round_trip(
        train in prop::collection::vec(arb_sample(vec![3, 1, 2]), 0..12),
        val in prop::collection::vec(arb_sample(vec![3, 1, 2]), 0..5),
        test in prop::collection::vec(arb_sample(vec![3, 1, 2]), 0..5),
        separation in 0.0f64..10.0,
    ) {
        let cohort = Cohort {
            config: GenConfig {
                input_dims: vec![3, 1, 2],
                latent_dim: 4,
                separation,
                subset_weights: Some(vec![0.5, 0.25, 1.0, 0.0, 3.0, 1.0 / 3.0, 0.1]),
                ..GenConfig::default()
            },
            train,
            val,
            test,
        };
        prop_assert_eq!(round_trip(&cohort), cohort);
    }
}
