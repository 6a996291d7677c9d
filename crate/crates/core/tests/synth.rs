use vineyield_core::synth::*;

fn spec(keep: f64, seed: u64) -> FieldSpec {
    FieldSpec {
        blocks: vec![BlockSpec { name: "a".into(), rows: 4, row_length: 60.0, row_spacing: 3.0, vine_spacing: 1.5, x0: 0.0, y0: 0.0 }],
        image_spacing: 0.5,
        image_size: 16,
        blob_area_per_tha: 2.0,
        keep_rate: keep,
        seed,
        ..FieldSpec::default()
    }
}

#[test]
fn keep_rate_within_binomial_bounds() {
    let f = generate_field(&spec(0.5, 3)).unwrap();
    let n = f.frames_generated as f64;
    let k = f.frames.len() as f64;
    // 99% two-sided normal bound on a Binomial(n, ½) count.
    let half_width = 2.576 * (n * 0.25).sqrt();
    assert!((k - n / 2.0).abs() <= half_width, "kept {k} of {n}");
}

#[test]
fn smearing_conserves_interior_mass() {
    let s: Vec<f64> = (0..200).map(|i| 5.0 + (i as f64 * 0.37).sin() * 3.0).collect();
    let k = SmearKernel { weights: vec![0.25, 0.5, 0.25], offset: 0.77 };
    let out = harvester_smear(&s, &k, 0.77).unwrap();
    // Integer lags of 1..=3 samples: recorded[i] mixes true[i-1..=i-3].
    let lo = 20;
    let hi = 150;
    let rec: f64 = out[lo..hi].iter().sum();
    let tru: f64 = (lo..hi).map(|i| 0.25 * s[i - 1] + 0.5 * s[i - 2] + 0.25 * s[i - 3]).sum();
    assert!((rec - tru).abs() < 1e-9);
    // A pulse away from both ends keeps all of its mass.
    let mut pulse = vec![0.0; 60];
    pulse[20..30].iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + i as f64);
    let smeared = harvester_smear(&pulse, &SmearKernel { offset: 0.5, ..k }, 0.77).unwrap();
    let a: f64 = pulse.iter().sum();
    let b: f64 = smeared.iter().sum();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn files_are_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = write_field(&generate_field(&spec(0.8, 9)).unwrap(), a.path()).unwrap();
    let fb = write_field(&generate_field(&spec(0.8, 9)).unwrap(), b.path()).unwrap();
    for (x, y) in [
        (&fa.yield_csv, &fb.yield_csv),
        (&fa.images_csv, &fb.images_csv),
        (&fa.track_csv, &fb.track_csv),
        (&fa.detections, &fb.detections),
        (&fa.regions, &fb.regions),
    ] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let img = "images/frame_000005.png";
    assert_eq!(std::fs::read(a.path().join(img)).unwrap(), std::fs::read(b.path().join(img)).unwrap());
}

#[test]
fn rejects_bad_specs() {
    assert!(generate_field(&FieldSpec { keep_rate: 1.5, ..spec(1.0, 1) }).is_err());
    assert!(generate_field(&FieldSpec { blocks: vec![], ..spec(1.0, 1) }).is_err());
    let bad = FieldSpec { smear: SmearKernel { weights: vec![0.7], offset: 0.0 }, ..spec(1.0, 1) };
    assert!(generate_field(&bad).is_err());
}
