use std::fs;

use depthflow_core::io::Pfm;
use depthflow_core::metrics::angular_errors;
use depthflow_core::scenes::{
    draw_pools, fd_normals, generate_dataset, generate_outdoor, generate_pool_scene,
    generate_scene, load_dataset, pixel_center, pixel_size, render, sample_batch, save_dataset,
    storage_rounded, DatasetParams, Pool, Primitive, ScenePools, SceneSample, Surface, DEFAULT_MIX,
    INDOOR_RANGE, MANIFEST_FILE, MAX_DEPTH,
};
use depthflow_core::{Error, Mask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean angle between finite-difference and stored normals over pixels
/// whose stencil stays on one smooth facet.
fn consistency(s: &SceneSample) -> Option<f64> {
    let res = s.resolution();
    let (fd, ok) = fd_normals(&s.depth, &s.valid, pixel_size(res)).unwrap();
    let mask = ok.and(&s.valid).unwrap();
    let errs = angular_errors(&fd, &s.normals, &mask).unwrap();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

fn every_kind(res: usize, seeds: u64) -> Vec<SceneSample> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for kind in Primitive::ALL {
            out.push(generate_scene(kind, res, seed).unwrap());
        }
        out.push(generate_outdoor(res, seed).unwrap());
    }
    out
}

#[test]
fn finite_difference_normals_agree_at_32() {
    for s in every_kind(32, 8) {
        let e = consistency(&s).expect("interior pixels");
        assert!(e < 2.0, "{:?} {:?}: {e}", s.pool, s.primitive);
    }
}

#[test]
fn finite_difference_normals_tighten_at_128() {
    for s in every_kind(128, 3) {
        let e = consistency(&s).expect("interior pixels");
        assert!(e < 0.5, "{:?} {:?}: {e}", s.pool, s.primitive);
    }
}

#[test]
fn tilted_plane_is_exact() {
    // Height toward the viewer is z = a x + b y + c, i.e. depth -z.
    let (a, b, c) = (0.3, -0.2, -5.0);
    let s = render(
        &[Surface::Plane {
            a: -a,
            b: -b,
            c: -c,
        }],
        32,
        Pool::IndoorLike,
        Primitive::Plane,
    )
    .unwrap();
    let want = {
        let n = (a * a + b * b + 1.0f64).sqrt();
        [-a / n, -b / n, 1.0 / n]
    };
    let (fd, ok) = fd_normals(&s.depth, &s.valid, pixel_size(32)).unwrap();
    assert_eq!(ok.count(), 30 * 30);
    for (i, (f, n)) in fd.as_slice().iter().zip(s.normals.as_slice()).enumerate() {
        for k in 0..3 {
            assert!((n[k] - want[k]).abs() < 1e-12);
            if ok.as_slice()[i] {
                assert!((f[k] - want[k]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn fronto_parallel_plane() {
    let s = render(
        &[Surface::Plane {
            a: 0.0,
            b: 0.0,
            c: 3.0,
        }],
        16,
        Pool::IndoorLike,
        Primitive::Plane,
    )
    .unwrap();
    assert!(s.depth.as_slice().iter().all(|&d| d == 3.0));
    assert!(s.normals.as_slice().iter().all(|n| *n == [0.0, 0.0, 1.0]));
    assert_eq!(s.valid.count(), 256);
}

#[test]
fn sphere_apex_and_silhouette() {
    let res = 129;
    let sphere = Surface::Sphere {
        cx: 0.0,
        cy: 0.0,
        depth: 4.0,
        radius: 1.5,
    };
    let back = Surface::Plane {
        a: 0.0,
        b: 0.0,
        c: 9.0,
    };
    let s = render(&[back, sphere], res, Pool::IndoorLike, Primitive::Sphere).unwrap();
    assert_eq!(pixel_center(64, 64, res), (0.0, 0.0));
    assert_eq!(*s.normals.get(64, 64), [0.0, 0.0, 1.0]);
    assert_eq!(*s.depth.get(64, 64), 2.5);
    let steepest = s
        .normals
        .as_slice()
        .iter()
        .zip(s.depth.as_slice())
        .filter(|(_, &d)| d < 9.0)
        .map(|(n, _)| n[2].clamp(-1.0, 1.0).acos().to_degrees())
        .fold(0.0, f64::max);
    assert!(steepest > 80.0 && steepest < 90.0, "{steepest}");
    // Grazing pixels are masked out.
    for ((n, d), &ok) in s
        .normals
        .as_slice()
        .iter()
        .zip(s.depth.as_slice())
        .zip(s.valid.as_slice())
    {
        if *d < 9.0 && n[2] < 0.5 {
            assert!(!ok);
        }
    }
}

#[test]
fn generated_scenes_respect_their_ranges() {
    for seed in 0..20 {
        for kind in Primitive::ALL {
            let s = generate_scene(kind, 24, seed).unwrap();
            assert!(s
                .depth
                .as_slice()
                .iter()
                .all(|d| (INDOOR_RANGE.0..=INDOOR_RANGE.1).contains(d)));
            for n in s.normals.as_slice() {
                assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-12);
            }
            assert!(s
                .image_proxy
                .as_slice()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
        let o = generate_outdoor(24, seed).unwrap();
        let far = o.depth.as_slice().iter().cloned().fold(0.0, f64::max);
        assert!(far <= MAX_DEPTH && far > 60.0, "{far}");
    }
    assert!(matches!(
        generate_scene(Primitive::Plane, 7, 0),
        Err(Error::Domain(_))
    ));
    assert!(matches!("cube".parse::<Primitive>(), Err(Error::Config(_))));
}

#[test]
fn pool_fraction_concentrates() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let labels = draw_pools(DEFAULT_MIX, 100_000, &mut rng).unwrap();
    let indoor = labels.iter().filter(|p| **p == Pool::IndoorLike).count() as f64 / 1e5;
    assert!((indoor - 0.9).abs() < 0.01, "{indoor}");
}

#[test]
fn sample_batch_behaviour() {
    let pools = ScenePools {
        indoor: (0..3)
            .map(|s| generate_pool_scene(Pool::IndoorLike, 8, s).unwrap())
            .collect(),
        outdoor: vec![generate_outdoor(8, 0).unwrap()],
        mix: [1.0, 0.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_batch(&pools, 200, &mut rng).unwrap();
    assert!(b.iter().all(|s| s.pool == Pool::IndoorLike));

    let mixed = ScenePools {
        mix: DEFAULT_MIX,
        ..pools.clone()
    };
    let draw = |seed| -> Vec<Pool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_batch(&mixed, 50, &mut rng)
            .unwrap()
            .iter()
            .map(|s| s.pool)
            .collect()
    };
    assert_eq!(draw(5), draw(5));

    let empty = ScenePools {
        outdoor: Vec::new(),
        ..pools
    };
    assert!(matches!(
        sample_batch(&empty, 4, &mut rng),
        Err(Error::Contract(_))
    ));
}

fn params(count: usize) -> DatasetParams {
    DatasetParams {
        seed: 21,
        count,
        resolution: 16,
        mix: DEFAULT_MIX,
    }
}

#[test]
fn save_load_round_trip_at_storage_precision() {
    let dir = tempfile::tempdir().unwrap();
    let p = params(6);
    let samples = generate_dataset(&p).unwrap();
    let manifest = save_dataset(dir.path(), &p, &samples).unwrap();
    let (loaded_manifest, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded_manifest, manifest);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(&storage_rounded(a), b);
    }
}

#[test]
fn regeneration_gives_identical_checksums() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p = params(5);
    let ma = save_dataset(a.path(), &p, &generate_dataset(&p).unwrap()).unwrap();
    let mb = save_dataset(b.path(), &p, &generate_dataset(&p).unwrap()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = save_dataset(dir.path(), &params(0), &[]).unwrap();
    assert!(m.samples.is_empty());
    assert!(load_dataset(dir.path()).unwrap().1.is_empty());
}

#[test]
fn damaged_files_are_corruption_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = params(2);
    let m = save_dataset(dir.path(), &p, &generate_dataset(&p).unwrap()).unwrap();
    let depth = dir.path().join(&m.samples[0].depth.path);
    let bytes = fs::read(&depth).unwrap();

    fs::write(&depth, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt(_))));
    assert!(matches!(Pfm::load(&depth), Err(Error::Corrupt(_))));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    fs::write(&depth, &flipped).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt(_))));

    fs::write(&depth, &bytes).unwrap();
    assert!(load_dataset(dir.path()).is_ok());
    fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt(_))));
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset(dir.path().join("nope")),
        Err(Error::Io(_))
    ));
}

#[test]
fn masks_exclude_facet_boundaries() {
    let s = generate_scene(Primitive::Wedge, 32, 3).unwrap();
    // The ridge column and its neighbours are never valid.
    let invalid_cols: Vec<usize> = (0..32)
        .filter(|&c| (0..32).all(|r| !*s.valid.get(c, r)))
        .collect();
    assert!(!invalid_cols.is_empty());
    let all = Mask::filled(32, 32, true);
    assert!(s.valid.count() < all.count());
}
