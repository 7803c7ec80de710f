use norf_core::registration::{ransac_register, umeyama, CorrespondenceSet, RansacConfig, DEFAULT_ITERATIONS};
use norf_core::sim3::{random_rotation, rotation_angle_between, Sim3Transform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn in_box(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3Transform {
    Sim3Transform::new(random_rotation(rng), in_box(rng, 1.0), rng.random_range(0.1..2.0))
}

#[test]
fn umeyama_recovers_noise_free_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let truth = random_sim3(&mut rng);
        let src: Vec<Vec3> = (0..50).map(|_| in_box(&mut rng, 0.5)).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = umeyama(&src, &dst).unwrap();
        assert!(rotation_angle_between(&est.rotation, &truth.rotation) < 1e-6);
        assert!((est.scale - truth.scale).abs() / truth.scale < 1e-9);
    }
}

#[test]
fn ransac_survives_thirty_percent_outliers() {
    let mut successes = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let truth = random_sim3(&mut rng);
        let mut corr = CorrespondenceSet::default();
        for i in 0..200 {
            let p = in_box(&mut rng, 0.5);
            corr.norf.push(p);
            corr.pixels.push(i);
            if i % 10 < 3 {
                // Uniform in the bounding box of the true scene object.
                let c = truth.translation;
                let h = truth.scale * 0.5 * 3f64.sqrt();
                corr.scene.push(c + in_box(&mut rng, h));
            } else {
                corr.scene.push(truth.apply(&p));
            }
        }
        let cfg = RansacConfig { threshold: 0.02 * truth.scale, iterations: DEFAULT_ITERATIONS, seed: trial };
        let res = ransac_register(&corr, &cfg).unwrap();
        if rotation_angle_between(&res.transform.rotation, &truth.rotation) < 1e-3 {
            successes += 1;
        }
    }
    assert!(successes >= 99, "{successes}/100");
}

#[test]
fn ransac_is_seed_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = random_sim3(&mut rng);
    let norf: Vec<Vec3> = (0..80).map(|_| in_box(&mut rng, 0.5)).collect();
    let scene: Vec<Vec3> = norf
        .iter()
        .enumerate()
        .map(|(i, p)| if i % 2 == 0 { truth.apply(p) } else { in_box(&mut rng, 2.0) })
        .collect();
    let corr = CorrespondenceSet { pixels: (0..norf.len()).collect(), norf, scene };
    let cfg = RansacConfig { threshold: 0.01, iterations: 64, seed: 3 };
    assert_eq!(ransac_register(&corr, &cfg).unwrap(), ransac_register(&corr, &cfg).unwrap());
}
