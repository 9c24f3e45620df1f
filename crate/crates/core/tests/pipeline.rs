use kentreg::clustering::ClusterMode;
use kentreg::em::{register, AveragingMode, RegistrationConfig};
use kentreg::geometry::{rotation_error, translation_error, RigidTransform, RotationMatrix};
use kentreg::icp::{icp_register, IcpConfig};
use kentreg::synthetic::{generate_scene, make_pair, random_transform, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noisy_pair(seed: u64, fraction: f64) -> (kentreg::geometry::PointCloud, kentreg::geometry::PointCloud, RigidTransform) {
    let mut spec = SceneSpec::room_corner(600, seed);
    spec.noise_sigma = 0.005;
    spec.outlier_fraction = fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = random_transform(&mut rng, 10f64.to_radians(), 0.3);
    let (m, o) = make_pair(&spec, &t).unwrap();
    (m.cloud, o.cloud, t)
}

#[test]
fn joint_mode_recovers_noisy_scenes() {
    for seed in 0..6 {
        let (model, observed, t) = noisy_pair(seed, 0.0);
        let cfg = RegistrationConfig { seed, ..Default::default() };
        let res = register(&model, &observed, &cfg).unwrap();
        let er = rotation_error(&t.rotation, &res.transform.rotation).to_degrees();
        let et = translation_error(&t.translation, &res.transform.translation);
        assert!(er < 0.5, "seed {seed}: e_R {er} deg");
        assert!(et < 0.02, "seed {seed}: e_t {et}");
        assert!(res.q_trace.iter().all(|q| q.is_finite()));
        assert_eq!(res.per_cluster_rotations.len(), res.clusters.len());
    }
}

#[test]
fn averaging_modes_run_but_trail_joint() {
    let mut totals = [0.0; 3];
    for seed in 0..3 {
        let (model, observed, t) = noisy_pair(seed, 0.0);
        for (total, averaging) in totals
            .iter_mut()
            .zip([AveragingMode::Joint, AveragingMode::PerIteration, AveragingMode::Final])
        {
            let cfg = RegistrationConfig { seed, averaging, ..Default::default() };
            let res = register(&model, &observed, &cfg).unwrap();
            assert!(kentreg::geometry::is_rotation(res.transform.rotation.matrix(), 1e-9));
            *total += rotation_error(&t.rotation, &res.transform.rotation);
        }
    }
    // averaging rotations cannot remove what each plane cluster leaves free
    assert!(totals[0] < totals[1] && totals[0] < totals[2], "{totals:?}");
}

#[test]
fn shared_centroids_mode_recovers_a_noisy_scene() {
    let (model, observed, t) = noisy_pair(5, 0.05);
    let cfg = RegistrationConfig { cluster_mode: ClusterMode::SharedCentroids, ..Default::default() };
    let res = register(&model, &observed, &cfg).unwrap();
    assert!(rotation_error(&t.rotation, &res.transform.rotation).to_degrees() < 1.0);
}

#[test]
fn identical_clouds_stay_in_place() {
    // noise-free: the identity is an exact fixed point
    let cloud = generate_scene(&SceneSpec::room_corner(1000, 3)).unwrap().cloud;
    let res = register(&cloud, &cloud, &RegistrationConfig::default()).unwrap();
    assert!(rotation_error(&RotationMatrix::identity(), &res.transform.rotation) < 1e-9);
    assert!(res.transform.translation.norm() < 1e-9);

    // noisy normals move the fixed point slightly off the identity
    let mut spec = SceneSpec::room_corner(1000, 3);
    spec.noise_sigma = 0.005;
    let cloud = generate_scene(&spec).unwrap().cloud;
    let res = register(&cloud, &cloud, &RegistrationConfig::default()).unwrap();
    let er = rotation_error(&RotationMatrix::identity(), &res.transform.rotation);
    assert!(er < 1e-3, "e_R {er}");
    assert!(res.transform.translation.norm() < 5e-3);
}

#[test]
fn registration_is_deterministic() {
    let (model, observed, _) = noisy_pair(9, 0.1);
    let cfg = RegistrationConfig { seed: 4, ..Default::default() };
    let a = register(&model, &observed, &cfg).unwrap();
    let b = register(&model, &observed, &cfg).unwrap();
    assert_eq!(a.transform, b.transform);
    assert_eq!(a.q_trace, b.q_trace);
}

#[test]
fn alignment_and_transform_are_inverse() {
    let (model, observed, _) = noisy_pair(2, 0.0);
    let res = register(&model, &observed, &RegistrationConfig::default()).unwrap();
    let round = res.transform.compose(&res.alignment);
    assert!(rotation_error(&RotationMatrix::identity(), &round.rotation) < 1e-12);
    assert!(round.translation.norm() < 1e-12);
}

#[test]
fn kent_and_icp_report_the_same_direction() {
    // both estimate the model-to-observed transform
    let (model, observed, t) = noisy_pair(11, 0.0);
    let kent = register(&model, &observed, &RegistrationConfig::default()).unwrap();
    let icp = icp_register(&model, &observed, &IcpConfig::default()).unwrap();
    assert!(rotation_error(&t.rotation, &kent.transform.rotation).to_degrees() < 1.0);
    assert!(rotation_error(&t.rotation, &icp.transform.rotation).to_degrees() < 1.0);
}
