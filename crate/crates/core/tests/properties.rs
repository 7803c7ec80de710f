use norf_core::conditioning::{ortho_project, pixel_shuffle, pixel_unshuffle, voxelize, OrientedPoint, ORTHO_CHANNELS};
use norf_core::diffusion::{
    cfg_epsilon, dpm_solver_pp_sample, Arch, DenoiserNet, GaussianMixture, Guidance, NetSpec, NoiseSchedule,
};
use norf_core::geometry::{render_norf, Camera, Shape};
use norf_core::metrics::{aligned_chamfer, chamfer_l1, cube_rotations, fscore};
use norf_core::nn::{Graph, Parameterized, Tensor, TrainConfig};
use norf_core::registration::{inliers, umeyama, CorrespondenceSet};
use norf_core::sim3::{axis_angle, rotation_angle_between, Sim3Transform, Vec3};
use norf_core::triplane::{reference_std, Triplane};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(vec3(0.5), n)
}

fn rotation() -> impl Strategy<Value = norf_core::sim3::Mat3> {
    (vec3(1.0), 0.0..std::f64::consts::PI).prop_filter_map("axis", |(a, t)| {
        (a.norm() > 1e-3).then(|| axis_angle(a.normalize(), t))
    })
}

fn analytic_shape() -> impl Strategy<Value = Shape> {
    prop_oneof![
        (0.1..0.45f64).prop_map(Shape::sphere),
        (0.05..0.4f64, 0.05..0.4f64, 0.05..0.4f64).prop_map(|(a, b, c)| Shape::cuboid([a, b, c])),
        (0.05..0.4f64, 0.05..0.4f64).prop_map(|(r, h)| Shape::cylinder(r, h)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn lr_schedule_is_continuous_and_nonnegative(peak in 1e-5..1e-2f64, warm in 0usize..50, extra in 1usize..500) {
        let cfg = TrainConfig { peak_lr: peak, warmup_steps: warm, total_steps: warm + extra, batch_size: 1, seed: 0 };
        let mut prev = cfg.learning_rate(0);
        for s in 0..=cfg.total_steps {
            let lr = cfg.learning_rate(s);
            prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
            let jump_bound = peak / (warm.max(1) as f64) + peak * std::f64::consts::PI / extra as f64;
            prop_assert!((lr - prev).abs() <= jump_bound + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn triplane_nodes_are_exact(seed in 0u64..1000, lod in 1u32..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Triplane::random(lod, n, 1.0, &mut rng);
        let r = z.resolution();
        let c = |i: usize| (i as f64 + 0.5) / r as f64 - 0.5;
        for i in 0..r {
            for j in 0..r {
                let k = (i + j) % r;
                let f = z.interpolate([c(i), c(j), c(k)]).unwrap();
                prop_assert!(f[..n].iter().zip(z.node(0, i, j)).all(|(a, b)| (a - b).abs() < 1e-12));
                prop_assert!(f[n..2 * n].iter().zip(z.node(1, i, k)).all(|(a, b)| (a - b).abs() < 1e-12));
                prop_assert!(f[2 * n..].iter().zip(z.node(2, j, k)).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn normalization_inverts_inside_clip(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<Triplane> = (0..3).map(|_| Triplane::random(2, 3, 0.3, &mut rng)).collect();
        let std = reference_std(&zs).unwrap();
        let norm = zs[0].normalize(&std).unwrap();
        let back = norm.denormalize(&std).unwrap();
        for ((a, b), v) in back.planes().data().iter().zip(zs[0].planes().data()).zip(norm.planes().data()) {
            if v.abs() < 1.0 {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn analytic_sdf_is_one_lipschitz(shape in analytic_shape(), a in vec3(0.6), b in vec3(0.6)) {
        prop_assert!((shape.sdf(&a) - shape.sdf(&b)).abs() <= (a - b).norm() + 1e-12);
    }

    #[test]
    fn rendered_maps_are_consistent(shape in analytic_shape(), az in 0.0..6.28f64, el in -1.0..1.0f64, scale in 0.5..2.0f64) {
        let pose = Sim3Transform::new(axis_angle(Vec3::y(), az), Vec3::new(0.1, -0.05, 0.0), scale);
        let eye = Vec3::new(el.cos() * 3.0 * scale, el.sin() * 3.0 * scale, 1.0);
        let cam = Camera::look_at(eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 0.7, 16).unwrap();
        let map = render_norf(&shape, &pose, &cam).unwrap();
        prop_assert!(map.validate().is_ok());
        for px in (0..map.num_pixels()).filter(|&p| map.mask[p]) {
            let (o, d) = cam.pixel_ray(px / 16, px % 16);
            let hit = o + map.depth[px] * d;
            prop_assert!((pose.apply(&map.coord(px)) - hit).norm() < 1e-6);
            let g = shape.gradient(&map.coord(px)).normalize();
            prop_assert!(g.dot(&map.normal(px)) > 0.99);
        }
    }

    #[test]
    fn voxel_projection_ignores_point_order(pts in prop::collection::vec((vec3(0.5), vec3(1.0)), 1..60), lod in 1u32..4, rot in 0usize..60) {
        let points: Vec<OrientedPoint> = pts.iter().map(|(p, n)| OrientedPoint { position: *p, normal: *n }).collect();
        let mut shuffled = points.clone();
        shuffled.rotate_left(rot % points.len());
        shuffled.reverse();
        let a = ortho_project(&voxelize(&points, lod));
        let b = ortho_project(&voxelize(&shuffled, lod));
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.iter().zip(pb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unshuffle_roundtrip(h in 1usize..5, w in 1usize..5, c in 1usize..5, f in 1usize..4, seed in 0u64..100) {
        let (hh, ww) = (h * f, w * f);
        let data: Vec<f64> = (0..hh * ww * c).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64).collect();
        let u = pixel_unshuffle(&data, hh, ww, c, f).unwrap();
        prop_assert_eq!(u.len(), data.len());
        prop_assert_eq!(pixel_shuffle(&u, h, w, c * f * f, f).unwrap(), data);
    }

    #[test]
    fn ortho_shape_law(lod in 1u32..6) {
        let pts = vec![OrientedPoint { position: Vec3::zeros(), normal: Vec3::z() }];
        let o = norf_core::conditioning::OrthoNorf::from_planes(&ortho_project(&voxelize(&pts, lod)), lod).unwrap();
        let r = 1usize << lod;
        prop_assert_eq!(o.shape(), [r, r, 48]);
        prop_assert_eq!(o.data.len(), r * r * ORTHO_CHANNELS);
    }

    #[test]
    fn cfg_identities_hold(c in prop::collection::vec(-10.0..10.0f64, 1..20), seed in 0u64..1000) {
        let u: Vec<f64> = c.iter().enumerate().map(|(i, v)| v * 0.37 - (i as f64 + seed as f64).sin()).collect();
        prop_assert_eq!(cfg_epsilon(&c, &u, 0.0).unwrap(), u.clone());
        prop_assert_eq!(cfg_epsilon(&c, &u, 1.0).unwrap(), c.clone());
    }

    #[test]
    fn umeyama_order_invariance_and_covariance(src in cloud(4..40), r in rotation(), t in vec3(2.0), s in 0.2..3.0f64, q in rotation(), shift in vec3(1.0)) {
        let truth = Sim3Transform::new(r, t, s);
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let Ok(a) = umeyama(&src, &dst) else { return Ok(()) };
        let mut s2 = src.clone();
        let mut d2 = dst.clone();
        s2.reverse();
        d2.reverse();
        prop_assert_eq!(umeyama(&s2, &d2).unwrap(), a);
        let rigid = Sim3Transform::new(q, shift, 1.0);
        let moved: Vec<Vec3> = dst.iter().map(|p| rigid.apply(p)).collect();
        let b = umeyama(&src, &moved).unwrap();
        let expect = rigid.compose(&a);
        prop_assert!(rotation_angle_between(&b.rotation, &expect.rotation) < 1e-9);
        prop_assert!((b.translation - expect.translation).norm() < 1e-9);
        prop_assert!((b.scale - expect.scale).abs() < 1e-9);
    }

    #[test]
    fn inlier_count_monotone_in_threshold(norf in cloud(5..60), noise in cloud(5..60), t1 in 0.001..0.5f64, t2 in 0.001..0.5f64) {
        let n = norf.len().min(noise.len());
        let scene: Vec<Vec3> = norf[..n].iter().zip(&noise[..n]).map(|(p, e)| p + 0.2 * e).collect();
        let corr = CorrespondenceSet { norf: norf[..n].to_vec(), scene, pixels: (0..n).collect() };
        let id = Sim3Transform::identity();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(inliers(&id, &corr, lo).count() <= inliers(&id, &corr, hi).count());
    }

    #[test]
    fn chamfer_symmetric_nonnegative(a in cloud(1..50), b in cloud(1..50)) {
        let ab = chamfer_l1(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, chamfer_l1(&b, &a).unwrap());
        prop_assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fscore_monotone_in_threshold(a in cloud(1..40), b in cloud(1..40), t1 in 0.001..1.0f64, t2 in 0.001..1.0f64) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let (f_lo, f_hi) = (fscore(&a, &b, lo).unwrap(), fscore(&a, &b, hi).unwrap());
        prop_assert!((0.0..=1.0).contains(&f_lo));
        prop_assert!(f_lo <= f_hi + 1e-15);
    }

    #[test]
    fn aligned_chamfer_invariant_to_group_prerotation(a in cloud(1..30), b in cloud(1..30), k in 0usize..24) {
        let rs = cube_rotations();
        let rotated: Vec<Vec3> = a.iter().map(|p| rs[k] * p).collect();
        let x = aligned_chamfer(&a, &b, &rs).unwrap().0;
        let y = aligned_chamfer(&rotated, &b, &rs).unwrap().0;
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(x <= chamfer_l1(&a, &b).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn sampler_is_deterministic(seed in 0u64..1000, steps in 2usize..12) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let m = GaussianMixture::new(vec![0.6, 0.4], vec![vec![0.5, -0.2], vec![-0.4, 0.3]], vec![0.1, 0.2], &s).unwrap();
        let streams = || -> Vec<ChaCha8Rng> {
            (0..5).map(|i| { let mut r = ChaCha8Rng::seed_from_u64(seed); r.set_stream(i); r }).collect()
        };
        let a = dpm_solver_pp_sample(&m, None, &s, Guidance::Conditional, steps, &mut streams()).unwrap();
        let b = dpm_solver_pp_sample(&m, None, &s, Guidance::Conditional, steps, &mut streams()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn denoiser_gradients_match_finite_differences(seed in 0u64..1000, arch_pick in 0usize..3) {
        let arch = [Arch::Mlp, Arch::Conv, Arch::Unet][arch_pick];
        let size = if arch == Arch::Mlp { 1 } else { 4 };
        let spec = NetSpec { arch, size, state_channels: 2, cond_channels: 1, widths: vec![3, 4], time_dim: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenoiserNet::new(spec, &mut rng).unwrap();
        // Give the zero-initialised output layer some weight so every path carries gradient.
        for p in net.parameters_mut() {
            if p.data().iter().all(|v| *v == 0.0) {
                *p = Tensor::randn(&p.shape().to_vec(), 0.3, &mut rng);
            }
        }
        let batch = 2;
        let x: Vec<f64> = (0..batch * net.spec().state_dim()).map(|i| (i as f64 * 0.91 + seed as f64).sin()).collect();
        let c: Vec<f64> = (0..batch * net.spec().cond_dim()).map(|i| (i as f64 * 1.3).cos()).collect();
        let times = [17.0, 640.0];
        let loss_of = |net: &DenoiserNet| -> (f64, Vec<Tensor>) {
            let (xt, ct, tt) = net.inputs(&x, Some(&c), &times).unwrap();
            let mut g = Graph::new();
            let params = net.register(&mut g, true);
            let (xv, cv, tv) = (g.constant(xt), g.constant(ct), g.constant(tt));
            let out = net.record(&mut g, &params, xv, cv, tv).unwrap();
            let sq = g.square(out);
            let loss = g.mean(sq);
            let grads = g.backward(loss).unwrap();
            let list = params.iter().zip(net.parameters()).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
            (g.value(loss).data()[0], list)
        };
        let (_, grads) = loss_of(&net);
        let h = 1e-6;
        for (pi, gt) in grads.iter().enumerate() {
            for k in [0, gt.len() / 2, gt.len() - 1] {
                let mut up = net.clone();
                up.parameters_mut()[pi].data_mut()[k] += h;
                let mut dn = net.clone();
                dn.parameters_mut()[pi].data_mut()[k] -= h;
                let fd = (loss_of(&up).0 - loss_of(&dn).0) / (2.0 * h);
                let a = gt.data()[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                prop_assert!(err < 1e-4, "param {} entry {}: {} vs {}", pi, k, a, fd);
            }
        }
    }
}
