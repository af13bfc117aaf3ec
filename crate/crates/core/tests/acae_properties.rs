use acae::acae::{
    assemble_chiral, loss_and_gradient, normalize, projected_reconstruction_loss, reconstruction_loss, row_sums,
    sparsity_loss, swap_sides, AcaeWeights, ChiralBlocks, LatentPose, LossConfig,
};
use acae::corpus::{Example, PoseCorpus};
use acae::geometry::{apply_rigid, chirality_flip, CameraModel, Point3, PoseMatrix, RigidTransform};
use acae::gradcheck::{check_gradient, GradCheckSettings};
use acae::skeleton::{build_catalog, latent_partition, preset, JointCatalog};
use nalgebra::{DMatrix, Matrix3, Vector3};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL_FORMATS: [&str; 5] = ["lsp", "h36m", "mpii", "coco", "smpl"];

fn catalog(name: &str) -> JointCatalog {
    build_catalog(&preset(name).unwrap()).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> PoseMatrix {
    PoseMatrix::complete(
        (0..j)
            .map(|_| {
                Point3::new(
                    rng.random_range(-500.0..500.0),
                    rng.random_range(-800.0..800.0),
                    rng.random_range(2700.0..3300.0),
                )
            })
            .collect(),
    )
}

/// Random mixed-sign weights, redrawn until every normalized entry is at most
/// 3 in magnitude (a raw row summing to nearly zero makes the affine
/// combination arbitrarily ill-conditioned).
fn random_weights(rng: &mut ChaCha8Rng, cat: &JointCatalog, latents: usize, chiral: bool) -> AcaeWeights {
    loop {
        let w = if chiral {
            let part = latent_partition(cat, latents).unwrap();
            let enc = ChiralBlocks::from_fn(part.blocks(), cat.sides(), || rng.random_range(-0.3..1.0));
            let dec = ChiralBlocks::from_fn(cat.sides(), part.blocks(), || rng.random_range(-0.3..1.0));
            AcaeWeights::chiral(enc, dec).unwrap()
        } else {
            let j = cat.len();
            AcaeWeights::dense(
                DMatrix::from_fn(latents, j, |_, _| rng.random_range(-0.3..1.0)),
                DMatrix::from_fn(j, latents, |_, _| rng.random_range(-0.3..1.0)),
            )
            .unwrap()
        };
        if let Ok(ae) = w.normalized() {
            if ae.enc.abs().max() <= 3.0 && ae.dec.abs().max() <= 3.0 {
                return w;
            }
        }
    }
}

/// A latent count in 4..=8 that admits a chirality partition.
fn chiral_latents(rng: &mut ChaCha8Rng, cat: &JointCatalog) -> usize {
    let start = rng.random_range(4..=8);
    (start..=8)
        .chain(4..start)
        .find(|&l| latent_partition(cat, l).is_ok())
        .expect("some latent count in 4..=8 is admissible")
}

fn random_corpus(rng: &mut ChaCha8Rng, j: usize, k: usize) -> PoseCorpus {
    PoseCorpus::new(
        (0..k)
            .map(|_| Example {
                pose: random_pose(rng, j),
                camera: CameraModel::new(
                    rng.random_range(800.0..1200.0),
                    rng.random_range(800.0..1200.0),
                    500.0,
                    500.0,
                )
                .unwrap(),
                tag: "t".into(),
            })
            .collect(),
    )
    .unwrap()
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
    RigidTransform::from_axis_angle(axis + Vector3::new(1e-3, 0.0, 0.0), rng.random_range(-3.1..3.1), t)
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

#[test]
fn gradient_matches_finite_differences() {
    let settings = GradCheckSettings::default();
    for (projected, chiral) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut compared = 0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let cat = catalog(SMALL_FORMATS[seed as usize % SMALL_FORMATS.len()]);
            let latents = chiral_latents(&mut rng, &cat);
            let w = random_weights(&mut rng, &cat, latents, chiral);
            let k = rng.random_range(4..=16);
            let corpus = random_corpus(&mut rng, cat.len(), k);
            let cfg = LossConfig {
                projected,
                lambda_sparse: 0.3,
            };
            let r = check_gradient(&w, &corpus, &cat.weights(true), &cfg, &settings).unwrap();
            assert!(
                r.max_relative_error < 1e-5,
                "projected={projected} chiral={chiral} seed={seed}: {r:?}"
            );
            assert!(r.compared * 10 >= r.parameters * 9, "{r:?}");
            assert!(r.loss_discrepancy.abs() < 1e-10 * r.loss, "{r:?}");
            compared += r.compared;
        }
        assert!(compared > 0);
    }
}

#[test]
fn zero_residual_gives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cat = catalog("lsp");
    let corpus = random_corpus(&mut rng, cat.len(), 8);
    let w = AcaeWeights::identity(cat.len());
    for projected in [false, true] {
        let cfg = LossConfig {
            projected,
            lambda_sparse: 0.0,
        };
        let (terms, grad) = loss_and_gradient(&w, &corpus, &cat.weights(true), &cfg).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(grad.param_slices().iter().all(|s| s.iter().all(|&g| g == 0.0)));
    }
}

#[test]
fn reconstruction_losses_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cat = catalog("h36m");
    let j = cat.len();
    let w = random_weights(&mut rng, &cat, 6, false);
    let corpus = random_corpus(&mut rng, j, 7);
    let lw = cat.weights(true);
    let (a, d) = (normalize(&w.raw_enc()).unwrap(), normalize(&w.raw_dec()).unwrap());

    let mut l3 = 0.0;
    let mut lp = 0.0;
    for ex in &corpus.examples {
        let p = &ex.pose.joints;
        let mut q = vec![[0.0; 3]; 6];
        for l in 0..6 {
            for i in 0..j {
                for c in 0..3 {
                    q[l][c] += a[(l, i)] * p[i][c];
                }
            }
        }
        for jj in 0..j {
            let mut r = [0.0; 3];
            for l in 0..6 {
                for c in 0..3 {
                    r[c] += d[(jj, l)] * q[l][c];
                }
            }
            l3 += lw[jj] * (0..3).map(|c| (p[jj][c] - r[c]).abs()).sum::<f64>();
            let cam = &ex.camera;
            let du = cam.fx * p[jj][0] / p[jj][2] - cam.fx * r[0] / r[2];
            let dv = cam.fy * p[jj][1] / p[jj][2] - cam.fy * r[1] / r[2];
            lp += lw[jj] * (du.abs() + dv.abs());
        }
    }
    let k = corpus.len() as f64;
    let got3 = reconstruction_loss(&w, &corpus, &lw).unwrap();
    let gotp = projected_reconstruction_loss(&w, &corpus, &lw).unwrap();
    assert!((got3 - l3 / k).abs() < 1e-12 * got3, "{got3} vs {}", l3 / k);
    assert!((gotp - lp / k).abs() < 1e-12 * gotp, "{gotp} vs {}", lp / k);

    let sparse: f64 = a.iter().chain(d.iter()).map(|x| x.abs()).sum();
    let got = sparsity_loss(&w).unwrap();
    assert!((got - sparse).abs() < 1e-12 * sparse);
}

#[test]
fn convex_weights_have_sparsity_l_plus_j() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = AcaeWeights::init_dense(5, 14, &mut rng);
    assert!((sparsity_loss(&w).unwrap() - 19.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn encode_and_decode_commute_with_rigid_maps(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = catalog(SMALL_FORMATS[(seed % 5) as usize]);
        let ae = random_weights(&mut rng, &cat, 6, false).normalized().unwrap();
        let p = random_pose(&mut rng, cat.len());
        let t = random_rigid(&mut rng);
        let lhs = ae.encode(&apply_rigid(&p, &t)).unwrap().latents;
        let q = ae.encode(&p).unwrap();
        let rhs = apply_rigid(&PoseMatrix::from_matrix(&q.latents), &t).to_matrix();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);

        let lhs = ae.decode(&LatentPose { latents: rhs.clone() }).unwrap().to_matrix();
        let rhs = apply_rigid(&ae.decode(&q).unwrap(), &t).to_matrix();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn encode_commutes_with_affine_maps(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = catalog("mpii");
        let ae = random_weights(&mut rng, &cat, 5, false).normalized().unwrap();
        let p = random_pose(&mut rng, cat.len());
        let m = Matrix3::from_fn(|_, _| rng.random_range(-2.0..2.0)) + Matrix3::identity() * 3.0;
        let t = Vector3::new(rng.random_range(-1e3..1e3), 50.0, -20.0);
        let map = |x: &PoseMatrix| x.map_valid(|q| m * q + t);
        let lhs = ae.reconstruct(&map(&p)).unwrap().to_matrix();
        let rhs = map(&ae.reconstruct(&p).unwrap()).to_matrix();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9 * rhs.abs().max());
    }

    #[test]
    fn chiral_weights_commute_with_mirroring(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = catalog(SMALL_FORMATS[(seed % 5) as usize]);
        let latents = chiral_latents(&mut rng, &cat);
        let ae = random_weights(&mut rng, &cat, latents, true).normalized().unwrap();
        let p = random_pose(&mut rng, cat.len());
        let sides = cat.sides();
        let lhs = chirality_flip(&ae.reconstruct(&p).unwrap(), &sides).unwrap().to_matrix();
        let rhs = ae.reconstruct(&chirality_flip(&p, &sides).unwrap()).unwrap().to_matrix();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
    }

    #[test]
    fn normalized_chiral_matrices_keep_constraints(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = catalog(SMALL_FORMATS[(seed % 5) as usize]);
        let latents = chiral_latents(&mut rng, &cat);
        let part = latent_partition(&cat, latents).unwrap();
        let blocks = ChiralBlocks::from_fn(part.blocks(), cat.sides(), || rng.random_range(-0.3..1.0));
        let m = assemble_chiral(&blocks).unwrap();
        prop_assert_eq!(swap_sides(&m, &part.blocks(), &cat.sides()), m.clone());
        let n = normalize(&m).unwrap();
        prop_assert!(row_sums(&n).iter().all(|s| (s - 1.0).abs() < 1e-12));
        prop_assert_eq!(swap_sides(&n, &part.blocks(), &cat.sides()), n);
    }

    #[test]
    fn row_l1_is_one_plus_twice_negative_mass(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(4, 12, |_, _| rng.random_range(-0.5..1.0));
        let n = normalize(&m).unwrap();
        for r in 0..n.nrows() {
            let l1: f64 = n.row(r).iter().map(|x| x.abs()).sum();
            let neg: f64 = n.row(r).iter().filter(|&&x| x < 0.0).map(|x| -x).sum();
            prop_assert!((l1 - (1.0 + 2.0 * neg)).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_row_scaling_leaves_the_model_unchanged(seed in 0u64..100_000, factor in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = catalog("lsp");
        let w = random_weights(&mut rng, &cat, 5, false);
        let corpus = random_corpus(&mut rng, cat.len(), 5);
        let row = rng.random_range(0..5);
        let mut enc = w.raw_enc();
        enc.row_mut(row).scale_mut(factor);
        let scaled = AcaeWeights::dense(enc, w.raw_dec()).unwrap();
        let (a, b) = (w.normalized().unwrap(), scaled.normalized().unwrap());
        prop_assert!(max_abs_diff(&a.enc, &b.enc) < 1e-14);
        let cfg = LossConfig { projected: false, lambda_sparse: 0.1 };
        let lw = cat.weights(false);
        let (ta, ga) = loss_and_gradient(&w, &corpus, &lw, &cfg).unwrap();
        let (tb, gb) = loss_and_gradient(&scaled, &corpus, &lw, &cfg).unwrap();
        prop_assert!((ta.total - tb.total).abs() < 1e-12 * ta.total);
        // The raw gradient of the scaled row shrinks by the factor; its
        // direction is unchanged.
        let (ra, rb) = (ga.raw_enc().row(row).into_owned(), gb.raw_enc().row(row).into_owned());
        prop_assert!((&ra - &rb * factor).abs().max() < 1e-9 * ra.abs().max().max(1e-12));
    }
}
