use fusedview::encoding::EncodingSpec;
use fusedview::field::FieldConfig;
use fusedview::geometry::Ray;
use fusedview::linalg::Vec3;
use fusedview::trainer::{loss_and_grads, RaySample};
use fusedview::Field64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> FieldConfig {
    FieldConfig {
        depth: 2,
        width: 8,
        skip_layer: 1,
        enc_x: EncodingSpec::new(2, true),
        enc_d: EncodingSpec::new(1, true),
        enc_t: EncodingSpec::new(2, true),
    }
}

fn batch(rng: &mut ChaCha8Rng) -> Vec<RaySample<f64>> {
    (0..6)
        .map(|i| {
            let dir = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalized();
            RaySample {
                ray: Ray {
                    origin: Vec3::new(0.0, 0.0, -2.0),
                    direction: dir,
                    time: if i < 2 { 0.0 } else { rng.random_range(0.0..1.0) },
                },
                target: [rng.random(), rng.random(), rng.random()],
                frame: 0,
                pixel: (0, i),
            }
        })
        .collect()
}

#[test]
fn ray_loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut field = Field64::init(tiny(), 5).unwrap();
    let n = field.params.iter_scalars().count();
    // give the deformation head something to do
    for i in 0..n {
        *field.params.scalar_mut(i) += rng.random_range(-0.05..0.05);
    }
    let rays = batch(&mut rng);
    let mut grads = field.params.zeros_like();
    loss_and_grads(&field, &rays, 1.0, 3.0, 16, Some(9), &mut grads).unwrap();
    let loss_at = |i: usize, h: f64| {
        let mut f = field.clone();
        *f.params.scalar_mut(i) += h;
        let mut g = f.params.zeros_like();
        loss_and_grads(&f, &rays, 1.0, 3.0, 16, Some(9), &mut g).unwrap().0
    };
    for _ in 0..30 {
        let i = rng.random_range(0..n);
        let fd = (loss_at(i, 1e-5) - loss_at(i, -1e-5)) / 2e-5;
        let a = grads.scalar(i);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-4, "param {i}: analytic {a} vs fd {fd}");
    }
}

#[test]
fn gradients_are_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let field = Field64::init(tiny(), 6).unwrap();
    let rays = batch(&mut rng);
    let mut a = field.params.zeros_like();
    let mut b = field.params.zeros_like();
    let la = loss_and_grads(&field, &rays, 1.0, 3.0, 16, Some(1), &mut a).unwrap().0;
    let lb = loss_and_grads(&field, &rays, 1.0, 3.0, 16, Some(1), &mut b).unwrap().0;
    assert_eq!(la, lb);
    assert_eq!(a, b);
}
