use ndarray::{Array1, Array2};
use pedloc::geometry::INPUT_DIM;
use pedloc::net::{batch_loss, ArchConfig, DropoutMasks, LocModel, LossKind};
use pedloc::rng::stream;
use rand::Rng;

const EPS: f64 = 1e-5;
const DECAY: f64 = 1e-3;

fn objective(model: &LocModel, x: &Array2<f64>, t: &Array1<f64>, masks: &DropoutMasks, loss: LossKind) -> f64 {
    let (out, _) = model.forward_train(x, Some(masks)).unwrap();
    let (l, _) = batch_loss(loss, &out, t.view());
    l + 0.5 * DECAY * model.params.weight_sq_norm()
}

fn check(loss: LossKind, seed: u64) -> (usize, f64) {
    let arch = ArchConfig {
        input_dim: INPUT_DIM,
        hidden: 8,
        blocks: 3,
    };
    let mut rng = stream(seed, 0);
    let mut model = LocModel::new(arch, 0.2, &mut rng).unwrap();
    // non-trivial norm parameters so their gradients are exercised
    for n in &mut model.params.norms {
        n.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        n.beta.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    let rows = 6;
    let x = Array2::from_shape_simple_fn((rows, INPUT_DIM), || rng.random_range(-0.5..0.5));
    let t = Array1::from_shape_simple_fn(rows, || rng.random_range(3.0..20.0));
    let masks = DropoutMasks::sample(&mut rng, &arch, rows, 0.2);

    let (out, cache) = model.forward_train(&x, Some(&masks)).unwrap();
    let (_, d_out) = batch_loss(loss, &out, t.view());
    let grads = model.backward(&cache, &d_out, Some(&masks), DECAY);
    let analytic: Vec<f64> = grads.slices().concat();

    let mut worst: f64 = 0.0;
    let mut index = 0;
    let n_tensors = model.params.slices().len();
    for k in 0..n_tensors {
        let len = model.params.slices()[k].len();
        for j in 0..len {
            let orig = model.params.slices()[k][j];
            model.params.slices_mut()[k][j] = orig + EPS;
            let plus = objective(&model, &x, &t, &masks, loss);
            model.params.slices_mut()[k][j] = orig - EPS;
            let minus = objective(&model, &x, &t, &masks, loss);
            model.params.slices_mut()[k][j] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic[index];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(
                rel < 1e-4,
                "{loss}: tensor {k} entry {j}: analytic {a} numeric {numeric} (rel {rel})"
            );
            worst = worst.max(rel);
            index += 1;
        }
    }
    (index, worst)
}

#[test]
fn finite_differences_match_backprop_for_every_loss() {
    for loss in LossKind::ALL {
        let (n, worst) = check(loss, 11);
        assert_eq!(n, 842);
        assert!(worst < 1e-4, "{loss}: {worst}");
    }
}

#[test]
fn backward_is_deterministic_for_fixed_masks() {
    let arch = ArchConfig {
        input_dim: INPUT_DIM,
        hidden: 8,
        blocks: 3,
    };
    let model = LocModel::new(arch, 0.2, &mut stream(3, 0)).unwrap();
    let x = Array2::from_shape_simple_fn((5, INPUT_DIM), {
        let mut r = stream(4, 0);
        move || r.random_range(-0.5..0.5)
    });
    let t = Array1::from_elem(5, 9.0);
    let masks = DropoutMasks::sample(&mut stream(5, 0), &arch, 5, 0.2);
    let run = || {
        let (out, cache) = model.forward_train(&x, Some(&masks)).unwrap();
        let (_, d) = batch_loss(LossKind::Laplace, &out, t.view());
        model.backward(&cache, &d, Some(&masks), DECAY)
    };
    assert_eq!(run(), run());
}

#[test]
fn stationary_point_has_zero_gradient() {
    // every weight zero and every target matched exactly: the L1 data term
    // has zero subgradient and the decay term vanishes
    let arch = ArchConfig {
        input_dim: INPUT_DIM,
        hidden: 8,
        blocks: 1,
    };
    let mut model = LocModel::new(arch, 0.0, &mut stream(6, 0)).unwrap();
    for l in &mut model.params.linears {
        l.weight.fill(0.0);
    }
    let head = model.params.linears.last_mut().unwrap();
    head.bias[0] = 7.0;
    let x = Array2::from_shape_simple_fn((4, INPUT_DIM), {
        let mut r = stream(7, 0);
        move || r.random_range(-0.5..0.5)
    });
    let t = Array1::from_elem(4, 7.0);
    let (out, cache) = model.forward_train(&x, None).unwrap();
    let (l, d) = batch_loss(LossKind::L1, &out, t.view());
    assert_eq!(l, 0.0);
    let grads = model.backward(&cache, &d, None, DECAY);
    assert!(grads.slices().iter().all(|s| s.iter().all(|g| *g == 0.0)));
}
