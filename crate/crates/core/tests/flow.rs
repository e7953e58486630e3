use depthflow_core::flow::{
    cv_loss, cvfs_loss, euler_infer, fm_loss, interpolate, predict, single_step_infer,
    square_lattice, test_mse, train, trajectory, velocity_field_grid, ConstantField, FlowBatch,
    FlowObjective, MarginalField, ObjectiveKind, ToyMap, ToyTask, TrainConfig, VelocityField,
    DEFAULT_POOL_MIX, TOY_LR,
};
use depthflow_core::tensor::{AdamWConfig, InputLayout};
use depthflow_core::{Error, Module, Result, Tape, Tensor, VelocityModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `f(t) = t` in every coordinate, ignoring state and condition.
struct TimeField;

impl VelocityField for TimeField {
    fn latent_dim(&self) -> usize {
        1
    }

    fn eval(&self, _z_x: &Tensor, _start: &Tensor, state: &Tensor, t: f64) -> Result<Tensor> {
        Ok(state.map(|_| t))
    }
}

/// `f(z) = -z`; the exact flow map is `z0 / e`.
struct DecayField;

impl VelocityField for DecayField {
    fn latent_dim(&self) -> usize {
        1
    }

    fn eval(&self, _z_x: &Tensor, _start: &Tensor, state: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(state.map(|z| -z))
    }
}

fn zeroed(mut model: VelocityModel) -> VelocityModel {
    for p in model.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    model
}

fn model(layout: InputLayout, cond: usize, latent: usize, seed: u64) -> VelocityModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VelocityModel::new(layout, cond, latent, &[8, 8], &mut rng).unwrap()
}

fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let z0 = rows(&[vec![0.0, 0.0], vec![1.0, -1.0]]);
    let z1 = rows(&[vec![2.0, 4.0], vec![3.0, 5.0]]);
    let x = Tensor::zeros(&[2, 1]);
    let at = |t: f64| {
        interpolate(&FlowBatch::new(x.clone(), z1.clone(), z0.clone(), vec![t; 2]).unwrap())
            .unwrap()
    };
    assert_eq!(at(0.0), z0);
    assert_eq!(at(1.0), z1);
    assert_eq!(at(0.5).row(0), &[1.0, 2.0]);
    assert!(FlowBatch::new(x, z1, z0, vec![1.5, 0.0]).is_err());
}

#[test]
fn zero_model_losses() {
    let x = Tensor::zeros(&[3, 2]);
    let tape = Tape::new();
    let fm = zeroed(model(InputLayout::ConditionStateTime, 2, 2, 0));
    let b = FlowBatch::new(
        x.clone(),
        Tensor::zeros(&[3, 2]),
        Tensor::zeros(&[3, 2]),
        vec![0.3; 3],
    )
    .unwrap();
    assert_eq!(fm_loss(&tape, &fm, &b).unwrap().item().unwrap(), 0.0);
    let v = rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
    let b = FlowBatch::new(x.clone(), v, Tensor::zeros(&[3, 2]), vec![0.3, 0.6, 0.9]).unwrap();
    assert_eq!(fm_loss(&tape, &fm, &b).unwrap().item().unwrap(), 1.0);

    let cv = zeroed(model(InputLayout::ConditionStart, 2, 2, 0));
    let b = FlowBatch::new(
        x.clone(),
        rows(&vec![vec![2.0, 0.0]; 3]),
        rows(&vec![vec![1.0, 0.0]; 3]),
        vec![0.0; 3],
    )
    .unwrap();
    assert_eq!(cv_loss(&tape, &cv, &b).unwrap().item().unwrap(), 1.0);

    let fs = zeroed(model(InputLayout::Condition, 2, 2, 0));
    let b = FlowBatch::fixed_start(x.clone(), rows(&vec![vec![3.0, 4.0]; 3])).unwrap();
    assert_eq!(cvfs_loss(&tape, &fs, &b).unwrap().item().unwrap(), 25.0);
}

#[test]
fn losses_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let z1 = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let z0 = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let t = vec![0.1, 0.2, 0.5, 0.7, 0.95];
    let oracle = |pred: &Tensor, target: &Tensor| -> f64 {
        let mut total = 0.0;
        for r in 0..5 {
            total += pred
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, v)| (v - p).powi(2))
                .sum::<f64>();
        }
        total / 5.0
    };
    let v = Tensor::new(
        vec![5, 2],
        z1.data()
            .iter()
            .zip(z0.data())
            .map(|(a, b)| a - b)
            .collect(),
    )
    .unwrap();
    let tape = Tape::new();

    let fm = model(InputLayout::ConditionStateTime, 3, 2, 1);
    let batch = FlowBatch::new(x.clone(), z1.clone(), z0.clone(), t.clone()).unwrap();
    let zt = Tensor::new(
        vec![5, 2],
        (0..10)
            .map(|i| t[i / 2] * z1.data()[i] + (1.0 - t[i / 2]) * z0.data()[i])
            .collect(),
    )
    .unwrap();
    let got = fm_loss(&tape, &fm, &batch).unwrap().item().unwrap();
    assert!((got - oracle(&fm.velocity(&x, &zt, &t).unwrap(), &v)).abs() < 1e-12);

    let cv = model(InputLayout::ConditionStart, 3, 2, 2);
    let batch = FlowBatch::new(x.clone(), z1.clone(), z0.clone(), vec![0.0; 5]).unwrap();
    let got = cv_loss(&tape, &cv, &batch).unwrap().item().unwrap();
    assert!((got - oracle(&cv.velocity(&x, &z0, &[0.0; 5]).unwrap(), &v)).abs() < 1e-12);

    let fs = model(InputLayout::Condition, 3, 2, 3);
    let batch = FlowBatch::fixed_start(x.clone(), z1.clone()).unwrap();
    let got = cvfs_loss(&tape, &fs, &batch).unwrap().item().unwrap();
    let zeros = Tensor::zeros(&[5, 2]);
    assert!((got - oracle(&fs.velocity(&x, &zeros, &[0.0; 5]).unwrap(), &z1)).abs() < 1e-12);
}

#[test]
fn loss_contracts() {
    let tape = Tape::new();
    let x = Tensor::zeros(&[2, 1]);
    let no_time = model(InputLayout::ConditionStart, 1, 1, 0);
    let b = FlowBatch::new(
        x.clone(),
        Tensor::ones(&[2, 1]),
        Tensor::zeros(&[2, 1]),
        vec![0.5; 2],
    )
    .unwrap();
    assert!(matches!(
        fm_loss(&tape, &no_time, &b),
        Err(Error::Contract(_))
    ));
    let fs = model(InputLayout::Condition, 1, 1, 0);
    let moved = FlowBatch::new(
        x,
        Tensor::ones(&[2, 1]),
        Tensor::ones(&[2, 1]),
        vec![0.0; 2],
    )
    .unwrap();
    assert!(matches!(
        cvfs_loss(&tape, &fs, &moved),
        Err(Error::Contract(_))
    ));
}

#[test]
fn euler_is_exact_for_constant_fields() {
    let field = ConstantField {
        velocity: vec![0.3, -1.7, 2.5],
    };
    let x = Tensor::zeros(&[2, 1]);
    let z0 = rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
    let expect: Vec<f64> = z0
        .data()
        .iter()
        .enumerate()
        .map(|(i, z)| z + field.velocity[i % 3])
        .collect();
    for n in [1, 2, 10, 100] {
        let out = euler_infer(&field, &x, &z0, n).unwrap();
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "N={n}");
        }
    }
    assert!(matches!(
        euler_infer(&field, &x, &z0, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn euler_on_linear_time_field_is_left_riemann() {
    let x = Tensor::zeros(&[1, 1]);
    let z0 = Tensor::zeros(&[1, 1]);
    assert_eq!(euler_infer(&TimeField, &x, &z0, 2).unwrap().data()[0], 0.25);
    for n in [1usize, 2, 3, 4, 8, 16, 64, 256, 1024] {
        let got = euler_infer(&TimeField, &x, &z0, n).unwrap().data()[0];
        let nf = n as f64;
        assert!((got - (nf - 1.0) / (2.0 * nf)).abs() < 1e-14);
        assert!(((0.5 - got) - 1.0 / (2.0 * nf)).abs() < 1e-14);
    }
}

#[test]
fn euler_is_first_order_on_a_smooth_field() {
    let x = Tensor::zeros(&[1, 1]);
    let z0 = Tensor::ones(&[1, 1]);
    let exact = (-1.0f64).exp();
    let err = |n: usize| (euler_infer(&DecayField, &x, &z0, n).unwrap().data()[0] - exact).abs();
    let mut last = f64::NAN;
    for n in [8, 16, 32, 64, 128, 256, 512] {
        let ratio = err(2 * n) / err(n);
        assert!(ratio > 0.45 && ratio < 0.55, "N={n}: {ratio}");
        if !last.is_nan() {
            assert!((ratio - 0.5).abs() <= (last - 0.5f64).abs());
        }
        last = ratio;
    }
}

#[test]
fn single_step_equals_euler_from_zero() {
    let m = model(InputLayout::Condition, 3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let one = single_step_infer(&m, &x).unwrap();
    for n in [1, 2, 7, 50] {
        let e = euler_infer(&m, &x, &Tensor::zeros(&[6, 2]), n).unwrap();
        assert!(e.max_abs_diff(&one) < 1e-12, "N={n}");
    }
    assert_eq!(
        single_step_infer(&zeroed(m), &x).unwrap(),
        Tensor::zeros(&[6, 2])
    );
}

#[test]
fn field_grid_examples() {
    let lattice = square_lattice(-2.0, 2.0, 5, &[0.0, 0.5, 0.9]);
    let zero = zeroed(model(InputLayout::ConditionStateTime, 1, 2, 0));
    assert!(velocity_field_grid(&zero, &[0.3], &lattice)
        .unwrap()
        .iter()
        .all(|s| s.v1 == 0.0 && s.v2 == 0.0));

    // One pair: the field is the constant z1 - z0 along the straight path.
    let (z0, z1) = ([0.5, -1.0], [2.0, 1.0]);
    let single = MarginalField::new(vec![z1.to_vec()]).unwrap();
    for t in [0.0, 0.25, 0.5, 0.75] {
        let z: Vec<f64> = (0..2).map(|i| t * z1[i] + (1.0 - t) * z0[i]).collect();
        let v = single.at(&z, t);
        assert!((v[0] - 1.5).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
    }
    let three_d = model(InputLayout::ConditionStateTime, 1, 3, 0);
    assert!(matches!(
        velocity_field_grid(&three_d, &[0.0], &lattice),
        Err(Error::Contract(_))
    ));
}

/// `E[x1 - z0 | z_t = z]` by kernel-weighted quadrature over the sampling
/// distribution `z0 ~ N(0, I)`, `x1` uniform on the targets.
fn quadrature_velocity(targets: &[[f64; 2]], z: [f64; 2], t: f64) -> [f64; 2] {
    let h: f64 = 2e-3;
    let s = 1.0 - t;
    let (mut num, mut den) = ([0.0; 2], 0.0);
    for x in targets {
        // z_t = t x + s z0 lies within a few h of z only near this z0.
        let c = [(z[0] - t * x[0]) / s, (z[1] - t * x[1]) / s];
        let half = 8.0 * h / s;
        let n = 160;
        let step = 2.0 * half / n as f64;
        for i in 0..=n {
            for j in 0..=n {
                let z0 = [c[0] - half + i as f64 * step, c[1] - half + j as f64 * step];
                let prior = (-(z0[0] * z0[0] + z0[1] * z0[1]) / 2.0).exp();
                let d = [t * x[0] + s * z0[0] - z[0], t * x[1] + s * z0[1] - z[1]];
                let w = prior * (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * h * h)).exp() * step * step;
                num[0] += w * (x[0] - z0[0]);
                num[1] += w * (x[1] - z0[1]);
                den += w;
            }
        }
    }
    [num[0] / den, num[1] / den]
}

#[test]
fn marginal_field_matches_quadrature() {
    let targets = [[1.5, 0.5], [-1.0, 1.0]];
    let field = MarginalField::new(targets.iter().map(|t| t.to_vec()).collect()).unwrap();
    for &(z, t) in &[
        ([0.0, 0.0], 0.3),
        ([0.4, 0.6], 0.5),
        ([-0.5, 0.8], 0.7),
        ([1.0, 0.2], 0.1),
    ] {
        let v = field.at(&z, t);
        let q = quadrature_velocity(&targets, z, t);
        assert!(
            (v[0] - q[0]).abs() < 2e-3 && (v[1] - q[1]).abs() < 2e-3,
            "{z:?} {t}: {v:?} vs {q:?}"
        );
    }
    // Midway between the targets the field points between their directions.
    let v = field.at(&[0.25, 0.75], 0.5);
    let a: [f64; 2] = [(1.5 - 0.25) / 0.5, (0.5 - 0.75) / 0.5];
    let b = [(-1.0 - 0.25) / 0.5, (1.0 - 0.75) / 0.5];
    assert!(v[0] > a[0].min(b[0]) && v[0] < a[0].max(b[0]));
}

#[test]
fn fixed_start_trajectories_are_straight() {
    let m = model(InputLayout::Condition, 2, 2, 5);
    let x = rows(&[vec![0.4, -0.2]]);
    let path = trajectory(&m, &x, &[0.0, 0.0], 10).unwrap();
    let end = path.last().unwrap();
    for (k, p) in path.iter().enumerate() {
        let s = k as f64 / 10.0;
        assert!((p[0] - s * end[0]).abs() < 1e-12 && (p[1] - s * end[1]).abs() < 1e-12);
    }
}

fn linear_task() -> (ToyTask, depthflow_core::flow::FlowDataset) {
    let task = ToyTask::new(ToyMap::Linear, 4, 4, 0).unwrap();
    let data = task.sample(1024, &DEFAULT_POOL_MIX, 100).unwrap();
    (task, data)
}

/// Solves `min ||X W - Y||` through the normal equations with Gaussian
/// elimination; returns `W` as `[cond][latent]`.
fn least_squares(x: &Tensor, y: &Tensor) -> Vec<Vec<f64>> {
    let (n, p) = x.dims2().unwrap();
    let q = y.dims2().unwrap().1;
    let mut a = vec![vec![0.0; p + q]; p];
    for r in 0..n {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x.at2(r, i) * x.at2(r, j);
            }
            for k in 0..q {
                a[i][p + k] += x.at2(r, i) * y.at2(r, k);
            }
        }
    }
    for c in 0..p {
        let piv = (c..p)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot_row = a[c].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    (0..p)
        .map(|i| (0..q).map(|k| a[i][p + k] / a[i][i]).collect())
        .collect()
}

#[test]
fn cvfs_fits_a_linear_task() {
    let (task, data) = linear_task();
    // The data are exactly linear: least squares recovers the map.
    let w = least_squares(&data.z_x, &data.z_y1);
    for (i, wi) in w.iter().enumerate() {
        for (k, &v) in wi.iter().enumerate() {
            assert!((v - task.matrix().at2(k, i)).abs() < 1e-9);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = VelocityModel::new(InputLayout::Condition, 4, 4, &[64, 64], &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        optimizer: AdamWConfig {
            lr: TOY_LR,
            ..Default::default()
        },
        ..Default::default()
    };
    let obj = FlowObjective::cvfs();
    train(&obj, &mut m, &data, &cfg, None).unwrap();
    let train_mse = test_mse(&obj, &m, &data, 0).unwrap();
    assert!(train_mse < 1e-3, "{train_mse}");
}

fn small_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        optimizer: AdamWConfig {
            lr,
            ..Default::default()
        },
        pool_mix: None,
        ..Default::default()
    }
}

#[test]
fn zero_lr_keeps_parameters_and_a_flat_trace() {
    let (_, data) = linear_task();
    let mut m = model(InputLayout::Condition, 4, 4, 3);
    let before = m.snapshot();
    let trace = train(
        &FlowObjective::cvfs(),
        &mut m,
        &data,
        &small_config(4, 0.0),
        Some(&data),
    )
    .unwrap();
    assert_eq!(m.snapshot(), before);
    let first = trace.epochs[0].train_loss;
    for e in &trace.epochs {
        assert!((e.train_loss - first).abs() < 1e-12 * first);
        assert_eq!(e.test_mse, trace.epochs[0].test_mse);
    }
}

#[test]
fn same_seed_same_trace() {
    let (_, data) = linear_task();
    for kind in ObjectiveKind::ALL {
        let run = || {
            let mut m = model(kind.layout(), 4, 4, 8);
            let cfg = TrainConfig {
                epochs: 2,
                ..small_config(2, TOY_LR)
            };
            let t = train(
                &FlowObjective::new(kind, 4).unwrap(),
                &mut m,
                &data,
                &cfg,
                Some(&data),
            )
            .unwrap();
            (t, m.snapshot())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn empty_and_mismatched_training_inputs() {
    let (_, data) = linear_task();
    let mut wrong = model(InputLayout::ConditionStart, 4, 4, 0);
    let r = train(
        &FlowObjective::cvfs(),
        &mut wrong,
        &data,
        &small_config(1, TOY_LR),
        None,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
    let task = ToyTask::new(ToyMap::Linear, 4, 4, 0).unwrap();
    assert!(matches!(
        task.sample(0, &DEFAULT_POOL_MIX, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn fixed_start_inference_has_no_variance() {
    let task = ToyTask::new(ToyMap::Nonlinear, 4, 2, 1).unwrap();
    let data = task.sample(512, &DEFAULT_POOL_MIX, 5).unwrap();
    let x = data.z_x.clone();
    let cfg = small_config(5, TOY_LR);

    let mut fs = model(InputLayout::Condition, 4, 2, 1);
    let fs_obj = FlowObjective::cvfs();
    train(&fs_obj, &mut fs, &data, &cfg, None).unwrap();
    let base = predict(&fs_obj, &fs, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for seed in 1..100 {
        assert_eq!(
            predict(&fs_obj, &fs, &x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
            base
        );
    }

    let mut direct = model(InputLayout::ConditionStateTime, 4, 2, 1);
    let d_obj = FlowObjective::direct(1).unwrap();
    train(&d_obj, &mut direct, &data, &cfg, None).unwrap();
    let outs: Vec<Tensor> = (0..100)
        .map(|s| predict(&d_obj, &direct, &x, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
        .collect();
    let first = outs[0].data()[0];
    let mean = outs.iter().map(|o| o.data()[0]).sum::<f64>() / 100.0;
    let var = outs
        .iter()
        .map(|o| (o.data()[0] - mean).powi(2))
        .sum::<f64>()
        / 100.0;
    assert!(var > 0.0 && outs.iter().any(|o| o.data()[0] != first));
}
