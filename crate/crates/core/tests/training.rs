use flexdti::net::{infer, train, NetConfig, TrainingSet};
use flexdti::phantom::{make_tensor_field, synthesize_dwi, Layout, PhantomSpec};
use flexdti::scheme::{generate_uniform, GradientScheme};
use flexdti::{BValue, DiffusionTensor6};

fn scheme(n: usize) -> GradientScheme {
    GradientScheme::new(BValue::new(1000.0).unwrap(), generate_uniform(n, 1).unwrap(), 1).unwrap()
}

fn small(epochs: usize) -> NetConfig {
    NetConfig {
        n_max: 8,
        width: 8,
        depth: 2,
        epochs,
        batch: 2,
        lr: 3e-3,
        decay_every: 10_000,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn overfits_one_noiseless_slice() {
    let tf = make_tensor_field(&PhantomSpec::new(32, 32, Layout::Mixed, 3).with_slices(1)).unwrap();
    let s = scheme(6);
    let pool: Vec<usize> = (0..6).collect();
    let set = TrainingSet { truth: &tf, scheme: &s, pool: &pool, s0: 1.0, sigma: 0.0, seed: 1 };
    let cfg = NetConfig { decay_every: 3000, ..small(4000) };
    let ck = train(&cfg, &set, None, |_| {}).unwrap();

    let v = synthesize_dwi(&tf, &s, 1.0, 0.0, 0).unwrap();
    let out = infer(&v, &pool, &ck.net).unwrap();
    let (mut err, mut norm) = (0.0, 0.0);
    for ((p, t), m) in out.tensors.iter().zip(&tf.tensors).zip(&tf.mask) {
        if *m {
            let (p, t) = (p.to_array(), t.to_array());
            for k in 0..6 {
                let w = if k < 3 { 1.0 } else { 2.0 };
                err += w * (p[k] - t[k]).powi(2);
                norm += w * t[k].powi(2);
            }
        }
    }
    let nrmse = (err / norm).sqrt();
    assert!(nrmse < 0.05, "tensor nrmse {nrmse}");
}

#[test]
fn zero_tensors_drive_loss_to_zero() {
    let mut tf = make_tensor_field(&PhantomSpec::new(32, 32, Layout::Mixed, 5).with_slices(2)).unwrap();
    tf.tensors.iter_mut().for_each(|t| *t = DiffusionTensor6::ZERO);
    let s = scheme(12);
    let pool: Vec<usize> = (0..12).collect();
    let set = TrainingSet { truth: &tf, scheme: &s, pool: &pool, s0: 1.0, sigma: 0.0, seed: 2 };
    let ck = train(&small(50), &set, None, |_| {}).unwrap();
    let last = ck.history.last().unwrap().train_loss;
    assert!(last < 1e-4, "final loss {last}");
}

#[test]
fn loss_falls_over_a_short_run() {
    let tf = make_tensor_field(&PhantomSpec::new(32, 32, Layout::Mixed, 6).with_slices(8)).unwrap();
    let s = scheme(20);
    let pool: Vec<usize> = (0..12).collect();
    let set = TrainingSet { truth: &tf, scheme: &s, pool: &pool, s0: 1.0, sigma: 0.05, seed: 3 };
    let ck = train(&small(8), &set, None, |_| {}).unwrap();
    let (first, last) = (ck.history[0].train_loss, ck.history.last().unwrap().train_loss);
    assert!(last < first, "first {first} last {last}");
}
