#![allow(dead_code)]

use clicooper::dp::DpActivationBatch;
use clicooper::nn::{softmax_xent, Activation, Segment};
use clicooper::pipeline::{init_trainer_segments, BatchSchedule, ExperimentPlan};
use clicooper::rng;
use clicooper::watermark::WatermarkLink;
use clicooper::TensorF64;
use rand::Rng;

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both are zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> TensorF64 {
    let mut r = rng::seeded(seed);
    let v = (0..rows * cols).map(|_| rng::standard_normal(&mut r)).collect();
    TensorF64::matrix(rows, cols, v).unwrap()
}

fn central_diff(x0: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// One random segment, batch and label set. Returns the relative errors of
/// the analytic parameter and input gradients of the softmax cross-entropy
/// against central differences.
pub fn segment_gradient_errors(seed: u64) -> (f64, f64) {
    let mut r = rng::seeded(seed);
    let depth = r.gen_range(1..=3);
    let dims: Vec<usize> = (0..=depth).map(|_| r.gen_range(2..=6)).collect();
    let hidden = if r.gen_bool(0.5) { Activation::Relu } else { Activation::Identity };
    let mut seg = Segment::init_with(&dims, hidden, Activation::Identity, seed).unwrap();
    let generic: Vec<f64> = (0..seg.param_count()).map(|_| rng::standard_normal(&mut r) * 0.7).collect();
    seg.set_flat_params(&generic).unwrap();
    let rows = r.gen_range(1..=5);
    let classes = *dims.last().unwrap();
    let x = random_matrix(rows, dims[0], seed ^ 0x5a5a);
    let y: Vec<usize> = (0..rows).map(|_| r.gen_range(0..classes)).collect();

    let (logits, trace) = seg.forward(&x).unwrap();
    let (_, g) = softmax_xent(&logits, &y).unwrap();
    let (pg, dx) = seg.backward(&trace, &g).unwrap();

    let loss_at_params = |p: &[f64]| {
        let mut s = seg.clone();
        s.set_flat_params(p).unwrap();
        softmax_xent(&s.infer(&x).unwrap(), &y).unwrap().0
    };
    let loss_at_input = |v: &[f64]| {
        let xi = TensorF64::matrix(rows, dims[0], v.to_vec()).unwrap();
        softmax_xent(&seg.infer(&xi).unwrap(), &y).unwrap().0
    };
    let h = 1e-6;
    let num_p = central_diff(&seg.flatten_params(), h, loss_at_params);
    let num_x = central_diff(x.values(), h, loss_at_input);
    (rel_err(&pg.flatten(), &num_p), rel_err(dx.values(), &num_x))
}

/// Relative error of the mark regulariser's gradient against central
/// differences over every parameter. Panics if the gradient is non-zero off
/// the selected positions.
pub fn watermark_gradient_error(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let dims = [r.gen_range(3..=8), r.gen_range(3..=8), r.gen_range(2..=5)];
    let seg = Segment::init(&dims, Activation::Identity, seed).unwrap();
    let params = seg.param_count();
    let bits = r.gen_range(2..=8).min(params / 4).max(1);
    let positions = r.gen_range(bits..=params.min(4 * bits));
    let link = WatermarkLink::derive(&[seed as u8; 32], 1, seed, b"fd", bits, positions, params).unwrap();
    let (_, grad) = link.regularizer(&seg).unwrap();
    let loss_at = |p: &[f64]| {
        let mut s = seg.clone();
        s.set_flat_params(p).unwrap();
        link.regularizer(&s).unwrap().0
    };
    let num = central_diff(&seg.flatten_params(), 1e-6, loss_at);
    let off_positions = (0..params)
        .filter(|i| !link.positions.contains(i))
        .all(|i| grad[i] == 0.0);
    assert!(off_positions, "regulariser gradient leaked outside positions");
    rel_err(&grad, &num)
}

/// Trains the trainer chain as one network in a single process with the
/// plan's seeds and batch order, as the reference for relay training.
pub fn monolithic_train(plan: &ExperimentPlan, cache: &DpActivationBatch, labels: &[usize]) -> Vec<Segment> {
    let parts = init_trainer_segments(plan).unwrap();
    let refs: Vec<&Segment> = parts.iter().collect();
    let mut net = Segment::concat(&refs).unwrap();
    let schedule = BatchSchedule::new(cache.rows(), plan.batch_size, plan.seeds.batch_order).unwrap();
    for epoch in 0..plan.epochs {
        for idx in schedule.epoch(epoch) {
            let x = cache.values.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, trace) = net.forward(&x).unwrap();
            let (_, g) = softmax_xent(&logits, &y).unwrap();
            let (mut pg, _) = net.backward(&trace, &g).unwrap();
            pg.add_weight_decay(&net, plan.weight_decay);
            net.sgd_step(&pg, plan.lr, plan.momentum).unwrap();
        }
    }
    let flat = net.flatten_params();
    let mut out = Vec::with_capacity(parts.len());
    let mut at = 0;
    for p in &parts {
        let n = p.param_count();
        let mut s = p.clone();
        s.set_flat_params(&flat[at..at + n]).unwrap();
        at += n;
        out.push(s);
    }
    out
}

/// Largest absolute difference between corresponding parameters.
pub fn max_param_diff(a: &[Segment], b: &[Segment]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            let (fx, fy) = (x.flatten_params(), y.flatten_params());
            assert_eq!(fx.len(), fy.len());
            fx.into_iter().zip(fy).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// The default experiment with fewer epochs, for tests that need a full run.
pub fn fast_config(seed: u64) -> clicooper::harness::RunConfig {
    let mut cfg = clicooper::harness::RunConfig::default();
    cfg.reseed(seed);
    cfg.plan.epochs = 4;
    cfg
}

pub const MB: f64 = 1e6;

/// Per-link interface sizes in MB and the published per-link seconds and
/// total at 200 MB/s with no overhead.
pub const LATENCY_ROWS: [(&str, [f64; 3], [f64; 3], f64); 8] = [
    ("MNIST DeepLeNet", [48.0, 24.0, 12.0], [0.24, 0.12, 0.06], 0.42),
    ("MNIST AlexNet", [12.0, 18.0, 2.0], [0.06, 0.09, 0.01], 0.16),
    ("CIFAR10 AlexNet", [16.0, 24.0, 4.0], [0.08, 0.12, 0.02], 0.22),
    ("CIFAR10 ResNet18", [64.0, 32.0, 16.0], [0.32, 0.16, 0.08], 0.56),
    ("CIFAR100 ResNet18", [64.0, 32.0, 16.0], [0.32, 0.16, 0.08], 0.56),
    ("CIFAR100 WideResNet", [160.0, 80.0, 40.0], [0.80, 0.40, 0.20], 1.40),
    ("AG News TextCNN", [16.0, 2.0, 2.0], [0.08, 0.01, 0.01], 0.10),
    ("AG News MiniBert", [16.0, 12.0, 12.0], [0.08, 0.06, 0.06], 0.20),
];

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
