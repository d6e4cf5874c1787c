//! Central finite-difference checks of analytic gradients, in `f64`.
//!
//! A coordinate whose `+eps` or `-eps` evaluation flips the sign of any ReLU
//! input straddles a kink, where the difference quotient is not an estimate
//! of the derivative. Such coordinates are counted in
//! [`GradCheckReport::kinks`] instead of being compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::loss::masked_l2_with_grad;
use super::model::{is_depth_channel, Cascade, CascadeConfig, Init, ModelError};
use super::params::{ParamId, ParamStore};
use super::params::ParamRole;
use super::tape::{BnParams, Gradients, Mode, Tape, Var};
use super::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Pairs where both gradients are below this are not compared.
pub const NEGLIGIBLE_GRADIENT: f64 = 1e-10;

/// Loss value and ReLU sign pattern of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub relu_signs: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose analytic and numeric gradients were both negligible.
    pub skipped: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub kinks: usize,
    /// Location and values of the largest error.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        match relative_error(analytic, numeric) {
            None => self.skipped += 1,
            Some(rel) => {
                self.checked += 1;
                if rel > self.max_rel_error || self.worst.is_none() {
                    self.max_rel_error = rel;
                    self.worst = Some(format!("{}: analytic {analytic:e}, numeric {numeric:e}", label()));
                }
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.kinks += other.kinks;
    }

    fn compare(&mut self, label: impl FnOnce() -> String, analytic: f64, base: &[bool], plus: Probe, minus: Probe, eps: f64) {
        if plus.relu_signs != base || minus.relu_signs != base {
            self.kinks += 1;
        } else {
            self.record(label, analytic, (plus.loss - minus.loss) / (2.0 * eps));
        }
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale < NEGLIGIBLE_GRADIENT {
        None
    } else {
        Some((analytic - numeric).abs() / scale)
    }
}

/// Checks `analytic` against central differences of `loss` for every
/// element of the parameters `ids`.
pub fn check_params<F>(store: &mut ParamStore<f64>, ids: &[ParamId], eps: f64, analytic: &Gradients<f64>, mut loss: F) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> Probe,
{
    let base = loss(store).relu_signs;
    let mut report = GradCheckReport::default();
    for &id in ids {
        for i in 0..store.data(id).len() {
            let original = store.data(id)[i];
            store.data_mut(id)[i] = original + eps;
            let plus = loss(store);
            store.data_mut(id)[i] = original - eps;
            let minus = loss(store);
            store.data_mut(id)[i] = original;
            let label = || format!("{}[{i}]", store.get(id).name);
            report.compare(label, analytic.param(id)[i], &base, plus, minus, eps);
        }
    }
    report
}

/// Checks `analytic` against central differences of `loss` for every
/// element of `input`.
pub fn check_input<F>(input: &Tensor<f64>, eps: f64, analytic: &Tensor<f64>, mut loss: F) -> GradCheckReport
where
    F: FnMut(&Tensor<f64>) -> Probe,
{
    let base = loss(input).relu_signs;
    let mut x = input.clone();
    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let original = x.data()[i];
        x.data_mut()[i] = original + eps;
        let plus = loss(&x);
        x.data_mut()[i] = original - eps;
        let minus = loss(&x);
        x.data_mut()[i] = original;
        report.compare(|| format!("input[{i}]"), analytic.data()[i], &base, plus, minus, eps);
    }
    report
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn random_param(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>) -> ParamId {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.register(name, shape, data, ParamRole::Trainable)
}

fn random_bn(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> BnParams {
    BnParams {
        gamma: random_param(store, rng, &format!("{name}.gamma"), vec![c]),
        beta: random_param(store, rng, &format!("{name}.beta"), vec![c]),
        running_mean: store.register(format!("{name}.mean"), vec![c], vec![0.3; c], ParamRole::RunningStat),
        running_var: store.register(format!("{name}.var"), vec![c], vec![1.7; c], ParamRole::RunningStat),
    }
}

/// Checks the loss `sum(probe * y)`, with `y = layer(x)` and a random
/// `probe`, against every trainable parameter in `store` and the input.
pub fn check_layer<F>(store: &mut ParamStore<f64>, input: &Tensor<f64>, mode: Mode, seed: u64, layer: F) -> GradCheckReport
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Var,
{
    let run = |params: &ParamStore<f64>, x: &Tensor<f64>, probe: Option<&Tensor<f64>>| {
        let mut tape = Tape::new(params, mode);
        let xv = tape.input(x.clone());
        let y = layer(&mut tape, xv);
        let [c, h, w] = tape.value(y).shape();
        let probe = probe
            .cloned()
            .unwrap_or_else(|| random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), c, h, w));
        let loss: f64 = tape.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let signs = tape.relu_signs();
        let grads = tape.backward(&[(y, probe.clone())]);
        (Probe { loss, relu_signs: signs }, grads, xv, probe)
    };
    let (_, grads, xv, probe) = run(store, input, None);
    let dx = grads.var(xv).expect("input gradient").clone();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut report = check_params(store, &ids, DEFAULT_EPSILON, &grads, |p| run(p, input, Some(&probe)).0);
    report.merge(check_input(input, DEFAULT_EPSILON, &dx, |x| run(store, x, Some(&probe)).0));
    report
}

/// Names accepted by [`check_layer_case`], one per layer kind the networks
/// are built from.
pub const LAYER_CASES: [&str; 7] = [
    "conv",
    "strided_conv",
    "deconv",
    "batch_norm_train",
    "batch_norm_eval",
    "pointwise",
    "residual_block",
];

/// Gradient check of one layer kind on small random inputs.
pub fn check_layer_case(name: &str) -> GradCheckReport {
    let seed = LAYER_CASES.iter().position(|c| *c == name).unwrap_or_else(|| panic!("unknown layer case `{name}`")) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut store = ParamStore::<f64>::new();
    let probe_seed = 200 + seed;
    match name {
        "conv" => {
            let w = random_param(&mut store, &mut rng, "w", vec![3, 2, 3, 3]);
            let b = random_param(&mut store, &mut rng, "b", vec![3]);
            let input = random_tensor(&mut rng, 2, 6, 5);
            check_layer(&mut store, &input, Mode::Train, probe_seed, |t, x| t.conv2d(x, w, Some(b), 1, 1).expect("shapes"))
        }
        "strided_conv" => {
            let w = random_param(&mut store, &mut rng, "w", vec![4, 3, 3, 3]);
            let input = random_tensor(&mut rng, 3, 8, 6);
            check_layer(&mut store, &input, Mode::Train, probe_seed, |t, x| t.conv2d(x, w, None, 2, 1).expect("shapes"))
        }
        "deconv" => {
            let w = random_param(&mut store, &mut rng, "w", vec![3, 2, 4, 4]);
            let b = random_param(&mut store, &mut rng, "b", vec![2]);
            let input = random_tensor(&mut rng, 3, 4, 3);
            check_layer(&mut store, &input, Mode::Train, probe_seed, |t, x| t.deconv2d(x, w, Some(b), 2, 1).expect("shapes"))
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let bn = random_bn(&mut store, &mut rng, "bn", 3);
            let input = random_tensor(&mut rng, 3, 4, 5);
            let mode = if name == "batch_norm_train" { Mode::Train } else { Mode::Eval };
            check_layer(&mut store, &input, mode, probe_seed, |t, x| t.batch_norm(x, bn))
        }
        "pointwise" => {
            let w = random_param(&mut store, &mut rng, "w", vec![2, 4, 3, 3]);
            let input = random_tensor(&mut rng, 4, 4, 4);
            check_layer(&mut store, &input, Mode::Train, probe_seed, |t, x| {
                let a = t.slice_channels(x, 0, 2);
                let b = t.slice_channels(x, 2, 4);
                let s = t.add(a, b).expect("shapes");
                let s = t.scale(s, 1.5);
                let c = t.conv2d(x, w, None, 1, 1).expect("shapes");
                let cat = t.concat(&[s, c]).expect("shapes");
                let cat = t.scale_channels(cat, &[0.5, -2.0, 1.0, 3.0]);
                t.relu(cat)
            })
        }
        _ => {
            // Basic block with a strided 1x1 projection on the skip path.
            let w1 = random_param(&mut store, &mut rng, "conv1", vec![4, 3, 3, 3]);
            let bn1 = random_bn(&mut store, &mut rng, "bn1", 4);
            let w2 = random_param(&mut store, &mut rng, "conv2", vec![4, 4, 3, 3]);
            let bn2 = random_bn(&mut store, &mut rng, "bn2", 4);
            let wd = random_param(&mut store, &mut rng, "down", vec![4, 3, 1, 1]);
            let bnd = random_bn(&mut store, &mut rng, "bn_down", 4);
            let input = random_tensor(&mut rng, 3, 6, 4);
            check_layer(&mut store, &input, Mode::Train, probe_seed, |t, x| {
                let y = t.conv2d(x, w1, None, 2, 1).expect("shapes");
                let y = t.batch_norm(y, bn1);
                let y = t.relu(y);
                let y = t.conv2d(y, w2, None, 1, 1).expect("shapes");
                let y = t.batch_norm(y, bn2);
                let d = t.conv2d(x, wd, None, 2, 0).expect("shapes");
                let d = t.batch_norm(d, bnd);
                let sum = t.add(y, d).expect("shapes");
                t.relu(sum)
            })
        }
    }
}

/// [`check_layer_case`] for every entry of [`LAYER_CASES`].
pub fn layer_suite() -> Vec<(&'static str, GradCheckReport)> {
    LAYER_CASES.iter().map(|&name| (name, check_layer_case(name))).collect()
}

/// Random motion stack, color image, ground truth and mask.
pub fn random_cascade_inputs(width: usize, height: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = Uniform::new(2.0, 30.0);
    let flow = Normal::new(0.0, 2.0).expect("valid normal");
    let stack = Tensor::from_fn(8, height, width, |c, _, _| {
        if is_depth_channel(c) {
            depth.sample(&mut rng)
        } else {
            flow.sample(&mut rng)
        }
    });
    let color = Tensor::from_fn(3, height, width, |_, _, _| rng.gen_range(0.0..1.0));
    let gt = Tensor::from_fn(1, height, width, |_, _, _| depth.sample(&mut rng));
    let mask = (0..width * height).map(|_| rng.gen_bool(0.7)).collect();
    (stack, color, gt, mask)
}

/// Gradient check of the weighted two-term loss of a freshly initialized
/// cascade against every trainable parameter and both inputs, in training
/// mode.
pub fn check_cascade(config: &CascadeConfig, width: usize, height: usize, seed: u64, eps: f64) -> Result<GradCheckReport, ModelError> {
    let mut store = ParamStore::<f64>::new();
    let cascade = Cascade::build(config, &mut store, Init::Seeded(seed))?;
    let (stack, color, gt, mask) = random_cascade_inputs(width, height, seed ^ 0x5eed);
    let (wc, wr) = (0.1, 1.0);

    let run = |params: &ParamStore<f64>, stack: &Tensor<f64>, color: &Tensor<f64>, backward: bool| {
        let mut tape = Tape::new(params, Mode::Train);
        let vars = cascade.forward(&mut tape, stack, color).expect("valid shapes");
        let (lc, gc) = masked_l2_with_grad(tape.value(vars.coarse), &gt, &mask).expect("non-empty mask");
        let (lr, gr) = masked_l2_with_grad(tape.value(vars.refined), &gt, &mask).expect("non-empty mask");
        let probe = Probe {
            loss: wc * lc + wr * lr,
            relu_signs: tape.relu_signs(),
        };
        let grads = backward.then(|| tape.backward(&[(vars.coarse, gc.map(|g| g * wc)), (vars.refined, gr.map(|g| g * wr))]));
        (probe, grads, vars)
    };

    let (_, grads, vars) = run(&store, &stack, &color, true);
    let grads = grads.expect("requested");
    let dstack = grads.var(vars.stack).expect("stack gradient").clone();
    let dcolor = grads.var(vars.color).expect("color gradient").clone();

    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut report = check_params(&mut store, &ids, eps, &grads, |p| run(p, &stack, &color, false).0);
    report.merge(check_input(&stack, eps, &dstack, |s| run(&store, s, &color, false).0));
    report.merge(check_input(&color, eps, &dcolor, |c| run(&store, &stack, c, false).0));
    Ok(report)
}
