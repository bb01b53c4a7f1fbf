//! Randomized gradient checks over every differentiable op and over the
//! composed FCN + classifier network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradcheckOptions, GradcheckReport, Stencil, Tape, Var};
use crate::error::Result;
use crate::models::{BoundParams, Model, ModelConfig, Variant};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).expect("non-empty shape")
}

fn entry(name: String, report: GradcheckReport) -> SuiteEntry {
    SuiteEntry { name, report }
}

/// Checks each op on `instances` random shapes and values.
pub fn op_suite(instances: usize, seed: u64) -> Vec<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..instances {
        let opts = GradcheckOptions {
            seed: seed.wrapping_add(i as u64),
            ..GradcheckOptions::default()
        };
        let n = rng.gen_range(1..=2);
        let tag = |op: &str| format!("{op}#{i}");

        // Plain convolution.
        let (ci, co, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), [1, 3][rng.gen_range(0..2)]);
        let hw = rng.gen_range(3..=6);
        let stride = rng.gen_range(1..=2);
        let spec = ConvSpec::new(stride, k / 2, 1);
        let inputs = vec![
            uniform(&mut rng, vec![n, ci, hw, hw], -1.0, 1.0),
            uniform(&mut rng, vec![co, ci, k, k], -1.0, 1.0),
            uniform(&mut rng, vec![co], -1.0, 1.0),
        ];
        out.push(entry(
            tag("conv2d"),
            gradcheck(|t, v| t.conv2d(v[0], v[1], v[2], spec), &inputs, &opts),
        ));

        // Grouped, strided convolution.
        let groups = rng.gen_range(2..=3);
        let (ci, co) = (groups * rng.gen_range(1..=2), groups * rng.gen_range(1..=2));
        let spec = ConvSpec::new(2, 1, groups);
        let inputs = vec![
            uniform(&mut rng, vec![n, ci, 5, 5], -1.0, 1.0),
            uniform(&mut rng, vec![co, ci / groups, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![co], -1.0, 1.0),
        ];
        out.push(entry(
            tag("conv2d_grouped"),
            gradcheck(|t, v| t.conv2d(v[0], v[1], v[2], spec), &inputs, &opts),
        ));

        let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let spec = ConvSpec::new(2, 1, 1);
        let inputs = vec![
            uniform(&mut rng, vec![n, ci, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![ci, co, 3, 3], -1.0, 1.0),
            uniform(&mut rng, vec![co], -1.0, 1.0),
        ];
        out.push(entry(
            tag("conv2d_transpose"),
            gradcheck(|t, v| t.conv2d_transpose(v[0], v[1], v[2], spec), &inputs, &opts),
        ));

        let c = rng.gen_range(1..=3);
        let inputs = vec![uniform(&mut rng, vec![n, c, 4, 4], -1.0, 1.0)];
        let window = rng.gen_range(1..=2) * 2;
        out.push(entry(
            tag("maxpool2d"),
            gradcheck(|t, v| t.maxpool2d(v[0], window, window), &inputs, &opts),
        ));

        let inputs = vec![uniform(&mut rng, vec![n, c, 3, 3], -2.0, 2.0)];
        out.push(entry(tag("selu"), gradcheck(|t, v| Ok(t.selu(v[0])), &inputs, &opts)));

        let inputs = vec![
            uniform(&mut rng, vec![n, c, 3, 3], -2.0, 2.0),
            uniform(&mut rng, vec![c], 0.0, 0.5),
        ];
        out.push(entry(tag("prelu"), gradcheck(|t, v| t.prelu(v[0], v[1]), &inputs, &opts)));

        let inputs = vec![uniform(&mut rng, vec![n, c, 3, 4], -1.0, 1.0)];
        out.push(entry(
            tag("global_avg_pool"),
            gradcheck(|t, v| t.global_avg_pool(v[0]), &inputs, &opts),
        ));

        let (f, kk) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
        let inputs = vec![
            uniform(&mut rng, vec![n, f], -1.0, 1.0),
            uniform(&mut rng, vec![f, kk], -1.0, 1.0),
            uniform(&mut rng, vec![kk], -1.0, 1.0),
        ];
        out.push(entry(tag("dense"), gradcheck(|t, v| t.dense(v[0], v[1], v[2]), &inputs, &opts)));

        let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let inputs = vec![
            uniform(&mut rng, vec![n, ca, 2, 3], -1.0, 1.0),
            uniform(&mut rng, vec![n, cb, 2, 3], -1.0, 1.0),
        ];
        out.push(entry(
            tag("concat_channels"),
            gradcheck(|t, v| t.concat_channels(&[v[0], v[1]]), &inputs, &opts),
        ));

        let classes = rng.gen_range(2..=4);
        let inputs = vec![uniform(&mut rng, vec![n, classes], -2.0, 2.0)];
        out.push(entry(tag("softmax"), gradcheck(|t, v| t.softmax(v[0]), &inputs, &opts)));

        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let inputs = vec![uniform(&mut rng, vec![n, classes], 0.2, 1.0)];
        out.push(entry(
            tag("cross_entropy"),
            gradcheck(|t, v| t.cross_entropy(v[0], &labels), &inputs, &opts),
        ));

        let shape = vec![n, rng.gen_range(1..=4)];
        let inputs = vec![
            uniform(&mut rng, shape.clone(), -1.0, 1.0),
            uniform(&mut rng, shape, -1.0, 1.0),
        ];
        out.push(entry(tag("add"), gradcheck(|t, v| t.add(v[0], v[1]), &inputs, &opts)));
        out.push(entry(tag("mul"), gradcheck(|t, v| t.mul(v[0], v[1]), &inputs, &opts)));
        out.push(entry(tag("sum"), gradcheck(|t, v| Ok(t.sum(v[0])), &inputs[..1], &opts)));

        let inputs = vec![uniform(&mut rng, vec![n, 2, 3], -1.0, 1.0)];
        out.push(entry(
            tag("reshape"),
            gradcheck(|t, v| t.reshape(v[0], &[n * 3, 2]), &inputs, &opts),
        ));
    }
    out
}

/// Gradient check of cross-entropy through the full model with respect to
/// the input image and every parameter tensor.
pub fn composed_check(config: &ModelConfig, batch: usize, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = Model::build(config)?;
    let params = model.init_params(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa5a5);
    let x = uniform(&mut rng, model.input_shape(batch).to_vec(), -1.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|(_, t)| t.cast::<f64>()));

    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
        let probs = model.forward(tape, &bound, v[0])?;
        if config.variant == Variant::FcnOnly {
            return Ok(probs);
        }
        tape.cross_entropy(probs, &labels)
    };
    Ok(gradcheck(f, &inputs, opts))
}

/// Reduced-width FCN + AggResCNN at 16×16 on two channels.
pub fn composed_tiny_config() -> ModelConfig {
    ModelConfig::tiny(Variant::AggresCnn, 2, 16).with_fcn(true)
}

/// Options for whole-network checks: the five-point stencil keeps the
/// truncation error of deep compositions below the tolerance at the same step.
pub fn composed_options(seed: u64) -> GradcheckOptions {
    GradcheckOptions {
        seed,
        stencil: Stencil::FivePoint,
        ..GradcheckOptions::default()
    }
}

/// Op suite plus the composed networks.
pub fn full_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = op_suite(instances, seed);
    let opts = composed_options(seed);
    out.push(entry(
        "fcn_aggrescnn_16x16".into(),
        composed_check(&composed_tiny_config(), 2, &opts)?,
    ));
    let mut base = ModelConfig::tiny(Variant::BaselineCnn, 2, 16).with_fcn(true);
    base.baseline.pool = 2;
    out.push(entry("fcn_baseline_cnn_16x16".into(), composed_check(&base, 2, &opts)?));
    Ok(out)
}
