//! Acceptance criteria, one line per criterion. Run with
//! `cargo test --test acceptance [name-filter]`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use onconet::autograd::suite::full_suite;
use onconet::datapipe::{synth_dataset, BatchStream, Dataset, EpochPlan, Manifest, Modality, Split, SynthOptions};
use onconet::metrics::roc_auc;
use onconet::models::{count_params, published_param_count, Model, ModelConfig, Variant};
use onconet::tensor::set_deterministic;
use onconet::trainer::{batch_loss, evaluate_model, train, ExperimentConfig, SplitPolicy};
use onconet::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let entries = ok(full_suite(5, 0))?;
    let elapsed = start.elapsed();
    let worst = entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.report.pass || e.report.max_rel_err >= 1e-4)
        .map(|e| e.name.as_str())
        .collect();
    check(failed.is_empty(), || format!("failing checks: {failed:?}"))?;
    check(entries.iter().any(|e| e.name.starts_with("fcn_aggrescnn_16")), || "composed check missing".into())?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{} checks, max rel err {worst:.2e}, {elapsed:.1?}", entries.len()))
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn shape_contract() -> Outcome {
    for size in [16, 32, 64, 128, 512] {
        let model = ok(Model::build(&ModelConfig::canonical(Variant::FcnOnly, 2).with_size(size)))?;
        let params = ok(model.init_params(1))?;
        let x = random_input([1, 2, size, size], size as u64);
        let y = ok(model.predict(&params, &x))?;
        check(y.shape() == x.shape(), || format!("FCN at {size}: {:?} -> {:?}", x.shape(), y.shape()))?;
    }
    let mut worst = 0.0f64;
    for variant in [Variant::AggresCnn, Variant::BaselineCnn] {
        let model = ok(Model::build(&ModelConfig::canonical(variant, 2).with_size(64).with_fcn(true)))?;
        let params = ok(model.init_params(2))?;
        let y = ok(model.predict(&params, &random_input([3, 2, 64, 64], 9)))?;
        check(y.shape() == [3, 2], || format!("{variant}: output {:?}", y.shape()))?;
        for row in y.data().chunks(2) {
            worst = worst.max((row[0] as f64 + row[1] as f64 - 1.0).abs());
        }
    }
    check(worst <= 1e-6, || format!("row sum off by {worst:e}"))?;
    Ok(format!("FCN shape preserved at 16..512; N×2 rows sum to 1 within {worst:.1e}"))
}

fn total(variant: Variant, channels: usize, fcn: bool) -> Result<usize, String> {
    Ok(ok(count_params(&ModelConfig::canonical(variant, channels).with_fcn(fcn)))?.total())
}

fn parameter_ledger() -> Outcome {
    let delta = total(Variant::BaselineCnn, 2, false)? - total(Variant::BaselineCnn, 1, false)?;
    let published_delta = published_param_count(Variant::BaselineCnn, 2, false).unwrap()
        - published_param_count(Variant::BaselineCnn, 1, false).unwrap();
    check(delta == 800 && delta == published_delta, || format!("baseline channel delta {delta}"))?;

    let fcn = total(Variant::FcnOnly, 1, false)?;
    check(fcn == total(Variant::FcnOnly, 2, false)?, || "FCN total depends on channels".into())?;
    for variant in [Variant::AggresCnn, Variant::BaselineCnn] {
        for ch in [1, 2] {
            let d = total(variant, ch, true)? - total(variant, ch, false)?;
            check(d == fcn, || format!("{variant} {ch}ch FCN delta {d} != {fcn}"))?;
            let p = published_param_count(variant, ch, true).unwrap() - published_param_count(variant, ch, false).unwrap();
            check(p == 391_536, || format!("published FCN delta {p}"))?;
        }
    }

    let goldens = [
        ("aggres_cnn 1ch", total(Variant::AggresCnn, 1, false)?, 132_418),
        ("aggres_cnn 2ch", total(Variant::AggresCnn, 2, false)?, 132_562),
        ("fcn", fcn, 876_545),
        ("baseline_cnn 1ch", total(Variant::BaselineCnn, 1, false)?, 781_794),
        ("baseline_cnn 2ch", total(Variant::BaselineCnn, 2, false)?, 782_594),
    ];
    for (name, got, golden) in goldens {
        check(got == golden, || format!("{name}: {got} != golden {golden}"))?;
    }
    Ok(format!("baseline delta 800, FCN {fcn} independent of channels and classifier, goldens exact"))
}

fn brute_force_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&p, _) in scores.iter().zip(labels).filter(|&(_, &l)| l == 1) {
        for (&q, _) in scores.iter().zip(labels).filter(|&(_, &l)| l == 0) {
            pairs += 1.0;
            wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

fn metric_oracle() -> Outcome {
    let example = ok(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]))?;
    check(example == 0.75, || format!("worked example gave {example}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let n = rng.gen_range(2..=50);
        let tied = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if tied { rng.gen_range(0..6) as f64 / 5.0 } else { rng.gen::<f64>() })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        worst = worst.max((ok(roc_auc(&scores, &labels))? - brute_force_auc(&scores, &labels)).abs());
        done += 1;
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("worked example 0.75; 100 instances max deviation {worst:.1e}"))
}

fn tiny_experiment(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::paper_regime();
    cfg.output_dir = out.to_path_buf();
    cfg.model = ModelConfig::tiny(Variant::AggresCnn, 2, 16).with_fcn(true);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.data.split = SplitPolicy::Stratified {
        eval_fraction: 0.25,
        seed: 7,
    };
    cfg
}

type BatchBits = (Vec<u32>, Vec<usize>);

fn augmented_batches(manifest: &Manifest) -> Result<Vec<BatchBits>, String> {
    let rows: Vec<_> = manifest.rows.iter().collect();
    let data = ok(Dataset::load(manifest, &rows, Modality::PetCt, 16))?;
    let mut out = Vec::new();
    for epoch in 0..2 {
        let plan = ok(EpochPlan::new(&data.labels(), 42, epoch, 4, true, true))?;
        for batch in BatchStream::new(Arc::clone(&data.examples), plan, true) {
            let batch = ok(batch)?;
            out.push((batch.x.data().iter().map(|v| v.to_bits()).collect(), batch.labels));
        }
    }
    Ok(out)
}

fn pipeline_determinism() -> Outcome {
    set_deterministic(true);
    let dir = ok(tempfile::tempdir())?;
    let manifest = ok(synth_dataset(&dir.path().join("data"), &SynthOptions::new(16, 16, 3)))?;

    let a = augmented_batches(&manifest)?;
    check(a == augmented_batches(&manifest)?, || "augmented batches differ".into())?;

    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let cfg = tiny_experiment(&dir.path().join(name));
        let outcome = ok(train(&cfg, &manifest))?;
        let model = ok(Model::build(&cfg.model))?;
        let report = ok(evaluate_model(&model, &outcome.params, &cfg, &manifest, Modality::PetCt, Split::Eval, 0.5))?;
        let history: Vec<u64> = outcome.history.iter().map(|r| r.loss.to_bits()).collect();
        runs.push((history, report.to_key_values()));
    }
    check(runs[0].0 == runs[1].0, || "loss histories differ".into())?;
    check(runs[0].1 == runs[1].1, || "final metrics differ".into())?;
    Ok(format!("{} batches, {} losses and metrics bitwise equal", a.len(), runs[0].0.len()))
}

fn rebalancing() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let mut opts = SynthOptions::new(100, 16, 5);
    opts.positive_fraction = 0.19;
    let labels = ok(synth_dataset(dir.path(), &opts))?.labels();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    check(pos == 19, || format!("{pos} positives"))?;
    for epoch in 0..5 {
        let plan = ok(EpochPlan::new(&labels, 11, epoch, 8, true, true))?;
        let ones = plan.entries.iter().filter(|e| labels[e.index] == 1).count();
        let zeros = plan.entries.len() - ones;
        check(ones == zeros, || format!("epoch {epoch}: {zeros} negatives vs {ones} positives"))?;
    }
    Ok("19/100 positives -> 81/81 in each of 5 epochs".into())
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let manifest = ok(synth_dataset(&dir.path().join("data"), &SynthOptions::new(8, 64, 1)))?;
    let mut cfg = ExperimentConfig::paper_regime();
    cfg.output_dir = dir.path().join("run");
    cfg.model.input_size = 64;
    cfg.data.augment = false;
    cfg.train.epochs = 200;
    cfg.train.max_steps = Some(200);
    cfg.train.micro_batch = None;
    let outcome = ok(train(&cfg, &manifest))?;
    check(outcome.history.len() == 200, || format!("{} steps", outcome.history.len()))?;

    let model = ok(Model::build(&cfg.model))?;
    let mut params = outcome.params.clone();
    let rows: Vec<_> = manifest.rows.iter().collect();
    let data = ok(Dataset::load(&manifest, &rows, Modality::PetCt, 64))?;
    let plan = EpochPlan::sequential(data.len(), data.len());
    let batch = ok(plan.make_batch(&data.examples, 0))?;
    let ce = ok(batch_loss(&model, &mut params, &batch.x, &batch.labels, false))?;
    let report = ok(evaluate_model(&model, &outcome.params, &cfg, &manifest, Modality::PetCt, Split::Train, 0.5))?;
    let elapsed = start.elapsed();
    check(ce < 0.05, || format!("training cross-entropy {ce:e}"))?;
    check(report.auc == 1.0, || format!("training AUC {}", report.auc))?;
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:.1?}"))?;
    Ok(format!("CE {ce:.2e}, AUC {}, {elapsed:.1?}", report.auc))
}

fn paper_regime_smoke() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let manifest = ok(synth_dataset(&dir.path().join("data"), &SynthOptions::new(8, 512, 2)))?;
    let mut cfg = ExperimentConfig::paper_regime();
    check(
        cfg.train.lr == 0.0006 && cfg.train.batch_size == 8 && cfg.train.epochs == 100 && cfg.model.input_size == 512,
        || "canonical regime values changed".into(),
    )?;
    cfg.output_dir = dir.path().join("run");
    cfg.train.max_epochs = Some(1);
    let start = Instant::now();
    let outcome = ok(train(&cfg, &manifest))?;
    check(!outcome.history.is_empty(), || "no steps ran".into())?;
    check(outcome.history.iter().all(|r| r.epoch == 0 && r.loss.is_finite()), || "bad history".into())?;
    Ok(format!(
        "512×512 FCN+AggResCNN PET_CT, 1 of 100 epochs: {} step(s), loss {:.4}, {:.1?}",
        outcome.history.len(),
        outcome.final_loss().unwrap(),
        start.elapsed()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("shape contract", shape_contract),
        ("parameter ledger", parameter_ledger),
        ("metric oracle", metric_oracle),
        ("pipeline determinism", pipeline_determinism),
        ("rebalancing", rebalancing),
        ("overfit sanity", overfit_sanity),
        ("--paper-regime smoke run", paper_regime_smoke),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
