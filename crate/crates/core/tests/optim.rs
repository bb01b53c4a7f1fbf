use onconet::models::ParamStore;
use onconet::optim::{adam_step, AdamHyper, AdamState};
use onconet::Tensor;

fn store(values: &[(&str, Vec<f32>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, v) in values {
        s.insert(*name, Tensor::new(vec![v.len()], v.clone()).unwrap());
    }
    s
}

fn set_grads(s: &mut ParamStore, grads: &[Vec<f32>]) {
    s.zero_grad();
    for ((_, t), g) in s.iter_mut().zip(grads) {
        t.accumulate_grad(g).unwrap();
    }
}

#[test]
fn zero_gradient_leaves_parameters_and_counts_the_step() {
    let mut p = store(&[("w", vec![1.0, -2.0, 3.0])]);
    let before = p.clone();
    let mut s = AdamState::new(AdamHyper::default(), &p);
    set_grads(&mut p, &[vec![0.0; 3]]);
    adam_step(&mut p, &mut s).unwrap();
    assert_eq!(s.t, 1);
    assert_eq!(p.get("w").unwrap().data(), before.get("w").unwrap().data());
}

#[test]
fn first_step_moves_each_coordinate_by_lr() {
    let mut p = store(&[("a", vec![0.5; 4]), ("b", vec![-1.0; 4])]);
    let mut s = AdamState::new(AdamHyper::default(), &p);
    set_grads(&mut p, &[vec![0.3, -0.3, 2.0, -7.0], vec![0.6, -0.6, 4.0, -14.0]]);
    adam_step(&mut p, &mut s).unwrap();
    let da: Vec<f64> = p.get("a").unwrap().data().iter().map(|&v| v as f64 - 0.5).collect();
    let db: Vec<f64> = p.get("b").unwrap().data().iter().map(|&v| v as f64 + 1.0).collect();
    for (x, y) in da.iter().zip(&db) {
        assert!((x.abs() - 0.0006).abs() < 1e-7, "{x}");
        assert!((x - y).abs() < 1e-7);
    }
    assert!(da[0] < 0.0 && da[1] > 0.0);
}

#[test]
fn zero_lr_never_moves() {
    let mut p = store(&[("w", vec![0.25, 1.5])]);
    let before = p.clone();
    let hyper = AdamHyper {
        lr: 0.0,
        ..AdamHyper::default()
    };
    let mut s = AdamState::new(hyper, &p);
    for k in 0..5 {
        set_grads(&mut p, &[vec![k as f32 + 1.0, -3.0]]);
        adam_step(&mut p, &mut s).unwrap();
    }
    assert_eq!(p.get("w").unwrap().data(), before.get("w").unwrap().data());
    assert_eq!(s.t, 5);
}

#[test]
fn matches_reference_update_over_several_steps() {
    let mut p = store(&[("w", vec![0.1, -0.2])]);
    let mut s = AdamState::new(AdamHyper::default(), &p);
    let grads = [[0.5, -1.0], [0.2, 0.4], [-0.3, 0.1]];
    let (mut w, mut m, mut v) = ([0.1f64, -0.2], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        set_grads(&mut p, &[g.map(|x| x as f32).to_vec()]);
        adam_step(&mut p, &mut s).unwrap();
        let t = t as i32 + 1;
        for i in 0..2 {
            let gi = g[i] as f32 as f64;
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= 0.0006 * mh / (vh.sqrt() + 1e-8);
        }
    }
    for i in 0..2 {
        assert!((p.get("w").unwrap().data()[i] as f64 - w[i]).abs() < 1e-6);
    }
}

#[test]
fn invalid_steps_fail_without_side_effects() {
    let mut p = store(&[("good", vec![1.0]), ("bad", vec![2.0])]);
    let mut s = AdamState::new(AdamHyper::default(), &p);
    set_grads(&mut p, &[vec![1.0], vec![f32::NAN]]);
    let before = p.clone();
    let err = adam_step(&mut p, &mut s).unwrap_err();
    assert!(err.to_string().contains("bad"));
    assert_eq!(s.t, 0);
    assert_eq!(p.get("good").unwrap().data(), before.get("good").unwrap().data());

    let mut q = store(&[("w", vec![1.0])]);
    let err = adam_step(&mut q, &mut s).unwrap_err();
    assert_eq!(err.kind(), "invalid_argument");

    let mut r = store(&[("good", vec![1.0]), ("bad", vec![2.0, 3.0])]);
    set_grads(&mut r, &[vec![1.0], vec![1.0, 1.0]]);
    assert_eq!(adam_step(&mut r, &mut s).unwrap_err().kind(), "shape");

    let mut missing = store(&[("good", vec![1.0]), ("bad", vec![2.0])]);
    let err = adam_step(&mut missing, &mut s).unwrap_err();
    assert_eq!(err.kind(), "missing_gradient");
}

#[test]
fn state_round_trips_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = store(&[("w", vec![0.1, 0.2, 0.3])]);
    let mut s = AdamState::new(AdamHyper::default(), &p);
    set_grads(&mut p, &[vec![1.0, -2.0, 0.5]]);
    adam_step(&mut p, &mut s).unwrap();
    s.save(dir.path()).unwrap();
    let mut loaded = AdamState::load(dir.path()).unwrap();
    assert_eq!(loaded, s);

    let mut p2 = p.clone();
    set_grads(&mut p, &[vec![0.3, 0.3, 0.3]]);
    set_grads(&mut p2, &[vec![0.3, 0.3, 0.3]]);
    adam_step(&mut p, &mut s).unwrap();
    adam_step(&mut p2, &mut loaded).unwrap();
    assert_eq!(p.get("w").unwrap().data(), p2.get("w").unwrap().data());
    assert_eq!(s.first_moment("w"), loaded.first_moment("w"));
}
