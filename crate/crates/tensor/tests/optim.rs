use mff_tensor::nn::{ParamGrads, ParamStore};
use mff_tensor::optim::{AdamW, AdamWConfig};
use mff_tensor::Tensor;

fn no_decay() -> AdamWConfig {
    AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    }
}

fn scalar_store(w: f64) -> (ParamStore<f64>, mff_tensor::nn::ParamId) {
    let mut s = ParamStore::new();
    let id = s.insert("w", Tensor::scalar(w), true).unwrap();
    (s, id)
}

#[test]
fn first_step_is_lr_times_sign() {
    let (mut s, id) = scalar_store(1.0);
    let mut g = ParamGrads::empty();
    g.insert(id, Tensor::scalar(1.0));
    let mut opt = AdamW::new(no_decay());
    opt.step(&mut s, &g, 0.1).unwrap();
    assert!((s.get(id).item() - 0.9).abs() < 1e-7);
}

#[test]
fn zero_gradient_leaves_weight() {
    let (mut s, id) = scalar_store(0.7);
    let mut g = ParamGrads::empty();
    g.insert(id, Tensor::scalar(0.0));
    let mut opt = AdamW::new(no_decay());
    for _ in 0..5 {
        opt.step(&mut s, &g, 0.1).unwrap();
    }
    assert_eq!(s.get(id).item(), 0.7);
}

#[test]
fn quadratic_converges() {
    let (mut s, id) = scalar_store(1.0);
    let mut opt = AdamW::new(no_decay());
    for _ in 0..100 {
        let mut g = ParamGrads::empty();
        g.insert(id, Tensor::scalar(2.0 * s.get(id).item()));
        opt.step(&mut s, &g, 0.05).unwrap();
    }
    assert!(s.get(id).item().abs() < 1e-2, "{}", s.get(id).item());
}

#[test]
fn decay_is_decoupled() {
    let (mut s, id) = scalar_store(2.0);
    let mut g = ParamGrads::empty();
    g.insert(id, Tensor::scalar(0.0));
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.step(&mut s, &g, 0.1).unwrap();
    // moments stay zero, so only the decay term acts
    assert!((s.get(id).item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
}

#[test]
fn non_positive_lr_rejected() {
    let (mut s, _) = scalar_store(1.0);
    let mut opt = AdamW::new(no_decay());
    assert!(opt.step(&mut s, &ParamGrads::empty(), 0.0).is_err());
}
