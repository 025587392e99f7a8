use alft::diffcore::{AdamW, Container, Graph, OptimizerConfig, ParameterStore, Tensor, MAGIC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn awkward_values() -> Vec<f64> {
    vec![
        0.0,
        -0.0,
        1.0,
        -1.5e-308,
        f64::MIN_POSITIVE / 3.0,
        f64::MAX,
        f64::MIN,
        std::f64::consts::PI,
        1.0 + f64::EPSILON,
    ]
}

#[test]
fn container_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut c = Container::new(serde_json::json!({"kind": "test", "seed": 1}));
    c.push("awkward", Tensor::new(vec![3, 3], awkward_values()));
    c.push("random", Tensor::from_fn(&[4, 5, 2], |_| rng.gen_range(-1e3..1e3)));
    c.push("empty", Tensor::zeros(&[0]));
    let bytes = c.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + manifest_len + 8 * (9 + 40));

    let back = Container::from_bytes(&bytes).unwrap();
    assert_eq!(back.meta, c.meta);
    assert_eq!(back.tensors.len(), 3);
    for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.alft");
    c.write_to(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Container::read_from(&path).unwrap(), back);
}

#[test]
fn corrupted_containers_are_rejected() {
    let mut c = Container::new(serde_json::json!({}));
    c.push("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
    let bytes = c.to_bytes().unwrap();
    assert!(Container::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Container::from_bytes(&bytes[..12]).is_err());
    let mut bad = bytes.clone();
    bad[7] = b'2';
    assert!(Container::from_bytes(&bad).is_err());
}

#[test]
fn parameter_store_round_trips_through_a_container() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    store.add_uniform("a.w", &[3, 4], 3, &mut rng).unwrap();
    store.add_uniform("b.w", &[2], 2, &mut rng).unwrap();
    let mut c = Container::new(serde_json::json!({}));
    for (name, t) in store.named_tensors() {
        c.push(name, t.clone());
    }
    let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    for (name, t) in store.named_tensors() {
        assert_eq!(back.get(name).unwrap(), t);
    }
}

#[test]
#[should_panic(expected = "shape mismatch in matmul: [2, 3] vs [2, 3]")]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    g.matmul(a, b);
}

/// Three AdamW steps with decoupled decay on f(w) = w³/3 against the moment recursion.
#[test]
fn adamw_with_decoupled_decay_matches_the_recursion() {
    let cfg = OptimizerConfig {
        learning_rate: 0.05,
        weight_decay: 0.1,
        ..Default::default()
    };
    let mut store = ParameterStore::new();
    let id = store.add("w", Tensor::scalar(0.8)).unwrap();
    let mut opt = AdamW::new(cfg.clone());
    let (mut w, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let g = w * w;
        store.accumulate_grad(id, &[g]);
        opt.step(&mut store).unwrap();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mhat = m / (1.0 - cfg.beta1.powi(t));
        let vhat = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.epsilon) + cfg.weight_decay * w);
        assert!((store.value(id).data()[0] - w).abs() < 1e-10);
        assert_eq!(store.grad(id), &[0.0]);
    }
    opt.end_epoch();
    opt.end_epoch();
    assert!((opt.learning_rate() - 0.05 * 0.98 * 0.98).abs() < 1e-15);
}

#[test]
fn optimizer_config_is_validated() {
    let ok = OptimizerConfig::default();
    assert!(ok.validate().is_ok());
    assert!(OptimizerConfig {
        learning_rate: 0.0,
        ..ok.clone()
    }
    .validate()
    .is_err());
    assert!(OptimizerConfig { decay: 1.5, ..ok.clone() }.validate().is_err());
    assert!(OptimizerConfig { decay: 0.0, ..ok.clone() }.validate().is_err());
    assert!(OptimizerConfig { decay: 1.0, ..ok }.validate().is_ok());
}

#[test]
fn equal_seeds_give_identical_initializations() {
    let build = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.add_uniform("w", &[8, 8], 8, &mut rng).unwrap();
        store.flat_values()
    };
    assert_eq!(build(3), build(3));
    assert_ne!(build(3), build(4));
}
