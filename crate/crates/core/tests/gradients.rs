use cfam_core::autodiff::{finite_diff_check, finite_diff_check_params, ParamSet, Tensor};
use cfam_core::compat::{CompatConfig, CompatModel, LossGraph, Mode, PairBatch};
use cfam_core::data::{ItemSet, ItemShape, Pair};
use cfam_core::gan::{GanBatch, GanConfig, GanGraph, GanModel, GanSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 50;
const KINK: f64 = 1e-3;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn jitter(params: &ParamSet<f64>, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    params
        .iter()
        .map(|(n, t)| {
            let data = t.data().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            (n.clone(), Tensor::new(t.shape(), data).unwrap())
        })
        .collect()
}

fn random_items(rng: &mut ChaCha8Rng, shape: ItemShape, n: usize) -> ItemSet {
    let pixels = (0..n * shape.pixels()).map(|_| rng.random::<f64>()).collect();
    let labels = (0..n).map(|i| i % 2).collect();
    ItemSet::new(shape, 2, pixels, labels, (0..n as u32).collect()).unwrap()
}

fn compat_loss_check(mode: Mode) {
    let shape = ItemShape::new(2, 3);
    let mut config = CompatConfig::new(mode, 2, 3, shape);
    config.trunk = vec![5, 4];
    config.lambda_m = 0.5;
    let model = CompatModel::<f64>::new(config.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut graph = LossGraph::<f64>::new(&config, 6).unwrap();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < POINTS {
        attempts += 1;
        assert!(attempts < 5000, "no kink-free points found");
        let items = random_items(&mut rng, shape, 8);
        let pairs: Vec<Pair> = (0..6)
            .map(|i| Pair {
                query: i as u32,
                candidate: (i + 1 + rng.random_range(0..6)) as u32 % 8,
                label: if i % 2 == 0 { 1 } else { -1 },
            })
            .collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();
        let batch = PairBatch::<f64>::new(&items, &pairs, Some(&weights)).unwrap();
        let mut params = jitter(model.params(), &mut rng);
        params.insert("c", Tensor::scalar(rng.random_range(0.0..3.0)));
        let b = batch.bindings(&params);
        if graph
            .graph
            .kink_margin(&b, &[graph.loss])
            .unwrap()
            .is_some_and(|m| m < KINK)
        {
            continue;
        }
        let err = finite_diff_check(&mut graph.graph, graph.loss, &b, EPS).unwrap();
        assert!(err < TOL, "{mode}: relative error {err}");
        checked += 1;
    }
}

#[test]
fn pcd_batch_loss_matches_finite_differences() {
    compat_loss_check(Mode::Pcd);
}

#[test]
fn l2_batch_loss_matches_finite_differences() {
    compat_loss_check(Mode::L2);
}

fn tiny_gan() -> GanModel<f64> {
    let config = GanConfig {
        z_dim: 2,
        batch_size: 3,
        g_hidden: vec![4],
        d_hidden: vec![5],
        ..GanConfig::default()
    };
    let spec = GanSpec {
        cond_dim: 2,
        prototypes: 2,
        image: ItemShape::new(1, 3),
        m_enc: 0.1,
        m_prj: 0.5,
    };
    GanModel::new(config, spec).unwrap()
}

fn random_gan_batch(rng: &mut ChaCha8Rng) -> GanBatch<f64> {
    GanBatch {
        y: uniform(rng, &[3, 3], 0.0, 1.0),
        y_hat: uniform(rng, &[3, 3], 0.0, 1.2),
        cond_y: uniform(rng, &[3, 2], -1.0, 1.0),
        z_enc: uniform(rng, &[3, 2], -2.0, 2.0),
        s_prj: uniform(rng, &[6, 2], -1.0, 1.0),
        v_prj: uniform(rng, &[6, 2], -1.0, 1.0),
        z_prj: uniform(rng, &[6, 2], -2.0, 2.0),
    }
}

fn jitter_gan(gan: &GanModel<f64>, rng: &mut ChaCha8Rng) -> GanModel<f64> {
    GanModel {
        generator: jitter(&gan.generator, rng),
        discriminator: jitter(&gan.discriminator, rng),
        ..gan.clone()
    }
}

/// Exercises double backprop: `L_gp` holds a gradient subgraph that is
/// differentiated again with respect to the discriminator.
#[test]
fn discriminator_loss_with_penalty_matches_finite_differences() {
    let base = tiny_gan();
    let mut graph = GanGraph::<f64>::new(&base.config, &base.spec, 3).unwrap();
    let names: Vec<String> = base.discriminator.names().cloned().collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < POINTS {
        attempts += 1;
        assert!(attempts < 5000, "no kink-free points found");
        let gan = jitter_gan(&base, &mut rng);
        let batch = random_gan_batch(&mut rng);
        let b = batch.bindings(&gan);
        if graph
            .graph
            .kink_margin(&b, &[graph.l_d])
            .unwrap()
            .is_some_and(|m| m < KINK)
        {
            continue;
        }
        let gp = graph.graph.eval_one(&b, graph.l_gp).unwrap().item().unwrap();
        assert!(gp > 0.0);
        let err = finite_diff_check_params(&mut graph.graph, graph.l_d, &b, EPS, &names).unwrap();
        assert!(err < TOL, "L_D relative error {err}");
        let err = finite_diff_check_params(&mut graph.graph, graph.l_gp, &b, EPS, &names).unwrap();
        assert!(err < TOL, "L_gp relative error {err}");
        checked += 1;
    }
}

#[test]
fn generator_loss_matches_finite_differences() {
    let base = tiny_gan();
    let mut graph = GanGraph::<f64>::new(&base.config, &base.spec, 3).unwrap();
    let names: Vec<String> = base.generator.names().cloned().collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    while checked < 20 {
        let gan = jitter_gan(&base, &mut rng);
        let batch = random_gan_batch(&mut rng);
        let b = batch.bindings(&gan);
        if graph
            .graph
            .kink_margin(&b, &[graph.l_g])
            .unwrap()
            .is_some_and(|m| m < KINK)
        {
            continue;
        }
        let err = finite_diff_check_params(&mut graph.graph, graph.l_g, &b, EPS, &names).unwrap();
        assert!(err < TOL, "L_G relative error {err}");
        checked += 1;
    }
}

#[test]
fn players_receive_no_cross_gradients() {
    let base = tiny_gan();
    let mut graph = GanGraph::<f64>::new(&base.config, &base.spec, 3).unwrap();
    assert!(graph
        .graph
        .param_names()
        .iter()
        .all(|n| n.starts_with("gen.") || n.starts_with("disc.")));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let gan = jitter_gan(&base, &mut rng);
        let batch = random_gan_batch(&mut rng);
        let b = batch.bindings(&gan);
        let gd = graph.graph.backward(graph.l_d, &b).unwrap();
        let gg = graph.graph.backward(graph.l_g, &b).unwrap();
        for (name, t) in gd.iter().filter(|(n, _)| n.starts_with("gen.")) {
            assert!(t.data().iter().all(|&v| v == 0.0), "L_D leaks into {name}");
        }
        for (name, t) in gg.iter().filter(|(n, _)| n.starts_with("disc.")) {
            assert!(t.data().iter().all(|&v| v == 0.0), "L_G leaks into {name}");
        }
        // Each loss does reach its own player.
        assert!(gd
            .iter()
            .any(|(n, t)| n.starts_with("disc.") && t.data().iter().any(|&v| v != 0.0)));
        assert!(gg
            .iter()
            .any(|(n, t)| n.starts_with("gen.") && t.data().iter().any(|&v| v != 0.0)));
    }
}
