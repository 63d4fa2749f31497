use stillbox_core::dataset::{generate_records, GenerateOptions, SceneRecord};
use stillbox_core::depthnet::{
    finetune_curriculum, load_checkpoint, multiscale_loss, network_gradient_check, save_checkpoint, stack_pairs, train,
    DepthNet, NetworkConfig, TrainOptions,
};
use stillbox_core::gradkit::{BnMode, Graph, Tensor};

fn records(n: usize, res: usize, seed: u64) -> Vec<SceneRecord> {
    generate_records(&GenerateOptions::new(n, res, seed)).unwrap()
}

fn quick(epochs: usize) -> TrainOptions {
    TrainOptions { epochs, samples_per_scene: 2, eval_pairs_per_scene: 1, train_eval_scenes: Some(4), ..TrainOptions::default() }
}

#[test]
fn mini_network_gradient_matches_finite_differences() {
    let r = network_gradient_check(NetworkConfig::mini(), 32, 2, 8, 1e-6, 5).unwrap();
    println!("{r:?}");
    assert!(r.coordinates > 200);
    assert!(r.worst.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn full_config_shapes_and_size() {
    let net = DepthNet::<f32>::new(NetworkConfig::full(), 0).unwrap();
    let count = net.parameter_count();
    assert!((6_600_000..=8_100_000).contains(&count), "{count} parameters");
    let input = Tensor::<f32>::zeros(&[1, 6, 64, 64]);
    let fp = net.forward(&input, BnMode::Eval, false).unwrap();
    let sizes: Vec<usize> = fp.outputs.iter().map(|&v| fp.graph.value(v).shape[3]).collect();
    assert_eq!(sizes, vec![16, 8, 4, 2, 1]);
    let bottleneck = fp.graph.value(*fp.features.last().unwrap());
    assert_eq!(&bottleneck.shape[2..], &[1, 1]);
    assert_eq!(NetworkConfig::full().output_sizes(64), vec![16, 8, 4, 2, 1]);
}

#[test]
fn finest_output_is_a_quarter_at_every_resolution() {
    let net = DepthNet::<f32>::new(NetworkConfig::mini(), 1).unwrap();
    for res in [32usize, 64, 128] {
        let fp = net.forward(&Tensor::zeros(&[1, 6, res, res]), BnMode::Eval, false).unwrap();
        let sizes: Vec<usize> = fp.outputs.iter().map(|&v| fp.graph.value(v).shape[3]).collect();
        assert_eq!(sizes[0], res / 4);
        assert!(sizes.windows(2).all(|w| w[1] * 2 == w[0]), "{sizes:?}");
    }
    assert!(net.forward(&Tensor::zeros(&[1, 6, 36, 36]), BnMode::Eval, false).is_err());
}

#[test]
fn loss_is_zero_only_at_an_exact_match() {
    let target = Tensor { shape: vec![1, 1, 8, 8], data: (0..64).map(|i| 1.0 + i as f64).collect::<Vec<_>>() };
    let mut g = Graph::new();
    let fine = g.constant(target.clone());
    let pooled = stillbox_core::depthnet::pool_target(&target, 2).unwrap();
    let coarse = g.constant(pooled);
    let l = multiscale_loss(&mut g, &[fine, coarse], &target).unwrap();
    assert_eq!(g.value(l).data[0], 0.0);
    let mut off = target.clone();
    off.data[5] += 0.5;
    let mut g = Graph::new();
    let fine = g.constant(off);
    let l = multiscale_loss(&mut g, &[fine], &target).unwrap();
    assert!(g.value(l).data[0] > 0.0);
}

#[test]
fn training_is_deterministic() {
    let data = records(10, 32, 3);
    let (test, tr) = data.split_at(2);
    let opts = quick(1);
    let a = train(DepthNet::new(NetworkConfig::mini(), 0).unwrap(), tr, test, &opts).unwrap();
    let b = train(DepthNet::new(NetworkConfig::mini(), 0).unwrap(), tr, test, &opts).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.net.params, b.net.params);
    assert!(a.log.last_epoch().unwrap().train_loss.is_finite());
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let data = records(6, 32, 4);
    let (test, tr) = data.split_at(2);
    let ck = train(DepthNet::new(NetworkConfig::mini(), 2).unwrap(), tr, test, &quick(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.net.params, ck.net.params);
    assert_eq!(back.net.running, ck.net.running);
    assert_eq!(back.state.m, ck.state.m);
    assert_eq!(back.state.step, ck.state.step);
    assert_eq!(back.log, ck.log);
    let pairs: Vec<_> = test.iter().map(|r| (&r.frames[0], &r.frames[3])).collect();
    let input = stack_pairs::<f32>(&pairs);
    assert_eq!(back.net.predict(&input).unwrap(), ck.net.predict(&input).unwrap());
}

#[test]
fn single_stage_curriculum_is_plain_training() {
    let data = records(6, 32, 5);
    let (test, tr) = data.split_at(2);
    let opts = quick(1);
    let plain = train(DepthNet::new(NetworkConfig::mini(), opts.seed).unwrap(), tr, test, &opts).unwrap();
    let cur = finetune_curriculum(NetworkConfig::mini(), &[32], &[1], &[(tr, test)], &opts).unwrap();
    assert_eq!(plain.net.params, cur.net.params);
    assert_eq!(plain.log, cur.log);
}

#[test]
fn curriculum_rejects_bad_schedules() {
    let small = records(3, 32, 6);
    let opts = quick(1);
    let cfg = NetworkConfig::mini();
    let s = (&small[1..], &small[..1]);
    assert!(finetune_curriculum(cfg.clone(), &[64, 32], &[1, 1], &[s, s], &opts).is_err());
    assert!(finetune_curriculum(cfg.clone(), &[32, 32], &[1, 1], &[s, s], &opts).is_err());
    assert!(finetune_curriculum(cfg.clone(), &[64], &[1], &[s], &opts).is_err());
    assert!(finetune_curriculum(cfg.clone(), &[], &[], &[], &opts).is_err());
    assert!(finetune_curriculum(NetworkConfig::full(), &[32], &[1], &[s], &opts).is_err());
}
