use gaitfuse_core::model::*;
use gaitfuse_core::nn::{register_params, Forward};
use gaitfuse_core::stgcn::{self, build_coco_graph, BackboneConfig, Preset};
use gaitfuse_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn input(cfg: &ModelConfig, n: usize, t: usize, seed: u64) -> ModelInput<f32> {
    ModelInput {
        skeleton: cfg
            .variant
            .uses_skeleton()
            .then(|| random_f32(&[n, 3, t, 17], seed)),
        clinical: cfg
            .variant
            .uses_clinical()
            .then(|| random_f32(&[n, cfg.num_features()], seed + 1)),
    }
}

#[test]
fn paper_preset_shapes() {
    let cfg = ModelConfig {
        preset: Preset::Paper,
        ..Default::default()
    };
    let model = Model::new(cfg.clone(), 1).unwrap();
    let x = input(&cfg, 2, 124, 5);
    let mut tape = Tape::new();
    let params = register_params(&mut tape, &model.params);
    let mut f = Forward::new(&mut tape, &params, &model.buffers, false, None);
    let out = model.forward(&mut f, &x).unwrap();
    assert_eq!(tape.value(out.skeleton_embedding.unwrap()).shape(), &[2, 256]);
    assert_eq!(tape.value(out.clinical_embedding.unwrap()).shape(), &[2, 256]);
    assert_eq!(tape.value(out.fused).shape(), &[2, 512]);
    assert_eq!(tape.value(out.logits).shape(), &[2, 4]);
    assert_eq!(tape.value(out.last_block.unwrap()).shape(), &[2, 256, 31, 17]);
}

#[test]
fn first_stride_two_block_halves_time() {
    let cfg = BackboneConfig::preset(Preset::Desk);
    let model = Model::new(
        ModelConfig {
            variant: Variant::Skeleton,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let mut tape = Tape::new();
    let params = register_params(&mut tape, &model.params);
    let mut f = Forward::new(&mut tape, &params, &model.buffers, false, None);
    let x = f.tape.constant(random_f32(&[1, 8, 124, 17], 3));
    let a = f.tape.constant(build_coco_graph().a_hat_tensor());
    // block 5 is the first stride-2 block (8 -> 16 channels)
    let y = stgcn::block_forward(&mut f, 5, &cfg.blocks[4], &cfg, x, a, true).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 16, 62, 17]);
}

#[test]
fn residual_path_changes_output() {
    let cfg = BackboneConfig::preset(Preset::Desk);
    let model = Model::new(
        ModelConfig {
            variant: Variant::Skeleton,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let run = |residual: bool| {
        let mut tape = Tape::new();
        let params = register_params(&mut tape, &model.params);
        let mut f = Forward::new(&mut tape, &params, &model.buffers, false, None);
        let x = f.tape.constant(random_f32(&[2, 8, 16, 17], 9));
        let a = f.tape.constant(build_coco_graph().a_hat_tensor());
        let y = stgcn::block_forward(&mut f, 2, &cfg.blocks[1], &cfg, x, a, residual).unwrap();
        tape.value(y).clone()
    };
    let (with, without) = (run(true), run(false));
    assert_eq!(with.shape(), without.shape());
    let diff: f32 = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3, "residual made no difference ({diff})");
}

/// Relabeling the nodes of the input and the graph relabels the output of a
/// block (block batch norms are per channel, so they commute with it).
#[test]
fn block_is_node_permutation_equivariant() {
    let cfg = BackboneConfig::preset(Preset::Desk);
    let model = Model::new(
        ModelConfig {
            variant: Variant::Skeleton,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let graph = build_coco_graph();
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..17).collect();
        p.reverse();
        p.swap(3, 11);
        p
    };
    let permute_nodes = |t: &Tensor<f32>| -> Tensor<f32> {
        let s = t.shape().to_vec();
        let mut out = t.clone();
        let rows = t.numel() / 17;
        for r in 0..rows {
            for v in 0..17 {
                out.data_mut()[r * 17 + perm[v]] = t.data()[r * 17 + v];
            }
        }
        assert_eq!(out.shape(), &s[..]);
        out
    };
    let edges: Vec<(usize, usize)> = graph.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
    let pgraph = stgcn::SkeletonGraph::from_edges(17, &edges).unwrap();

    let x = random_f32(&[2, 8, 12, 17], 11);
    let run = |x: &Tensor<f32>, g: &stgcn::SkeletonGraph, train: bool| {
        let mut tape = Tape::new();
        let params = register_params(&mut tape, &model.params);
        let mut f = Forward::new(&mut tape, &params, &model.buffers, train, None);
        let xv = f.tape.constant(x.clone());
        let a = f.tape.constant(g.a_hat_tensor());
        let y = stgcn::block_forward(&mut f, 2, &cfg.blocks[1], &cfg, xv, a, true).unwrap();
        tape.value(y).clone()
    };
    for train in [false, true] {
        let lhs = permute_nodes(&run(&x, &graph, train));
        let rhs = run(&permute_nodes(&x), &pgraph, train);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-5, "train={train}: {a} vs {b}");
        }
    }
}

#[test]
fn eval_predictions_do_not_depend_on_batch() {
    for variant in [Variant::Fused, Variant::Skeleton, Variant::Clinical] {
        let cfg = ModelConfig {
            variant,
            fusion: FusionMode::CrossAttention,
            ..Default::default()
        };
        let model = Model::new(cfg.clone(), 6).unwrap();
        let x = input(&cfg, 5, 24, 13);
        let batched = model.logits(&x).unwrap();
        for i in 0..5 {
            let one = ModelInput {
                skeleton: x.skeleton.as_ref().map(|s| s.slice_batch(i, i + 1).unwrap()),
                clinical: x.clinical.as_ref().map(|c| c.slice_batch(i, i + 1).unwrap()),
            };
            let alone = model.logits(&one).unwrap();
            for (a, b) in alone.data().iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-5, "{variant:?} sample {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn fusion_closed_forms() {
    let fs = Tensor::new([2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
    let fc = Tensor::new([2, 3], vec![0.5f64, -1.0, 2.0, 2.0, 1.0, -3.0]).unwrap();
    let mut tape = Tape::new();
    let params = std::collections::BTreeMap::from([
        ("fusion.ln_a.gain".to_string(), tape.constant(Tensor::full([3], 1.0))),
        ("fusion.ln_a.bias".to_string(), tape.constant(Tensor::zeros(vec![3]))),
        ("fusion.ln_b.gain".to_string(), tape.constant(Tensor::full([3], 1.0))),
        ("fusion.ln_b.bias".to_string(), tape.constant(Tensor::zeros(vec![3]))),
    ]);
    let buffers = Default::default();
    let mut f = Forward::new(&mut tape, &params, &buffers, false, None);
    let (s, c) = (f.tape.constant(fs.clone()), f.tape.constant(fc.clone()));
    let cat = fuse_concat(&mut f, s, c).unwrap();
    let (xa, alpha) = fuse_cross_attention(&mut f, s, c).unwrap();
    assert_eq!(
        tape.value(cat).data(),
        &[1.0, 2.0, 3.0, 0.5, -1.0, 2.0, -1.0, 0.5, 0.0, 2.0, 1.0, -3.0]
    );

    let ln = |v: [f64; 3]| -> [f64; 3] {
        let m = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
        v.map(|x| (x - m) / (var + 1e-5).sqrt())
    };
    for n in 0..2 {
        let (a, b) = (&fs.data()[3 * n..3 * n + 3], &fc.data()[3 * n..3 * n + 3]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let al = 1.0 / (1.0 + (-dot / 3f64.sqrt()).exp());
        assert!((tape.value(alpha).data()[n] - al).abs() < 1e-12);
        let left = ln([0, 1, 2].map(|i| a[i] + al * b[i]));
        let right = ln([0, 1, 2].map(|i| b[i] + al * a[i]));
        let got = &tape.value(xa).data()[6 * n..6 * n + 6];
        for i in 0..3 {
            assert!((got[i] - left[i]).abs() < 1e-12);
            assert!((got[3 + i] - right[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = ModelConfig::default();
    assert_eq!(Model::new(cfg.clone(), 3).unwrap(), Model::new(cfg.clone(), 3).unwrap());
    assert_ne!(Model::new(cfg.clone(), 3).unwrap(), Model::new(cfg, 4).unwrap());
}

#[test]
fn wrong_inputs_are_contract_errors() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 0).unwrap();
    let mut x = input(&cfg, 2, 16, 0);
    x.clinical = None;
    assert!(model.logits(&x).is_err());
    let mut x = input(&cfg, 2, 16, 0);
    x.skeleton = Some(random_f32(&[2, 3, 16, 18], 1));
    assert!(model.logits(&x).is_err());
    let mut x = input(&cfg, 2, 16, 0);
    x.clinical = Some(random_f32(&[2, 13], 1));
    assert!(model.logits(&x).is_err());
}
