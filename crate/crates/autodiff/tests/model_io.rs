use maco_autodiff::io::{decode_model, encode_model};
use maco_autodiff::{
    backward_and_step, build_unet, load_adam, load_model, save_adam, save_model, AdamConfig, AdamState, Graph, Mode,
    NodeId, NormKind, Tensor, UNet, UNetConfig,
};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

fn bits(model: &UNet<f32>) -> Vec<u32> {
    model.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
}

fn small_cfg(norm: NormKind) -> UNetConfig {
    UNetConfig { depth: 2, base_channels: 4, out_classes: 3, norm, groups: 2, seed: 11, ..UNetConfig::default() }
}

/// One step of a toy objective: pull channel 1 towards 1 on a random batch.
fn train_step(model: &mut UNet<f32>, opt: &mut AdamState<f32>, rng: &mut Xoshiro256StarStar) {
    let data: Vec<f32> = (0..2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let params: Vec<NodeId> = model.bind(&mut g);
    let x = g.constant(Tensor::new(vec![2, 1, 16, 16], data).unwrap());
    let out = model.forward(&mut g, &params, x, Mode::Train).unwrap();
    let ch = g.select_channel(out.probs, 1);
    let l = g.ln(ch, 1e-8);
    let s = g.sum(l);
    let loss = g.scale(s, -1.0 / 512.0);
    backward_and_step(&g, loss, &params, model, opt).unwrap();
    model.absorb_moments(&out.moments);
}

#[test]
fn save_load_round_trip_is_bitwise() {
    for norm in [NormKind::Group, NormKind::Batch] {
        let model = build_unet::<f32>(&UNetConfig { norm, ..UNetConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmdl");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(encode_model(&back), encode_model(&model));

        let x = Tensor::new(vec![1, 1, 32, 32], (0..1024).map(|i| (i as f32 * 0.01).sin()).collect()).unwrap();
        let a = model.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn truncated_file_is_rejected_with_size_diagnostic() {
    let model = build_unet::<f32>(&UNetConfig::default()).unwrap();
    let bytes = encode_model(&model);
    let msg = decode_model(&bytes[..bytes.len() / 2]).unwrap_err().to_string();
    assert!(msg.contains("bytes"), "{msg}");
}

#[test]
fn resumed_training_matches_continuous_training() {
    for norm in [NormKind::Group, NormKind::Batch] {
        let cfg = small_cfg(norm);
        let adam = AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() };

        let mut cont = build_unet::<f32>(&cfg).unwrap();
        let mut cont_opt = AdamState::new(adam, cont.params());
        let mut rng = Xoshiro256StarStar::seed_from_u64(77);
        for _ in 0..10 {
            train_step(&mut cont, &mut cont_opt, &mut rng);
        }

        let dir = tempfile::tempdir().unwrap();
        let mut first = build_unet::<f32>(&cfg).unwrap();
        let mut opt = AdamState::new(adam, first.params());
        let mut rng = Xoshiro256StarStar::seed_from_u64(77);
        for _ in 0..5 {
            train_step(&mut first, &mut opt, &mut rng);
        }
        save_model(&first, dir.path().join("m")).unwrap();
        save_adam(&opt, dir.path().join("o")).unwrap();
        drop(first);

        let mut resumed = load_model(dir.path().join("m")).unwrap();
        let mut opt = load_adam(dir.path().join("o"), resumed.params()).unwrap();
        for _ in 0..5 {
            train_step(&mut resumed, &mut opt, &mut rng);
        }
        assert_eq!(bits(&resumed), bits(&cont), "{norm:?}");
        assert_eq!(opt.step, 10);
    }
}

#[test]
fn eval_forward_is_pure() {
    let model = build_unet::<f32>(&UNetConfig::default()).unwrap();
    let x = Tensor::new(vec![2, 1, 64, 64], (0..2 * 4096).map(|i| ((i % 61) as f32 - 30.0) / 30.0).collect()).unwrap();
    assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
}
