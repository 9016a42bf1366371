use mapl::backbones::synth::CaptionExample;
use mapl::backbones::ToyImage;
use mapl::cli::{grad_check_batch, scratch_backbones, GRAD_CHECK_TOLERANCE};
use mapl::mapper::{FeatureMode, Mapper, MapperConfig, Variant};
use mapl::tensor::{finite_diff_check, ParameterSet, Tape, Tensor};
use mapl::trainer::{caption_loss, mapper_grad_check};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(variant: Variant, features: FeatureMode) -> MapperConfig {
    let mut cfg = MapperConfig::toy().with_variant(variant).with_features(features);
    cfg.normalize();
    cfg
}

#[test]
fn every_variant_passes_through_the_frozen_lm() {
    let b = scratch_backbones(0).unwrap();
    let batch = grad_check_batch(&b);
    for (variant, features) in [
        (Variant::Transformer, FeatureMode::Grid),
        (Variant::Transformer, FeatureMode::Global),
        (Variant::Linear, FeatureMode::Grid),
        (Variant::Mlp, FeatureMode::Grid),
        (Variant::NoConstants, FeatureMode::Grid),
    ] {
        let mapper = Mapper::init(toy(variant, features), 1, false).unwrap();
        let check = mapper_grad_check(&mapper, &b, &batch, 1e-5, Some(8), false).unwrap();
        assert!(
            check.passes(GRAD_CHECK_TOLERANCE),
            "{variant}/{features}: {:?}",
            check
        );
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let b = scratch_backbones(0).unwrap();
    let mapper = Mapper::init(MapperConfig::toy(), 1, false).unwrap();
    let check = mapper_grad_check(&mapper, &b, &grad_check_batch(&b), 1e-5, Some(4), true).unwrap();
    assert!(!check.passes(GRAD_CHECK_TOLERANCE));
}

#[test]
fn frozen_lm_receives_no_update_but_relays_gradient() {
    let b = scratch_backbones(2).unwrap();
    let mapper = Mapper::init(MapperConfig::toy(), 2, false).unwrap();
    let batch = grad_check_batch(&b);
    let refs: Vec<&CaptionExample> = batch.iter().collect();
    let mut tape = Tape::new();
    let loss = caption_loss(&mut tape, &mapper, &b, &refs).unwrap();
    tape.backward(loss).unwrap();
    let mut lm = b.lm.clone();
    lm.pull_grads(&tape).unwrap();
    assert!(lm.iter().all(|(_, p)| p.frozen && p.tensor.grad().is_none()));
    let mut params = mapper.params.clone();
    params.pull_grads(&tape).unwrap();
    let nonzero = params
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .any(|g| g.iter().any(|&x| x != 0.0));
    assert!(nonzero);
}

#[test]
fn small_composite_per_op_chain() {
    // matmul -> layer norm -> gelu -> softmax cross-entropy, all trainable.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParameterSet::new();
    ps.insert("x", Tensor::randn(&[3, 4], 1.0, &mut rng), false).unwrap();
    ps.insert("w", Tensor::randn(&[4, 5], 1.0, &mut rng), false).unwrap();
    ps.insert("g", Tensor::randn(&[5], 1.0, &mut rng), false).unwrap();
    ps.insert("b", Tensor::randn(&[5], 1.0, &mut rng), false).unwrap();
    let report = finite_diff_check(
        |t, p| {
            let x = t.param(p, "x")?;
            let w = t.param(p, "w")?;
            let g = t.param(p, "g")?;
            let b = t.param(p, "b")?;
            let h = t.matmul(x, w)?;
            let h = t.layer_norm(h, g, b, 1e-5)?;
            let h = t.gelu(h);
            t.cross_entropy(h, &[0, 3, 4], &[true, true, true])
        },
        &ps,
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn swapping_two_cells_changes_the_prefix() {
    let b = scratch_backbones(4).unwrap();
    let mapper = Mapper::init(MapperConfig::toy(), 4, false).unwrap();
    let a = ToyImage::new(3, vec![0, 1, 2, 3, 4, 0, 1, 2, 3]).unwrap();
    let swapped = ToyImage::new(3, vec![1, 0, 2, 3, 4, 0, 1, 2, 3]).unwrap();
    let pa = mapper.map(&b.features(&a, false).unwrap()).unwrap();
    let ps = mapper.map(&b.features(&swapped, false).unwrap()).unwrap();
    assert_eq!(pa.0.shape(), ps.0.shape());
    let diff: f64 = pa.0.data().iter().zip(ps.0.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "prefix ignored the swap");

    let blind_a = mapper.map(&b.features(&a, true).unwrap()).unwrap();
    let blind_s = mapper.map(&b.features(&swapped, true).unwrap()).unwrap();
    assert_eq!(blind_a, blind_s);
}
