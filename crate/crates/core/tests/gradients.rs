mod common;

use common::{finite_difference_check, gradcheck_model};
use debias_core::model::{LossSpec, Pooling};
use debias_core::vocab::{CLS, PAD, SEP};

const ORIGINAL: [u32; 7] = [CLS, 5, 9, 12, 7, 18, SEP];
const COUNTERPART: [u32; 7] = [CLS, 5, 9, 13, 7, 18, SEP];

#[test]
fn mlm_gradients_match_finite_differences() {
    let m = gradcheck_model(1);
    let spec = LossSpec::Mlm { tokens: &ORIGINAL, mask_positions: &[2, 4] };
    let r = finite_difference_check(&m, &spec, 60, 1e-4, 10);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn untied_mlm_head_gradients_match_finite_differences() {
    let mut cfg = common::gradcheck_config();
    cfg.tie_embeddings = false;
    let m = common::noisy_model(cfg, 6);
    let spec = LossSpec::Mlm { tokens: &ORIGINAL, mask_positions: &[1, 3] };
    let r = finite_difference_check(&m, &spec, 60, 1e-4, 16);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn classification_gradients_match_finite_differences() {
    let m = gradcheck_model(2);
    let spec = LossSpec::Classification { tokens: &ORIGINAL, label: 1 };
    let r = finite_difference_check(&m, &spec, 60, 1e-4, 11);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn debias_gradients_match_finite_differences() {
    let m = gradcheck_model(3);
    let spec = LossSpec::DebiasPair { original: &ORIGINAL, counterpart: &COUNTERPART };
    let r = finite_difference_check(&m, &spec, 60, 1e-4, 12);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn cls_pooling_and_padding_gradients() {
    let mut m = gradcheck_model(4);
    m.config.pooling = Pooling::Cls;
    let padded = [CLS, 5, 9, SEP, PAD, PAD];
    let spec = LossSpec::Classification { tokens: &padded, label: 0 };
    let r = finite_difference_check(&m, &spec, 50, 1e-4, 13);
    assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
}

#[test]
fn zero_input_positional_gradient_is_finite() {
    let mut m = gradcheck_model(5);
    for x in m.params.tok_emb.data_mut() {
        *x = 0.0;
    }
    let spec = LossSpec::DebiasPair { original: &ORIGINAL, counterpart: &COUNTERPART };
    let (_, g) = m.loss_and_grad(&spec).unwrap();
    assert!(g.pos_emb.all_finite());
}
