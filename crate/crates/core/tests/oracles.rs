//! Implementations against scalar-loop oracles, in f64.

mod common;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracle::*;
use mapnet::attention::*;
use mapnet::heads::decode_box;
use mapnet::losses::*;
use mapnet::matcher::{GateKind, NormalizationMode};
use mapnet::params::ParamGroup;
use mapnet::tracker::CropGeometry;
use mapnet::types::{BBox, BoxFrame, FeatureGrid};

fn within(err: f64, tol: f64) {
    assert!(err <= tol, "deviation {err:e} exceeds {tol:e}");
}

#[test]
fn channel_attention_matches_loop_oracle() {
    within(check_channel(1), 1e-10);
    within(check_channel(2), 1e-10);
}

#[test]
fn spatial_attention_matches_loop_oracle() {
    within(check_spatial_ones(3), 1e-10);
    within(check_spatial_random(4), 1e-10);
}

#[test]
fn multi_head_attention_matches_triple_loop() {
    within(check_mha_integer(6), 1e-8);
    within(check_mha_random(7), 1e-10);
}

#[test]
fn positional_encoding_matches_closed_form() {
    within(check_pe(2, 2, 8), 1e-15);
    within(check_pe(3, 5, 32), 1e-15);
    assert!(positional_encoding(2, 2, 6, DType::F64, &DEV).is_err());
}

#[test]
fn feed_forward_matches_matrix_oracle() {
    within(check_ffn(8), 1e-10);
}

#[test]
fn matchers_match_chained_oracle() {
    use GateKind::*;
    use NormalizationMode::*;
    within(check_matcher(Channel, Literal, 2, 3, 1, 1, 10), 1e-8);
    within(check_matcher(Spatial, Literal, 3, 4, 2, 3, 11), 1e-8);
    within(check_matcher(None, Literal, 2, 3, 2, 1, 12), 1e-8);
}

#[test]
fn post_norm_matchers_match_chained_oracle() {
    within(check_matcher(GateKind::Channel, NormalizationMode::PostNorm, 2, 3, 2, 1, 13), 1e-8);
    within(check_matcher(GateKind::Spatial, NormalizationMode::PostNorm, 3, 3, 1, 3, 14), 1e-8);
}

#[test]
fn stack_matches_repeated_layer_oracle() {
    within(check_stack(15), 1e-8);
}

#[test]
fn dual_alignment_matches_chained_oracle() {
    within(check_alignment(NormalizationMode::Literal, 2, 20), 1e-8);
    within(check_alignment(NormalizationMode::Literal, 3, 21), 1e-8);
    within(check_alignment(NormalizationMode::PostNorm, 3, 22), 1e-8);
}

#[test]
fn heads_match_three_layer_oracle() {
    within(check_classifier(30), 1e-10);
    within(check_regressor(31), 1e-10);
}

#[test]
fn losses_match_scripted_oracles() {
    within(check_cls_loss(), 1e-10);
    within(check_reg_loss_by_hand(), 1e-12);
    within(check_reg_loss(40), 1e-10);
}

#[test]
fn full_suite_passes() {
    for (name, err, tol) in equation_suite() {
        assert!(err <= tol, "{name}: {err:e} > {tol:e}");
    }
}

#[test]
fn constant_channels_give_doubled_mlp_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = store();
    let p = ChannelAttnParams::build(&mut s, "ca", 4, 2, &mut rng).unwrap();
    s.randomize(1.0, &mut rng).unwrap();
    let per_channel = [0.3, -1.2, 0.7, 2.0];
    let x: Vec<f64> = (0..9).flat_map(|_| per_channel).collect();
    let g = FeatureGrid::from_hwc(&x, 3, 3, 4, DType::F64, &DEV).unwrap();
    let gate = channel_gate(&g, &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let (w1, w2) = (vals(&p.mlp_w1), vals(&p.mlp_w2));
    for i in 0..4 {
        let mut logit = 0.0;
        for j in 0..2 {
            let h: f64 = (0..4).map(|c| per_channel[c] * w1[c * 2 + j]).sum::<f64>().max(0.0);
            logit += h * w2[j * 4 + i];
        }
        assert!((gate[i] - sigmoid(2.0 * logit)).abs() < 1e-12);
    }
}

#[test]
fn single_channel_gate_convolves_the_input_twice() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = store();
    let p = SpatialAttnParams::build(&mut s, "sa", 3, &mut rng).unwrap();
    s.randomize(0.5, &mut rng).unwrap();
    let x = random(9, 1.0, &mut rng);
    let g = FeatureGrid::from_hwc(&x, 3, 3, 1, DType::F64, &DEV).unwrap();
    let gate = spatial_gate(&g, &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let k = vals(&p.conv_kernel);
    let b = vals(&p.conv_bias)[0];
    for row in 0..3isize {
        for col in 0..3isize {
            let mut acc = b;
            for di in 0..3isize {
                for dj in 0..3isize {
                    let (y, xx) = (row + di - 1, col + dj - 1);
                    if (0..3).contains(&y) && (0..3).contains(&xx) {
                        acc += k[(di * 3 + dj) as usize] * x[(y * 3 + xx) as usize];
                    }
                }
            }
            assert!((gate[(row * 3 + col) as usize] - sigmoid(2.0 * acc)).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_by_hand_affine_arithmetic() {
    // 256-px crop at origin (100, 50), scale 1
    let geom = CropGeometry {
        center: (228.0, 178.0),
        side: 256.0,
        out_size: 256,
        pad_fill: [0.0; 3],
    };
    let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75, BoxFrame::NormalizedSearch);
    assert_eq!(decode_box(&b, &geom).as_array(), [164.0, 114.0, 292.0, 242.0]);
}

#[test]
fn top_left_quarter_labels_by_enumeration() {
    let gt = BBox::from_corners(0.0, 0.0, 0.5, 0.5, BoxFrame::NormalizedSearch);
    let l = assign_labels(32, &gt);
    assert_eq!(l.n_pos(), 256);
    for r in 0..32 {
        for c in 0..32 {
            assert_eq!(l.labels[r * 32 + c], r < 16 && c < 16);
        }
    }
}

#[test]
fn giou_half_box_by_hand() {
    let b = BBox::from_corners(0.0, 0.0, 1.0, 1.0, BoxFrame::NormalizedSearch);
    let g = BBox::from_corners(0.0, 0.0, 0.5, 1.0, BoxFrame::NormalizedSearch);
    assert!((giou_loss(&b, &g).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn equal_guidance_reduces_to_baseline_pair() {
    let gt = BBox::from_corners(0.0, 0.0, 1.0, 1.0, BoxFrame::NormalizedSearch);
    // every positive has IoU 0.5 and confidence 0.6
    let boxes = [[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.5], [0.1, 0.1, 0.2, 0.2]];
    let probs = [[0.6, 0.4], [0.6, 0.4], [0.6, 0.4], [0.3, 0.7]];
    let la = LabelAssignment::from_labels(vec![true, true, true, false]);
    let w = LossWeights::default();
    let pg = pg_cls_loss_probs(&probs, &boxes, &gt, &la, &w, ClsLossKind::PrecisionGuided).unwrap();
    let ce = pg_cls_loss_probs(&probs, &boxes, &gt, &la, &w, ClsLossKind::Ce).unwrap();
    let cg = cg_reg_loss_probs(&probs, &boxes, &gt, &la, &w, RegLossKind::ConfidenceGuided).unwrap();
    let base = cg_reg_loss_probs(&probs, &boxes, &gt, &la, &w, RegLossKind::GiouL1).unwrap();
    assert!((pg - ce).abs() < 1e-10);
    assert!((cg - base).abs() < 1e-10);
}

#[test]
fn batched_loss_is_mean_of_per_sample_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 9;
    let gts = [
        BBox::from_corners(0.1, 0.1, 0.6, 0.7, BoxFrame::NormalizedSearch),
        BBox::from_corners(0.3, 0.2, 0.9, 0.8, BoxFrame::NormalizedSearch),
    ];
    let labels: Vec<LabelAssignment> = gts.iter().map(|g| assign_labels(3, g)).collect();
    let logits = Tensor::from_vec(random(2 * n * 2, 2.0, &mut rng), (2, n, 2), &DEV).unwrap();
    let lp = candle_nn::ops::log_softmax(&logits, 2).unwrap();
    let boxes = Tensor::from_vec(random(2 * n * 4, 1.0, &mut rng), (2, n, 4), &DEV)
        .unwrap()
        .affine(0.5, 0.5)
        .unwrap();
    let w = LossWeights::default();
    let scalar = |t: Tensor| t.to_scalar::<f64>().unwrap();
    let reg = scalar(cg_reg_loss(&lp, &boxes, &gts, &labels, &w, RegLossKind::ConfidenceGuided).unwrap());
    let cls = scalar(pg_cls_loss(&lp, &boxes, &gts, &labels, &w, ClsLossKind::PrecisionGuided).unwrap());
    let (mut reg_sum, mut cls_sum) = (0.0, 0.0);
    for s in 0..2 {
        let lps = lp.narrow(0, s, 1).unwrap();
        let bs = boxes.narrow(0, s, 1).unwrap();
        let g = std::slice::from_ref(&gts[s]);
        let l = std::slice::from_ref(&labels[s]);
        reg_sum += scalar(cg_reg_loss(&lps, &bs, g, l, &w, RegLossKind::ConfidenceGuided).unwrap());
        cls_sum += scalar(pg_cls_loss(&lps, &bs, g, l, &w, ClsLossKind::PrecisionGuided).unwrap());
    }
    assert!((reg - reg_sum / 2.0).abs() < 1e-12);
    assert!((cls - cls_sum / 2.0).abs() < 1e-12);
}

#[test]
fn parameter_groups_are_recorded() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut s = store();
    Linear::build(&mut s, "bb", 2, 2, ParamGroup::Backbone, &mut rng).unwrap();
    Linear::build(&mut s, "h", 2, 2, ParamGroup::Other, &mut rng).unwrap();
    assert_eq!(s.group_of("bb.weight"), Some(ParamGroup::Backbone));
    assert_eq!(s.group_of("h.bias"), Some(ParamGroup::Other));
}
