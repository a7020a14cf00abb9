//! Finite-difference checks for every differentiable op.
//!
//! Each test builds a small graph ending in a scalar and compares backward
//! against central differences at random coordinates. Inputs are drawn away
//! from the kinks of relu/abs/clamp so the two-sided difference is valid.

use snipper_core::gradcheck::{assert_check, CheckInput};
use snipper_core::rng::Rng;
use snipper_core::tensor::{SampleGrid, SampleMode, SampleSpec, Tape, TensorRef};

/// Reduce any tensor to a scalar with non-uniform weights so that backward
/// through the op under test sees a non-constant upstream gradient.
fn spiky_sum(tape: &mut Tape<f64>, x: TensorRef) -> TensorRef {
    let n = tape.values(x).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect();
    let flat = tape.reshape(x, &[n]).unwrap();
    let wts = tape.constant(&[n], w).unwrap();
    let prod = tape.mul(flat, wts).unwrap();
    tape.sum_all(prod).unwrap()
}

#[test]
fn binary_elementwise_ops() {
    let mut rng = Rng::seed_from(11);
    for op in ["add", "sub", "mul"] {
        let a = CheckInput::random(&[3, 4], &mut rng, -2.0, 2.0);
        let b = CheckInput::random(&[3, 4], &mut rng, -2.0, 2.0);
        assert_check(
            |tape, xs| {
                let y = match op {
                    "add" => tape.add(xs[0], xs[1]).unwrap(),
                    "sub" => tape.sub(xs[0], xs[1]).unwrap(),
                    _ => tape.mul(xs[0], xs[1]).unwrap(),
                };
                spiky_sum(tape, y)
            },
            &[a, b],
            50,
            &mut rng,
        );
    }
}

#[test]
fn row_broadcast_ops() {
    let mut rng = Rng::seed_from(12);
    let a = CheckInput::random(&[4, 5], &mut rng, -2.0, 2.0);
    let b = CheckInput::random(&[5], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let y = tape.add_row(xs[0], xs[1]).unwrap();
            spiky_sum(tape, y)
        },
        &[a, b],
        50,
        &mut rng,
    );
    let a = CheckInput::random(&[4, 5], &mut rng, -2.0, 2.0);
    let b = CheckInput::random(&[5], &mut rng, 0.5, 2.0);
    assert_check(
        |tape, xs| {
            let y = tape.mul_row(xs[0], xs[1]).unwrap();
            spiky_sum(tape, y)
        },
        &[a, b],
        50,
        &mut rng,
    );
}

#[test]
fn unary_smooth_ops() {
    let mut rng = Rng::seed_from(13);
    // (name, lo, hi) domains keeping ln/exp well conditioned.
    let cases: &[(&str, f64, f64)] = &[
        ("neg", -2.0, 2.0),
        ("sigmoid", -3.0, 3.0),
        ("exp", -2.0, 1.5),
        ("ln", 0.2, 3.0),
        ("scale", -2.0, 2.0),
        ("add_const", -2.0, 2.0),
    ];
    for &(op, lo, hi) in cases {
        let x = CheckInput::random(&[2, 6], &mut rng, lo, hi);
        assert_check(
            |tape, xs| {
                let y = match op {
                    "neg" => tape.neg(xs[0]).unwrap(),
                    "sigmoid" => tape.sigmoid(xs[0]).unwrap(),
                    "exp" => tape.exp(xs[0]).unwrap(),
                    "ln" => tape.ln(xs[0]).unwrap(),
                    "scale" => tape.scale(xs[0], -1.7).unwrap(),
                    _ => tape.add_const(xs[0], 0.9).unwrap(),
                };
                spiky_sum(tape, y)
            },
            &[x],
            50,
            &mut rng,
        );
    }
}

#[test]
fn kinked_ops_away_from_their_kinks() {
    let mut rng = Rng::seed_from(14);
    // Sample magnitudes above 0.01 >> FD_STEP on both sides of each kink.
    let draw = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                sign * rng.range(0.01, 2.0)
            })
            .collect()
    };
    let relu_in = CheckInput::new(&[12], draw(&mut rng, 12));
    assert_check(
        |tape, xs| {
            let y = tape.relu(xs[0]).unwrap();
            spiky_sum(tape, y)
        },
        &[relu_in],
        50,
        &mut rng,
    );
    let abs_in = CheckInput::new(&[12], draw(&mut rng, 12));
    assert_check(
        |tape, xs| {
            let y = tape.abs(xs[0]).unwrap();
            spiky_sum(tape, y)
        },
        &[abs_in],
        50,
        &mut rng,
    );
    // clamp_min at 0.5: keep draws clear of the threshold.
    let clamp_in = CheckInput::new(
        &[12],
        (0..12)
            .map(|_| {
                if rng.uniform() < 0.5 {
                    rng.range(-1.0, 0.3)
                } else {
                    rng.range(0.7, 2.0)
                }
            })
            .collect(),
    );
    assert_check(
        |tape, xs| {
            let y = tape.clamp_min(xs[0], 0.5).unwrap();
            spiky_sum(tape, y)
        },
        &[clamp_in],
        50,
        &mut rng,
    );
}

#[test]
fn shape_ops() {
    let mut rng = Rng::seed_from(15);
    let x = CheckInput::random(&[2, 3, 4], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let r = tape.reshape(xs[0], &[6, 4]).unwrap();
            let n = tape.narrow(r, 0, 1, 4).unwrap();
            spiky_sum(tape, n)
        },
        &[x],
        50,
        &mut rng,
    );
    let a = CheckInput::random(&[2, 3], &mut rng, -2.0, 2.0);
    let b = CheckInput::random(&[2, 2], &mut rng, -2.0, 2.0);
    let c = CheckInput::random(&[2, 1], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let cat = tape.concat(1, &[xs[0], xs[1], xs[2]]).unwrap();
            spiky_sum(tape, cat)
        },
        &[a, b, c],
        50,
        &mut rng,
    );
}

#[test]
fn reductions_and_composite_losses() {
    let mut rng = Rng::seed_from(16);
    let x = CheckInput::random(&[3, 5], &mut rng, -2.0, 2.0);
    assert_check(|tape, xs| tape.sum_all(xs[0]).unwrap(), &[x], 30, &mut rng);
    let x = CheckInput::random(&[3, 5], &mut rng, -2.0, 2.0);
    assert_check(|tape, xs| tape.mean_all(xs[0]).unwrap(), &[x], 30, &mut rng);
    // l1 needs a != b everywhere to stay off the kink.
    let a = CheckInput::random(&[10], &mut rng, 1.0, 2.0);
    let b = CheckInput::random(&[10], &mut rng, -2.0, -1.0);
    assert_check(
        |tape, xs| tape.l1_loss(xs[0], xs[1]).unwrap(),
        &[a, b],
        50,
        &mut rng,
    );
    let a = CheckInput::random(&[10], &mut rng, -2.0, 2.0);
    let b = CheckInput::random(&[10], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| tape.l2_loss(xs[0], xs[1]).unwrap(),
        &[a, b],
        50,
        &mut rng,
    );
}

#[test]
fn linear_layer() {
    let mut rng = Rng::seed_from(17);
    let x = CheckInput::random(&[2, 3, 4], &mut rng, -1.5, 1.5);
    let w = CheckInput::random(&[5, 4], &mut rng, -1.0, 1.0);
    let b = CheckInput::random(&[5], &mut rng, -1.0, 1.0);
    assert_check(
        |tape, xs| {
            let y = tape.linear(xs[0], xs[1], Some(xs[2])).unwrap();
            spiky_sum(tape, y)
        },
        &[x, w, b],
        60,
        &mut rng,
    );
    let x = CheckInput::random(&[3, 4], &mut rng, -1.5, 1.5);
    let w = CheckInput::random(&[2, 4], &mut rng, -1.0, 1.0);
    assert_check(
        |tape, xs| {
            let y = tape.linear(xs[0], xs[1], None).unwrap();
            spiky_sum(tape, y)
        },
        &[x, w],
        50,
        &mut rng,
    );
}

#[test]
fn softmax_rows() {
    let mut rng = Rng::seed_from(18);
    let x = CheckInput::random(&[3, 6], &mut rng, -3.0, 3.0);
    assert_check(
        |tape, xs| {
            let y = tape.softmax(xs[0]).unwrap();
            spiky_sum(tape, y)
        },
        &[x],
        50,
        &mut rng,
    );
}

#[test]
fn softmax_with_additive_mask() {
    // The attention layers mask by adding a large negative constant before
    // softmax; gradients must stay exact through that path.
    let mut rng = Rng::seed_from(19);
    let x = CheckInput::random(&[2, 5], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let mask = tape
                .constant(&[5], vec![0.0, -1e30, 0.0, 0.0, -1e30])
                .unwrap();
            let masked = tape.add_row(xs[0], mask).unwrap();
            let y = tape.softmax(masked).unwrap();
            spiky_sum(tape, y)
        },
        &[x],
        40,
        &mut rng,
    );
}

#[test]
fn layer_norm_rows() {
    let mut rng = Rng::seed_from(20);
    let x = CheckInput::random(&[4, 6], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let y = tape.layer_norm(xs[0], 1e-5).unwrap();
            spiky_sum(tape, y)
        },
        &[x],
        60,
        &mut rng,
    );
}

#[test]
fn conv2d_all_inputs() {
    let mut rng = Rng::seed_from(21);
    let x = CheckInput::random(&[2, 5, 5, 2], &mut rng, -1.0, 1.0);
    let w = CheckInput::random(&[3, 3, 2, 3], &mut rng, -0.7, 0.7);
    let b = CheckInput::random(&[3], &mut rng, -0.5, 0.5);
    assert_check(
        |tape, xs| {
            let y = tape.conv2d(xs[0], xs[1], Some(xs[2]), 2, 1).unwrap();
            spiky_sum(tape, y)
        },
        &[x, w, b],
        60,
        &mut rng,
    );
    let x = CheckInput::random(&[1, 4, 4, 1], &mut rng, -1.0, 1.0);
    let w = CheckInput::random(&[2, 2, 1, 2], &mut rng, -0.7, 0.7);
    assert_check(
        |tape, xs| {
            let y = tape.conv2d(xs[0], xs[1], None, 1, 0).unwrap();
            spiky_sum(tape, y)
        },
        &[x, w],
        50,
        &mut rng,
    );
}

#[test]
fn bilinear_sample_volume_and_coordinates() {
    let mut rng = Rng::seed_from(22);
    let vol = CheckInput::random(&[3, 4, 5], &mut rng, -1.0, 1.0);
    // Interior coordinates off the grid nodes: bilinear interpolation is
    // non-differentiable exactly on a node line.
    let x = CheckInput::new(&[], vec![0.37]);
    let y = CheckInput::new(&[], vec![0.61]);
    assert_check(
        |tape, xs| {
            let s = tape.bilinear_sample(xs[0], xs[1], xs[2]).unwrap();
            spiky_sum(tape, s)
        },
        &[vol, x, y],
        60,
        &mut rng,
    );
}

#[test]
fn bilinear_border_clamp_has_zero_coordinate_gradient() {
    // Outside the unit square the sample is constant in the coordinate, so
    // the analytic gradient must be exactly zero and FD agrees.
    let mut rng = Rng::seed_from(23);
    let vol = CheckInput::random(&[2, 3, 3], &mut rng, -1.0, 1.0);
    let x = CheckInput::new(&[], vec![1.4]);
    let y = CheckInput::new(&[], vec![-0.6]);
    assert_check(
        |tape, xs| {
            let s = tape.bilinear_sample(xs[0], xs[1], xs[2]).unwrap();
            spiky_sum(tape, s)
        },
        &[vol, x, y],
        40,
        &mut rng,
    );
}

fn st_inputs(
    spec: &SampleSpec,
    rng: &mut Rng,
) -> (CheckInput, CheckInput, CheckInput, Vec<CheckInput>) {
    let rows = spec.row_frames.len();
    let e = spec.entries();
    let pos = CheckInput::random(&[rows, 2], rng, 0.15, 0.85);
    // Small spatial offsets keep most samples interior; the fractional frame
    // component is drawn off integer values where the time lerp has a kink.
    let off = CheckInput::new(
        &[rows, e * spec.comp()],
        (0..rows * e)
            .flat_map(|_| {
                let mut v = vec![rng.range(-0.1, 0.1), rng.range(-0.1, 0.1)];
                if spec.comp() == 3 {
                    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    v.push(sign * rng.range(0.1, 0.9));
                }
                v
            })
            .collect(),
    );
    let alpha = CheckInput::random(&[rows, e], rng, 0.01, 1.0);
    let vols = spec
        .grids
        .iter()
        .map(|g| CheckInput::random(&[g.t, g.h, g.w, spec.channels()], rng, -1.0, 1.0))
        .collect();
    (pos, off, alpha, vols)
}

fn check_st(spec: SampleSpec, seed: u64) {
    let mut rng = Rng::seed_from(seed);
    let (pos, off, alpha, vols) = st_inputs(&spec, &mut rng);
    let mut inputs = vec![pos, off, alpha];
    inputs.extend(vols);
    let n_scales = spec.grids.len();
    assert_check(
        |tape, xs| {
            let value_refs: Vec<TensorRef> = xs[3..3 + n_scales].to_vec();
            let s = tape
                .st_sample(xs[0], xs[1], xs[2], &value_refs, spec.clone())
                .unwrap();
            spiky_sum(tape, s)
        },
        &inputs,
        80,
        &mut rng,
    );
}

#[test]
fn st_sample_neighbor_mode() {
    check_st(
        SampleSpec {
            heads: 4,
            head_dim: 2,
            grids: vec![
                SampleGrid { t: 3, h: 5, w: 5 },
                SampleGrid { t: 3, h: 3, w: 3 },
            ],
            k_points: 2,
            slots: 3,
            mode: SampleMode::Neighbor,
            row_frames: vec![0, 1, 2],
        },
        31,
    );
}

#[test]
fn st_sample_full_mode() {
    check_st(
        SampleSpec {
            heads: 4,
            head_dim: 2,
            grids: vec![SampleGrid { t: 3, h: 4, w: 4 }],
            k_points: 2,
            slots: 3,
            mode: SampleMode::Full,
            row_frames: vec![1, 2],
        },
        32,
    );
}

#[test]
fn st_sample_fractional_mode() {
    check_st(
        SampleSpec {
            heads: 2,
            head_dim: 3,
            grids: vec![
                SampleGrid { t: 3, h: 4, w: 4 },
                SampleGrid { t: 3, h: 3, w: 3 },
            ],
            k_points: 3,
            slots: 1,
            mode: SampleMode::Fractional,
            row_frames: vec![0, 1, 2],
        },
        33,
    );
}

#[test]
fn st_sample_single_point_degenerate() {
    // K = 1, one head, one scale: the kernel collapses to plain bilinear
    // sampling at a shifted position.
    check_st(
        SampleSpec {
            heads: 1,
            head_dim: 2,
            grids: vec![SampleGrid { t: 2, h: 4, w: 4 }],
            k_points: 1,
            slots: 2,
            mode: SampleMode::Full,
            row_frames: vec![0, 1],
        },
        34,
    );
}

#[test]
fn deep_composite_graph() {
    // A miniature of the real model: linear -> layer_norm -> relu -> linear
    // -> softmax -> weighted sum, checked end to end.
    let mut rng = Rng::seed_from(35);
    let x = CheckInput::random(&[3, 4], &mut rng, 0.05, 1.0);
    let w1 = CheckInput::random(&[6, 4], &mut rng, -0.8, 0.8);
    let b1 = CheckInput::random(&[6], &mut rng, 0.2, 0.6);
    let w2 = CheckInput::random(&[4, 6], &mut rng, -0.8, 0.8);
    assert_check(
        |tape, xs| {
            let h = tape.linear(xs[0], xs[1], Some(xs[2])).unwrap();
            let n = tape.layer_norm(h, 1e-5).unwrap();
            // Shift well above zero before relu so the kink stays far away.
            let shifted = tape.add_const(n, 3.0).unwrap();
            let r = tape.relu(shifted).unwrap();
            let o = tape.linear(r, xs[3], None).unwrap();
            let sm = tape.softmax(o).unwrap();
            spiky_sum(tape, sm)
        },
        &[x, w1, b1, w2],
        80,
        &mut rng,
    );
}

#[test]
fn transpose_and_repeat_rows() {
    let mut rng = Rng::seed_from(36);
    let x = CheckInput::random(&[3, 4], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let t = tape.transpose(xs[0]).unwrap();
            spiky_sum(tape, t)
        },
        &[x],
        40,
        &mut rng,
    );
    let x = CheckInput::random(&[2, 3], &mut rng, -2.0, 2.0);
    assert_check(
        |tape, xs| {
            let r = tape.repeat_rows(xs[0], 4).unwrap();
            spiky_sum(tape, r)
        },
        &[x],
        40,
        &mut rng,
    );
}

#[test]
fn self_attention_composite() {
    // Scores via linear(q, k), weights applied via linear(softmax, v^T): the
    // building blocks the decoder's token mixing is made of.
    let mut rng = Rng::seed_from(37);
    let q = CheckInput::random(&[3, 4], &mut rng, -1.0, 1.0);
    let k = CheckInput::random(&[3, 4], &mut rng, -1.0, 1.0);
    let v = CheckInput::random(&[3, 4], &mut rng, -1.0, 1.0);
    assert_check(
        |tape, xs| {
            let scores = tape.linear(xs[0], xs[1], None).unwrap();
            let scaled = tape.scale(scores, 0.5).unwrap();
            let w = tape.softmax(scaled).unwrap();
            let vt = tape.transpose(xs[2]).unwrap();
            let out = tape.linear(w, vt, None).unwrap();
            spiky_sum(tape, out)
        },
        &[q, k, v],
        60,
        &mut rng,
    );
}
