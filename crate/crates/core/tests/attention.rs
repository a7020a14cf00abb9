//! Attention layer behavior against an independent straight-line oracle,
//! plus invariants: weight normalization, masking, locality, linearity and
//! the per-head sampling budget.

use snipper_core::attention::{
    attend, init_params, weights, AttentionCfg, AttentionParams, AttentionVariant,
};
use snipper_core::gradcheck::{assert_check, CheckInput};
use snipper_core::rng::Rng;
use snipper_core::tensor::{ParamStore, Tape, TensorRef};

fn cfg(variant: AttentionVariant) -> AttentionCfg {
    AttentionCfg {
        channels: 4,
        heads: 2,
        k_points: 2,
        t_len: 3,
        scale_shapes: vec![(4, 5), (3, 3)],
        variant,
    }
}

struct RawParams {
    off_w: Vec<f64>,
    off_b: Vec<f64>,
    alpha_w: Vec<f64>,
    alpha_b: Vec<f64>,
    val_w: Vec<f64>,
    out_w: Vec<f64>,
}

impl RawParams {
    fn random(cfg: &AttentionCfg, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let e = cfg.entries();
        let comp = cfg.comp();
        let draw = |rng: &mut Rng, n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| rng.range(-s, s)).collect()
        };
        RawParams {
            off_w: draw(rng, e * comp * c, 0.03),
            off_b: draw(rng, e * comp, 0.2),
            alpha_w: draw(rng, e * c, 0.5),
            alpha_b: draw(rng, e, 0.5),
            val_w: draw(rng, c * c, 0.5),
            out_w: draw(rng, c * c, 0.5),
        }
    }

    fn identity_projections(mut self, c: usize) -> Self {
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        self.val_w = eye.clone();
        self.out_w = eye;
        self
    }

    fn stage(&self, tape: &mut Tape<f64>, cfg: &AttentionCfg) -> AttentionParams {
        let c = cfg.channels;
        let e = cfg.entries();
        let comp = cfg.comp();
        AttentionParams {
            off_w: tape.leaf(&[e * comp, c], self.off_w.clone()).unwrap(),
            off_b: tape.leaf(&[e * comp], self.off_b.clone()).unwrap(),
            alpha_w: tape.leaf(&[e, c], self.alpha_w.clone()).unwrap(),
            alpha_b: tape.leaf(&[e], self.alpha_b.clone()).unwrap(),
            val_w: tape.leaf(&[c, c], self.val_w.clone()).unwrap(),
            out_w: tape.leaf(&[c, c], self.out_w.clone()).unwrap(),
        }
    }
}

fn quota(heads: usize, dist: usize) -> usize {
    if dist >= 63 {
        1
    } else {
        (heads >> dist).max(1)
    }
}

fn slot_frame(variant: AttentionVariant, t_q: usize, slot: usize, t_len: usize) -> Option<usize> {
    match variant {
        AttentionVariant::Neighbor => {
            let f = t_q as isize + slot as isize - 1;
            (f >= 0 && (f as usize) < t_len).then_some(f as usize)
        }
        AttentionVariant::Full => Some(slot),
        AttentionVariant::Direct3d => Some(t_q),
    }
}

fn is_active(variant: AttentionVariant, heads: usize, h: usize, t_q: usize, slot: usize, t_len: usize) -> bool {
    match variant {
        AttentionVariant::Direct3d => true,
        _ => match slot_frame(variant, t_q, slot, t_len) {
            Some(f) => h < quota(heads, f.abs_diff(t_q)),
            None => false,
        },
    }
}

/// Bilinear read of channel `ch` of frame `f` in a `[t, h, w, c]` volume at
/// normalized coordinates, clamped to the border.
fn bil(vol: &[f64], dims: (usize, usize, usize, usize), f: usize, x: f64, y: f64, ch: usize) -> f64 {
    let (_t, hh, ww, c) = dims;
    let u = x.clamp(0.0, 1.0) * (ww - 1) as f64;
    let v = y.clamp(0.0, 1.0) * (hh - 1) as f64;
    let i0 = (u.floor() as usize).min(ww - 1);
    let j0 = (v.floor() as usize).min(hh - 1);
    let i1 = (i0 + 1).min(ww - 1);
    let j1 = (j0 + 1).min(hh - 1);
    let fx = u - i0 as f64;
    let fy = v - j0 as f64;
    let at = |j: usize, i: usize| vol[((f * hh + j) * ww + i) * c + ch];
    (1.0 - fy) * ((1.0 - fx) * at(j0, i0) + fx * at(j0, i1))
        + fy * ((1.0 - fx) * at(j1, i0) + fx * at(j1, i1))
}

/// Full layer reference: plain f64 loops, no tape.
fn oracle(
    cfg: &AttentionCfg,
    p: &RawParams,
    q: &[f64],
    pos: &[f64],
    frames: &[u32],
    vols: &[Vec<f64>],
) -> Vec<f64> {
    let c = cfg.channels;
    let e = cfg.entries();
    let comp = cfg.comp();
    let heads = cfg.heads;
    let hd = c / heads;
    let slots = cfg.variant.slots(cfg.t_len);
    let (n_scales, k_pts) = (cfg.scale_shapes.len(), cfg.k_points);
    let rows = frames.len();

    // Value-projected volumes, channel-last.
    let proj: Vec<Vec<f64>> = vols
        .iter()
        .zip(&cfg.scale_shapes)
        .map(|(vol, &(hh, ww))| {
            let cells = cfg.t_len * hh * ww;
            let mut out = vec![0.0; cells * c];
            for cell in 0..cells {
                for co in 0..c {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += vol[cell * c + ci] * p.val_w[co * c + ci];
                    }
                    out[cell * c + co] = acc;
                }
            }
            out
        })
        .collect();

    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        let t_q = frames[r] as usize;
        let qrow = &q[r * c..(r + 1) * c];
        let lin = |w: &[f64], b: &[f64], j: usize| -> f64 {
            b[j] + qrow.iter().enumerate().map(|(ci, qv)| qv * w[j * c + ci]).sum::<f64>()
        };
        let off: Vec<f64> = (0..e * comp).map(|j| lin(&p.off_w, &p.off_b, j)).collect();
        let logits: Vec<f64> = (0..e).map(|j| lin(&p.alpha_w, &p.alpha_b, j)).collect();

        let mut sampled = vec![0.0; c];
        for h in 0..heads {
            // masked softmax over this head's entries
            let base = h * slots * n_scales * k_pts;
            let active: Vec<bool> = (0..slots * n_scales * k_pts)
                .map(|j| {
                    let slot = j / (n_scales * k_pts);
                    is_active(cfg.variant, heads, h, t_q, slot, cfg.t_len)
                })
                .collect();
            let m = logits[base..base + active.len()]
                .iter()
                .zip(&active)
                .filter(|(_, &a)| a)
                .map(|(&l, _)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits[base..base + active.len()]
                .iter()
                .zip(&active)
                .map(|(&l, &a)| if a { (l - m).exp() } else { 0.0 })
                .sum();

            for slot in 0..slots {
                for l in 0..n_scales {
                    for k in 0..k_pts {
                        let local = (slot * n_scales + l) * k_pts + k;
                        if !active[local] {
                            continue;
                        }
                        let entry = base + local;
                        let a = (logits[entry] - m).exp() / denom;
                        let sx = pos[r * 2] + off[entry * comp];
                        let sy = pos[r * 2 + 1] + off[entry * comp + 1];
                        let (hh, ww) = cfg.scale_shapes[l];
                        let dims = (cfg.t_len, hh, ww, c);
                        for ch in 0..hd {
                            let chan = h * hd + ch;
                            let s = if cfg.variant == AttentionVariant::Direct3d {
                                let tau = (t_q as f64 + off[entry * comp + 2])
                                    .clamp(0.0, (cfg.t_len - 1) as f64);
                                let f0 = (tau.floor() as usize).min(cfg.t_len - 1);
                                let f1 = (f0 + 1).min(cfg.t_len - 1);
                                let ft = tau - f0 as f64;
                                (1.0 - ft) * bil(&proj[l], dims, f0, sx, sy, chan)
                                    + ft * bil(&proj[l], dims, f1, sx, sy, chan)
                            } else {
                                let f = slot_frame(cfg.variant, t_q, slot, cfg.t_len).unwrap();
                                bil(&proj[l], dims, f, sx, sy, chan)
                            };
                            sampled[chan] += a * s;
                        }
                    }
                }
            }
        }
        for co in 0..c {
            out[r * c + co] = (0..c).map(|ci| sampled[ci] * p.out_w[co * c + ci]).sum();
        }
    }
    out
}

fn random_case(
    cfg: &AttentionCfg,
    rng: &mut Rng,
) -> (Vec<f64>, Vec<f64>, Vec<u32>, Vec<Vec<f64>>) {
    let rows = cfg.t_len;
    let frames: Vec<u32> = (0..rows as u32).collect();
    let q: Vec<f64> = (0..rows * cfg.channels).map(|_| rng.range(-1.0, 1.0)).collect();
    let pos: Vec<f64> = (0..rows * 2).map(|_| rng.range(0.2, 0.8)).collect();
    let vols: Vec<Vec<f64>> = cfg
        .scale_shapes
        .iter()
        .map(|&(h, w)| {
            (0..cfg.t_len * h * w * cfg.channels)
                .map(|_| rng.range(-1.0, 1.0))
                .collect()
        })
        .collect();
    (q, pos, frames, vols)
}

fn run_attend(
    cfg: &AttentionCfg,
    p: &RawParams,
    q: &[f64],
    pos: &[f64],
    frames: &[u32],
    vols: &[Vec<f64>],
) -> Vec<f64> {
    let mut tape: Tape<f64> = Tape::new();
    let params = p.stage(&mut tape, cfg);
    let rows = frames.len();
    let qr = tape.leaf(&[rows, cfg.channels], q.to_vec()).unwrap();
    let pr = tape.leaf(&[rows, 2], pos.to_vec()).unwrap();
    let vr: Vec<TensorRef> = vols
        .iter()
        .zip(&cfg.scale_shapes)
        .map(|(v, &(h, w))| {
            tape.leaf(&[cfg.t_len, h, w, cfg.channels], v.clone()).unwrap()
        })
        .collect();
    let out = attend(&mut tape, cfg, &params, qr, pr, frames, &vr).unwrap();
    tape.values(out).to_vec()
}

#[test]
fn matches_oracle_in_every_variant() {
    for (i, variant) in [
        AttentionVariant::Neighbor,
        AttentionVariant::Direct3d,
        AttentionVariant::Full,
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = cfg(variant);
        let mut rng = Rng::seed_from(100 + i as u64);
        for trial in 0..5 {
            let p = RawParams::random(&cfg, &mut rng);
            let (q, pos, frames, vols) = random_case(&cfg, &mut rng);
            let got = run_attend(&cfg, &p, &q, &pos, &frames, &vols);
            let want = oracle(&cfg, &p, &q, &pos, &frames, &vols);
            for (j, (g, w)) in got.iter().zip(&want).enumerate() {
                assert!(
                    (g - w).abs() < 1e-9,
                    "{} trial {trial} element {j}: {g} vs {w}",
                    variant.name()
                );
            }
        }
    }
}

#[test]
fn gradients_flow_to_every_input() {
    for (i, variant) in [
        AttentionVariant::Neighbor,
        AttentionVariant::Direct3d,
        AttentionVariant::Full,
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = cfg(variant);
        let mut rng = Rng::seed_from(200 + i as u64);
        let p = RawParams::random(&cfg, &mut rng);
        let (q, pos, frames, vols) = random_case(&cfg, &mut rng);
        let c = cfg.channels;
        let e = cfg.entries();
        let comp = cfg.comp();
        let mut inputs = vec![
            CheckInput::new(&[frames.len(), c], q),
            CheckInput::new(&[frames.len(), 2], pos),
            CheckInput::new(&[e * comp, c], p.off_w.clone()),
            CheckInput::new(&[e * comp], p.off_b.clone()),
            CheckInput::new(&[e, c], p.alpha_w.clone()),
            CheckInput::new(&[e], p.alpha_b.clone()),
            CheckInput::new(&[c, c], p.val_w.clone()),
            CheckInput::new(&[c, c], p.out_w.clone()),
        ];
        for (v, &(h, w)) in vols.iter().zip(&cfg.scale_shapes) {
            inputs.push(CheckInput::new(&[cfg.t_len, h, w, c], v.clone()));
        }
        let frames2 = frames.clone();
        let cfg2 = cfg.clone();
        assert_check(
            move |tape, xs| {
                let params = AttentionParams {
                    off_w: xs[2],
                    off_b: xs[3],
                    alpha_w: xs[4],
                    alpha_b: xs[5],
                    val_w: xs[6],
                    out_w: xs[7],
                };
                let out =
                    attend(tape, &cfg2, &params, xs[0], xs[1], &frames2, &xs[8..]).unwrap();
                let n = tape.values(out).len();
                let wts: Vec<f64> = (0..n).map(|i| 0.2 + 0.1 * (i % 5) as f64).collect();
                let flat = tape.reshape(out, &[n]).unwrap();
                let wt = tape.constant(&[n], wts).unwrap();
                let prod = tape.mul(flat, wt).unwrap();
                tape.sum_all(prod).unwrap()
            },
            &inputs,
            70,
            &mut rng,
        );
    }
}

#[test]
fn constant_volume_passes_through_identity_projections() {
    // Per head the weights sum to one over active entries, so a volume that
    // is constant per channel comes out unchanged regardless of offsets,
    // for every variant and every query frame including the borders.
    for variant in [
        AttentionVariant::Neighbor,
        AttentionVariant::Direct3d,
        AttentionVariant::Full,
    ] {
        let cfg = cfg(variant);
        let mut rng = Rng::seed_from(300);
        let p = RawParams::random(&cfg, &mut rng).identity_projections(cfg.channels);
        let (q, pos, frames, _) = random_case(&cfg, &mut rng);
        let per_channel: Vec<f64> = (0..cfg.channels).map(|c| 1.0 + c as f64).collect();
        let vols: Vec<Vec<f64>> = cfg
            .scale_shapes
            .iter()
            .map(|&(h, w)| {
                let mut v = Vec::with_capacity(cfg.t_len * h * w * cfg.channels);
                for _ in 0..cfg.t_len * h * w {
                    v.extend_from_slice(&per_channel);
                }
                v
            })
            .collect();
        let got = run_attend(&cfg, &p, &q, &pos, &frames, &vols);
        for r in 0..frames.len() {
            for c in 0..cfg.channels {
                let g = got[r * cfg.channels + c];
                assert!(
                    (g - per_channel[c]).abs() < 1e-12,
                    "{} row {r} ch {c}: {g}",
                    variant.name()
                );
            }
        }
    }
}

#[test]
fn zero_offsets_at_grid_nodes_read_the_node_exactly() {
    // Engineered so each head's active entry count is a power of two: the
    // uniform softmax weights and their sum are then exact in binary floating
    // point, and a query parked on a grid node returns that node's feature
    // with zero rounding error.
    let cfg = AttentionCfg {
        channels: 2,
        heads: 1,
        k_points: 2,
        t_len: 2,
        scale_shapes: vec![(3, 3)],
        variant: AttentionVariant::Full,
    };
    let mut p = RawParams {
        off_w: vec![0.0; cfg.entries() * cfg.comp() * cfg.channels],
        off_b: vec![0.0; cfg.entries() * cfg.comp()],
        alpha_w: vec![0.0; cfg.entries() * cfg.channels],
        alpha_b: vec![0.0; cfg.entries()],
        val_w: vec![],
        out_w: vec![],
    };
    p = p.identity_projections(cfg.channels);
    // Volume constant across frames, varying across the grid.
    let mut vol = vec![0.0; 2 * 3 * 3 * 2];
    for f in 0..2 {
        for j in 0..3 {
            for i in 0..3 {
                for c in 0..2 {
                    vol[((f * 3 + j) * 3 + i) * 2 + c] = (j * 3 + i) as f64 + 10.0 * c as f64;
                }
            }
        }
    }
    // Query parked on node (1, 2): x = 2/2 = 1.0, y = 1/2 = 0.5.
    let q = vec![0.3, -0.4];
    let pos = vec![1.0, 0.5];
    let got = run_attend(&cfg, &p, &q, &pos, &[0], &[vol]);
    let want0 = (1 * 3 + 2) as f64;
    assert_eq!(got[0], want0);
    assert_eq!(got[1], want0 + 10.0);
}

#[test]
fn output_is_linear_in_the_volumes() {
    let cfg = cfg(AttentionVariant::Neighbor);
    let mut rng = Rng::seed_from(400);
    let p = RawParams::random(&cfg, &mut rng);
    let (q, pos, frames, v1) = random_case(&cfg, &mut rng);
    let (_, _, _, v2) = random_case(&cfg, &mut rng);
    let sum: Vec<Vec<f64>> = v1
        .iter()
        .zip(&v2)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let y1 = run_attend(&cfg, &p, &q, &pos, &frames, &v1);
    let y2 = run_attend(&cfg, &p, &q, &pos, &frames, &v2);
    let ysum = run_attend(&cfg, &p, &q, &pos, &frames, &sum);
    for ((a, b), s) in y1.iter().zip(&y2).zip(&ysum) {
        assert!((a + b - s).abs() < 1e-11, "{} + {} vs {}", a, b, s);
    }
}

#[test]
fn weights_normalize_per_head_and_mask_inactive() {
    for variant in [
        AttentionVariant::Neighbor,
        AttentionVariant::Direct3d,
        AttentionVariant::Full,
    ] {
        let cfg = cfg(variant);
        let mut rng = Rng::seed_from(500);
        let p = RawParams::random(&cfg, &mut rng);
        let (q, _, frames, _) = random_case(&cfg, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let params = p.stage(&mut tape, &cfg);
        let qr = tape.leaf(&[frames.len(), cfg.channels], q).unwrap();
        let alpha = weights(&mut tape, &cfg, &params, qr, &frames).unwrap();
        let a = tape.values(alpha);
        let group = cfg.slots() * cfg.scale_shapes.len() * cfg.k_points;
        for (r, &t_q) in frames.iter().enumerate() {
            for h in 0..cfg.heads {
                let base = r * cfg.entries() + h * group;
                let mut sum = 0.0;
                for j in 0..group {
                    let slot = j / (cfg.scale_shapes.len() * cfg.k_points);
                    let v = a[base + j];
                    if is_active(variant, cfg.heads, h, t_q as usize, slot, cfg.t_len) {
                        assert!(v > 0.0);
                        sum += v;
                    } else {
                        assert_eq!(v, 0.0, "{} inactive weight", variant.name());
                    }
                }
                assert!((sum - 1.0).abs() < 1e-9, "{} head {h}", variant.name());
            }
        }
    }
}

#[test]
fn init_starts_uniform_with_circled_points() {
    let cfg = cfg(AttentionVariant::Neighbor);
    let mut rng = Rng::seed_from(600);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_params(&mut store, "attn", &cfg, &mut rng).unwrap();
    assert_eq!(store.len(), 6);
    assert!(store.entry("attn.alpha.w").unwrap().values.iter().all(|&v| v == 0.0));
    assert!(store.entry("attn.off.w").unwrap().values.iter().all(|&v| v == 0.0));
    let off_b = &store.entry("attn.off.b").unwrap().values;
    let comp = cfg.comp();
    for e in 0..cfg.entries() {
        let k = e % cfg.k_points;
        let r = (off_b[e * comp].powi(2) + off_b[e * comp + 1].powi(2)).sqrt();
        let want = 0.05 * (k + 1) as f64 / cfg.k_points as f64;
        assert!((r - want).abs() < 1e-12, "entry {e}: radius {r}");
    }

    // Uniform start: every active entry of a head carries the same weight.
    let mut tape: Tape<f64> = Tape::new();
    let staged = store.stage(&mut tape).unwrap();
    let params = AttentionParams::from_staged(&staged, "attn");
    let q = tape.leaf(&[1, cfg.channels], vec![0.7, -0.3, 0.1, 0.9]).unwrap();
    let alpha = weights(&mut tape, &cfg, &params, q, &[1]).unwrap();
    let a = tape.values(alpha);
    let group = cfg.slots() * cfg.scale_shapes.len() * cfg.k_points;
    for h in 0..cfg.heads {
        let block = &a[h * group..(h + 1) * group];
        let active: Vec<f64> = block.iter().copied().filter(|&v| v > 0.0).collect();
        let first = active[0];
        assert!(active.iter().all(|&v| (v - first).abs() < 1e-15));
    }
}

#[test]
fn sampling_budget_counts() {
    let base = AttentionCfg {
        channels: 8,
        heads: 4,
        k_points: 4,
        t_len: 4,
        scale_shapes: vec![(4, 4), (2, 2)],
        variant: AttentionVariant::Full,
    };
    let full = base.clone();
    let neighbor = AttentionCfg {
        variant: AttentionVariant::Neighbor,
        ..base.clone()
    };
    let kl = base.scale_shapes.len() * base.k_points;
    // Head 0 keeps its full budget at any distance.
    for t_q in 0..4 {
        assert_eq!(full.samples_per_query(0, t_q), 4 * kl);
    }
    // Interior query: the neighborhood is three frames, borders get two.
    assert_eq!(neighbor.samples_per_query(0, 1), 3 * kl);
    assert_eq!(neighbor.samples_per_query(0, 2), 3 * kl);
    assert_eq!(neighbor.samples_per_query(0, 0), 2 * kl);
    assert_eq!(neighbor.samples_per_query(0, 3), 2 * kl);
    // The last head only ever samples the query frame (quota 4 >> d).
    assert_eq!(full.samples_per_query(3, 1), kl);
    assert_eq!(neighbor.samples_per_query(3, 1), kl);
    // Fractional time: every point reads its two enclosing frames.
    let frac = AttentionCfg {
        variant: AttentionVariant::Direct3d,
        ..base
    };
    assert_eq!(frac.samples_per_query(0, 1), 2 * kl);
    assert_eq!(frac.samples_per_query(3, 1), 2 * kl);
}

#[test]
fn ones_mass_agrees_with_the_counting_rule() {
    // Feed the fused sampler all-ones weights and an all-ones volume: each
    // head channel then accumulates exactly its number of sampled points,
    // an independent count of what the budget arithmetic promises.
    for variant in [AttentionVariant::Neighbor, AttentionVariant::Full] {
        let cfg = cfg(variant);
        let mut tape: Tape<f64> = Tape::new();
        let rows: Vec<u32> = (0..cfg.t_len as u32).collect();
        let spec = cfg.spec(rows.clone());
        let e = cfg.entries();
        let pos = tape.leaf(&[rows.len(), 2], vec![0.5; rows.len() * 2]).unwrap();
        let off = tape
            .leaf(&[rows.len(), e * cfg.comp()], vec![0.0; rows.len() * e * cfg.comp()])
            .unwrap();
        let alpha = tape.leaf(&[rows.len(), e], vec![1.0; rows.len() * e]).unwrap();
        let vols: Vec<TensorRef> = cfg
            .scale_shapes
            .iter()
            .map(|&(h, w)| {
                tape.leaf(
                    &[cfg.t_len, h, w, cfg.channels],
                    vec![1.0; cfg.t_len * h * w * cfg.channels],
                )
                .unwrap()
            })
            .collect();
        let out = tape.st_sample(pos, off, alpha, &vols, spec).unwrap();
        let v = tape.values(out);
        for (r, &t_q) in rows.iter().enumerate() {
            for h in 0..cfg.heads {
                let got = v[r * cfg.channels + h * cfg.head_dim()];
                let want = cfg.samples_per_query(h, t_q as usize) as f64;
                assert!(
                    (got - want).abs() < 1e-12,
                    "{} row {r} head {h}: {got} vs {want}",
                    variant.name()
                );
            }
        }
    }
}
