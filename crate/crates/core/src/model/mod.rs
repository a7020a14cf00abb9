//! Snippet model: convolutional backbone, deformable encoder over multi-scale
//! spatiotemporal memory, and a query decoder that reads out 2.5D poses for
//! every person slot in every snippet frame, including forecast frames that
//! have no images.
//!
//! Layout conventions used throughout:
//! * encoder memory rows are scale-major, then frame, row, column;
//! * decoder rows are person-major: row `n * t_total + t`;
//! * all image coordinates are normalized to [0, 1] per axis, align-corners.

mod blocks;
pub mod posenc;

use crate::attention::{self, AttentionCfg, AttentionParams, AttentionVariant};
use crate::geometry::{Camera, Pose};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Result, Staged, Tape, TensorError, TensorRef};

/// Depth in meters predicted at a zero log-depth output.
pub const BASE_DEPTH: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCfg {
    pub channels: usize,
    pub heads: usize,
    pub k_points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Person slots decoded per snippet.
    pub num_queries: usize,
    /// Observed frames per snippet.
    pub snippet_frames: usize,
    /// Extra future frames decoded without images.
    pub forecast_frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Backbone output strides, ascending powers of two.
    pub strides: Vec<usize>,
    pub num_joints: usize,
    pub variant: AttentionVariant,
}

impl ModelCfg {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::Invalid { op: "model", msg };
        if self.channels == 0 || self.channels % 3 != 0 || (self.channels / 3) % 2 != 0 {
            return Err(err(format!(
                "channels {} must be divisible by 3 with even thirds for the positional encoding",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(err(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.channels < self.num_joints {
            return Err(err(format!(
                "heatmap slice needs channels >= {} joints",
                self.num_joints
            )));
        }
        if self.num_joints < 2 {
            return Err(err("need a root plus at least one joint".into()));
        }
        if self.k_points == 0
            || self.dec_layers == 0
            || self.num_queries == 0
            || self.snippet_frames == 0
        {
            return Err(err("zero-sized stage".into()));
        }
        if self.strides.is_empty()
            || !self.strides.windows(2).all(|w| w[0] < w[1])
            || self.strides.iter().any(|&s| s < 2 || !s.is_power_of_two())
        {
            return Err(err(format!(
                "strides {:?} must be ascending powers of two",
                self.strides
            )));
        }
        for &s in &self.strides {
            if self.image_h % s != 0 || self.image_w % s != 0 {
                return Err(err(format!(
                    "stride {s} does not divide {}x{}",
                    self.image_w, self.image_h
                )));
            }
        }
        Ok(())
    }

    pub fn t_total(&self) -> usize {
        self.snippet_frames + self.forecast_frames
    }

    /// Decoder rows: one per (person slot, frame).
    pub fn query_rows(&self) -> usize {
        self.num_queries * self.t_total()
    }

    pub fn scale_shapes(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| (self.image_h / s, self.image_w / s))
            .collect()
    }

    pub fn attention_cfg(&self) -> AttentionCfg {
        AttentionCfg {
            channels: self.channels,
            heads: self.heads,
            k_points: self.k_points,
            t_len: self.snippet_frames,
            scale_shapes: self.scale_shapes(),
            variant: self.variant,
        }
    }

    fn ffn_hidden(&self) -> usize {
        2 * self.channels
    }

    fn backbone_levels(&self) -> usize {
        self.strides.last().unwrap().trailing_zeros() as usize
    }

    /// Row extents of each scale in the flattened encoder memory.
    fn scale_lens(&self) -> Vec<usize> {
        self.scale_shapes()
            .iter()
            .map(|&(h, w)| self.snippet_frames * h * w)
            .collect()
    }
}

/// Per-decoder-layer predictions, all `[num_queries * t_total, _]`.
pub struct LayerOut {
    /// Root position, normalized image coordinates in (0, 1): `[rows, 2]`.
    pub root_xy: TensorRef,
    /// Root depth in meters: `[rows, 1]`.
    pub depth: TensorRef,
    /// Normalized metric offsets of the non-root joints: `[rows, 3 * (j - 1)]`.
    pub offsets: TensorRef,
    /// Per-joint visibility probabilities: `[rows, j]`.
    pub visibility: TensorRef,
    /// Person-frame occurrence probability: `[rows, 1]`.
    pub occurrence: TensorRef,
}

pub struct Forward {
    /// Final encoder memory per scale, `[t, h_l, w_l, c]`.
    pub memory: Vec<TensorRef>,
    /// Joint heatmap slice of the finest scale: `[t, h_0, w_0, num_joints]`.
    pub heatmaps: TensorRef,
    /// One readout per decoder layer, last entry is the model output.
    pub layers: Vec<LayerOut>,
}

pub struct Model {
    pub cfg: ModelCfg,
}

fn axis_norm(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.5
    }
}

impl Model {
    pub fn new(cfg: ModelCfg) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    /// Register every parameter, in the fixed order that also defines the
    /// checkpoint layout.
    pub fn init_params<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<()> {
        let cfg = &self.cfg;
        let c = cfg.channels;
        let acfg = cfg.attention_cfg();

        for level in 1..=cfg.backbone_levels() {
            let c_in = if level == 1 { 3 } else { c };
            let std = (2.0 / (9.0 * c_in as f64)).sqrt();
            let w: Vec<S> = (0..3 * 3 * c_in * c).map(|_| S::c(rng.normal() * std)).collect();
            store.add(&format!("backbone.c{level}.w"), &[3, 3, c_in, c], w)?;
            store.add(&format!("backbone.c{level}.b"), &[c], vec![S::zero(); c])?;
        }
        for &s in &cfg.strides {
            blocks::init_ln(store, &format!("backbone.s{s}.ln"), c)?;
        }

        for l in 0..cfg.enc_layers {
            attention::init_params(store, &format!("enc{l}.attn"), &acfg, rng)?;
            blocks::init_ln(store, &format!("enc{l}.ln1"), c)?;
            blocks::init_ffn(store, &format!("enc{l}.ffn"), c, cfg.ffn_hidden(), rng)?;
            blocks::init_ln(store, &format!("enc{l}.ln2"), c)?;
        }

        let embed_std = (1.0 / c as f64).sqrt();
        let embed: Vec<S> = (0..cfg.num_queries * c)
            .map(|_| S::c(rng.normal() * embed_std))
            .collect();
        store.add("query.embed", &[cfg.num_queries, c], embed)?;
        let w1: Vec<S> = (0..c * c).map(|_| S::c(rng.normal() * (2.0 / c as f64).sqrt())).collect();
        store.add("query.ref.w1", &[c, c], w1)?;
        store.add("query.ref.b1", &[c], vec![S::zero(); c])?;
        let w2: Vec<S> = (0..2 * c).map(|_| S::c(rng.normal() * 0.1 * embed_std)).collect();
        store.add("query.ref.w2", &[2, c], w2)?;
        store.add("query.ref.b2", &[2], vec![S::zero(); 2])?;

        for l in 0..cfg.dec_layers {
            blocks::init_mha(store, &format!("dec{l}.self"), c, rng)?;
            blocks::init_ln(store, &format!("dec{l}.ln0"), c)?;
            attention::init_params(store, &format!("dec{l}.attn"), &acfg, rng)?;
            blocks::init_ln(store, &format!("dec{l}.ln1"), c)?;
            blocks::init_ffn(store, &format!("dec{l}.ffn"), c, cfg.ffn_hidden(), rng)?;
            blocks::init_ln(store, &format!("dec{l}.ln2"), c)?;
        }

        blocks::init_head(store, "head.pose", c, 3 * cfg.num_joints, rng)?;
        blocks::init_head(store, "head.vis", c, cfg.num_joints, rng)?;
        blocks::init_head(store, "head.occ", c, 1, rng)?;
        Ok(())
    }

    /// Run the full pipeline on one snippet of images `[t, h, w, 3]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        staged: &Staged,
        images: TensorRef,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let c = cfg.channels;
        let t_len = cfg.snippet_frames;
        if tape.shape(images) != [t_len, cfg.image_h, cfg.image_w, 3] {
            return Err(TensorError::Invalid {
                op: "model",
                msg: format!(
                    "images {:?}, expected [{}, {}, {}, 3]",
                    tape.shape(images),
                    t_len,
                    cfg.image_h,
                    cfg.image_w
                ),
            });
        }

        // Backbone: stride-2 conv chain, scales emitted where requested.
        let mut x = images;
        let mut flats = Vec::with_capacity(cfg.strides.len());
        for level in 1..=cfg.backbone_levels() {
            let w = staged.get(&format!("backbone.c{level}.w"));
            let b = staged.get(&format!("backbone.c{level}.b"));
            let conv = tape.conv2d(x, w, Some(b), 2, 1)?;
            x = tape.relu(conv)?;
            let stride = 1 << level;
            if cfg.strides.contains(&stride) {
                let (h, w) = (cfg.image_h / stride, cfg.image_w / stride);
                let flat = tape.reshape(x, &[t_len * h * w, c])?;
                flats.push(blocks::ln(tape, staged, &format!("backbone.s{stride}.ln"), flat)?);
            }
        }
        let mut memory = tape.concat(0, &flats)?;

        // Static encoder tables.
        let shapes = cfg.scale_shapes();
        let lens = cfg.scale_lens();
        let rows_enc: usize = lens.iter().sum();
        let mut pos = Vec::with_capacity(rows_enc * 2);
        let mut enc = Vec::with_capacity(rows_enc * c);
        let mut frames = Vec::with_capacity(rows_enc);
        for &(h, w) in &shapes {
            for t in 0..t_len {
                let tn = axis_norm(t, t_len);
                for y in 0..h {
                    let yn = axis_norm(y, h);
                    for xx in 0..w {
                        let xn = axis_norm(xx, w);
                        pos.push(S::c(xn));
                        pos.push(S::c(yn));
                        enc.extend(posenc::cell(xn, yn, tn, c).into_iter().map(S::c));
                        frames.push(t as u32);
                    }
                }
            }
        }
        let enc_pos = tape.constant(&[rows_enc, 2], pos)?;
        let enc_table = tape.constant(&[rows_enc, c], enc)?;

        let acfg = cfg.attention_cfg();
        let split = |tape: &mut Tape<S>, memory: TensorRef| -> Result<Vec<TensorRef>> {
            let mut vols = Vec::with_capacity(shapes.len());
            let mut off = 0;
            for (&(h, w), &len) in shapes.iter().zip(&lens) {
                let part = tape.narrow(memory, 0, off, len)?;
                vols.push(tape.reshape(part, &[t_len, h, w, c])?);
                off += len;
            }
            Ok(vols)
        };

        for l in 0..cfg.enc_layers {
            let vols = split(tape, memory)?;
            let q = tape.add(memory, enc_table)?;
            let p = AttentionParams::from_staged(staged, &format!("enc{l}.attn"));
            let a = attention::attend(tape, &acfg, &p, q, enc_pos, &frames, &vols)?;
            let res = tape.add(memory, a)?;
            memory = blocks::ln(tape, staged, &format!("enc{l}.ln1"), res)?;
            let f = blocks::ffn(tape, staged, &format!("enc{l}.ffn"), memory)?;
            let res = tape.add(memory, f)?;
            memory = blocks::ln(tape, staged, &format!("enc{l}.ln2"), res)?;
        }

        let vols = split(tape, memory)?;
        let heatmaps = tape.narrow(vols[0], 3, 0, cfg.num_joints)?;

        // Queries: person embedding repeated over frames, plus a full-width
        // temporal encoding; reference points come from the embedding alone,
        // so a person keeps one anchor across the whole snippet.
        let t_total = cfg.t_total();
        let rows = cfg.query_rows();
        let embed = staged.get("query.embed");
        let embed_rows = tape.repeat_rows(embed, t_total)?;
        let mut tenc = Vec::with_capacity(rows * c);
        let mut dec_frames = Vec::with_capacity(rows);
        for _n in 0..cfg.num_queries {
            for t in 0..t_total {
                tenc.extend(posenc::coord(axis_norm(t, t_total), c).into_iter().map(S::c));
                dec_frames.push(t.min(t_len - 1) as u32);
            }
        }
        let tenc = tape.constant(&[rows, c], tenc)?;
        let mut state = tape.add(embed_rows, tenc)?;

        let rh = tape.linear(
            embed,
            staged.get("query.ref.w1"),
            Some(staged.get("query.ref.b1")),
        )?;
        let rr = tape.relu(rh)?;
        let ref_per_person = tape.linear(
            rr,
            staged.get("query.ref.w2"),
            Some(staged.get("query.ref.b2")),
        )?;
        let ref_logits = tape.repeat_rows(ref_per_person, t_total)?;
        let positions = tape.sigmoid(ref_logits)?;

        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let sa = blocks::mha(tape, staged, &format!("dec{l}.self"), state, cfg.heads)?;
            let res = tape.add(state, sa)?;
            state = blocks::ln(tape, staged, &format!("dec{l}.ln0"), res)?;
            let p = AttentionParams::from_staged(staged, &format!("dec{l}.attn"));
            let ca = attention::attend(tape, &acfg, &p, state, positions, &dec_frames, &vols)?;
            let res = tape.add(state, ca)?;
            state = blocks::ln(tape, staged, &format!("dec{l}.ln1"), res)?;
            let f = blocks::ffn(tape, staged, &format!("dec{l}.ffn"), state)?;
            let res = tape.add(state, f)?;
            state = blocks::ln(tape, staged, &format!("dec{l}.ln2"), res)?;
            layers.push(self.readout(tape, staged, state, ref_logits)?);
        }

        Ok(Forward {
            memory: vols,
            heatmaps,
            layers,
        })
    }

    fn readout<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        staged: &Staged,
        state: TensorRef,
        ref_logits: TensorRef,
    ) -> Result<LayerOut> {
        let j = self.cfg.num_joints;
        let pose_raw = blocks::head(tape, staged, "head.pose", state)?;
        let duv = tape.narrow(pose_raw, 1, 0, 2)?;
        let root_logits = tape.add(ref_logits, duv)?;
        let root_xy = tape.sigmoid(root_logits)?;
        let dlog = tape.narrow(pose_raw, 1, 2, 1)?;
        let dexp = tape.exp(dlog)?;
        let depth = tape.scale(dexp, S::c(BASE_DEPTH))?;
        let offsets = tape.narrow(pose_raw, 1, 3, 3 * (j - 1))?;
        let vis_raw = blocks::head(tape, staged, "head.vis", state)?;
        let visibility = tape.sigmoid(vis_raw)?;
        let occ_raw = blocks::head(tape, staged, "head.occ", state)?;
        let occurrence = tape.sigmoid(occ_raw)?;
        Ok(LayerOut {
            root_xy,
            depth,
            offsets,
            visibility,
            occurrence,
        })
    }

    /// Turn one layer's readout into pixel-space poses, `[person][frame]`.
    /// Every slot gets a pose; the occurrence score says how much to trust it.
    pub fn decode<S: Scalar>(
        &self,
        tape: &Tape<S>,
        layer: &LayerOut,
        cam: &Camera<S>,
    ) -> Vec<Vec<Pose<S>>> {
        let cfg = &self.cfg;
        let j = cfg.num_joints;
        let t_total = cfg.t_total();
        let xy = tape.values(layer.root_xy);
        let depth = tape.values(layer.depth);
        let noff = tape.values(layer.offsets);
        let vis = tape.values(layer.visibility);
        let occ = tape.values(layer.occurrence);
        let (w1, h1) = (
            S::c((cfg.image_w - 1) as f64),
            S::c((cfg.image_h - 1) as f64),
        );

        let mut people = Vec::with_capacity(cfg.num_queries);
        for n in 0..cfg.num_queries {
            let mut frames = Vec::with_capacity(t_total);
            for t in 0..t_total {
                let r = n * t_total + t;
                let d = depth[r];
                let root = [xy[r * 2] * w1, xy[r * 2 + 1] * h1, d];
                let mut offsets = Vec::with_capacity(j);
                offsets.push([S::zero(); 3]);
                for k in 0..j - 1 {
                    let o = [
                        noff[r * 3 * (j - 1) + k * 3],
                        noff[r * 3 * (j - 1) + k * 3 + 1],
                        noff[r * 3 * (j - 1) + k * 3 + 2],
                    ];
                    // depth is exp-composed, always positive
                    offsets.push(cam.denormalize_offset(o, d).expect("positive depth"));
                }
                frames.push(Pose {
                    root,
                    offsets,
                    visibility: vis[r * j..(r + 1) * j].to_vec(),
                    occurrence: occ[r],
                });
            }
            people.push(frames);
        }
        people
    }
}
