//! Shared transformer building blocks: affine layer norm, feed-forward,
//! multi-head token attention and small prediction MLPs. Each block registers
//! its parameters under a dotted prefix and applies itself from a staged
//! store.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Result, Staged, Tape, TensorRef};

fn normal<S: Scalar>(rng: &mut Rng, n: usize, std: f64) -> Vec<S> {
    (0..n).map(|_| S::c(rng.normal() * std)).collect()
}

pub fn init_ln<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) -> Result<()> {
    store.add(&format!("{prefix}.g"), &[c], vec![S::one(); c])?;
    store.add(&format!("{prefix}.b"), &[c], vec![S::zero(); c])
}

pub fn ln<S: Scalar>(
    tape: &mut Tape<S>,
    staged: &Staged,
    prefix: &str,
    x: TensorRef,
) -> Result<TensorRef> {
    let n = tape.layer_norm(x, S::c(1e-5))?;
    let g = tape.mul_row(n, staged.get(&format!("{prefix}.g")))?;
    tape.add_row(g, staged.get(&format!("{prefix}.b")))
}

pub fn init_ffn<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    c: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<()> {
    store.add(
        &format!("{prefix}.w1"),
        &[hidden, c],
        normal(rng, hidden * c, (2.0 / c as f64).sqrt()),
    )?;
    store.add(&format!("{prefix}.b1"), &[hidden], vec![S::zero(); hidden])?;
    store.add(
        &format!("{prefix}.w2"),
        &[c, hidden],
        normal(rng, c * hidden, (1.0 / hidden as f64).sqrt()),
    )?;
    store.add(&format!("{prefix}.b2"), &[c], vec![S::zero(); c])
}

pub fn ffn<S: Scalar>(
    tape: &mut Tape<S>,
    staged: &Staged,
    prefix: &str,
    x: TensorRef,
) -> Result<TensorRef> {
    let h = tape.linear(
        x,
        staged.get(&format!("{prefix}.w1")),
        Some(staged.get(&format!("{prefix}.b1"))),
    )?;
    let r = tape.relu(h)?;
    tape.linear(
        r,
        staged.get(&format!("{prefix}.w2")),
        Some(staged.get(&format!("{prefix}.b2"))),
    )
}

pub fn init_mha<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    c: usize,
    rng: &mut Rng,
) -> Result<()> {
    let std = (1.0 / c as f64).sqrt();
    for name in ["q", "k", "v", "o"] {
        store.add(&format!("{prefix}.w{name}"), &[c, c], normal(rng, c * c, std))?;
        store.add(&format!("{prefix}.b{name}"), &[c], vec![S::zero(); c])?;
    }
    Ok(())
}

/// Full softmax attention over all rows of `x`, mixed per head.
pub fn mha<S: Scalar>(
    tape: &mut Tape<S>,
    staged: &Staged,
    prefix: &str,
    x: TensorRef,
    heads: usize,
) -> Result<TensorRef> {
    let c = tape.shape(x)[1];
    let hd = c / heads;
    let proj = |tape: &mut Tape<S>, name: &str| -> Result<TensorRef> {
        tape.linear(
            x,
            staged.get(&format!("{prefix}.w{name}")),
            Some(staged.get(&format!("{prefix}.b{name}"))),
        )
    };
    let q = proj(tape, "q")?;
    let k = proj(tape, "k")?;
    let v = proj(tape, "v")?;
    let mut mixed = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * hd, hd)?;
        let kh = tape.narrow(k, 1, h * hd, hd)?;
        let vh = tape.narrow(v, 1, h * hd, hd)?;
        let scores = tape.linear(qh, kh, None)?;
        let scaled = tape.scale(scores, S::c(1.0 / (hd as f64).sqrt()))?;
        let w = tape.softmax(scaled)?;
        let vt = tape.transpose(vh)?;
        mixed.push(tape.linear(w, vt, None)?);
    }
    let cat = tape.concat(1, &mixed)?;
    tape.linear(
        cat,
        staged.get(&format!("{prefix}.wo")),
        Some(staged.get(&format!("{prefix}.bo"))),
    )
}

/// Two hidden layers, relu activations. The final layer starts at zero so the
/// prediction begins at its structural default (reference point, 0.5 score).
pub fn init_head<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    c: usize,
    out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let std = (2.0 / c as f64).sqrt();
    store.add(&format!("{prefix}.w1"), &[c, c], normal(rng, c * c, std))?;
    store.add(&format!("{prefix}.b1"), &[c], vec![S::zero(); c])?;
    store.add(&format!("{prefix}.w2"), &[c, c], normal(rng, c * c, std))?;
    store.add(&format!("{prefix}.b2"), &[c], vec![S::zero(); c])?;
    store.add(&format!("{prefix}.w3"), &[out, c], vec![S::zero(); out * c])?;
    store.add(&format!("{prefix}.b3"), &[out], vec![S::zero(); out])
}

pub fn head<S: Scalar>(
    tape: &mut Tape<S>,
    staged: &Staged,
    prefix: &str,
    x: TensorRef,
) -> Result<TensorRef> {
    let h1 = tape.linear(
        x,
        staged.get(&format!("{prefix}.w1")),
        Some(staged.get(&format!("{prefix}.b1"))),
    )?;
    let r1 = tape.relu(h1)?;
    let h2 = tape.linear(
        r1,
        staged.get(&format!("{prefix}.w2")),
        Some(staged.get(&format!("{prefix}.b2"))),
    )?;
    let r2 = tape.relu(h2)?;
    tape.linear(
        r2,
        staged.get(&format!("{prefix}.w3")),
        Some(staged.get(&format!("{prefix}.b3"))),
    )
}
