//! Structural probes on model graphs: causality, bidirectionality, tying
//! and embedding additivity.

use super::{ArModel, Ctx, NarModel};
use crate::error::Result;
use crate::numcore::{Graph, ParamId, Tensor};

/// Largest `|∂ logits[t] / ∂ x[t']|` over all `t' > t`; exactly zero for a causal decoder.
pub fn ar_future_gradient(model: &ArModel, features: &Tensor, tokens: &[usize]) -> Result<f64> {
    let emb = {
        let mut g = Graph::inference(&model.store);
        let e = model.embed(&mut g, tokens, 0)?;
        g.value(e).clone()
    };
    let t_len = tokens.len();
    let v = model.config.vocab().size();
    let mut worst = 0.0f64;
    for t in 0..t_len.saturating_sub(1) {
        let mut g = Graph::with_params(&model.store, true);
        let mut ctx = Ctx::inference();
        let h = model.encode(&mut g, features, &mut ctx)?;
        let x = g.leaf(emb.clone());
        let logits = model.decode_embedded(&mut g, x, h, &mut ctx)?;
        let mut sel = vec![0.0; t_len * v];
        // random-ish weights so no cancellation can hide a dependency
        for (k, s) in sel[t * v..(t + 1) * v].iter_mut().enumerate() {
            *s = 1.0 + (k as f64 * 0.37).sin();
        }
        let sel = g.constant(Tensor::new(vec![t_len, v], sel)?);
        let picked = g.mul(logits, sel)?;
        let loss = g.sum(picked);
        let grads = g.backward(loss)?;
        let gx = grads.get_or_zero(x, &g);
        for tp in t + 1..t_len {
            worst = gx.row(tp).iter().fold(worst, |m, d| m.max(d.abs()));
        }
    }
    Ok(worst)
}

fn nar_logits(model: &NarModel, features: &Tensor, lower: &[&[usize]], order: usize) -> Result<Tensor> {
    let mut g = Graph::inference(&model.store);
    let mut ctx = Ctx::inference();
    let h = model.encode(&mut g, features, &mut ctx)?;
    let l = model.logits(&mut g, h, lower, order, &mut ctx)?;
    Ok(g.value(l).clone())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest change of `O[t]` when a lower-order token at some other position changes.
pub fn nar_cross_position_influence(
    model: &NarModel,
    features: &Tensor,
    lower: &[Vec<usize>],
    order: usize,
    t: usize,
) -> Result<f64> {
    let cs = model.config.codebook_size;
    let refs: Vec<&[usize]> = lower.iter().map(Vec::as_slice).collect();
    let base = nar_logits(model, features, &refs, order)?;
    let mut worst = 0.0f64;
    for tp in (0..lower[0].len()).filter(|&p| p != t) {
        let mut changed = lower.to_vec();
        changed[0][tp] = (changed[0][tp] + 1) % cs;
        let refs: Vec<&[usize]> = changed.iter().map(Vec::as_slice).collect();
        let l = nar_logits(model, features, &refs, order)?;
        worst = worst.max(max_abs_diff(base.row(t), l.row(t)));
    }
    Ok(worst)
}

/// `|logits(lower) − logits(pre-summed embedding)|∞`, with the sum built outside the graph.
pub fn nar_additivity_gap(model: &NarModel, features: &Tensor, lower: &[Vec<usize>], order: usize) -> Result<f64> {
    let refs: Vec<&[usize]> = lower.iter().map(Vec::as_slice).collect();
    let direct = nar_logits(model, features, &refs, order)?;
    let d = model.config.d_model;
    let t_len = lower[0].len();
    let mut e = vec![0.0; t_len * d];
    let mut add_row = |table: ParamId, row: usize, t: usize| {
        let src = model.store.get(table).row(row);
        for (x, s) in e[t * d..(t + 1) * d].iter_mut().zip(src) {
            *x += s;
        }
    };
    for t in 0..t_len {
        for (j, c) in lower.iter().enumerate() {
            add_row(model.theta[j], c[t], t);
        }
        add_row(model.pos, t, t);
        if let Some(task) = model.task {
            add_row(task, order - 1, t);
        }
    }
    let mut g = Graph::inference(&model.store);
    let mut ctx = Ctx::inference();
    let h = model.encode(&mut g, features, &mut ctx)?;
    let e = g.constant(Tensor::new(vec![t_len, d], e)?);
    let l = model.logits_from_embedding(&mut g, h, e, order, &mut ctx)?;
    Ok(max_abs_diff(direct.data(), g.value(l).data()))
}

/// Perturb the single table `θ_i` and report whether both the order-`i + 1`
/// input embedding and the order-`i` output logits moved; needs `1 ≤ i < m − 1`.
pub fn nar_tying_check(model: &NarModel, features: &Tensor, lower: &[Vec<usize>], i: usize) -> Result<(bool, bool)> {
    let mut probe = model.clone();
    let table = probe.theta[i];
    for x in probe.store.get_mut(table).data_mut() {
        *x += 0.5;
    }
    let emb = |m: &NarModel| -> Result<Tensor> {
        let mut g = Graph::inference(&m.store);
        let refs: Vec<&[usize]> = lower[..=i].iter().map(Vec::as_slice).collect();
        let e = m.input_embedding(&mut g, &refs, i + 1)?;
        Ok(g.value(e).clone())
    };
    let refs: Vec<&[usize]> = lower[..i].iter().map(Vec::as_slice).collect();
    let input_moved = max_abs_diff(emb(model)?.data(), emb(&probe)?.data()) > 0.0;
    let out_before = nar_logits(model, features, &refs, i)?;
    let out_after = nar_logits(&probe, features, &refs, i)?;
    let output_moved = max_abs_diff(out_before.data(), out_after.data()) > 0.0;
    Ok((input_moved, output_moved))
}
