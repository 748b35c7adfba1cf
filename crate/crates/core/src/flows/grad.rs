use super::{BaseDistribution, FlowError, FlowLayer, FlowStack, MinMaxStats, LEAKY_SLOPE, MINMAX_EPS};
use crate::autodiff::{Bindings, Graph, ParamVector, Tensor, Var};

/// Gradient of `Σ_k w_k ln p_φ(τ_k)` with the tasks held fixed.
#[derive(Clone, Debug)]
pub struct WeightedLogProb {
    /// Per-task `ln p_φ(τ_k)` from the numeric inverse path.
    pub log_probs: Vec<f64>,
    pub grad: ParamVector,
}

/// Differentiates the inverse-path log-density wrt the stack parameters.
///
/// Without `anchors` the min-max statistics are constants. With `anchors`,
/// the base batch the statistics were computed from, each minimum and
/// maximum is the forward image of its arg-extremal anchor and carries
/// gradient.
pub fn weighted_log_prob(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    tasks: &Tensor,
    weights: &[f64],
    anchors: Option<&Tensor>,
) -> Result<WeightedLogProb, FlowError> {
    assert_eq!(weights.len(), tasks.rows(), "one weight per task");
    let log_probs = stack.log_prob_batch(tasks, stats)?;
    let (n, d) = tasks.shape();
    let anchor_stats = match anchors {
        Some(a) => {
            let out = stack.forward_and_log_det(a, super::StatsMode::Batch)?;
            if out.stats != stats {
                return Err(FlowError::AnchorStats);
            }
            Some(a)
        }
        None => None,
    };

    let mut g = Graph::new();
    let tau = g.input("tau", n, d);
    let mut per_layer: Vec<Vec<Var>> = Vec::new();
    let mut param_vars = Vec::new();
    let param_tensors = stack.param_tensors();
    for (i, l) in stack.layers().iter().enumerate() {
        let vars: Vec<Var> = l
            .param_tensors()
            .iter()
            .enumerate()
            .map(|(j, t)| g.input(format!("layer{i}.p{j}"), t.rows(), t.cols()))
            .collect();
        param_vars.extend_from_slice(&vars);
        per_layer.push(vars);
    }

    let stat_vars = anchor_stats.map(|a| anchor_stat_vars(&mut g, stack, &per_layer, a));

    let mut cur = g.detach(tau);
    let mut ld: Option<Var> = None;
    let mut si = stats.len();
    for (layer, vars) in stack.layers().iter().zip(&per_layer).rev() {
        let term = match layer {
            FlowLayer::Planar(_) => {
                let (w, u, b) = (vars[0], vars[1], vars[2]);
                let wu_el = g.mul(w, u);
                let wu = g.sum(wu_el);
                let sp = g.softplus(wu);
                let spm = g.sub(sp, wu);
                let num = g.add_scalar(spm, -1.0);
                let w2 = g.square(w);
                let ww = g.sum(w2);
                let k = g.div(num, ww);
                let kb = g.broadcast(k, 1, d);
                let kw = g.mul(kb, w);
                let uh = g.add(u, kw);
                // wᵀû = softplus(wᵀu) − 1
                let wuh = g.add_scalar(sp, -1.0);
                let wt = g.transpose(w);
                let proj = g.matmul(cur, wt);
                let bb = g.broadcast(b, n, 1);
                let r = g.add(proj, bb);
                let c = g.mask(r, LEAKY_SLOPE);
                let wuh_n = g.broadcast(wuh, n, 1);
                let cw = g.mul(c, wuh_n);
                let denom = g.add_scalar(cw, 1.0);
                let s = g.div(r, denom);
                let hs = g.mul(c, s);
                let shift = g.matmul(hs, uh);
                cur = g.sub(cur, shift);
                let l = g.log(denom);
                g.neg(l)
            }
            FlowLayer::MinMax(m) => {
                si -= 1;
                let st = &stats[si];
                let den = st.denominators();
                let (la, off) = if m.trainable {
                    (vars[0], vars[1])
                } else {
                    (
                        g.constant(Tensor::row(m.log_scale.clone())),
                        g.constant(Tensor::row(m.offset.clone())),
                    )
                };
                let (min_v, den_v) = match &stat_vars {
                    Some(sv) => sv[si],
                    None => (g.constant(Tensor::row(st.min.clone())), g.constant(Tensor::row(den.clone()))),
                };
                let off_n = g.repeat_rows(off, n);
                let diff = g.sub(cur, off_n);
                let nla = g.neg(la);
                let inv_a = g.exp(nla);
                let factor = g.mul(inv_a, den_v);
                let factor_n = g.repeat_rows(factor, n);
                let scaled = g.mul(diff, factor_n);
                let min_n = g.repeat_rows(min_v, n);
                cur = g.add(scaled, min_n);
                let sum_la = g.sum(la);
                let ln_den_el = g.log(den_v);
                let ln_den = g.sum(ln_den_el);
                let s = g.sub(ln_den, sum_la);
                g.broadcast(s, n, 1)
            }
        };
        ld = Some(match ld {
            None => term,
            Some(prev) => g.add(prev, term),
        });
    }

    let base_term = match stack.base() {
        BaseDistribution::Uniform { .. } => None,
        BaseDistribution::Normal { mean, std } => {
            let mu = g.constant(Tensor::row(mean.clone()));
            let mu_n = g.repeat_rows(mu, n);
            let inv = g.constant(Tensor::row(std.iter().map(|s| 1.0 / s).collect()));
            let inv_n = g.repeat_rows(inv, n);
            let diff = g.sub(cur, mu_n);
            let z = g.mul(diff, inv_n);
            let z2 = g.square(z);
            let s = g.sum_cols(z2);
            Some(g.scale(s, -0.5))
        }
    };
    let total = match (ld, base_term) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, b) => a.or(b),
    };

    let grad = match total {
        None => ParamVector::from_tensors(&param_tensors).zeros_like(),
        Some(total) => {
            let wc = g.constant(Tensor::column(weights.to_vec()));
            let weighted = g.mul(total, wc);
            let root = g.sum(weighted);
            let grads = g.grad(root, &param_vars).expect("scalar root");
            let mut b = Bindings::new();
            b.bind(tau, tasks).bind_all(&param_vars, &param_tensors);
            let vals = g.evaluate(&b, &grads).expect("all inputs bound");
            ParamVector::from_tensors(&vals)
        }
    };
    Ok(WeightedLogProb { log_probs, grad })
}

/// `(min, M − m floored)` per min-max layer as graph values of the anchors'
/// forward images.
fn anchor_stat_vars(g: &mut Graph, stack: &FlowStack, per_layer: &[Vec<Var>], anchors: &Tensor) -> Vec<(Var, Var)> {
    let (n, d) = anchors.shape();
    let mut numeric = anchors.clone();
    let mut cur = g.constant(anchors.clone());
    let mut out = Vec::new();
    let mut buf = vec![0.0; d];
    for (layer, vars) in stack.layers().iter().zip(per_layer) {
        match layer {
            FlowLayer::Planar(p) => {
                let uh = planar_u_hat(g, vars, d);
                let wt = g.transpose(vars[0]);
                let proj = g.matmul(cur, wt);
                let bb = g.broadcast(vars[2], n, 1);
                let r = g.add(proj, bb);
                let h = g.leaky_relu(r, LEAKY_SLOPE);
                let shift = g.matmul(h, uh);
                cur = g.add(cur, shift);
                for r in 0..n {
                    p.forward_point(numeric.row_slice(r), &mut buf);
                    numeric.data_mut()[r * d..(r + 1) * d].copy_from_slice(&buf);
                }
            }
            FlowLayer::MinMax(m) => {
                let st = MinMaxStats::from_batch(&numeric);
                let mut sel_min = Tensor::zeros(n, d);
                let mut sel_max = Tensor::zeros(n, d);
                for c in 0..d {
                    let col = (0..n).map(|r| numeric.get(r, c));
                    let lo = col.clone().enumerate().fold((0, f64::INFINITY), |a, (r, v)| if v < a.1 { (r, v) } else { a }).0;
                    let hi = col.enumerate().fold((0, f64::NEG_INFINITY), |a, (r, v)| if v > a.1 { (r, v) } else { a }).0;
                    sel_min.set(lo, c, 1.0);
                    sel_max.set(hi, c, 1.0);
                }
                let smin = g.constant(sel_min);
                let smax = g.constant(sel_max);
                let pmin = g.mul(cur, smin);
                let pmax = g.mul(cur, smax);
                let min_v = g.sum_rows(pmin);
                let max_v = g.sum_rows(pmax);
                let raw = g.sub(max_v, min_v);
                let floor = g.constant(Tensor::row(st.denominators()));
                // The floor replaces the spread where it is active.
                let active: Vec<f64> = (0..d).map(|c| if st.max[c] - st.min[c] < MINMAX_EPS { 0.0 } else { 1.0 }).collect();
                let keep = g.constant(Tensor::row(active.clone()));
                let drop = g.constant(Tensor::row(active.iter().map(|a| 1.0 - a).collect()));
                let kept = g.mul(raw, keep);
                let floored = g.mul(floor, drop);
                let den_v = g.add(kept, floored);
                out.push((min_v, den_v));
                let (la, off) = if m.trainable {
                    (vars[0], vars[1])
                } else {
                    (g.constant(Tensor::row(m.log_scale.clone())), g.constant(Tensor::row(m.offset.clone())))
                };
                let a = g.exp(la);
                let ratio = g.div(a, den_v);
                let min_n = g.repeat_rows(min_v, n);
                let diff = g.sub(cur, min_n);
                let ratio_n = g.repeat_rows(ratio, n);
                let scaled = g.mul(diff, ratio_n);
                let off_n = g.repeat_rows(off, n);
                cur = g.add(scaled, off_n);
                for r in 0..n {
                    m.forward_point(numeric.row_slice(r), &st, &mut buf);
                    numeric.data_mut()[r * d..(r + 1) * d].copy_from_slice(&buf);
                }
            }
        }
    }
    out
}

/// `û = u + (softplus(wᵀu) − 1 − wᵀu) w / ‖w‖²`.
fn planar_u_hat(g: &mut Graph, vars: &[Var], d: usize) -> Var {
    let (w, u) = (vars[0], vars[1]);
    let wu_el = g.mul(w, u);
    let wu = g.sum(wu_el);
    let sp = g.softplus(wu);
    let spm = g.sub(sp, wu);
    let num = g.add_scalar(spm, -1.0);
    let w2 = g.square(w);
    let ww = g.sum(w2);
    let k = g.div(num, ww);
    let kb = g.broadcast(k, 1, d);
    let kw = g.mul(kb, w);
    g.add(u, kw)
}
