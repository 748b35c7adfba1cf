use super::{Architecture, Head, Variant};
use crate::autodiff::{Graph, Var};

/// `steps` inner SGD steps starting from `params`.
///
/// With `first_order` the inner gradients are detached, so the outer gradient
/// treats them as constants.
pub fn adapt(
    g: &mut Graph,
    params: &[Var],
    lr: f64,
    steps: usize,
    first_order: bool,
    mut inner_loss: impl FnMut(&mut Graph, &[Var]) -> Var,
) -> Vec<Var> {
    let mut cur = params.to_vec();
    for _ in 0..steps {
        let loss = inner_loss(g, &cur);
        let grads = g.grad(loss, &cur).expect("inner loss is scalar");
        cur = cur
            .iter()
            .zip(grads)
            .map(|(&p, gr)| {
                let gr = if first_order { g.detach(gr) } else { gr };
                let step = g.scale(gr, -lr);
                g.add(p, step)
            })
            .collect();
    }
    cur
}

/// Affine layers with ReLU between them (not after the last).
pub(crate) fn mlp(g: &mut Graph, x: Var, layers: &[Var]) -> Var {
    let n = layers.len() / 2;
    let mut h = x;
    for l in 0..n {
        h = g.affine(h, layers[2 * l], layers[2 * l + 1]);
        if l + 1 < n {
            h = g.relu(h);
        }
    }
    h
}

pub(crate) fn apply_head(g: &mut Graph, head: Head, y: Var) -> Var {
    match head {
        Head::Raw => y,
        Head::Pendulum => {
            let a = g.slice_cols(y, 0, 1);
            let v = g.slice_cols(y, 1, 1);
            let (c, s) = (g.cos(a), g.sin(a));
            g.concat_cols(&[c, s, v])
        }
        Head::Acrobot => {
            let a1 = g.slice_cols(y, 0, 1);
            let a2 = g.slice_cols(y, 1, 1);
            let v = g.slice_cols(y, 2, 2);
            let (c1, s1, c2, s2) = (g.cos(a1), g.sin(a1), g.cos(a2), g.sin(a2));
            g.concat_cols(&[c1, s1, c2, s2, v])
        }
    }
}

/// Predictions for `xq` given context `(xs, ys)`.
pub(crate) fn predict(g: &mut Graph, arch: &Architecture, params: &[Var], xs: Var, ys: Var, xq: Var) -> Var {
    let raw = match arch.variant {
        Variant::Maml => mlp(g, xq, params),
        Variant::Cnp => {
            let (enc, dec) = params.split_at(2 * arch.cnp_encoder_layers());
            let pairs = g.concat_cols(&[xs, ys]);
            let r = mlp(g, pairs, enc);
            let z = g.mean_rows_invariant(r);
            let nq = g.shape(xq).0;
            let zq = g.repeat_rows(z, nq);
            let inp = g.concat_cols(&[zq, xq]);
            mlp(g, inp, dec)
        }
    };
    apply_head(g, arch.head, raw)
}
