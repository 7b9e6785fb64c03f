use super::elementwise::{binary_backward, unary_backward};
use super::reduce::{box_sums_backward, softmax_backward, sum_axis_backward, xent_backward};
use super::shape::{concat_backward, inverse_perm, permute_values, slice_backward};
use super::{Node, Op, Var};
use crate::nn::{conv, linear, norm, seq};
use crate::ssm;

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

/// One reverse pass; returns the accumulated gradient of every node that
/// received one.
pub(super) fn sweep(nodes: &[Node], loss: Var) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[loss.0] = Some(vec![1.0]);
    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        if !node.requires_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        for (v, contribution) in local_grads(nodes, node, &g) {
            if nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        }
    }
    grads
}

fn local_grads(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary { kind, a, b } => {
            let (ga, gb) = binary_backward(*kind, val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Unary { kind, x } => vec![(*x, unary_backward(*kind, val(*x), &node.value, g))],
        Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::SumAxis { x, axis } => vec![(*x, sum_axis_backward(val(*x).shape(), *axis, g))],
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute { x, perm } => {
            let (_, gx) = permute_values(g, node.value.shape(), &inverse_perm(perm));
            vec![(*x, gx)]
        }
        Op::Concat { parts, axis } => {
            let shapes: Vec<Vec<usize>> = parts.iter().map(|p| val(*p).shape().to_vec()).collect();
            parts.iter().copied().zip(concat_backward(&shapes, *axis, g)).collect()
        }
        Op::Slice { x, axis, start } => {
            let len = node.value.shape()[*axis];
            vec![(*x, slice_backward(val(*x).shape(), *axis, *start, len, g))]
        }
        Op::Conv3d { x, w, b, geom } => {
            let mut out = Vec::with_capacity(3);
            if needs(*x) {
                out.push((*x, conv::backward_input(g, val(*w).data(), geom)));
            }
            if needs(*w) {
                out.push((*w, conv::backward_weight(val(*x).data(), g, geom)));
            }
            if let Some(b) = b {
                let vol = geom.output.iter().product();
                out.push((*b, conv::backward_bias(g, geom.batch, geom.spec.out_channels, vol)));
            }
            out
        }
        Op::ConvTranspose3d { x, w, b, geom } => {
            // y = backward_input(x); so gx = forward(g), gw = backward_weight(g, x)
            let mut out = Vec::with_capacity(3);
            if needs(*x) {
                out.push((*x, conv::forward(g, val(*w).data(), None, geom)));
            }
            if needs(*w) {
                out.push((*w, conv::backward_weight(g, val(*x).data(), geom)));
            }
            if let Some(b) = b {
                let vol = geom.input.iter().product();
                out.push((*b, conv::backward_bias(g, geom.batch, geom.spec.in_channels, vol)));
            }
            out
        }
        Op::DwConv1d { x, w, b, offset } => {
            let (gx, gw, gb) = seq::dwconv1d_backward(val(*x), val(*w), *offset, g);
            let mut out = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                out.push((*b, gb));
            }
            out
        }
        Op::Norm {
            x,
            gamma,
            beta,
            axis,
            across_batch,
            xhat,
            rstd,
        } => {
            let (gx, gg, gb) = norm::backward(val(*x).shape(), *axis, *across_batch, xhat, rstd, val(*gamma).data(), g);
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::NormFrozen {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (gx, gg, gb) = norm::frozen_backward(val(*x).shape(), xhat, rstd, val(*gamma).data(), g);
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::Linear { x, w, b } => {
            let (gx, gw, gb) = linear::backward(val(*x), val(*w), g, needs(*x));
            let mut out = vec![(*w, gw)];
            if let Some(gx) = gx {
                out.push((*x, gx));
            }
            if let Some(b) = b {
                out.push((*b, gb));
            }
            out
        }
        Op::Softmax { x, axis } => vec![(*x, softmax_backward(&node.value, *axis, g))],
        Op::SoftmaxXent { logits, labels, probs } => {
            vec![(*logits, xent_backward(val(*logits).shape(), labels, probs, g[0]))]
        }
        Op::BoxSums { x, region_of, regions } => {
            vec![(*x, box_sums_backward(val(*x).shape(), region_of, *regions, g))]
        }
        Op::SelectiveScan { inputs, states } => {
            let values = inputs.map(|v| val(v));
            let grads = ssm::selective_scan_backward(&values, states, g);
            inputs.iter().copied().zip(grads).collect()
        }
    }
}
