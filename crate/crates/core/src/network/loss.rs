//! Box regression and classification losses.

use crate::autograd::{softmax_in_place, CustomOp, Graph, Var};
use crate::geometry::{giou_with_grad, iou_giou, BBox};
use crate::tensor::Tensor;

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

/// `5 * sum|pred - gt| + 2 * (1 - GIoU)` on center-form boxes.
pub fn regression_loss(pred: BBox, gt: BBox) -> f64 {
    let (p, t) = (pred.to_center(), gt.to_center());
    let l1: f64 = p.coords.iter().zip(&t.coords).map(|(a, b)| (a - b).abs()).sum();
    let (_, giou) = iou_giou(&p, &t);
    L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou)
}

struct GiouOp;

impl CustomOp for GiouOp {
    fn name(&self) -> &'static str {
        "giou"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (pred, target) = (inputs[0], inputs[1]);
        let mut gp = Tensor::zeros(pred.rows(), 4);
        for r in 0..pred.rows() {
            let (_, d) = giou_with_grad(row4(pred, r), row4(target, r));
            let s = grad.get(r, 0);
            for (a, b) in gp.row_mut(r).iter_mut().zip(d) {
                *a = s * b;
            }
        }
        vec![Some(gp), None]
    }
}

fn row4(t: &Tensor, r: usize) -> [f64; 4] {
    let v = t.row(r);
    [v[0], v[1], v[2], v[3]]
}

/// Row-wise GIoU `[n, 1]` of center-form boxes; differentiable in `pred` only.
pub fn giou_rows(g: &mut Graph<'_>, pred: Var, target: Var) -> Var {
    let (p, t) = (g.value(pred), g.value(target));
    let out: Vec<f64> = (0..p.rows()).map(|r| giou_with_grad(row4(p, r), row4(t, r)).0).collect();
    let n = out.len();
    g.custom(&[pred, target], Tensor::from_vec(n, 1, out), Box::new(GiouOp))
}

/// Sum over rows of the weighted box loss, plus the two raw sums.
pub struct BoxLossSums {
    pub total: Var,
    pub l1: f64,
    pub giou: f64,
}

pub fn box_loss_sum(g: &mut Graph<'_>, pred: Var, target: Var) -> BoxLossSums {
    let n = g.shape(pred).0;
    let diff = g.sub(pred, target);
    let diff = g.abs(diff);
    let l1 = g.sum(diff);
    let gi = giou_rows(g, pred, target);
    let gi = g.sum(gi);
    let l1_v = g.value(l1).item();
    let giou_v = n as f64 - g.value(gi).item();
    let a = g.scale(l1, L1_WEIGHT);
    let b = g.scale(gi, -GIOU_WEIGHT);
    let t = g.add(a, b);
    let total = g.add_scalar(t, GIOU_WEIGHT * n as f64);
    BoxLossSums {
        total,
        l1: l1_v,
        giou: giou_v,
    }
}

/// Teacher loss and its per-term components (means per query and stage).
pub struct TeacherLoss {
    pub total: Var,
    pub l1: f64,
    pub giou: f64,
}

/// Mean over the supervised stages of the per-query box loss; every query
/// is bound to one target row, so no matching is involved. With
/// `deep_supervision` off only the final stage contributes.
pub fn teacher_loss(g: &mut Graph<'_>, stages: &[Var], targets: &Tensor, deep_supervision: bool) -> TeacherLoss {
    let n = targets.rows().max(1) as f64;
    let t = g.constant(targets.clone());
    let used: &[Var] = if deep_supervision { stages } else { &stages[stages.len() - 1..] };
    let mut acc: Option<Var> = None;
    let (mut l1, mut giou) = (0.0, 0.0);
    for &s in used {
        let sums = box_loss_sum(g, s, t);
        l1 += sums.l1;
        giou += sums.giou;
        acc = Some(match acc {
            Some(a) => g.add(a, sums.total),
            None => sums.total,
        });
    }
    let k = used.len() as f64;
    let total = g.scale(acc.expect("at least one stage"), 1.0 / (k * n));
    TeacherLoss {
        total,
        l1: l1 / (k * n),
        giou: giou / (k * n),
    }
}

struct CrossEntropyOp {
    probs: Tensor,
    targets: Vec<usize>,
    weights: Vec<f64>,
    norm: f64,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad.item() / self.norm;
        let mut g = self.probs.clone();
        for (r, (&t, &w)) in self.targets.iter().zip(&self.weights).enumerate() {
            let row = g.row_mut(r);
            row[t] -= 1.0;
            for v in row.iter_mut() {
                *v *= w * s;
            }
        }
        vec![Some(g)]
    }
}

/// `sum_i w_i * -log softmax(logits_i)[t_i] / sum_i w_i`.
pub fn weighted_cross_entropy(g: &mut Graph<'_>, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
    let mut probs = g.value(logits).clone();
    assert_eq!(probs.rows(), targets.len());
    let mut loss = 0.0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let row = probs.row_mut(r);
        softmax_in_place(row);
        loss -= w * row[t].max(f64::MIN_POSITIVE).ln();
    }
    let norm: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    g.custom(
        &[logits],
        Tensor::scalar(loss / norm),
        Box::new(CrossEntropyOp {
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            norm,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grads, random_tensor};
    use crate::params::derived_rng;
    use rand::Rng;

    #[test]
    fn identical_boxes_have_zero_loss() {
        let b = BBox::center(0.4, 0.5, 0.2, 0.3);
        assert!(regression_loss(b, b).abs() < 1e-12);
    }

    #[test]
    fn concentric_squares_hand_value() {
        let l = regression_loss(BBox::center(0.5, 0.5, 0.2, 0.2), BBox::center(0.5, 0.5, 0.4, 0.4));
        assert!((l - 3.5).abs() < 1e-12);
    }

    fn random_boxes(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Tensor {
        let data = (0..n)
            .flat_map(|_| {
                [
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.05..0.5),
                ]
            })
            .collect();
        Tensor::from_vec(n, 4, data)
    }

    #[test]
    fn graph_loss_matches_scalar_form() {
        let mut rng = derived_rng(1, "loss");
        let pred = random_boxes(&mut rng, 6);
        let tgt = random_boxes(&mut rng, 6);
        let mut g = Graph::new();
        let p = g.input(pred.clone());
        let l = teacher_loss(&mut g, &[p], &tgt, true);
        let expected: f64 = (0..6)
            .map(|r| {
                let a = pred.row(r);
                let b = tgt.row(r);
                regression_loss(BBox::center(a[0], a[1], a[2], a[3]), BBox::center(b[0], b[1], b[2], b[3]))
            })
            .sum::<f64>()
            / 6.0;
        assert!((g.value(l.total).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicated_groups_leave_normalized_loss_unchanged() {
        let mut rng = derived_rng(2, "norm");
        let pred = random_boxes(&mut rng, 3);
        let tgt = random_boxes(&mut rng, 3);
        let stack = |t: &Tensor, k: usize| Tensor::from_rows(&(0..k).flat_map(|_| (0..t.rows()).map(|r| t.row(r).to_vec())).collect::<Vec<_>>());
        let mut g = Graph::new();
        let p1 = g.input(pred.clone());
        let one = teacher_loss(&mut g, &[p1], &tgt, true);
        let p4 = g.input(stack(&pred, 4));
        let four = teacher_loss(&mut g, &[p4], &stack(&tgt, 4), true);
        assert!((g.value(one.total).item() - g.value(four.total).item()).abs() < 1e-12);
    }

    #[test]
    fn deep_supervision_averages_stages() {
        let mut rng = derived_rng(3, "deep");
        let tgt = random_boxes(&mut rng, 4);
        let a = random_boxes(&mut rng, 4);
        let b = random_boxes(&mut rng, 4);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a), g.input(b));
        let la = teacher_loss(&mut g, &[va], &tgt, true);
        let lb = teacher_loss(&mut g, &[vb], &tgt, true);
        let both = teacher_loss(&mut g, &[va, vb], &tgt, true);
        let last = teacher_loss(&mut g, &[va, vb], &tgt, false);
        let mean = (g.value(la.total).item() + g.value(lb.total).item()) / 2.0;
        assert!((g.value(both.total).item() - mean).abs() < 1e-12);
        assert!((g.value(last.total).item() - g.value(lb.total).item()).abs() < 1e-12);
    }

    #[test]
    fn box_loss_gradients() {
        let mut rng = derived_rng(4, "box-grad");
        for _ in 0..20 {
            let pred = random_boxes(&mut rng, 3);
            let tgt = random_boxes(&mut rng, 3);
            check_input_grads(&[pred], |g, v| {
                let l = teacher_loss(g, &[v[0]], &tgt, true);
                l.total
            });
        }
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let mut rng = derived_rng(5, "ce");
        for _ in 0..20 {
            let logits = random_tensor(&mut rng, 4, 3, 2.0);
            let targets = [0, 2, 1, 2];
            let weights = [1.0, 0.1, 1.0, 0.1];
            let mut g = Graph::new();
            let x = g.input(logits.clone());
            let l = weighted_cross_entropy(&mut g, x, &targets, &weights);
            let mut expected = 0.0;
            for r in 0..4 {
                let row = logits.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                expected -= weights[r] * (row[targets[r]].exp() / z).ln();
            }
            expected /= 2.2;
            assert!((g.value(l).item() - expected).abs() < 1e-12);
            check_input_grads(&[logits], |g, v| weighted_cross_entropy(g, v[0], &targets, &weights));
        }
    }
}
