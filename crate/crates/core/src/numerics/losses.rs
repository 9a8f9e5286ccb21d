use super::{ComputeGraph, NodeId, Tensor};

/// Mean cross-entropy of row-wise `logits` against integer `targets`
/// (column indices into the logits).
pub fn cross_entropy(g: &mut ComputeGraph, logits: NodeId, targets: &[usize], classes: usize) -> NodeId {
    let mut onehot = vec![0.0; targets.len() * classes];
    for (r, &t) in targets.iter().enumerate() {
        onehot[r * classes + t] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(targets.len(), classes, onehot).expect("one-hot dimensions"));
    let logp = g.log_softmax(logits);
    let picked = g.mul(logp, onehot);
    let total = g.sum(picked);
    g.scale(total, -1.0 / targets.len().max(1) as f64)
}
