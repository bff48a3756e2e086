//! Gradient boosted trees with a softmax multiclass objective.
//!
//! Exact greedy splits on second-order statistics: each candidate split is
//! scored by the regularized gain and accepted only when the gain clears
//! `gamma` and both children carry at least `min_child_weight` of hessian
//! mass. Data is flat row-major `&[f64]` with an `n_features` parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{softmax, MlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtHyperParams {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub gamma: f64,
    pub subsample: f64,
    pub min_child_weight: f64,
    /// L2 regularization on leaf weights.
    pub reg_lambda: f64,
}

impl Default for GbtHyperParams {
    fn default() -> Self {
        GbtHyperParams {
            max_depth: 5,
            learning_rate: 0.1,
            rounds: 100,
            gamma: 2.0,
            subsample: 0.8,
            min_child_weight: 7.0,
            reg_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        /// Shrinkage-scaled output added to the class score.
        value: f64,
        /// Hessian mass that reached this leaf during training.
        cover: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Indices into the tree's node arena.
        left: usize,
        right: usize,
        /// Regularized gain of this split (before subtracting gamma).
        gain: f64,
    },
}

/// One regression tree stored as a node arena rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    idx = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub n_classes: usize,
    pub n_features: usize,
    /// Log-prior initialization per class.
    pub base_scores: Vec<f64>,
    /// trees[round][class]
    pub trees: Vec<Vec<Tree>>,
    pub hp: GbtHyperParams,
    /// Total split gain attributed to each feature.
    pub feature_importance: Vec<f64>,
    pub format_version: u32,
}

impl GbtModel {
    /// Raw class scores (log-space) for one row.
    pub fn raw_scores(&self, x: &[f64]) -> Vec<f64> {
        let mut scores = self.base_scores.clone();
        for round in &self.trees {
            for (k, tree) in round.iter().enumerate() {
                scores[k] += tree.predict(x);
            }
        }
        scores
    }

    /// Class probabilities; sums to 1.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(MlError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(softmax(&self.raw_scores(x)))
    }
}

struct SplitResult {
    feature: usize,
    threshold: f64,
    gain: f64,
    left_rows: Vec<usize>,
    right_rows: Vec<usize>,
}

/// Trains a multiclass boosted-tree model. Deterministic given
/// (data, labels, hyperparameters, seed).
pub fn gbt_train(
    data: &[f64],
    n_features: usize,
    labels: &[usize],
    n_classes: usize,
    hp: &GbtHyperParams,
    seed: u64,
) -> Result<GbtModel> {
    if labels.is_empty() || n_features == 0 {
        return Err(MlError::EmptyInput("gbt_train data"));
    }
    let n = labels.len();
    if data.len() != n * n_features {
        return Err(MlError::DimensionMismatch {
            expected: n * n_features,
            got: data.len(),
        });
    }
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(MlError::NonFinite {
                row: i / n_features,
                col: i % n_features,
            });
        }
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(MlError::DimensionMismatch {
                expected: n_classes,
                got: y,
            });
        }
        counts[y] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(MlError::SingleClass);
    }

    // Smoothed log priors so every class has a finite base score.
    let base_scores: Vec<f64> = counts
        .iter()
        .map(|&c| ((c as f64 + 0.5) / (n as f64 + 0.5 * n_classes as f64)).ln())
        .collect();

    let row = |i: usize| &data[i * n_features..(i + 1) * n_features];
    let mut scores: Vec<Vec<f64>> = (0..n).map(|_| base_scores.clone()).collect();
    let mut trees: Vec<Vec<Tree>> = Vec::with_capacity(hp.rounds);
    let mut importance = vec![0.0f64; n_features];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    for _round in 0..hp.rounds {
        let probs: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
        let mut round_trees: Vec<Tree> = Vec::with_capacity(n_classes);
        for class in 0..n_classes {
            // Row subsample for this tree.
            let rows: Vec<usize> = if hp.subsample < 1.0 {
                let take = ((n as f64) * hp.subsample).floor().max(1.0) as usize;
                let mut pool: Vec<usize> = (0..n).collect();
                for i in 0..take {
                    let j = i + rng.gen_range(0..(n - i));
                    pool.swap(i, j);
                }
                let mut sel = pool[..take].to_vec();
                sel.sort_unstable();
                sel
            } else {
                (0..n).collect()
            };

            let grads: Vec<f64> = rows
                .iter()
                .map(|&i| probs[i][class] - if labels[i] == class { 1.0 } else { 0.0 })
                .collect();
            let hess: Vec<f64> = rows
                .iter()
                .map(|&i| (probs[i][class] * (1.0 - probs[i][class])).max(1e-16))
                .collect();

            let tree = build_tree(data, n_features, &rows, &grads, &hess, hp, &mut importance);
            // Update scores on all rows.
            for i in 0..n {
                scores[i][class] += tree.predict(row(i));
            }
            round_trees.push(tree);
        }
        trees.push(round_trees);
    }

    Ok(GbtModel {
        n_classes,
        n_features,
        base_scores,
        trees,
        hp: *hp,
        feature_importance: importance,
        format_version: 1,
    })
}

/// Builds one tree on the (grad, hess) statistics of the sampled rows.
/// `rows` carries dataset row ids; `grads`/`hess` align with `rows`.
fn build_tree(
    data: &[f64],
    n_features: usize,
    rows: &[usize],
    grads: &[f64],
    hess: &[f64],
    hp: &GbtHyperParams,
    importance: &mut [f64],
) -> Tree {
    // Work on positions into the `rows` slice.
    let mut nodes: Vec<Node> = Vec::new();
    let all: Vec<usize> = (0..rows.len()).collect();
    grow(
        data, n_features, rows, grads, hess, hp, &mut nodes, &all, 0, importance,
    );
    Tree { nodes }
}

#[allow(clippy::too_many_arguments)]
fn grow(
    data: &[f64],
    n_features: usize,
    rows: &[usize],
    grads: &[f64],
    hess: &[f64],
    hp: &GbtHyperParams,
    nodes: &mut Vec<Node>,
    members: &[usize],
    depth: usize,
    importance: &mut [f64],
) -> usize {
    let g_sum: f64 = members.iter().map(|&p| grads[p]).sum();
    let h_sum: f64 = members.iter().map(|&p| hess[p]).sum();

    let make_leaf = |nodes: &mut Vec<Node>| -> usize {
        let value = -hp.learning_rate * g_sum / (h_sum + hp.reg_lambda);
        nodes.push(Node::Leaf {
            value,
            cover: h_sum,
        });
        nodes.len() - 1
    };

    if depth >= hp.max_depth || members.len() < 2 {
        return make_leaf(nodes);
    }
    let best = find_split(data, n_features, rows, grads, hess, hp, members, g_sum, h_sum);
    match best {
        None => make_leaf(nodes),
        Some(s) => {
            importance[s.feature] += s.gain;
            let idx = nodes.len();
            nodes.push(Node::Split {
                feature: s.feature,
                threshold: s.threshold,
                left: 0,
                right: 0,
                gain: s.gain,
            });
            let left = grow(
                data, n_features, rows, grads, hess, hp, nodes, &s.left_rows, depth + 1,
                importance,
            );
            let right = grow(
                data, n_features, rows, grads, hess, hp, nodes, &s.right_rows, depth + 1,
                importance,
            );
            if let Node::Split {
                left: l, right: r, ..
            } = &mut nodes[idx]
            {
                *l = left;
                *r = right;
            }
            idx
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn find_split(
    data: &[f64],
    n_features: usize,
    rows: &[usize],
    grads: &[f64],
    hess: &[f64],
    hp: &GbtHyperParams,
    members: &[usize],
    g_sum: f64,
    h_sum: f64,
) -> Option<SplitResult> {
    let lam = hp.reg_lambda;
    let parent_obj = g_sum * g_sum / (h_sum + lam);
    let mut best: Option<SplitResult> = None;

    let mut order: Vec<usize> = members.to_vec();
    for feature in 0..n_features {
        let value = |p: usize| data[rows[p] * n_features + feature];
        order.sort_unstable_by(|&a, &b| {
            value(a)
                .partial_cmp(&value(b))
                .unwrap()
                .then(a.cmp(&b))
        });
        let (mut gl, mut hl) = (0.0f64, 0.0f64);
        for k in 0..order.len() - 1 {
            let p = order[k];
            gl += grads[p];
            hl += hess[p];
            let v = value(p);
            let v_next = value(order[k + 1]);
            if v_next <= v {
                continue; // no threshold separates equal values
            }
            let gr = g_sum - gl;
            let hr = h_sum - hl;
            if hl < hp.min_child_weight || hr < hp.min_child_weight {
                continue;
            }
            let gain =
                0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_obj);
            if gain < hp.gamma {
                continue;
            }
            let improves = match &best {
                None => true,
                Some(b) => gain > b.gain + 1e-12,
            };
            if improves {
                best = Some(SplitResult {
                    feature,
                    threshold: 0.5 * (v + v_next),
                    gain,
                    left_rows: order[..=k].to_vec(),
                    right_rows: order[k + 1..].to_vec(),
                });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Four well-separated 2-D clusters, 100 points each.
    fn four_clusters(seed: u64) -> (Vec<f64>, Vec<usize>) {
        let centers = [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0), (6.0, 6.0)];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (k, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..100 {
                data.push(cx + rng.gen_range(-1.0..1.0));
                data.push(cy + rng.gen_range(-1.0..1.0));
                labels.push(k);
            }
        }
        (data, labels)
    }

    #[test]
    fn separable_clusters_fit() {
        let (data, labels) = four_clusters(3);
        let hp = GbtHyperParams {
            rounds: 30,
            min_child_weight: 1.0,
            gamma: 0.1,
            ..Default::default()
        };
        let model = gbt_train(&data, 2, &labels, 4, &hp, 7).unwrap();
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let p = model.predict_proba(&data[i * 2..i * 2 + 2]).unwrap();
            let pred = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == y {
                correct += 1;
            }
        }
        assert!(correct as f64 / labels.len() as f64 >= 0.99, "{correct}/400");
    }

    #[test]
    fn zero_rounds_predicts_priors() {
        let (data, labels) = four_clusters(4);
        // Unbalance: drop most of class 3.
        let keep: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] != 3 || i % 10 == 0)
            .collect();
        let data2: Vec<f64> = keep.iter().flat_map(|&i| data[i * 2..i * 2 + 2].to_vec()).collect();
        let labels2: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
        let hp = GbtHyperParams {
            rounds: 0,
            ..Default::default()
        };
        let model = gbt_train(&data2, 2, &labels2, 4, &hp, 1).unwrap();
        let p = model.predict_proba(&[0.0, 0.0]).unwrap();
        let n = labels2.len() as f64;
        for k in 0..4 {
            let count = labels2.iter().filter(|&&y| y == k).count() as f64;
            let expected = (count + 0.5) / (n + 2.0);
            assert!(
                (p[k] - expected).abs() < 1e-9,
                "class {k}: {} vs prior {expected}",
                p[k]
            );
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (data, labels) = four_clusters(5);
        let hp = GbtHyperParams {
            rounds: 5,
            min_child_weight: 1.0,
            ..Default::default()
        };
        let model = gbt_train(&data, 2, &labels, 4, &hp, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = [rng.gen_range(-3.0..9.0), rng.gen_range(-3.0..9.0)];
            let p = model.predict_proba(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_serialization() {
        let (data, labels) = four_clusters(6);
        let hp = GbtHyperParams {
            rounds: 8,
            min_child_weight: 1.0,
            ..Default::default()
        };
        let a = gbt_train(&data, 2, &labels, 4, &hp, 42).unwrap();
        let b = gbt_train(&data, 2, &labels, 4, &hp, 42).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = gbt_train(&data, 2, &labels, 4, &hp, 43).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn hand_traced_model_prediction() {
        // One round, one split per class tree; trace the walk by hand.
        let tree_for = |thr: f64, lo: f64, hi: f64| Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: thr,
                    left: 1,
                    right: 2,
                    gain: 1.0,
                },
                Node::Leaf {
                    value: lo,
                    cover: 10.0,
                },
                Node::Leaf {
                    value: hi,
                    cover: 10.0,
                },
            ],
        };
        let model = GbtModel {
            n_classes: 4,
            n_features: 1,
            base_scores: vec![0.0; 4],
            trees: vec![vec![
                tree_for(0.5, 1.0, -1.0),
                tree_for(0.5, -1.0, 1.0),
                tree_for(0.5, 0.0, 0.0),
                tree_for(0.5, 0.0, 0.0),
            ]],
            hp: GbtHyperParams::default(),
            feature_importance: vec![4.0],
            format_version: 1,
        };
        // x = 0.0 goes left everywhere: scores [1, -1, 0, 0].
        let p = model.predict_proba(&[0.0]).unwrap();
        let expect = softmax(&[1.0, -1.0, 0.0, 0.0]);
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_invariants_hold() {
        let (data, labels) = four_clusters(8);
        let hp = GbtHyperParams {
            rounds: 10,
            ..Default::default()
        };
        let model = gbt_train(&data, 2, &labels, 4, &hp, 3).unwrap();
        let mut saw_split = false;
        for round in &model.trees {
            for tree in round {
                for node in &tree.nodes {
                    match node {
                        Node::Split { gain, left, right, .. } => {
                            saw_split = true;
                            assert!(*gain >= hp.gamma - 1e-9, "gain {gain} below gamma");
                            for child in [*left, *right] {
                                if let Node::Leaf { cover, .. } = &tree.nodes[child] {
                                    assert!(
                                        *cover >= hp.min_child_weight - 1e-9,
                                        "leaf cover {cover}"
                                    );
                                }
                            }
                        }
                        Node::Leaf { .. } => {}
                    }
                }
            }
        }
        assert!(saw_split, "model learned no splits");
    }

    #[test]
    fn rejects_nan_and_single_class() {
        let data = vec![1.0, f64::NAN, 2.0, 3.0];
        assert!(matches!(
            gbt_train(&data, 2, &[0, 1], 4, &GbtHyperParams::default(), 0),
            Err(MlError::NonFinite { .. })
        ));
        let data = vec![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            gbt_train(&data, 2, &[1, 1], 4, &GbtHyperParams::default(), 0),
            Err(MlError::SingleClass)
        ));
        assert!(gbt_train(&[], 2, &[], 4, &GbtHyperParams::default(), 0).is_err());
    }
}
